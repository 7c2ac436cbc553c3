//! Retrieval metrics, zero-shot classification, modality-gap and
//! similarity-distribution measurements over [`FeatureSet`]s.

mod features;
mod probe;
mod retrieval;

pub use features::{FeatureSet, Modality};
pub use probe::{min_sort_deletions, misalignment_probe, probe_model, ProbeReport};
pub use retrieval::{average_precision, r_precision, rank_gallery, recall_at_k, retrieval_map, QueryScores};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, dot, l2_normalize, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShot {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// One row per image, one column per class.
    pub probabilities: Vec<Vec<f64>>,
}

/// Softmax over `cos / τ` against one prompt per class. Prompt `c` must
/// carry label `c`.
pub fn zero_shot_classify(images: &FeatureSet, prompts: &FeatureSet, tau: f64) -> Result<ZeroShot> {
    let c = prompts.len();
    if c < 2 {
        return Err(Error::InvalidArgument(format!("zero-shot needs at least 2 classes, got {c}")));
    }
    if prompts.labels().iter().enumerate().any(|(i, &l)| i != l) {
        return Err(Error::InvalidArgument("class prompts must be in label order".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if images.dim() != prompts.dim() {
        return Err(Error::shape("zero_shot_classify", "feature dims differ"));
    }
    let mut predictions = Vec::with_capacity(images.len());
    let mut probabilities = Vec::with_capacity(images.len());
    let mut correct = 0usize;
    for i in 0..images.len() {
        let logits: Vec<f64> = (0..c).map(|k| dot(images.row(i), prompts.row(k)) / tau).collect();
        let mut best = 0;
        for k in 1..c {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        let max = logits[best];
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        probabilities.push(exps.iter().map(|e| e / z).collect());
        predictions.push(best);
        correct += usize::from(best == images.labels()[i]);
    }
    Ok(ZeroShot {
        accuracy: correct as f64 / images.len() as f64,
        predictions,
        probabilities,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    /// Centroid of `a` minus centroid of `b`.
    pub delta: Vec<f64>,
    pub magnitude: f64,
    pub centroid_norms: (f64, f64),
    pub counts: (usize, usize),
}

/// Difference between the centroids of two sets of unit-normalized rows.
pub fn modality_gap(a: &FeatureSet, b: &FeatureSet) -> Result<GapReport> {
    gap_of_rows(a.features(), b.features())
}

/// As [`modality_gap`] on raw `[n, d]` matrices; rows are normalized first.
pub fn gap_of_rows(a: &Tensor, b: &Tensor) -> Result<GapReport> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::shape("modality_gap", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let centroid = |t: &Tensor| -> Result<Vec<f64>> {
        let mut c = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (acc, v) in c.iter_mut().zip(l2_normalize(t.row(i))?) {
                *acc += v;
            }
        }
        c.iter_mut().for_each(|x| *x /= t.rows() as f64);
        Ok(c)
    };
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    let delta: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
    let norm = |v: &[f64]| dot(v, v).sqrt();
    Ok(GapReport {
        magnitude: norm(&delta),
        centroid_norms: (norm(&ca), norm(&cb)),
        counts: (a.rows(), b.rows()),
        delta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Every cross pair whose ids differ. When both sides are the same
    /// modality over the same ids, each unordered pair is counted once.
    AllPairs,
    /// Row `i` of one side against row `i` of the other; ids must line up.
    Matched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub label: String,
    /// `bins + 1` edges spanning `[−1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean of the binned similarities.
    pub mean: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn similarity_histogram(
    a: &FeatureSet,
    b: &FeatureSet,
    bins: usize,
    pairing: Pairing,
    label: &str,
) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument("histogram needs at least 2 bins".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape("similarity_histogram", "feature dims differ"));
    }
    let mut sims = Vec::new();
    match pairing {
        Pairing::Matched => {
            if a.ids() != b.ids() {
                return Err(Error::InvalidArgument("matched pairing needs aligned ids".into()));
            }
            for i in 0..a.len() {
                sims.push(cosine_similarity(a.row(i), b.row(i))?);
            }
        }
        Pairing::AllPairs => {
            let same = a.modality == b.modality && a.ids() == b.ids();
            for i in 0..a.len() {
                let start = if same { i + 1 } else { 0 };
                for j in start..b.len() {
                    if a.ids()[i] != b.ids()[j] {
                        sims.push(cosine_similarity(a.row(i), b.row(j))?);
                    }
                }
            }
        }
    }
    if sims.is_empty() {
        return Err(Error::InvalidArgument("no pairs to histogram".into()));
    }
    let mut counts = vec![0usize; bins];
    for &s in &sims {
        let k = (((s + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    Ok(Histogram {
        label: label.to_string(),
        edges: (0..=bins).map(|k| -1.0 + 2.0 * k as f64 / bins as f64).collect(),
        counts,
        mean: sims.iter().sum::<f64>() / sims.len() as f64,
    })
}
