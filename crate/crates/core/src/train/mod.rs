//! Contrastive objectives and the training loops built on them.

mod losses;

pub use losses::{
    clip_loss, clip_loss_value, siglip_loss, siglip_loss_value, simclr_loss, simclr_loss_value,
    slip_loss, SlipTerms,
};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{augment, Corpus, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::gap_of_rows;
use crate::model::{encode_images, encode_texts, image_features, is_projection, text_features, Binding, VLModel};
use crate::rng;
use crate::tensor::{AdamW, AdamWConfig, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Clip,
    Siglip,
    /// Image-only augmentation contrastive loss; the text tower is untouched.
    SimclrOnly,
    Slip,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Clip => "clip",
            LossKind::Siglip => "siglip",
            LossKind::SimclrOnly => "simclr_only",
            LossKind::Slip => "slip",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        [LossKind::Clip, LossKind::Siglip, LossKind::SimclrOnly, LossKind::Slip]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    ProjectionsOnly,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::ProjectionsOnly => "projections_only",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "projections_only" => Ok(Scope::ProjectionsOnly),
            _ => Err(Error::InvalidArgument(format!("unknown trainable scope {s:?}"))),
        }
    }

    fn includes(self, name: &str) -> bool {
        self == Scope::All || is_projection(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub loss: LossKind,
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Linear learning-rate ramp over the first this many steps.
    pub warmup_steps: usize,
    /// Anneal the learning rate to zero along a half cosine after warmup.
    pub cosine_decay: bool,
    pub seed: u64,
    pub scope: Scope,
    /// Measure the modality gap every this many steps; 0 measures only at
    /// the start and end.
    pub gap_every: usize,
    /// Train-split samples used for gap measurements.
    pub gap_samples: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            loss: LossKind::Clip,
            temperature: 0.01,
            steps: 2000,
            batch_size: 64,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            warmup_steps: 100,
            cosine_decay: true,
            seed: 0,
            scope: Scope::All,
            gap_every: 100,
            gap_samples: 128,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        let min_batch = if self.loss == LossKind::Clip { 1 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::InvalidConfig(format!(
                "{} loss needs batch size ≥ {min_batch}, got {}",
                self.loss.name(),
                self.batch_size
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for update `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.lr;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay {
            return base;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Loss values of one optimization step. Components not used by the
/// objective are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub clip: Option<f64>,
    pub siglip: Option<f64>,
    pub simclr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// `(step, ‖Δ_gap‖)` measured before the update of `step`; the last entry
    /// has `step == steps` and is taken after training.
    pub gaps: Vec<(usize, f64)>,
    pub final_digest: String,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn first_gap(&self) -> Option<f64> {
        self.gaps.first().map(|g| g.1)
    }

    pub fn last_gap(&self) -> Option<f64> {
        self.gaps.last().map(|g| g.1)
    }

    /// `step,loss,clip,siglip,simclr,gap`; empty cells where a value does
    /// not apply. The post-training gap gets a row of its own.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let gap_at = |s: usize| self.gaps.iter().find(|g| g.0 == s).map(|g| g.1);
        let mut out = String::from("step,loss,clip,siglip,simclr,gap\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.loss,
                cell(r.clip),
                cell(r.siglip),
                cell(r.simclr),
                cell(gap_at(r.step))
            );
        }
        let steps = self.records.len();
        if let Some(g) = gap_at(steps) {
            let _ = writeln!(out, "{steps},,,,,{g}");
        }
        out
    }
}

/// Fixed image/caption pairs whose centroid gap is tracked during training.
fn measure_gap(model: &VLModel, probe: &[&Sample]) -> Result<f64> {
    let images: Vec<_> = probe.iter().map(|s| &s.image).collect();
    let texts: Vec<_> = probe.iter().map(|s| s.captions[0].clone()).collect();
    let gi = encode_images(model, &images)?;
    let gt = encode_texts(model, &texts)?;
    Ok(gap_of_rows(&gi, &gt)?.magnitude)
}

/// Epoch-wise shuffled minibatches over the train split.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: rng::StdRng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: rng::rng(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        b
    }
}

struct StepLoss {
    total: Var,
    clip: Option<Var>,
    siglip: Option<Var>,
    simclr: Option<Var>,
}

fn augmented(g: &mut Graph, b: &mut Binding, batch: &[&Sample], seeds: &[u64]) -> Result<Var> {
    let views: Vec<_> = batch.iter().zip(seeds).map(|(s, &seed)| augment(&s.image, seed)).collect();
    let refs: Vec<_> = views.iter().collect();
    image_features(g, b, &refs)
}

fn build_loss(
    g: &mut Graph,
    b: &mut Binding,
    spec: &TrainSpec,
    batch: &[&Sample],
    captions: &[Vec<usize>],
    aug_seeds: &[u64],
) -> Result<StepLoss> {
    let tau = spec.temperature;
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let n = batch.len();
    match spec.loss {
        LossKind::Clip | LossKind::Siglip | LossKind::Slip => {
            let fi = image_features(g, b, &images)?;
            let ft = text_features(g, b, captions)?;
            match spec.loss {
                LossKind::Clip => {
                    let l = clip_loss(g, fi, ft, tau)?;
                    Ok(StepLoss { total: l, clip: Some(l), siglip: None, simclr: None })
                }
                LossKind::Siglip => {
                    let bias = b.model().siglip_bias;
                    let l = siglip_loss(g, fi, ft, tau, bias)?;
                    Ok(StepLoss { total: l, clip: None, siglip: Some(l), simclr: None })
                }
                _ => {
                    let v1 = augmented(g, b, batch, &aug_seeds[..n])?;
                    let v2 = augmented(g, b, batch, &aug_seeds[n..])?;
                    let t = slip_loss(g, fi, ft, v1, v2, tau)?;
                    Ok(StepLoss { total: t.total, clip: Some(t.clip), siglip: None, simclr: Some(t.simclr) })
                }
            }
        }
        LossKind::SimclrOnly => {
            let v1 = augmented(g, b, batch, &aug_seeds[..n])?;
            let v2 = augmented(g, b, batch, &aug_seeds[n..])?;
            let l = simclr_loss(g, v1, v2, tau)?;
            Ok(StepLoss { total: l, clip: None, siglip: None, simclr: Some(l) })
        }
    }
}

fn as_divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

/// Trains `model` in place on the corpus train split. After at least one
/// step the model carries the training temperature.
pub fn pretrain(model: &mut VLModel, corpus: &Corpus, spec: &TrainSpec) -> Result<TrainLog> {
    spec.validate()?;
    let train = corpus.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("corpus has no training samples".into()));
    }
    if spec.batch_size > train.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds {} training samples",
            spec.batch_size,
            train.len()
        )));
    }
    let probe = &train[..spec.gap_samples.clamp(1, train.len())];
    let mut batcher = Batcher::new(train.len(), rng::derive_seed(spec.seed, "batches"));
    let mut caption_rng = rng::rng(rng::derive_seed(spec.seed, "captions"));
    let mut aug_rng = rng::rng(rng::derive_seed(spec.seed, "augment"));
    let mut opt = AdamW::new(spec.optimizer);
    let mut records = Vec::with_capacity(spec.steps);
    let mut gaps = Vec::new();

    for step in 0..spec.steps {
        if step == 0 || (spec.gap_every > 0 && step % spec.gap_every == 0) {
            gaps.push((step, measure_gap(model, probe)?));
        }
        let batch: Vec<&Sample> = batcher.next(spec.batch_size).into_iter().map(|i| train[i]).collect();
        let captions: Vec<Vec<usize>> = batch
            .iter()
            .map(|s| s.captions[caption_rng.random_range(0..s.captions.len())].clone())
            .collect();
        let aug_seeds: Vec<u64> = (0..2 * batch.len()).map(|_| aug_rng.random()).collect();

        let mut g = Graph::new();
        let (record, updates) = {
            let mut b = Binding::trainable_where(model, |n| spec.scope.includes(n));
            let l = build_loss(&mut g, &mut b, spec, &batch, &captions, &aug_seeds)
                .map_err(as_divergence(step))?;
            let grads = g.backward(l.total).map_err(as_divergence(step))?;
            let value = |v: Option<Var>| v.map(|v| g.scalar_value(v));
            let record = StepRecord {
                step,
                loss: g.scalar_value(l.total),
                clip: value(l.clip),
                siglip: value(l.siglip),
                simclr: value(l.simclr),
            };
            let mut vars = b.trainable_vars();
            vars.sort_by_key(|(i, _)| *i);
            let updates: Vec<(usize, Vec<f64>)> = vars
                .into_iter()
                .map(|(i, v)| (i, grads.get_or_zeros(v, g.value(v).numel())))
                .collect();
            (record, updates)
        };
        if !record.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        records.push(record);

        let tensors = model.tensors_mut();
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(updates.len());
        let mut want = updates.iter().map(|(i, _)| *i).peekable();
        for (i, t) in tensors.iter_mut().enumerate() {
            if want.peek() == Some(&i) {
                want.next();
                params.push(t.data_mut());
            }
        }
        let grads: Vec<&[f64]> = updates.iter().map(|(_, g)| g.as_slice()).collect();
        opt.config.lr = spec.lr_at(step);
        opt.step(&mut params, &grads).map_err(as_divergence(step))?;
        if params.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { step });
        }
    }
    if spec.steps > 0 {
        model.temperature = spec.temperature;
    }
    gaps.push((spec.steps, measure_gap(model, probe)?));
    Ok(TrainLog {
        records,
        gaps,
        final_digest: model.digest(),
    })
}

/// Projection-only CLIP fine-tuning at temperature `tau`.
pub fn finetune_projections(
    model: &mut VLModel,
    corpus: &Corpus,
    tau: f64,
    steps: usize,
    seed: u64,
) -> Result<TrainLog> {
    let spec = finetune_spec(tau, steps, seed);
    pretrain(model, corpus, &spec)
}

/// The spec [`finetune_projections`] runs with.
pub fn finetune_spec(tau: f64, steps: usize, seed: u64) -> TrainSpec {
    TrainSpec {
        loss: LossKind::Clip,
        temperature: tau,
        steps,
        scope: Scope::ProjectionsOnly,
        warmup_steps: 0,
        cosine_decay: false,
        optimizer: AdamWConfig {
            lr: 1e-4,
            ..AdamWConfig::default()
        },
        seed,
        ..TrainSpec::default()
    }
}
