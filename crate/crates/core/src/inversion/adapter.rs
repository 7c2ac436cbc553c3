use crate::error::{Error, Result};
use crate::metrics::{FeatureSet, Modality};
use crate::rng;
use crate::tensor::{l2_normalize, AdamW, AdamWConfig, Graph, Tensor};
use crate::train::clip_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Single linear layer `x ↦ normalize(xW + b)` between the two feature spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// Temperature of the contrastive term.
    pub temperature: f64,
    pub cosine_weight: f64,
    pub clip_weight: f64,
    pub seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            temperature: 0.05,
            cosine_weight: 1.0,
            clip_weight: 1.0,
            seed: 0,
        }
    }
}

impl Adapter {
    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::shape("adapter", format!("input of {} for a {d}-dim adapter", x.len())));
        }
        let w = self.weight.data();
        let y: Vec<f64> = (0..d)
            .map(|j| self.bias[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * d + j]).sum::<f64>())
            .collect();
        l2_normalize(&y)
    }
}

/// Fits an adapter mapping each source feature to its paired target with a
/// cosine term plus a batch contrastive term.
pub fn train_adapter(pairs: &[(Vec<f64>, Vec<f64>)], direction: Direction, spec: &AdapterSpec) -> Result<Adapter> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("adapter training needs at least 2 pairs".into()));
    }
    let d = pairs[0].0.len();
    if d == 0 || pairs.iter().any(|(s, t)| s.len() != d || t.len() != d) {
        return Err(Error::shape("train_adapter", "feature lengths differ".to_string()));
    }
    let n = pairs.len();
    let src = Tensor::new(vec![n, d], pairs.iter().flat_map(|p| p.0.clone()).collect())?;
    let tgt = Tensor::new(vec![n, d], pairs.iter().flat_map(|p| p.1.clone()).collect())?;
    let mut weight = Tensor::randn(
        &[d, d],
        1.0 / (d as f64).sqrt(),
        &mut rng::rng(rng::derive_seed(spec.seed, "adapter-init")),
    );
    let mut bias = Tensor::zeros(&[d]);
    let mut opt = AdamW::new(spec.optimizer);
    for step in 0..spec.steps {
        let mut g = Graph::new();
        let w = g.param(weight.clone())?;
        let b = g.param(bias.clone())?;
        let x = g.constant(src.clone())?;
        let t = g.constant(tgt.clone())?;
        let y = g.matmul(x, w)?;
        let y = g.add_broadcast(y, b)?;
        let cos = g.cosine_rows(y, t)?;
        let cos = g.mean(cos)?;
        let cos_loss = g.scale(cos, -spec.cosine_weight)?;
        let cos_loss = g.add_scalar(cos_loss, spec.cosine_weight)?;
        let contrastive = clip_loss(&mut g, y, t, spec.temperature)?;
        let contrastive = g.scale(contrastive, spec.clip_weight)?;
        let loss = g.add(cos_loss, contrastive)?;
        let grads = g.backward(loss).map_err(|_| Error::Diverged { step })?;
        let gw = grads.get_or_zeros(w, d * d);
        let gb = grads.get_or_zeros(b, d);
        opt.step(&mut [weight.data_mut(), bias.data_mut()], &[&gw, &gb])?;
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(Adapter {
        weight,
        bias: bias.into_data(),
        direction,
    })
}

/// Maps every row through the adapter; the result is tagged as adapter output.
pub fn apply_adapter(adapter: &Adapter, features: &FeatureSet) -> Result<FeatureSet> {
    let rows = (0..features.len())
        .map(|i| adapter.apply(features.row(i)))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::from_rows(Modality::Adapter, features.ids().to_vec(), features.labels().to_vec(), rows)
}
