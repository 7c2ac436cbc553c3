//! Toy dual-encoder vision-language model.
//!
//! Both encoders are small pre-norm transformers. The text encoder reads
//! token embeddings plus learned positions and mean-pools the last layer;
//! the image encoder projects flattened patches, prepends a learned CLS
//! token and reads the CLS state. A final linear map takes each into the
//! shared `d`-dimensional space.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{
    encode_image, encode_image_from_patch_embeddings, encode_images, encode_text,
    encode_text_from_embeddings, encode_texts, image_features, image_features_from_patch_embeddings,
    patch_embeddings, patchify, text_features, text_features_from_embeddings, token_embeddings,
    Binding,
};

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const INIT_SCALE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared embedding dimension.
    pub d: usize,
    /// Token and patch embedding width inside the encoders.
    pub width: usize,
    pub vocab_size: usize,
    pub text_context_len: usize,
    /// Patches per image (U).
    pub num_patches: usize,
    /// Flattened values per patch (3 · side²).
    pub patch_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub init_temperature: f64,
    pub siglip_bias: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            width: 64,
            vocab_size: 64,
            text_context_len: 16,
            num_patches: 16,
            patch_dim: 48,
            layers: 2,
            heads: 4,
            hidden_dim: 128,
            init_temperature: 0.01,
            siglip_bias: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.width == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return fail("dimensions and layer count must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.vocab_size == 0 || self.text_context_len == 0 {
            return fail("vocabulary and text context must be nonempty".into());
        }
        if self.num_patches == 0 {
            return fail("need at least one patch".into());
        }
        if self.image_geometry().is_none() {
            return fail(format!(
                "{} patches of {} values do not tile a square RGB canvas",
                self.num_patches, self.patch_dim
            ));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.init_temperature));
        }
        if !self.siglip_bias.is_finite() {
            return fail("siglip bias must be finite".into());
        }
        Ok(())
    }

    /// `(grid side, patch side)` when the patch layout tiles a square RGB image.
    pub fn image_geometry(&self) -> Option<(usize, usize)> {
        let grid = exact_sqrt(self.num_patches)?;
        if !self.patch_dim.is_multiple_of(3) {
            return None;
        }
        let side = exact_sqrt(self.patch_dim / 3)?;
        Some((grid, side))
    }

    /// Canvas side length in pixels.
    pub fn image_size(&self) -> usize {
        let (grid, side) = self.image_geometry().expect("validated config");
        grid * side
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n && r > 0).then_some(r)
}

/// All parameters of the dual encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VLModel {
    pub config: ModelConfig,
    /// Temperature the model was last trained with.
    pub temperature: f64,
    pub siglip_bias: f64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let w = c.width;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));

    push("text.token_embedding".into(), vec![c.vocab_size, w], Init::Normal);
    push("text.position_embedding".into(), vec![c.text_context_len, w], Init::Normal);
    push("image.patch.weight".into(), vec![c.patch_dim, w], Init::Normal);
    push("image.patch.bias".into(), vec![w], Init::Zeros);
    push("image.cls".into(), vec![w], Init::Normal);
    push("image.position_embedding".into(), vec![c.num_patches + 1, w], Init::Normal);
    for tower in ["text", "image"] {
        for l in 0..c.layers {
            let p = format!("{tower}.block{l}");
            push(format!("{p}.ln1.gain"), vec![w], Init::Ones);
            push(format!("{p}.ln1.bias"), vec![w], Init::Zeros);
            push(format!("{p}.attn.qkv.weight"), vec![w, 3 * w], Init::Normal);
            push(format!("{p}.attn.qkv.bias"), vec![3 * w], Init::Zeros);
            push(format!("{p}.attn.out.weight"), vec![w, w], Init::Normal);
            push(format!("{p}.attn.out.bias"), vec![w], Init::Zeros);
            push(format!("{p}.ln2.gain"), vec![w], Init::Ones);
            push(format!("{p}.ln2.bias"), vec![w], Init::Zeros);
            push(format!("{p}.mlp.fc1.weight"), vec![w, c.hidden_dim], Init::Normal);
            push(format!("{p}.mlp.fc1.bias"), vec![c.hidden_dim], Init::Zeros);
            push(format!("{p}.mlp.fc2.weight"), vec![c.hidden_dim, w], Init::Normal);
            push(format!("{p}.mlp.fc2.bias"), vec![w], Init::Zeros);
        }
        push(format!("{tower}.ln_final.gain"), vec![w], Init::Ones);
        push(format!("{tower}.ln_final.bias"), vec![w], Init::Zeros);
        push(format!("{tower}.projection"), vec![w, c.d], Init::Normal);
    }
    out
}

/// Names of the final projection matrices.
pub const PROJECTIONS: [&str; 2] = ["text.projection", "image.projection"];

pub fn is_projection(name: &str) -> bool {
    PROJECTIONS.contains(&name)
}

impl VLModel {
    /// Seeded initialization: N(0, 0.02²) weights and embeddings, unit
    /// layer-norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(rng::derive_seed(config.seed, "model-init"));
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in param_layout(&config) {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, INIT_SCALE, &mut rng),
                Init::Ones => Tensor::filled(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config.clone(), config.init_temperature, config.siglip_bias, names, tensors))
    }

    fn assemble(
        config: ModelConfig,
        temperature: f64,
        siglip_bias: f64,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            temperature,
            siglip_bias,
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds a model from named tensors, checking them against the
    /// layout implied by `config`.
    pub fn from_named(
        config: ModelConfig,
        temperature: f64,
        siglip_bias: f64,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((want, shape, _), (name, t)) in layout.into_iter().zip(named) {
            if want != name || shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} {:?} does not match expected {want:?} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter {name:?} is not finite")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config, temperature, siglip_bias, names, tensors))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {name:?}")))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Order-stable SHA-256 over the config, temperature, bias and every
    /// parameter's name, shape and value bits.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    /// Digest restricted to parameters whose name passes `keep`.
    pub fn digest_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.config).as_bytes());
        h.update(self.temperature.to_le_bytes());
        h.update(self.siglip_bias.to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if !keep(name) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.image_geometry(), Some((4, 4)));
        assert_eq!(c.image_size(), 16);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { num_patches: 0, ..Default::default() },
            ModelConfig { num_patches: 15, ..Default::default() },
            ModelConfig { patch_dim: 47, ..Default::default() },
            ModelConfig { init_temperature: 0.0, ..Default::default() },
            ModelConfig { layers: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(VLModel::init(c), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = VLModel::init(ModelConfig::default()).unwrap();
        let b = VLModel::init(ModelConfig::default()).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = VLModel::init(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn init_follows_the_layout_rules() {
        let m = VLModel::init(ModelConfig::default()).unwrap();
        assert!(m.param("text.block0.ln1.gain").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(m.param("image.block1.mlp.fc2.bias").unwrap().data().iter().all(|&x| x == 0.0));
        let w = m.param("image.block0.attn.qkv.weight").unwrap();
        let std = (w.data().iter().map(|x| x * x).sum::<f64>() / w.numel() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
        let layout_count: usize = param_layout(&m.config)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum();
        assert_eq!(m.param_count(), layout_count);
    }

    #[test]
    fn filtered_digest_ignores_excluded_params() {
        let a = VLModel::init(ModelConfig::default()).unwrap();
        let mut b = a.clone();
        let i = b.index_of("text.projection").unwrap();
        b.tensors_mut()[i].data_mut()[0] += 1.0;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(
            a.digest_filtered(|n| !is_projection(n)),
            b.digest_filtered(|n| !is_projection(n))
        );
    }
}
