//! Modality inversion: optimize free encoder inputs so a frozen tower
//! reproduces a feature from the other tower.

mod adapter;

pub use adapter::{apply_adapter, train_adapter, Adapter, AdapterSpec, Direction};

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::model::{
    encode_images, encode_texts, image_features_from_patch_embeddings, text_features_from_embeddings,
    Binding, VLModel,
};
use crate::rng;
use crate::tensor::{l2_normalize, AdamW, AdamWConfig, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct InversionSpec {
    /// Pseudo-token count `R` (OTI) or pseudo-patch count `P` (OVI).
    pub count: usize,
    pub steps: usize,
    /// Token ids placed before the pseudo-tokens (OTI only).
    pub template: Vec<usize>,
    /// Token ids placed after the pseudo-tokens (OTI only).
    pub suffix: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub init_scale: f64,
    /// Keep the inverted feature every this many steps; 0 keeps none.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl InversionSpec {
    pub fn oti(template: Vec<usize>) -> Self {
        Self {
            count: 1,
            steps: 150,
            template,
            suffix: Vec::new(),
            optimizer: AdamWConfig::default(),
            init_scale: 0.02,
            snapshot_every: 10,
            seed: 0,
        }
    }

    pub fn ovi() -> Self {
        Self {
            steps: 1000,
            ..Self::oti(Vec::new())
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("inversion needs at least one pseudo input".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("inversion needs at least one step".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    /// Unit-norm feature produced by the optimized inputs.
    pub feature: Vec<f64>,
    /// Learned pseudo-tokens or pseudo-patches, `[count, width]`.
    pub learned: Tensor,
    /// `1 − cos` before each update.
    pub losses: Vec<f64>,
    /// `(step, unit feature)` after `step` updates.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    /// Model digest, identical before and after the run.
    pub model_digest: String,
}

impl InversionResult {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one step")
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{s},{l}");
        }
        out
    }
}

/// Slot `j` of `u` takes pseudo-patch `⌊j·p/u⌋`; also returns how many
/// slots each pseudo-patch fills.
pub fn nn_repeat_map(p: usize, u: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if p == 0 || p > u {
        return Err(Error::InvalidArgument(format!("need 1 ≤ P ≤ U, got P={p}, U={u}")));
    }
    let map: Vec<usize> = (0..u).map(|j| j * p / u).collect();
    let mut counts = vec![0; p];
    for &i in &map {
        counts[i] += 1;
    }
    Ok((map, counts))
}

/// Blend `α·ψ_T + (1 − α)·ψ_I`, renormalized.
pub fn combine_features(image: &[f64], text: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if image.len() != text.len() {
        return Err(Error::shape("combine_features", format!("{} vs {}", image.len(), text.len())));
    }
    for v in [image, text] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("combine_features needs unit inputs, got norm {n}")));
        }
    }
    let mixed: Vec<f64> = image
        .iter()
        .zip(text)
        .map(|(i, t)| alpha * t + (1.0 - alpha) * i)
        .collect();
    l2_normalize(&mixed)
}

/// Builds the per-row features from the pseudo inputs `[B, count, w]`.
type Tower<'a> = dyn Fn(&mut Graph, &mut Binding, Var) -> Result<Var> + 'a;

/// Shared optimization loop: one graph row per target, the summed loss
/// keeps rows independent under AdamW.
fn invert(
    model: &VLModel,
    targets: &Tensor,
    keys: &[u64],
    spec: &InversionSpec,
    tower: &Tower,
) -> Result<Vec<InversionResult>> {
    spec.validate()?;
    let digest = model.digest();
    let (b, w, count) = (keys.len(), model.config.width, spec.count);
    if targets.rows() != b {
        return Err(Error::shape("invert", format!("{} targets for {b} keys", targets.rows())));
    }
    let mut init = Vec::with_capacity(b * count * w);
    for &k in keys {
        let t = Tensor::randn(&[count, w], spec.init_scale, &mut rng::rng(rng::derive_indexed(spec.seed, k)));
        init.extend(t.into_data());
    }
    let mut pseudo = Tensor::new(vec![b, count, w], init)?;
    let mut opt = AdamW::new(spec.optimizer);
    let mut losses = vec![Vec::with_capacity(spec.steps); b];
    let mut snapshots = vec![Vec::new(); b];
    let mut last_features = Tensor::zeros(&[b, model.config.d]);

    for step in 0..=spec.steps {
        let mut g = Graph::new();
        let mut binding = Binding::frozen(model);
        let p = g.param(pseudo.clone())?;
        let f = tower(&mut g, &mut binding, p).map_err(|e| divergence(e, step))?;
        let tgt = g.constant(targets.clone())?;
        let cos = g.cosine_rows(f, tgt).map_err(|e| divergence(e, step))?;
        let snap = spec.snapshot_every > 0 && step % spec.snapshot_every == 0;
        if step == spec.steps || snap {
            let fv = g.value(f);
            if snap {
                for (i, rows) in snapshots.iter_mut().enumerate() {
                    rows.push((step, l2_normalize(fv.row(i))?));
                }
            }
            if step == spec.steps {
                last_features = fv.clone();
                break;
            }
        }
        for (i, l) in losses.iter_mut().enumerate() {
            l.push(1.0 - g.value(cos).data()[i]);
        }
        let neg = g.scale(cos, -1.0)?;
        let total = g.sum(neg)?;
        let grads = g.backward(total).map_err(|e| divergence(e, step))?;
        let grad = grads.get_or_zeros(p, pseudo.numel());
        opt.step(&mut [pseudo.data_mut()], &[&grad]).map_err(|e| divergence(e, step))?;
        if !pseudo.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    if model.digest() != digest {
        return Err(Error::InvalidArgument("model parameters changed during inversion".into()));
    }
    let per = count * w;
    (0..b)
        .map(|i| {
            Ok(InversionResult {
                feature: l2_normalize(last_features.row(i))?,
                learned: Tensor::new(vec![count, w], pseudo.data()[i * per..(i + 1) * per].to_vec())?,
                losses: std::mem::take(&mut losses[i]),
                snapshots: std::mem::take(&mut snapshots[i]),
                model_digest: digest.clone(),
            })
        })
        .collect()
}

/// Items per optimization graph. Fixed so results do not depend on how
/// many worker threads share the chunks.
const CHUNK: usize = 16;

fn chunked<T: Sync>(
    items: &[T],
    keys: &[u64],
    run: impl Fn(&[T], &[u64]) -> Result<Vec<InversionResult>> + Sync,
) -> Result<Vec<InversionResult>> {
    let parts: Vec<Result<Vec<InversionResult>>> = items
        .par_chunks(CHUNK)
        .zip(keys.par_chunks(CHUNK))
        .map(|(i, k)| run(i, k))
        .collect();
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn divergence(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        data.extend(l2_normalize(t.row(i))?);
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn repeat_rows(t: &Tensor, times: usize) -> Result<Tensor> {
    let mut shape = vec![times];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().repeat(times))
}

/// Textual inversion of many images. `keys` seed each item's
/// initialization, so an item's result does not depend on its batch.
/// Chunks of images are optimized in parallel.
pub fn oti_many(model: &VLModel, images: &[&Image], keys: &[u64], spec: &InversionSpec) -> Result<Vec<InversionResult>> {
    if images.len() != keys.len() || images.is_empty() {
        return Err(Error::InvalidArgument("oti needs one key per image and at least one image".into()));
    }
    spec.validate()?;
    chunked(images, keys, |i, k| oti_batch(model, i, k, spec))
}

fn oti_batch(model: &VLModel, images: &[&Image], keys: &[u64], spec: &InversionSpec) -> Result<Vec<InversionResult>> {
    let len = spec.template.len() + spec.count + spec.suffix.len();
    if len > model.config.text_context_len {
        return Err(Error::InvalidConfig(format!(
            "template, pseudo-tokens and suffix need {len} positions, context holds {}",
            model.config.text_context_len
        )));
    }
    let targets = unit_rows(&encode_images(model, images)?)?;
    let b = images.len();
    let prefix = if spec.template.is_empty() { None } else { Some(repeat_rows(&model.embed_tokens(&spec.template)?, b)?) };
    let suffix = if spec.suffix.is_empty() { None } else { Some(repeat_rows(&model.embed_tokens(&spec.suffix)?, b)?) };
    let tower = move |g: &mut Graph, bind: &mut Binding, p: Var| -> Result<Var> {
        let mut seq = p;
        if let Some(t) = &prefix {
            let t = g.constant(t.clone())?;
            seq = g.concat(t, seq, 1)?;
        }
        if let Some(t) = &suffix {
            let t = g.constant(t.clone())?;
            seq = g.concat(seq, t, 1)?;
        }
        text_features_from_embeddings(g, bind, seq, &vec![len; b])
    };
    invert(model, &targets, keys, spec, &tower)
}

/// Image → text-side feature through `R` pseudo-tokens after the template.
pub fn oti(model: &VLModel, image: &Image, spec: &InversionSpec) -> Result<InversionResult> {
    Ok(oti_many(model, &[image], &[0], spec)?.remove(0))
}

/// Visual inversion of many token sequences, chunked like [`oti_many`].
pub fn ovi_many(model: &VLModel, texts: &[Vec<usize>], keys: &[u64], spec: &InversionSpec) -> Result<Vec<InversionResult>> {
    if texts.len() != keys.len() || texts.is_empty() {
        return Err(Error::InvalidArgument("ovi needs one key per text and at least one text".into()));
    }
    spec.validate()?;
    nn_repeat_map(spec.count, model.config.num_patches)?;
    chunked(texts, keys, |t, k| ovi_batch(model, t, k, spec))
}

fn ovi_batch(model: &VLModel, texts: &[Vec<usize>], keys: &[u64], spec: &InversionSpec) -> Result<Vec<InversionResult>> {
    let (u, p) = (model.config.num_patches, spec.count);
    let (map, _) = nn_repeat_map(p, u)?;
    let targets = unit_rows(&encode_texts(model, texts)?)?;
    let b = texts.len();
    let w = model.config.width;
    let ids: Vec<usize> = (0..b).flat_map(|i| map.iter().map(move |&m| i * p + m)).collect();
    let tower = move |g: &mut Graph, bind: &mut Binding, pv: Var| -> Result<Var> {
        let flat = g.reshape(pv, &[b * p, w])?;
        let slots = g.gather_rows(flat, &ids, &[b, u, w])?;
        image_features_from_patch_embeddings(g, bind, slots)
    };
    invert(model, &targets, keys, spec, &tower)
}

/// Text → image-side feature through `P` pseudo-patches repeated over the
/// patch grid.
pub fn ovi(model: &VLModel, tokens: &[usize], spec: &InversionSpec) -> Result<InversionResult> {
    Ok(ovi_many(model, &[tokens.to_vec()], &[0], spec)?.remove(0))
}
