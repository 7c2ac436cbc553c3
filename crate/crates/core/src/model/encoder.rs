use super::VLModel;
use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Rows encoded per graph when embedding large sets.
const CHUNK: usize = 64;

/// Lazily places model parameters on a graph, either as constants or as
/// trainable leaves.
pub struct Binding<'m> {
    model: &'m VLModel,
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'m> Binding<'m> {
    /// Every parameter enters the graph as a constant.
    pub fn frozen(model: &'m VLModel) -> Self {
        Self::trainable_where(model, |_| false)
    }

    /// Parameters whose name passes `pred` receive gradients.
    pub fn trainable_where(model: &'m VLModel, pred: impl Fn(&str) -> bool) -> Self {
        let trainable = model.names().iter().map(|n| pred(n)).collect();
        Self {
            model,
            vars: vec![None; model.names().len()],
            trainable,
        }
    }

    pub fn model(&self) -> &'m VLModel {
        self.model
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let i = self
            .model
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {name:?}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.model.tensors()[i].clone();
        let v = g.leaf(t, self.trainable[i])?;
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// `(parameter index, var)` of every trainable parameter placed so far.
    pub fn trainable_vars(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.trainable[i]).map(|v| (i, v)))
            .collect()
    }
}

fn affine(g: &mut Graph, b: &mut Binding, x: Var, prefix: &str) -> Result<Var> {
    let gain = b.get(g, &format!("{prefix}.gain"))?;
    let bias = b.get(g, &format!("{prefix}.bias"))?;
    let y = g.mul_broadcast(x, gain)?;
    g.add_broadcast(y, bias)
}

fn layer_norm(g: &mut Graph, b: &mut Binding, x: Var, prefix: &str) -> Result<Var> {
    let y = g.layer_norm(x)?;
    affine(g, b, y, prefix)
}

fn linear(g: &mut Graph, b: &mut Binding, x: Var, prefix: &str) -> Result<Var> {
    let w = b.get(g, &format!("{prefix}.weight"))?;
    let bias = b.get(g, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, bias)
}

/// Pre-norm transformer block over `[B, T, w]` with per-item valid lengths.
fn block(g: &mut Graph, b: &mut Binding, x: Var, prefix: &str, lens: &[usize]) -> Result<Var> {
    let c = &b.model().config;
    let (heads, dh, w) = (c.heads, c.head_dim(), c.width);
    let s = g.shape(x).to_vec();
    let (batch, t) = (s[0], s[1]);

    let h = layer_norm(g, b, x, &format!("{prefix}.ln1"))?;
    let qkv = linear(g, b, h, &format!("{prefix}.attn.qkv"))?;
    let q = g.split_heads(qkv, 0, heads, dh)?;
    let k = g.split_heads(qkv, w, heads, dh)?;
    let v = g.split_heads(qkv, 2 * w, heads, dh)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let key_lens: Vec<usize> = lens.iter().flat_map(|&l| std::iter::repeat_n(l, heads)).collect();
    let attn = g.masked_softmax(scores, &key_lens)?;
    let ctx = g.batch_matmul(attn, v, false)?;
    let ctx = g.merge_heads(ctx, heads)?;
    let out = linear(g, b, ctx, &format!("{prefix}.attn.out"))?;
    let x = g.add(x, out)?;

    let h = layer_norm(g, b, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, b, h, &format!("{prefix}.mlp.fc1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, b, h, &format!("{prefix}.mlp.fc2"))?;
    debug_assert_eq!(g.shape(h), [batch, t, w]);
    g.add(x, h)
}

fn add_positions(g: &mut Graph, b: &mut Binding, x: Var, table: &str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, w) = (s[1], s[2]);
    let pos = b.get(g, table)?;
    let rows = g.shape(pos)[0];
    if t > rows {
        return Err(Error::shape("positions", format!("sequence of {t} exceeds {rows} positions")));
    }
    let ids: Vec<usize> = (0..t).collect();
    let pos = g.gather_rows(pos, &ids, &[t, w])?;
    g.add_broadcast(x, pos)
}

/// Token embeddings `E_v` of a batch, right-padded to the longest sequence.
/// Returns the `[B, T, w]` embeddings and each sequence's length.
pub fn token_embeddings(
    g: &mut Graph,
    b: &mut Binding,
    batch: &[Vec<usize>],
) -> Result<(Var, Vec<usize>)> {
    let c = &b.model().config;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty text batch".into()));
    }
    let lens: Vec<usize> = batch.iter().map(Vec::len).collect();
    let t = *lens.iter().max().expect("nonempty");
    if lens.contains(&0) {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if t > c.text_context_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of {t} tokens exceeds context length {}",
            c.text_context_len
        )));
    }
    let mut ids = Vec::with_capacity(batch.len() * t);
    for seq in batch {
        if let Some(&bad) = seq.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        ids.extend_from_slice(seq);
        ids.extend(std::iter::repeat_n(0, t - seq.len()));
    }
    let width = c.width;
    let table = b.get(g, "text.token_embedding")?;
    let emb = g.gather_rows(table, &ids, &[batch.len(), t, width])?;
    Ok((emb, lens))
}

/// Text tower over `[B, T, w]` embeddings with valid lengths `lens`;
/// returns unnormalized `[B, d]` features.
pub fn text_features_from_embeddings(
    g: &mut Graph,
    b: &mut Binding,
    emb: Var,
    lens: &[usize],
) -> Result<Var> {
    let c = b.model().config.clone();
    let s = g.shape(emb).to_vec();
    if s.len() != 3 || s[2] != c.width || s[0] != lens.len() {
        return Err(Error::shape(
            "encode_text",
            format!("embeddings {s:?} for width {} and {} lengths", c.width, lens.len()),
        ));
    }
    if s[1] > c.text_context_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} embeddings exceeds context length {}",
            s[1], c.text_context_len
        )));
    }
    let mut x = add_positions(g, b, emb, "text.position_embedding")?;
    for l in 0..c.layers {
        x = block(g, b, x, &format!("text.block{l}"), lens)?;
    }
    let x = layer_norm(g, b, x, "text.ln_final")?;
    let pooled = g.masked_mean_seq(x, lens)?;
    let proj = b.get(g, "text.projection")?;
    g.matmul(pooled, proj)
}

pub fn text_features(g: &mut Graph, b: &mut Binding, batch: &[Vec<usize>]) -> Result<Var> {
    let (emb, lens) = token_embeddings(g, b, batch)?;
    text_features_from_embeddings(g, b, emb, &lens)
}

/// Splits an RGB image into `[U, patch_dim]` rows; patches are taken in
/// row-major grid order and flattened as (row, column, channel).
pub fn patchify(model: &VLModel, image: &Image) -> Result<Tensor> {
    let c = &model.config;
    let (grid, side) = c.image_geometry().expect("validated config");
    let size = grid * side;
    if image.channels != 3 || image.height != size || image.width != size {
        return Err(Error::shape(
            "encode_image",
            format!(
                "image {}x{}x{} cannot be cut into {} patches of {} values",
                image.channels, image.height, image.width, c.num_patches, c.patch_dim
            ),
        ));
    }
    let mut out = Vec::with_capacity(c.num_patches * c.patch_dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..side {
                for px in 0..side {
                    for ch in 0..3 {
                        out.push(image.get(ch, gy * side + py, gx * side + px));
                    }
                }
            }
        }
    }
    Tensor::new(vec![c.num_patches, c.patch_dim], out)
}

/// Patch projection `E_w` of `[B, U, patch_dim]` pixels.
pub fn patch_embeddings(g: &mut Graph, b: &mut Binding, pixels: Var) -> Result<Var> {
    linear(g, b, pixels, "image.patch")
}

/// Image tower over `[B, U, w]` patch embeddings. The CLS token is
/// prepended here; returns unnormalized `[B, d]` features.
pub fn image_features_from_patch_embeddings(g: &mut Graph, b: &mut Binding, emb: Var) -> Result<Var> {
    let c = b.model().config.clone();
    let s = g.shape(emb).to_vec();
    if s.len() != 3 || s[1] != c.num_patches || s[2] != c.width {
        return Err(Error::shape(
            "encode_image_from_patch_embeddings",
            format!("expected [B, {}, {}], got {s:?}", c.num_patches, c.width),
        ));
    }
    let batch = s[0];
    let cls = b.get(g, "image.cls")?;
    let cls = g.reshape(cls, &[1, c.width])?;
    let cls = g.gather_rows(cls, &vec![0; batch], &[batch, 1, c.width])?;
    let x = g.concat(cls, emb, 1)?;
    let mut x = add_positions(g, b, x, "image.position_embedding")?;
    let lens = vec![c.num_patches + 1; batch];
    for l in 0..c.layers {
        x = block(g, b, x, &format!("image.block{l}"), &lens)?;
    }
    let x = layer_norm(g, b, x, "image.ln_final")?;
    let cls_state = g.select_seq(x, 0)?;
    let proj = b.get(g, "image.projection")?;
    g.matmul(cls_state, proj)
}

pub fn image_features(g: &mut Graph, b: &mut Binding, images: &[&Image]) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let c = &b.model().config;
    let (u, pd) = (c.num_patches, c.patch_dim);
    let mut data = Vec::with_capacity(images.len() * u * pd);
    for img in images {
        data.extend(patchify(b.model(), img)?.into_data());
    }
    let pixels = g.constant(Tensor::new(vec![images.len(), u, pd], data)?)?;
    let emb = patch_embeddings(g, b, pixels)?;
    image_features_from_patch_embeddings(g, b, emb)
}

fn stack_rows(d: usize, chunks: Vec<Tensor>) -> Result<Tensor> {
    let data: Vec<f64> = chunks.into_iter().flat_map(Tensor::into_data).collect();
    let rows = data.len() / d;
    Tensor::new(vec![rows, d], data)
}

/// Unnormalized features of many images as `[N, d]`, frozen model.
pub fn encode_images(model: &VLModel, images: &[&Image]) -> Result<Tensor> {
    let chunks = images
        .chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let mut b = Binding::frozen(model);
            let f = image_features(&mut g, &mut b, chunk)?;
            Ok(g.value(f).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    stack_rows(model.config.d, chunks)
}

/// Unnormalized features of many token sequences as `[N, d]`, frozen model.
pub fn encode_texts(model: &VLModel, texts: &[Vec<usize>]) -> Result<Tensor> {
    let chunks = texts
        .chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let mut b = Binding::frozen(model);
            let f = text_features(&mut g, &mut b, chunk)?;
            Ok(g.value(f).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    stack_rows(model.config.d, chunks)
}

/// `f_θ(I)`: unnormalized image feature of length `d`.
pub fn encode_image(model: &VLModel, image: &Image) -> Result<Vec<f64>> {
    Ok(encode_images(model, &[image])?.into_data())
}

/// `g_φ(E_v(tokens))`: unnormalized text feature of length `d`.
pub fn encode_text(model: &VLModel, tokens: &[usize]) -> Result<Vec<f64>> {
    Ok(encode_texts(model, &[tokens.to_vec()])?.into_data())
}

/// Text tower applied directly to a `[T, w]` embedding sequence, which may
/// mix real token embeddings with free pseudo-token vectors.
pub fn encode_text_from_embeddings(model: &VLModel, embeddings: &Tensor) -> Result<Vec<f64>> {
    let s = embeddings.shape();
    if s.len() != 2 {
        return Err(Error::shape("encode_text_from_embeddings", format!("{s:?}")));
    }
    let mut g = Graph::new();
    let mut b = Binding::frozen(model);
    let emb = g.constant(embeddings.clone().reshape(&[1, s[0], s[1]])?)?;
    let f = text_features_from_embeddings(&mut g, &mut b, emb, &[s[0]])?;
    Ok(g.value(f).data().to_vec())
}

/// Image tower applied directly to `[U, w]` patch embeddings.
pub fn encode_image_from_patch_embeddings(model: &VLModel, embeddings: &Tensor) -> Result<Vec<f64>> {
    let s = embeddings.shape();
    if s.len() != 2 {
        return Err(Error::shape("encode_image_from_patch_embeddings", format!("{s:?}")));
    }
    let mut g = Graph::new();
    let mut b = Binding::frozen(model);
    let emb = g.constant(embeddings.clone().reshape(&[1, s[0], s[1]])?)?;
    let f = image_features_from_patch_embeddings(&mut g, &mut b, emb)?;
    Ok(g.value(f).data().to_vec())
}

impl VLModel {
    /// `E_v(tokens)` as a `[T, w]` tensor.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binding::frozen(self);
        let (emb, _) = token_embeddings(&mut g, &mut b, &[tokens.to_vec()])?;
        g.value(emb).clone().reshape(&[tokens.len(), self.config.width])
    }

    /// `E_w(patches(image))` as a `[U, w]` tensor.
    pub fn embed_patches(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binding::frozen(self);
        let p = patchify(self, image)?;
        let p = g.constant(p.reshape(&[1, self.config.num_patches, self.config.patch_dim])?)?;
        let emb = patch_embeddings(&mut g, &mut b, p)?;
        g.value(emb).clone().reshape(&[self.config.num_patches, self.config.width])
    }
}
