//! Contrastive objectives over `[N, d]` feature matrices. Rows need not be
//! normalized; every loss works on cosine similarities.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn check_pair(g: &Graph, op: &'static str, a: Var, b: Var, tau: f64) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("{op}: temperature must be positive, got {tau}")));
    }
    Ok(sa[0])
}

/// Symmetric InfoNCE: mean over pairs of the image→text and text→image
/// cross-entropies of `cos / τ`.
pub fn clip_loss(g: &mut Graph, images: Var, texts: Var, tau: f64) -> Result<Var> {
    let n = check_pair(g, "clip_loss", images, texts, tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let i2t = g.cosine_matrix(images, texts)?;
    let i2t = g.scale(i2t, 1.0 / tau)?;
    let t2i = g.cosine_matrix(texts, images)?;
    let t2i = g.scale(t2i, 1.0 / tau)?;
    let a = g.cross_entropy(i2t, &targets, None)?;
    let b = g.cross_entropy(t2i, &targets, None)?;
    let both = g.add(a, b)?;
    g.mean(both)
}

/// Pairwise sigmoid loss: mean over all `N²` pairs of
/// `−log σ(z_ij (cos_ij / τ − b))` with `z = +1` on the diagonal, `−1` off it.
pub fn siglip_loss(g: &mut Graph, images: Var, texts: Var, tau: f64, bias: f64) -> Result<Var> {
    let n = check_pair(g, "siglip_loss", images, texts, tau)?;
    if !bias.is_finite() {
        return Err(Error::InvalidArgument("siglip_loss: bias must be finite".into()));
    }
    let cos = g.cosine_matrix(images, texts)?;
    let logits = g.scale(cos, 1.0 / tau)?;
    let logits = g.add_scalar(logits, -bias)?;
    let signs: Vec<f64> = (0..n * n)
        .map(|k| if k / n == k % n { 1.0 } else { -1.0 })
        .collect();
    let z = g.constant(Tensor::new(vec![n, n], signs)?)?;
    let signed = g.mul(logits, z)?;
    let ls = g.log_sigmoid(signed)?;
    let m = g.mean(ls)?;
    g.scale(m, -1.0)
}

/// NT-Xent over `2N` anchors: row `i` of each view is positive with row `i`
/// of the other view, self-similarity is left out of every normalizer.
pub fn simclr_loss(g: &mut Graph, view1: Var, view2: Var, tau: f64) -> Result<Var> {
    let n = check_pair(g, "simclr_loss", view1, view2, tau)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("simclr_loss needs at least 2 pairs, got {n}")));
    }
    let z = g.concat(view1, view2, 0)?;
    let sim = g.cosine_matrix(z, z)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    let excluded: Vec<Option<usize>> = (0..2 * n).map(Some).collect();
    let per = g.cross_entropy(logits, &targets, Some(&excluded))?;
    g.mean(per)
}

/// Both terms of the combined image-text and image-image objective.
#[derive(Clone, Copy, Debug)]
pub struct SlipTerms {
    pub total: Var,
    pub clip: Var,
    pub simclr: Var,
}

pub fn slip_loss(
    g: &mut Graph,
    images: Var,
    texts: Var,
    view1: Var,
    view2: Var,
    tau: f64,
) -> Result<SlipTerms> {
    let clip = clip_loss(g, images, texts, tau)?;
    let simclr = simclr_loss(g, view1, view2, tau)?;
    let total = g.add(clip, simclr)?;
    Ok(SlipTerms { total, clip, simclr })
}

fn evaluate(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(a.clone())?;
    let b = g.constant(b.clone())?;
    let loss = f(&mut g, a, b)?;
    Ok(g.scalar_value(loss))
}

pub fn clip_loss_value(images: &Tensor, texts: &Tensor, tau: f64) -> Result<f64> {
    evaluate(images, texts, |g, a, b| clip_loss(g, a, b, tau))
}

pub fn siglip_loss_value(images: &Tensor, texts: &Tensor, tau: f64, bias: f64) -> Result<f64> {
    evaluate(images, texts, |g, a, b| siglip_loss(g, a, b, tau, bias))
}

pub fn simclr_loss_value(view1: &Tensor, view2: &Tensor, tau: f64) -> Result<f64> {
    evaluate(view1, view2, |g, a, b| simclr_loss(g, a, b, tau))
}
