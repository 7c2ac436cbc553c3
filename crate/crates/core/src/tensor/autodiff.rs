//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and enough context to
//! run its vector-Jacobian product later. Nodes are only ever appended, so
//! tape order is a topological order and `backward` simply walks it in
//! reverse. Forward values are never touched by `backward`.
//!
//! Every op checks its output for NaN/Inf and fails instead of propagating.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    MaskedSoftmax {
        a: Var,
        key_lens: Vec<usize>,
    },
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MaskedMeanSeq {
        a: Var,
        lens: Vec<usize>,
    },
    SelectSeq {
        a: Var,
        pos: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    RowDot(Var, Var),
    LogSigmoid(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SplitHeads {
        a: Var,
        offset: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        heads: usize,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect())?;
        let rg = self.rg(a);
        self.push(name, value, op, rg)
    }

    /// `op(a) · op(b)`. Without transposition `a` may have any number of
    /// leading axes (flattened into rows); `b` is always a matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || (ta && sa.len() != 2) {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let (ar, ac) = (va.rows(), va.cols());
        let ma = MatRef::row_major(va.data(), ar, ac);
        let ma = if ta { ma.t() } else { ma };
        let mb = MatRef::row_major(vb.data(), sb[0], sb[1]);
        let mb = if tb { mb.t() } else { mb };
        if ma.cols != mb.rows {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        let mut out = vec![0.0; ma.rows * mb.cols];
        gemm(ma, mb, 0.0, &mut out);
        let mut shape = if ta { vec![ma.rows] } else { sa[..sa.len() - 1].to_vec() };
        shape.push(mb.cols);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over the leading axis: `[G,m,k] · [G,k,n]`, or
    /// `[G,m,k] · [G,n,k]ᵀ` when `tb`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if bk != k {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (tb={tb})")));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; g * m * n];
        let b_block = sb[1] * sb[2];
        for gi in 0..g {
            let ma = MatRef::row_major(&va[gi * m * k..(gi + 1) * m * k], m, k);
            let mb = MatRef::row_major(&vb[gi * b_block..(gi + 1) * b_block], sb[1], sb[2]);
            let mb = if tb { mb.t() } else { mb };
            gemm(ma, mb, 0.0, &mut out[gi * m * n..(gi + 1) * m * n]);
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("batch_matmul", value, Op::BatchMatMul { a, b, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    fn broadcast_check(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(name, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add_broadcast", a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let n = vb.len();
        let data = va.data().iter().enumerate().map(|(i, x)| x + vb[i % n]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add_broadcast", value, Op::AddBroadcast(a, b), rg)
    }

    /// `a ⊙ b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul_broadcast", a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let n = vb.len();
        let data = va.data().iter().enumerate().map(|(i, x)| x * vb[i % n]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul_broadcast", value, Op::MulBroadcast(a, b), rg)
    }

    /// Row lookup: `table[ids[i]]`, reshaped to `out_shape` (whose last
    /// axis must equal the table width).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", vt.shape())));
        }
        let (rows, width) = (vt.shape()[0], vt.shape()[1]);
        let numel: usize = out_shape.iter().product();
        if out_shape.last() != Some(&width) || numel != ids.len() * width {
            return Err(Error::shape(
                "gather_rows",
                format!("{} ids of width {width} into {out_shape:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(numel);
        for &i in ids {
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(out_shape.to_vec(), data)?;
        let rg = self.rg(table);
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("softmax", value, Op::Softmax(a), rg)
    }

    /// Softmax over the last axis of a `[G, Tq, Tk]` tensor restricted to
    /// the first `key_lens[g]` keys of each group. Masked entries are 0.
    pub fn masked_softmax(&mut self, a: Var, key_lens: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || s[0] != key_lens.len() || key_lens.iter().any(|&l| l == 0 || l > s[2]) {
            return Err(Error::shape(
                "masked_softmax",
                format!("{s:?} with key lengths {key_lens:?}"),
            ));
        }
        let (tq, tk) = (s[1], s[2]);
        let mut data = va.data().to_vec();
        for (g, block) in data.chunks_mut(tq * tk).enumerate() {
            let len = key_lens[g];
            for row in block.chunks_mut(tk) {
                softmax_in_place(&mut row[..len]);
                row[len..].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let value = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(a);
        self.push(
            "masked_softmax",
            value,
            Op::MaskedSoftmax {
                a,
                key_lens: key_lens.to_vec(),
            },
            rg,
        )
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("layer_norm", value, Op::LayerNorm { a, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "gelu",
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    /// Mean over the sequence axis of `[B, T, D]`, using the first
    /// `lens[b]` positions of each batch item.
    pub fn masked_mean_seq(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || s[0] != lens.len() || lens.iter().any(|&l| l == 0 || l > s[1]) {
            return Err(Error::shape("masked_mean_seq", format!("{s:?} with lengths {lens:?}")));
        }
        let (t, d) = (s[1], s[2]);
        let mut out = vec![0.0; s[0] * d];
        for (b, &len) in lens.iter().enumerate() {
            let o = &mut out[b * d..(b + 1) * d];
            for p in 0..len {
                let row = &va.data()[(b * t + p) * d..(b * t + p + 1) * d];
                o.iter_mut().zip(row).for_each(|(x, y)| *x += y);
            }
            o.iter_mut().for_each(|x| *x /= len as f64);
        }
        let value = Tensor::new(vec![s[0], d], out)?;
        let rg = self.rg(a);
        self.push(
            "masked_mean_seq",
            value,
            Op::MaskedMeanSeq {
                a,
                lens: lens.to_vec(),
            },
            rg,
        )
    }

    /// Mean over the sequence axis of `[B, T, D]`.
    pub fn mean_seq(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("mean_seq", format!("{s:?}")));
        }
        self.masked_mean_seq(a, &vec![s[1]; s[0]])
    }

    /// Picks sequence position `pos` of `[B, T, D]`, giving `[B, D]`.
    pub fn select_seq(&mut self, a: Var, pos: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::shape("select_seq", format!("{s:?} at {pos}")));
        }
        let (t, d) = (s[1], s[2]);
        let mut out = Vec::with_capacity(s[0] * d);
        for b in 0..s[0] {
            out.extend_from_slice(&va.data()[(b * t + pos) * d..(b * t + pos + 1) * d]);
        }
        let value = Tensor::new(vec![s[0], d], out)?;
        let rg = self.rg(a);
        self.push("select_seq", value, Op::SelectSeq { a, pos }, rg)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?} on axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let ia = self.value(a).numel() / outer;
        let ib = self.value(b).numel() / outer;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&db[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat", value, Op::Concat { a, b, axis }, rg)
    }

    /// Divides each row (last axis) by its L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        let mut norms = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm { op: "l2_normalize_rows" });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { a, norms }, rg)
    }

    /// Row-wise dot product of two equally shaped tensors; one value per row.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let out: Vec<f64> = va
            .data()
            .chunks(c)
            .zip(vb.data().chunks(c))
            .map(|(x, y)| super::dot(x, y))
            .collect();
        let value = Tensor::new(vec![out.len()], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("row_dot", value, Op::RowDot(a, b), rg)
    }

    /// Cosine similarity of corresponding rows.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        self.row_dot(na, nb)
    }

    /// Cosine similarity of all row pairs: `[n, d] × [m, d] → [n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        self.matmul_t(na, nb, false, true)
    }

    /// `log σ(x)`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Per-row cross-entropy `logsumexp(row) − row[target]` of `[n, c]`
    /// logits. Columns listed in `excluded` (one optional column per row)
    /// are left out of the normalizer.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: Option<&[Option<usize>]>,
    ) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != targets.len() || excluded.is_some_and(|e| e.len() != s[0]) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{s:?} with {} targets", targets.len()),
            ));
        }
        let c = s[1];
        let mut probs = vl.data().to_vec();
        let mut losses = Vec::with_capacity(s[0]);
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[i];
            let skip = excluded.and_then(|e| e[i]);
            if t >= c || skip == Some(t) {
                return Err(Error::InvalidArgument(format!(
                    "cross_entropy: target {t} invalid for row {i}"
                )));
            }
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != skip)
                .map(|(_, x)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if Some(j) == skip {
                    *x = 0.0;
                } else {
                    *x = (*x - max).exp();
                    total += *x;
                }
            }
            let target_logit = vl.data()[i * c + t];
            losses.push(max + total.ln() - target_logit);
            row.iter_mut().for_each(|x| *x /= total);
        }
        let value = Tensor::new(vec![s[0]], losses)?;
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Takes `heads * dh` columns starting at `offset` from `[B, T, C]` and
    /// splits them into `[B * heads, T, dh]`.
    pub fn split_heads(&mut self, a: Var, offset: usize, heads: usize, dh: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || offset + heads * dh > s[2] {
            return Err(Error::shape("split_heads", format!("{s:?} offset {offset}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * heads * t * dh);
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let start = (bi * t + ti) * c + offset + h * dh;
                    out.extend_from_slice(&va.data()[start..start + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b * heads, t, dh], out)?;
        let rg = self.rg(a);
        self.push("split_heads", value, Op::SplitHeads { a, offset, heads }, rg)
    }

    /// Inverse of [`Graph::split_heads`]: `[B * heads, T, dh] → [B, T, heads * dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 3 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", format!("{s:?} / {heads}")));
        }
        let (b, t, dh) = (s[0] / heads, s[1], s[2]);
        let c = heads * dh;
        let mut out = vec![0.0; b * t * c];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * c + h * dh;
                    out[dst..dst + dh].copy_from_slice(&va.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b, t, c], out)?;
        let rg = self.rg(a);
        self.push("merge_heads", value, Op::MergeHeads { a, heads }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push_unchecked(value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    op: op_name(&self.nodes[i].op),
                });
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (ar, ac) = (va.rows(), va.cols());
                let (br, bc) = (vb.shape()[0], vb.shape()[1]);
                let ma = MatRef::row_major(va.data(), ar, ac);
                let mb = MatRef::row_major(vb.data(), br, bc);
                let opa = if *ta { ma.t() } else { ma };
                let opb = if *tb { mb.t() } else { mb };
                let dc = MatRef::row_major(g, opa.rows, opb.cols);
                if self.rg(*a) {
                    let ga = accumulate(&mut grads[a.0], va.numel());
                    if *ta {
                        gemm(opb, dc.t(), 1.0, ga);
                    } else {
                        gemm(dc, opb.t(), 1.0, ga);
                    }
                }
                if self.rg(*b) {
                    let gb = accumulate(&mut grads[b.0], vb.numel());
                    if *tb {
                        gemm(dc.t(), opa, 1.0, gb);
                    } else {
                        gemm(opa.t(), dc, 1.0, gb);
                    }
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let sa = va.shape();
                let sb = vb.shape();
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let b_block = sb[1] * sb[2];
                if self.rg(*a) {
                    let ga = accumulate(&mut grads[a.0], va.numel());
                    for gi in 0..groups {
                        let dc = MatRef::row_major(&g[gi * m * n..(gi + 1) * m * n], m, n);
                        let mb = MatRef::row_major(&vb.data()[gi * b_block..(gi + 1) * b_block], sb[1], sb[2]);
                        let opb = if *tb { mb.t() } else { mb };
                        gemm(dc, opb.t(), 1.0, &mut ga[gi * m * k..(gi + 1) * m * k]);
                    }
                }
                if self.rg(*b) {
                    let gb = accumulate(&mut grads[b.0], vb.numel());
                    for gi in 0..groups {
                        let dc = MatRef::row_major(&g[gi * m * n..(gi + 1) * m * n], m, n);
                        let ma = MatRef::row_major(&va.data()[gi * m * k..(gi + 1) * m * k], m, k);
                        let dst = &mut gb[gi * b_block..(gi + 1) * b_block];
                        if *tb {
                            gemm(dc.t(), ma, 1.0, dst);
                        } else {
                            gemm(ma.t(), dc, 1.0, dst);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_with(*a, grads, |d| add_into(d, g));
                self.acc_with(*b, grads, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, grads, |d| add_into(d, g));
                self.acc_with(*b, grads, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc_with(*a, grads, |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((x, gy), y)| *x += gy * y)
                });
                self.acc_with(*b, grads, |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((x, gy), y)| *x += gy * y)
                });
            }
            Op::Scale(a, s) => {
                self.acc_with(*a, grads, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc_with(*a, grads, |d| add_into(d, g));
            }
            Op::AddBroadcast(a, b) => {
                self.acc_with(*a, grads, |d| add_into(d, g));
                self.acc_with(*b, grads, |d| {
                    let n = d.len();
                    for (i, gy) in g.iter().enumerate() {
                        d[i % n] += gy;
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let n = vb.len();
                self.acc_with(*a, grads, |d| {
                    for (i, (x, gy)) in d.iter_mut().zip(g).enumerate() {
                        *x += gy * vb[i % n];
                    }
                });
                self.acc_with(*b, grads, |d| {
                    for (i, gy) in g.iter().enumerate() {
                        d[i % n] += gy * va[i];
                    }
                });
            }
            Op::Gather { table, ids } => {
                let w = self.value(*table).cols();
                self.acc_with(*table, grads, |d| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * w..(id + 1) * w], &g[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                self.acc_with(*a, grads, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        softmax_backward(dr, yr, gr);
                    }
                });
            }
            Op::MaskedSoftmax { a, key_lens } => {
                let s = out.shape();
                let (tq, tk) = (s[1], s[2]);
                self.acc_with(*a, grads, |d| {
                    for (gi, &len) in key_lens.iter().enumerate() {
                        for q in 0..tq {
                            let off = (gi * tq + q) * tk;
                            softmax_backward(
                                &mut d[off..off + len],
                                &out.data()[off..off + len],
                                &g[off..off + len],
                            );
                        }
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let c = out.cols();
                self.acc_with(*a, grads, |d| {
                    for (r, ((dr, yr), gr)) in d
                        .chunks_mut(c)
                        .zip(out.data().chunks(c))
                        .zip(g.chunks(c))
                        .enumerate()
                    {
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy = super::dot(gr, yr) / c as f64;
                        for ((x, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += inv_std[r] * (gy - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc_with(*a, grads, |d| {
                    for ((x, gy), xi) in d.iter_mut().zip(g).zip(va) {
                        let u = GELU_C * (xi + GELU_A * xi * xi * xi);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                        *x += gy * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                    }
                });
            }
            Op::MaskedMeanSeq { a, lens } => {
                let s = self.shape(*a);
                let (t, dd) = (s[1], s[2]);
                self.acc_with(*a, grads, |d| {
                    for (b, &len) in lens.iter().enumerate() {
                        let gb = &g[b * dd..(b + 1) * dd];
                        for p in 0..len {
                            let dst = &mut d[(b * t + p) * dd..(b * t + p + 1) * dd];
                            dst.iter_mut().zip(gb).for_each(|(x, y)| *x += y / len as f64);
                        }
                    }
                });
            }
            Op::SelectSeq { a, pos } => {
                let s = self.shape(*a);
                let (t, dd) = (s[1], s[2]);
                self.acc_with(*a, grads, |d| {
                    for b in 0..s[0] {
                        let off = (b * t + pos) * dd;
                        add_into(&mut d[off..off + dd], &g[b * dd..(b + 1) * dd]);
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let outer: usize = self.shape(*a)[..*axis].iter().product();
                let ia = self.value(*a).numel() / outer;
                let ib = self.value(*b).numel() / outer;
                self.acc_with(*a, grads, |d| {
                    for o in 0..outer {
                        let src = o * (ia + ib);
                        add_into(&mut d[o * ia..(o + 1) * ia], &g[src..src + ia]);
                    }
                });
                self.acc_with(*b, grads, |d| {
                    for o in 0..outer {
                        let src = o * (ia + ib) + ia;
                        add_into(&mut d[o * ib..(o + 1) * ib], &g[src..src + ib]);
                    }
                });
            }
            Op::L2NormalizeRows { a, norms } => {
                let c = out.cols();
                self.acc_with(*a, grads, |d| {
                    for (r, ((dr, yr), gr)) in d
                        .chunks_mut(c)
                        .zip(out.data().chunks(c))
                        .zip(g.chunks(c))
                        .enumerate()
                    {
                        let proj = super::dot(yr, gr);
                        for ((x, gy), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x += (gy - y * proj) / norms[r];
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).cols();
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc_with(*a, grads, |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i / c] * vb[i];
                    }
                });
                self.acc_with(*b, grads, |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += g[i / c] * va[i];
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                self.acc_with(*a, grads, |d| {
                    for ((x, gy), xi) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * sigmoid(-xi);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                self.acc_with(*logits, grads, |d| {
                    for (i, (dr, pr)) in d.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (x, p) in dr.iter_mut().zip(pr) {
                            *x += g[i] * p;
                        }
                        dr[targets[i]] -= g[i];
                    }
                });
            }
            Op::Sum(a) => {
                self.acc_with(*a, grads, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc_with(*a, grads, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SplitHeads { a, offset, heads } => {
                let s = self.shape(*a);
                let (b, t, c) = (s[0], s[1], s[2]);
                let dh = out.shape()[2];
                self.acc_with(*a, grads, |d| {
                    let mut src = 0;
                    for bi in 0..b {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let start = (bi * t + ti) * c + offset + h * dh;
                                add_into(&mut d[start..start + dh], &g[src..src + dh]);
                                src += dh;
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, heads } => {
                let s = self.shape(*a);
                let (t, dh) = (s[1], s[2]);
                let b = s[0] / heads;
                let c = heads * dh;
                self.acc_with(*a, grads, |d| {
                    for bi in 0..b {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                let src = (bi * t + ti) * c + h * dh;
                                add_into(&mut d[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc_with(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if self.rg(v) {
            let len = self.value(v).numel();
            f(accumulate(&mut grads[v.0], len));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn softmax_backward(dst: &mut [f64], y: &[f64], g: &[f64]) {
    let inner = super::dot(y, g);
    for ((x, yi), gi) in dst.iter_mut().zip(y).zip(g) {
        *x += yi * (gi - inner);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddBroadcast(..) => "add_broadcast",
        Op::MulBroadcast(..) => "mul_broadcast",
        Op::Gather { .. } => "gather_rows",
        Op::Softmax(..) => "softmax",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(..) => "gelu",
        Op::MaskedMeanSeq { .. } => "masked_mean_seq",
        Op::SelectSeq { .. } => "select_seq",
        Op::Concat { .. } => "concat",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::RowDot(..) => "row_dot",
        Op::LogSigmoid(..) => "log_sigmoid",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::Reshape(..) => "reshape",
    }
}
