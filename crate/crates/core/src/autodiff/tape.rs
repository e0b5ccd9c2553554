//! Wengert-list tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use super::array::Array;
use super::params::ParameterStore;
use super::real::{gemm, MatRef, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a stride-1 "same" convolution over `[channels, height, width]`.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    AddRowVector { x: Var, bias: Var },
    ScaleShiftCols { x: Var, gamma: Var, beta: Var },
    ScaleShiftRows { x: Var, gamma: Var, beta: Var },
    LeakyRelu { x: Var, slope: F },
    Relu(Var),
    Softmax { x: Var },
    TopK { x: Var, keep: Vec<bool> },
    OuterSum { s: Var, t: Var },
    NormalizeRows { x: Var, inv_std: Vec<F> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<F> },
    AvgPoolLast { x: Var, factor: usize },
    MelMean(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, eps: F, probs: Vec<F> },
}

struct Node<F> {
    value: Array<F>,
    grad: Option<Array<F>>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<String>,
}

/// A single-threaded computation graph.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding `value`; gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Array<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a named parameter; see [`Graph::accumulate_into`].
    pub fn param(&mut self, store: &ParameterStore<F>, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let v = self.leaf(value, true);
        self.nodes[v.0].param = Some(name.to_owned());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected 2-D input, got {:?}", self.shape(v))))
    }

    // ---------------------------------------------------------------- forward

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents {k} and {k2} differ"),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        let mut ma = MatRef::new(self.value(a).data(), ar, ac);
        let mut mb = MatRef::new(self.value(b).data(), br, bc);
        if ta {
            ma = ma.t();
        }
        if tb {
            mb = mb.t();
        }
        gemm(ma, mb, F::zero(), &mut out);
        let value = Array::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ`, the usual dense-layer product with `w` stored `[out, in]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, w, false, true)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Array::new(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Adds a constant array (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: &Array<F>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let mut value = self.value(x).clone();
        value.add_assign(c);
        Ok(self.push(value, Op::AddConst(x), &[x]))
    }

    /// `x[n, m] + bias[m]`.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.dims2(x, "add_row_vector")?;
        if self.value(bias).len() != m {
            return Err(Error::shape(
                "add_row_vector",
                format!("bias of {} for {m} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(m) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        Ok(self.push(value, Op::AddRowVector { x, bias }, &[x, bias]))
    }

    /// `x[n, m] * gamma[m] + beta[m]`.
    pub fn scale_shift_cols(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, m) = self.dims2(x, "scale_shift_cols")?;
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::shape("scale_shift_cols", "gain/shift length"));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(m) {
            for j in 0..m {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        Ok(self.push(value, Op::ScaleShiftCols { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Per-leading-index affine map: `x[c, ..] * gamma[c] + beta[c]`.
    pub fn scale_shift_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("scale_shift_rows", "gain/shift length"));
        }
        let inner = self.value(x).len() / c;
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        for (ci, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            for v in chunk {
                *v = *v * g[ci] + b[ci];
            }
        }
        Ok(self.push(value, Op::ScaleShiftRows { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        if !(slope > F::zero() && slope < F::one()) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope must lie in (0, 1), got {slope}"
            )));
        }
        self.value(x).ensure_finite("leaky_relu input")?;
        let value = self
            .value(x)
            .map(|v| if v >= F::zero() { v } else { v * slope });
        Ok(self.push(value, Op::LeakyRelu { x, slope }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(F::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only attends to columns `0..=i`.
    pub fn softmax_rows_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        self.value(x).ensure_finite("softmax input")?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &src[i * c..i * c + width];
            let dst = &mut out[i * c..i * c + width];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let value = Array::new(&[r, c], out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Keeps the `min(k, cols)` largest entries of each row and zeroes the
    /// rest. Equal values are resolved in favour of the lower column index.
    pub fn topk_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        if k < 1 {
            return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
        }
        let (r, c) = self.dims2(x, "topk_rows")?;
        let keep = topk_keep_mask(self.value(x).data(), r, c, k);
        let src = self.value(x).data();
        let data = src
            .iter()
            .zip(&keep)
            .map(|(&v, &kept)| if kept { v } else { F::zero() })
            .collect();
        let value = Array::new(&[r, c], data)?;
        Ok(self.push(value, Op::TopK { x, keep }, &[x]))
    }

    /// `out[i, j] = s[i] + t[j]`.
    pub fn outer_sum(&mut self, s: Var, t: Var) -> Result<Var> {
        let sv = self.value(s).data().to_vec();
        let tv = self.value(t).data();
        let mut data = Vec::with_capacity(sv.len() * tv.len());
        for &si in &sv {
            data.extend(tv.iter().map(|&tj| si + tj));
        }
        let value = Array::new(&[sv.len(), tv.len()], data)?;
        Ok(self.push(value, Op::OuterSum { s, t }, &[s, t]))
    }

    /// Zero-mean, unit-variance rows (layer normalisation without affine).
    pub fn normalize_rows(&mut self, x: Var, eps: F) -> Result<Var> {
        let (r, c) = self.dims2(x, "normalize_rows")?;
        let n = F::of(c as f64);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let s = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        Ok(self.push(out, Op::NormalizeRows { x, inv_std }, &[x]))
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `x` is `[c_in, height, width]`, `w` is `[c_out, c_in, kh, kw]` with odd
    /// kernel extents.
    pub fn conv2d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[c_in, height, width], &[c_out, wc_in, kh, kw]) = (xs, ws) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}"),
            ));
        };
        if wc_in != c_in || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            height,
            width,
            kh,
            kw,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![F::zero(); c_out * geom.pixels()];
        gemm(
            MatRef::new(self.value(w).data(), c_out, geom.patch()),
            MatRef::new(&cols, geom.patch(), geom.pixels()),
            F::zero(),
            &mut out,
        );
        let value = Array::new(&[c_out, height, width], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// Average pooling over the last axis in windows of `factor`; a trailing
    /// partial window averages the frames it has.
    pub fn avg_pool_last(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("pool factor must be >= 1".into()));
        }
        let shape = self.shape(x).to_vec();
        let w = *shape.last().expect("arrays have at least one axis");
        let wo = w.div_ceil(factor);
        let rows = self.value(x).len() / w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * wo);
        for r in 0..rows {
            let row = &src[r * w..(r + 1) * w];
            for o in 0..wo {
                let win = &row[o * factor..((o + 1) * factor).min(w)];
                out.push(win.iter().copied().sum::<F>() / F::of(win.len() as f64));
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty shape") = wo;
        let value = Array::new(&out_shape, out)?;
        Ok(self.push(value, Op::AvgPoolLast { x, factor }, &[x]))
    }

    /// Collapses `[channels, bands, time]` to `[time, channels]` by averaging
    /// over the band axis.
    pub fn band_mean(&mut self, x: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(Error::shape("band_mean", format!("{:?}", self.shape(x))));
        };
        let src = self.value(x).data();
        let mut out = vec![F::zero(); w * c];
        let inv = F::one() / F::of(h as f64);
        for ci in 0..c {
            for hi in 0..h {
                let row = &src[(ci * h + hi) * w..(ci * h + hi + 1) * w];
                for (t, &v) in row.iter().enumerate() {
                    out[t * c + ci] = out[t * c + ci] + v;
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let value = Array::new(&[w, c], out)?;
        Ok(self.push(value, Op::MelMean(x), &[x]))
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { index: id, size: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Array::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {c} columns"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let value = Array::new(&[r, end - start], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols parts"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Array::new(&[r, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Weighted sum over rows of label-smoothed cross-entropy.
    ///
    /// Row `n` contributes `weights[n] * -Σ_v q(v) log p(v)` where `q` puts
    /// `1 - eps` on the target and `eps / (V - 1)` on every other class.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[F],
        eps: F,
    ) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if !(eps >= F::zero() && eps < F::one()) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing must lie in [0, 1), got {eps}"
            )));
        }
        if eps > F::zero() && v < 2 {
            return Err(Error::InvalidArgument(
                "label smoothing needs at least two classes".into(),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { index: bad, size: v });
        }
        self.value(logits).ensure_finite("logits")?;
        let off = if v > 1 {
            eps / F::of((v - 1) as f64)
        } else {
            F::zero()
        };
        let on = F::one() - eps;
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        for i in 0..n {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            let mut loss = F::zero();
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                probs[i * v + j] = logp.exp();
                let q = if j == targets[i] { on } else { off };
                if q > F::zero() {
                    loss = loss - q * logp;
                }
            }
            total = total + weights[i] * loss;
        }
        let value = Array::scalar(total);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                eps,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean label-smoothed cross-entropy over rows with `mask[n] == true`.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        eps: F,
    ) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("unmasked target positions"));
        }
        let w = F::one() / F::of(count as f64);
        let weights: Vec<F> = mask
            .iter()
            .map(|&m| if m { w } else { F::zero() })
            .collect();
        self.cross_entropy_weighted(logits, targets, &weights, eps)
    }

    // --------------------------------------------------------------- backward

    /// Back-propagates from a scalar node, accumulating into every node that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Array::full(self.shape(loss), F::one());
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Adds gradients of parameter-bound leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParameterStore<F>) -> Result<()> {
        for node in &self.nodes {
            if let (Some(name), Some(g)) = (&node.param, &node.grad) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Array<F>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot(&mut self, v: Var) -> &mut Array<F> {
        let node = &mut self.nodes[v.0];
        node.grad
            .get_or_insert_with(|| Array::zeros(node.value.shape()))
    }

    fn backprop(&mut self, i: usize, op: &Op<F>, g: &Array<F>) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(a).dims2().expect("2-D");
                let (br, bc) = self.value(b).dims2().expect("2-D");
                let (m, n) = (out_shape[0], out_shape[1]);
                let gm = MatRef::new(g.data(), m, n);
                if self.needs(a) {
                    let mb = MatRef::new(self.value(b).data(), br, bc);
                    let mb = if tb { mb.t() } else { mb };
                    let mut da = vec![F::zero(); ar * ac];
                    if ta {
                        gemm(mb, gm.t(), F::zero(), &mut da);
                    } else {
                        gemm(gm, mb.t(), F::zero(), &mut da);
                    }
                    let da = Array::new(&[ar, ac], da).expect("shape");
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let ma = MatRef::new(self.value(a).data(), ar, ac);
                    let ma = if ta { ma.t() } else { ma };
                    let mut db = vec![F::zero(); br * bc];
                    if tb {
                        gemm(gm.t(), ma, F::zero(), &mut db);
                    } else {
                        gemm(ma.t(), gm, F::zero(), &mut db);
                    }
                    let db = Array::new(&[br, bc], db).expect("shape");
                    self.accumulate(b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, g.clone());
                }
                if self.needs(b) {
                    self.accumulate(b, g.clone());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = zip_map(g, self.value(b), |gg, y| gg * y);
                    self.accumulate(a, d);
                }
                if self.needs(b) {
                    let d = zip_map(g, self.value(a), |gg, x| gg * x);
                    self.accumulate(b, d);
                }
            }
            &Op::Scale(x, factor) => {
                if self.needs(x) {
                    self.accumulate(x, g.map(|v| v * factor));
                }
            }
            &Op::AddConst(x) => {
                if self.needs(x) {
                    self.accumulate(x, g.clone());
                }
            }
            &Op::AddRowVector { x, bias } => {
                if self.needs(x) {
                    self.accumulate(x, g.clone());
                }
                if self.needs(bias) {
                    let m = out_shape[1];
                    let mut db = vec![F::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let shape = self.shape(bias).to_vec();
                    self.accumulate(bias, Array::new(&shape, db).expect("shape"));
                }
            }
            &Op::ScaleShiftCols { x, gamma, beta } => {
                let m = out_shape[1];
                if self.needs(x) {
                    let gam = self.value(gamma).data().to_vec();
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(m) {
                        for (v, &gg) in row.iter_mut().zip(&gam) {
                            *v = *v * gg;
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.needs(gamma) {
                    let mut dg = vec![F::zero(); m];
                    for (grow, xrow) in g.data().chunks(m).zip(self.value(x).data().chunks(m)) {
                        for j in 0..m {
                            dg[j] = dg[j] + grow[j] * xrow[j];
                        }
                    }
                    let shape = self.shape(gamma).to_vec();
                    self.accumulate(gamma, Array::new(&shape, dg).expect("shape"));
                }
                if self.needs(beta) {
                    let mut db = vec![F::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let shape = self.shape(beta).to_vec();
                    self.accumulate(beta, Array::new(&shape, db).expect("shape"));
                }
            }
            &Op::ScaleShiftRows { x, gamma, beta } => {
                let c = out_shape[0];
                let inner = g.len() / c;
                if self.needs(x) {
                    let gam = self.value(gamma).data().to_vec();
                    let mut dx = g.clone();
                    for (ci, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        for v in chunk {
                            *v = *v * gam[ci];
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.needs(gamma) {
                    let dg: Vec<F> = g
                        .data()
                        .chunks(inner)
                        .zip(self.value(x).data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let shape = self.shape(gamma).to_vec();
                    self.accumulate(gamma, Array::new(&shape, dg).expect("shape"));
                }
                if self.needs(beta) {
                    let db: Vec<F> = g.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
                    let shape = self.shape(beta).to_vec();
                    self.accumulate(beta, Array::new(&shape, db).expect("shape"));
                }
            }
            &Op::LeakyRelu { x, slope } => {
                if self.needs(x) {
                    let d = zip_map(g, self.value(x), |gg, v| {
                        if v > F::zero() {
                            gg
                        } else {
                            gg * slope
                        }
                    });
                    self.accumulate(x, d);
                }
            }
            &Op::Relu(x) => {
                if self.needs(x) {
                    let d = zip_map(g, self.value(x), |gg, v| {
                        if v > F::zero() {
                            gg
                        } else {
                            F::zero()
                        }
                    });
                    self.accumulate(x, d);
                }
            }
            &Op::Softmax { x } => {
                if self.needs(x) {
                    let c = out_shape[1];
                    let y = self.nodes[i].value.data();
                    let mut dx = vec![F::zero(); y.len()];
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.data().chunks(c)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let dx = Array::new(&out_shape, dx).expect("shape");
                    self.accumulate(x, dx);
                }
            }
            Op::TopK { x, keep } => {
                if self.needs(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(keep)
                        .map(|(&v, &k)| if k { v } else { F::zero() })
                        .collect();
                    self.accumulate(*x, Array::new(&out_shape, data).expect("shape"));
                }
            }
            &Op::OuterSum { s, t } => {
                let (r, c) = (out_shape[0], out_shape[1]);
                if self.needs(s) {
                    let ds: Vec<F> = g.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
                    let shape = self.shape(s).to_vec();
                    self.accumulate(s, Array::new(&shape, ds).expect("shape"));
                }
                if self.needs(t) {
                    let mut dt = vec![F::zero(); c];
                    for row in g.data().chunks(c).take(r) {
                        for (d, &v) in dt.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let shape = self.shape(t).to_vec();
                    self.accumulate(t, Array::new(&shape, dt).expect("shape"));
                }
            }
            Op::NormalizeRows { x, inv_std } => {
                if self.needs(*x) {
                    let c = out_shape[1];
                    let n = F::of(c as f64);
                    let y = self.nodes[i].value.data();
                    let mut dx = vec![F::zero(); y.len()];
                    for (row, ((dr, yr), gr)) in dx
                        .chunks_mut(c)
                        .zip(y.chunks(c))
                        .zip(g.data().chunks(c))
                        .enumerate()
                    {
                        let mean_g = gr.iter().copied().sum::<F>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for j in 0..c {
                            dr[j] = inv_std[row] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    let dx = Array::new(&out_shape, dx).expect("shape");
                    self.accumulate(*x, dx);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (x, w) = (*x, *w);
                let gm = MatRef::new(g.data(), geom.c_out, geom.pixels());
                if self.needs(w) {
                    let mut dw = vec![F::zero(); geom.c_out * geom.patch()];
                    gemm(gm, MatRef::new(cols, geom.patch(), geom.pixels()).t(), F::zero(), &mut dw);
                    let shape = self.shape(w).to_vec();
                    self.accumulate(w, Array::new(&shape, dw).expect("shape"));
                }
                if self.needs(x) {
                    let mut dcols = vec![F::zero(); geom.patch() * geom.pixels()];
                    gemm(
                        MatRef::new(self.value(w).data(), geom.c_out, geom.patch()).t(),
                        gm,
                        F::zero(),
                        &mut dcols,
                    );
                    let geom = *geom;
                    col2im_add(&dcols, &geom, self.grad_slot(x).data_mut());
                }
            }
            &Op::AvgPoolLast { x, factor } => {
                if self.needs(x) {
                    let w = *self.shape(x).last().expect("nonempty");
                    let wo = *out_shape.last().expect("nonempty");
                    let dst = self.grad_slot(x).data_mut();
                    for (r, grow) in g.data().chunks(wo).enumerate() {
                        for (o, &gv) in grow.iter().enumerate() {
                            let lo = o * factor;
                            let hi = ((o + 1) * factor).min(w);
                            let share = gv / F::of((hi - lo) as f64);
                            for d in &mut dst[r * w + lo..r * w + hi] {
                                *d = *d + share;
                            }
                        }
                    }
                }
            }
            &Op::MelMean(x) => {
                if self.needs(x) {
                    let (c, h, w) = {
                        let s = self.shape(x);
                        (s[0], s[1], s[2])
                    };
                    let inv = F::one() / F::of(h as f64);
                    let gd = g.data();
                    let dst = self.grad_slot(x).data_mut();
                    for ci in 0..c {
                        for hi in 0..h {
                            let base = (ci * h + hi) * w;
                            for t in 0..w {
                                dst[base + t] = dst[base + t] + gd[t * c + ci] * inv;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = out_shape[1];
                    let dst = self.grad_slot(*table).data_mut();
                    for (row, &id) in g.data().chunks(d).zip(ids) {
                        for (t, &v) in dst[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *t = *t + v;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let c = self.shape(x)[1];
                    let width = out_shape[1];
                    let dst = self.grad_slot(x).data_mut();
                    for (r, row) in g.data().chunks(width).enumerate() {
                        for (t, &v) in dst[r * c + start..r * c + start + width].iter_mut().zip(row) {
                            *t = *t + v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let dst = self.grad_slot(p).data_mut();
                        for (r, row) in g.data().chunks(total).enumerate() {
                            for (t, &v) in dst[r * w..(r + 1) * w].iter_mut().zip(&row[offset..offset + w]) {
                                *t = *t + v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Transpose(x) => {
                if self.needs(x) {
                    self.accumulate(x, g.transpose2().expect("2-D"));
                }
            }
            &Op::Sum(x) => {
                if self.needs(x) {
                    let gv = g.data()[0];
                    let shape = self.shape(x).to_vec();
                    self.accumulate(x, Array::full(&shape, gv));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                eps,
                probs,
            } => {
                if self.needs(*logits) {
                    let shape = self.shape(*logits).to_vec();
                    let v = shape[1];
                    let gv = g.data()[0];
                    let on = F::one() - *eps;
                    let off = if v > 1 {
                        *eps / F::of((v - 1) as f64)
                    } else {
                        F::zero()
                    };
                    let mut d = probs.clone();
                    for (n, row) in d.chunks_mut(v).enumerate() {
                        let scale = weights[n] * gv;
                        for (j, p) in row.iter_mut().enumerate() {
                            let q = if j == targets[n] { on } else { off };
                            *p = (*p - q) * scale;
                        }
                    }
                    self.accumulate(*logits, Array::new(&shape, d).expect("shape"));
                }
            }
        }
    }
}

fn zip_map<F: Real>(a: &Array<F>, b: &Array<F>, f: impl Fn(F, F) -> F) -> Array<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape(), data).expect("shapes agree")
}

/// Per row, marks the `min(k, cols)` largest entries; ties keep the lower
/// column index.
pub fn topk_keep_mask<F: Real>(data: &[F], rows: usize, cols: usize, k: usize) -> Vec<bool> {
    let keep_n = k.min(cols);
    let mut keep = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = &data[i * cols..(i + 1) * cols];
        order.clear();
        order.extend(0..cols);
        // Stable sort on descending value keeps ascending index among equals.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &j in &order[..keep_n] {
            keep[i * cols + j] = true;
        }
    }
    keep
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let pixels = g.pixels();
    let mut cols = vec![F::zero(); g.patch() * pixels];
    for ci in 0..g.c_in {
        let plane = &x[ci * pixels..(ci + 1) * pixels];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[r * pixels..(r + 1) * pixels];
                // Output column range whose source column (t + dx - pw) is in bounds.
                let t_lo = pw.saturating_sub(dx);
                let t_hi = (w + pw).saturating_sub(dx).min(w);
                if t_lo >= t_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let src_row = &plane[(sy - ph) * w..(sy - ph + 1) * w];
                    let s_lo = t_lo + dx - pw;
                    let s_hi = t_hi + dx - pw;
                    dst[y * w + t_lo..y * w + t_hi].copy_from_slice(&src_row[s_lo..s_hi]);
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Real>(cols: &[F], g: &ConvGeom, dx_out: &mut [F]) {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let pixels = g.pixels();
    for ci in 0..g.c_in {
        let plane = &mut dx_out[ci * pixels..(ci + 1) * pixels];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[r * pixels..(r + 1) * pixels];
                let t_lo = pw.saturating_sub(dx);
                let t_hi = (w + pw).saturating_sub(dx).min(w);
                if t_lo >= t_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let s_lo = t_lo + dx - pw;
                    let dst_row = &mut plane[(sy - ph) * w + s_lo..(sy - ph) * w + s_lo + (t_hi - t_lo)];
                    for (d, &v) in dst_row.iter_mut().zip(&src[y * w + t_lo..y * w + t_hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}
