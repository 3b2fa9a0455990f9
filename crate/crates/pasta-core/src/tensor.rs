//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! [`Var`] indexes a node. Calling [`Tape::backward`] on a scalar node walks
//! the list in reverse and accumulates gradients for every node that was
//! registered as trainable (or depends on one). Nodes created from frozen
//! inputs are skipped entirely, so e.g. differentiating only with respect to
//! a trigger tensor never pays for weight gradients.
//!
//! All node values are kept in standard (row-major, contiguous) layout; the
//! fused operations below exploit that with flat-slice loops. Matrix products
//! go through `ndarray::linalg::general_mat_mul`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, IxDyn};
use num_traits::Float;

/// Element types the tape supports (`f32` for training, `f64` for the
/// finite-difference suites).
pub trait Scalar:
    Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lossless-enough construction of `F` from an `f64` literal.
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 converts into scalar type")
}

/// Casts an array between scalar types through `f64`.
pub fn cast_array<A: Scalar, B: Scalar>(a: &ArrayD<A>) -> ArrayD<B> {
    a.mapv(|v| fl::<B>(v.to_f64().expect("finite value")))
}

/// Handle to one node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

enum Op<F> {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(Var, Var),
    /// `a + b` where `b` broadcasts over leading axes of `a` (and axes of
    /// size 1); used for positional embeddings.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    /// `a + c·b` (same shape); the building block of weighted loss sums.
    AddScaled(Var, Var, F),
    /// `x·w + b` with `x: [M,K]`, `w: [K,N]`, `b: [N]`.
    Linear { x: Var, w: Var, b: Var },
    /// Batched matmul `α·op(a)·op(b)` over `[B,·,·]` operands with optional
    /// transposes of the trailing two axes.
    Bmm { a: Var, b: Var, ta: bool, tb: bool, alpha: F },
    /// Softmax over the last axis.
    SoftmaxLast(Var),
    /// Layer normalization over the last axis of a 2-D input.
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<F>, rstd: Array1<F> },
    /// GELU in tanh form: `0.5·x·(1 + tanh(√(2/π)(x + 0.044715·x³)))`.
    Gelu(Var),
    /// Mean cross-entropy of logits `[B,K]` against integer labels.
    CrossEntropyMean { logits: Var, labels: Vec<u8>, probs: Array2<F> },
    /// Mean over axis-0 rows of the row's flattened l2 norm.
    L2NormRowsMean { x: Var, norms: Vec<F> },
    Reshape(Var),
    /// Prepends a learned `[1,1,D]` token to `[B,n,D]`, broadcast over B.
    ConcatToken { cls: Var, x: Var },
    /// Extracts token `index` from `[B,T,D]` as `[B,D]`.
    SelectToken { x: Var, index: usize },
    /// `[B,T,D] -> [B·h,T,D/h]`.
    SplitHeads { x: Var, heads: usize },
    /// `[B·h,T,d] -> [B,T,h·d]`.
    MergeHeads { x: Var, heads: usize },
    /// Mean over the head groups of `[B·h,T,S] -> [B,T,S]`.
    MeanHeads { x: Var, heads: usize },
    /// `[B,C,H,W] -> [B, (H/p)·(W/p), C·p·p]`, patch-major rows, `(c,pr,pc)`
    /// within-patch layout.
    ExtractPatches { x: Var, patch: usize },
    /// Adds trigger `t: [C,p,p]` onto one patch per sample of `[B,C,H,W]`.
    InsertTrigger { x: Var, t: Var, locs: Vec<(usize, usize)>, patch: usize },
    /// Slice of the last axis: `[..., K] -> [..., len]` starting at `start`.
    SliceLast { x: Var, start: usize, len: usize },
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`; `None` when `v` was frozen
    /// or unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out (useful to avoid copies in optimizers).
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// One recorded forward computation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn contiguous<F: Scalar>(a: &ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn slice_of<F: Scalar>(a: &ArrayD<F>) -> &[F] {
    a.as_slice().expect("tape values are standard layout")
}

fn view2<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-D value")
}

/// General 2-D matrix multiply `alpha · op(a) · op(b)` with optional
/// transposes, the workhorse behind every matmul in the crate.
pub fn matmul2<F: Scalar>(
    a: ArrayView2<'_, F>,
    ta: bool,
    b: ArrayView2<'_, F>,
    tb: bool,
    alpha: F,
) -> Array2<F> {
    let av = if ta { a.reversed_axes() } else { a };
    let bv = if tb { b.reversed_axes() } else { b };
    assert_eq!(
        av.ncols(),
        bv.nrows(),
        "matmul inner dimensions differ: {:?} x {:?}",
        av.dim(),
        bv.dim()
    );
    let mut out = Array2::zeros((av.nrows(), bv.ncols()));
    general_mat_mul(alpha, &av, &bv, F::zero(), &mut out);
    out
}

/// Sums `g` down to `shape` by collapsing leading extra axes and broadcast
/// (size-1) axes; the adjoint of broadcasting.
fn reduce_to_shape<F: Scalar>(mut g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    let gshape = g.shape().to_vec();
    for (axis, (&gd, &sd)) in gshape.iter().zip(shape).enumerate() {
        if gd != sd {
            assert_eq!(sd, 1, "cannot reduce axis {axis} from {gd} to {sd}");
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(128) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a scalar (0-d or single-element) node.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "node is not a scalar: shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        let value = contiguous(&value);
        self.push(value, Op::Leaf, true)
    }

    /// Registers a frozen input; backward never touches it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        let value = contiguous(&value);
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes differ");
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        assert_eq!(value.shape(), self.value(a).shape(), "broadcast must not grow a");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AddBroadcast(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes differ");
        let value = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: F) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add_scaled shapes differ");
        let value = self.value(a) + &self.value(b).mapv(|v| v * c);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AddScaled(a, b, c), needs)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ndim(), 2, "linear input must be 2-D");
        assert_eq!(wv.ndim(), 2, "linear weight must be 2-D");
        assert_eq!(xv.shape()[1], wv.shape()[0], "linear inner dims differ");
        assert_eq!(bv.shape(), [wv.shape()[1]], "linear bias shape");
        let mut y = matmul2(view2(xv), false, view2(wv), false, F::one());
        let bias = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in y.rows_mut() {
            row += &bias;
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: F) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 3, "bmm lhs must be 3-D");
        assert_eq!(bv.ndim(), 3, "bmm rhs must be 3-D");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch sizes differ");
        let batch = av.shape()[0];
        let (m, k) = if ta {
            (av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[1], av.shape()[2])
        };
        let (kb, n) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(k, kb, "bmm inner dims differ");
        let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let mut oi = out
                .index_axis_mut(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let ai = if ta { ai.reversed_axes() } else { ai };
            let bi = if tb { bi.reversed_axes() } else { bi };
            general_mat_mul(alpha, &ai, &bi, F::zero(), &mut oi);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Bmm { a, b, ta, tb, alpha }, needs)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax input has axes");
        let mut y = xv.clone();
        for row in y.as_slice_mut().unwrap().chunks_mut(n) {
            let mut max = F::neg_infinity();
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(x);
        self.push(y, Op::SoftmaxLast(x), needs)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "layernorm input must be 2-D");
        let (m, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(self.value(gamma).shape(), [d], "layernorm gamma shape");
        assert_eq!(self.value(beta).shape(), [d], "layernorm beta shape");
        let inv_d = F::one() / fl::<F>(d as f64);
        let mut xhat = Array2::<F>::zeros((m, d));
        let mut rstd = Array1::<F>::zeros(m);
        let xs = slice_of(xv);
        let gs = slice_of(self.value(gamma)).to_vec();
        let bs = slice_of(self.value(beta)).to_vec();
        let mut y = Array2::<F>::zeros((m, d));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for r in 0..m {
                let row = &xs[r * d..(r + 1) * d];
                let mut mean = F::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean * inv_d;
                let mut var = F::zero();
                for &v in row {
                    let c = v - mean;
                    var = var + c * c;
                }
                var = var * inv_d;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xh[r * d + j] = h;
                    ys[r * d + j] = h * gs[j] + bs[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(y.into_dyn(), Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c0 = fl::<F>(0.7978845608028654);
        let c1 = fl::<F>(0.044715);
        let half = fl::<F>(0.5);
        let value = self.value(x).mapv(|v| {
            let u = c0 * (v + c1 * v * v * v);
            half * v * (F::one() + u.tanh())
        });
        let needs = self.needs(x);
        self.push(value, Op::Gelu(x), needs)
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[u8]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2, "logits must be 2-D");
        let (bsz, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(bsz, labels.len(), "label count differs from batch size");
        assert!(bsz > 0, "cross entropy over an empty batch");
        let xs = slice_of(lv);
        let mut probs = Array2::<F>::zeros((bsz, k));
        let mut total = F::zero();
        {
            let ps = probs.as_slice_mut().unwrap();
            for r in 0..bsz {
                let row = &xs[r * k..(r + 1) * k];
                let mut max = F::neg_infinity();
                for &v in row {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = F::zero();
                for j in 0..k {
                    let e = (row[j] - max).exp();
                    ps[r * k + j] = e;
                    sum = sum + e;
                }
                let lse = max + sum.ln();
                for j in 0..k {
                    ps[r * k + j] = ps[r * k + j] / sum;
                }
                total = total + (lse - row[usize::from(labels[r])]);
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / fl::<F>(bsz as f64));
        let needs = self.needs(logits);
        self.push(
            value,
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), probs },
            needs,
        )
    }

    pub fn l2_norm_rows_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.shape().first().copied().unwrap_or(1);
        assert!(rows > 0, "l2 norm over zero rows");
        let cols = xv.len() / rows;
        let xs = slice_of(xv);
        let mut norms = Vec::with_capacity(rows);
        let mut total = F::zero();
        for r in 0..rows {
            let mut s = F::zero();
            for &v in &xs[r * cols..(r + 1) * cols] {
                s = s + v * v;
            }
            let n = s.sqrt();
            norms.push(n);
            total = total + n;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / fl::<F>(rows as f64));
        let needs = self.needs(x);
        self.push(value, Op::L2NormRowsMean { x, norms }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch: {:?} -> {:?}",
            xv.shape(),
            shape
        );
        let value = xv
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshapes");
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    pub fn concat_token(&mut self, cls: Var, x: Var) -> Var {
        let (cv, xv) = (self.value(cls), self.value(x));
        assert_eq!(xv.ndim(), 3, "token input must be [B,n,D]");
        let (bsz, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(cv.shape(), [1, 1, d], "class token must be [1,1,D]");
        let mut out = ArrayD::zeros(IxDyn(&[bsz, n + 1, d]));
        let cs = slice_of(cv);
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                let base = b * (n + 1) * d;
                os[base..base + d].copy_from_slice(cs);
                os[base + d..base + (n + 1) * d].copy_from_slice(&xs[b * n * d..(b + 1) * n * d]);
            }
        }
        let needs = self.needs(cls) || self.needs(x);
        self.push(out, Op::ConcatToken { cls, x }, needs)
    }

    pub fn select_token(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "select_token input must be [B,T,D]");
        let (bsz, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(index < t, "token index {index} out of range {t}");
        let mut out = ArrayD::zeros(IxDyn(&[bsz, d]));
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                let src = (b * t + index) * d;
                os[b * d..(b + 1) * d].copy_from_slice(&xs[src..src + d]);
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SelectToken { x, index }, needs)
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "split_heads input must be [B,T,D]");
        let (bsz, t, dm) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(dm % heads, 0, "embed dim not divisible by heads");
        let d = dm / heads;
        let mut out = ArrayD::zeros(IxDyn(&[bsz * heads, t, d]));
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                for h in 0..heads {
                    for tt in 0..t {
                        let src = (b * t + tt) * dm + h * d;
                        let dst = ((b * heads + h) * t + tt) * d;
                        os[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SplitHeads { x, heads }, needs)
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "merge_heads input must be [B·h,T,d]");
        let (bh, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(bh % heads, 0, "batch·heads not divisible by heads");
        let bsz = bh / heads;
        let dm = d * heads;
        let mut out = ArrayD::zeros(IxDyn(&[bsz, t, dm]));
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                for h in 0..heads {
                    for tt in 0..t {
                        let src = ((b * heads + h) * t + tt) * d;
                        let dst = (b * t + tt) * dm + h * d;
                        os[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MergeHeads { x, heads }, needs)
    }

    pub fn mean_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "mean_heads input must be [B·h,T,S]");
        let (bh, t, s) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(bh % heads, 0, "batch·heads not divisible by heads");
        let bsz = bh / heads;
        let inv = F::one() / fl::<F>(heads as f64);
        let mut out = ArrayD::zeros(IxDyn(&[bsz, t, s]));
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            let plane = t * s;
            for b in 0..bsz {
                let dst = &mut os[b * plane..(b + 1) * plane];
                for h in 0..heads {
                    let src = &xs[(b * heads + h) * plane..(b * heads + h + 1) * plane];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                for o in dst.iter_mut() {
                    *o = *o * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MeanHeads { x, heads }, needs)
    }

    pub fn extract_patches(&mut self, x: Var, patch: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "extract_patches input must be [B,C,H,W]");
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(patch > 0 && h % patch == 0 && w % patch == 0, "patch must divide H and W");
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let pp = c * patch * patch;
        let mut out = ArrayD::zeros(IxDyn(&[bsz, n, pp]));
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                for gr in 0..gh {
                    for gc in 0..gw {
                        let pi = gr * gw + gc;
                        for ch in 0..c {
                            for pr in 0..patch {
                                let src = ((b * c + ch) * h + gr * patch + pr) * w + gc * patch;
                                let dst = (b * n + pi) * pp + (ch * patch + pr) * patch;
                                os[dst..dst + patch].copy_from_slice(&xs[src..src + patch]);
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::ExtractPatches { x, patch }, needs)
    }

    /// Adds `t` onto patch `locs[b]` of sample `b`. Values are not clamped.
    pub fn insert_trigger(&mut self, x: Var, t: Var, locs: &[(usize, usize)], patch: usize) -> Var {
        let (xv, tv) = (self.value(x), self.value(t));
        assert_eq!(xv.ndim(), 4, "insert_trigger image must be [B,C,H,W]");
        let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(tv.shape(), [c, patch, patch], "trigger must be [C,p,p]");
        assert_eq!(locs.len(), bsz, "one location per sample");
        let (gh, gw) = (h / patch, w / patch);
        let mut out = xv.clone();
        let ts = slice_of(tv);
        {
            let os = out.as_slice_mut().unwrap();
            for (b, &(gr, gc)) in locs.iter().enumerate() {
                assert!(gr < gh && gc < gw, "patch location ({gr},{gc}) outside {gh}x{gw} grid");
                for ch in 0..c {
                    for pr in 0..patch {
                        let dst = ((b * c + ch) * h + gr * patch + pr) * w + gc * patch;
                        let src = (ch * patch + pr) * patch;
                        for j in 0..patch {
                            os[dst + j] = os[dst + j] + ts[src + j];
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(t);
        self.push(
            out,
            Op::InsertTrigger { x, t, locs: locs.to_vec(), patch },
            needs,
        )
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().expect("input has axes");
        assert!(start + len <= k, "slice {start}..{} exceeds last axis {k}", start + len);
        let rows = xv.len() / k;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        let xs = slice_of(xv);
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                os[r * len..(r + 1) * len].copy_from_slice(&xs[r * k + start..r * k + start + len]);
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SliceLast { x, start, len }, needs)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// reachable from a trainable leaf.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let rv = &self.nodes[root.0].value;
        assert_eq!(rv.len(), 1, "backward root must be scalar, got {:?}", rv.shape());
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::from_elem(rv.raw_dim(), F::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.step_backward(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<F>>], v: Var, delta: ArrayD<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(delta.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, id: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let gb = reduce_to_shape(g.clone(), self.value(*b).shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| -v));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.mapv(|v| v * *c));
            }
            Op::AddScaled(a, b, c) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|v| v * *c));
            }
            Op::Linear { x, w, b } => {
                let g2 = view2(g);
                if self.needs(*x) {
                    let gx = matmul2(g2, false, view2(self.value(*w)), true, F::one());
                    self.accumulate(grads, *x, gx.into_dyn());
                }
                if self.needs(*w) {
                    let gw = matmul2(view2(self.value(*x)), true, g2, false, F::one());
                    self.accumulate(grads, *w, gw.into_dyn());
                }
                if self.needs(*b) {
                    let gb = g2.sum_axis(Axis(0));
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::Bmm { a, b, ta, tb, alpha } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let batch = av.shape()[0];
                if self.needs(*a) {
                    let mut ga = ArrayD::zeros(av.raw_dim());
                    for i in 0..batch {
                        let gi = g.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        // y = α·op(A)·op(B): d(op(A)) = α·g·op(B)ᵀ, transposed
                        // back when `ta` is set.
                        let da = if !*ta {
                            matmul2(gi, false, bi, !*tb, *alpha)
                        } else if !*tb {
                            matmul2(bi, false, gi, true, *alpha)
                        } else {
                            matmul2(bi, true, gi, true, *alpha)
                        };
                        ga.index_axis_mut(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .assign(&da);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = ArrayD::zeros(bv.raw_dim());
                    for i in 0..batch {
                        let gi = g.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                        let db = if !*tb {
                            matmul2(ai, !*ta, gi, false, *alpha)
                        } else {
                            matmul2(gi, true, ai, *ta, *alpha)
                        };
                        gb.index_axis_mut(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .assign(&db);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &self.nodes[id].value;
                let n = *y.shape().last().unwrap();
                let mut gx = g * y;
                {
                    let ys = slice_of(y);
                    let gxs = gx.as_slice_mut().unwrap();
                    for r in 0..ys.len() / n {
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot = dot + gxs[r * n + j];
                        }
                        for j in 0..n {
                            gxs[r * n + j] = gxs[r * n + j] - dot * ys[r * n + j];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, d) = xhat.dim();
                let gs = slice_of(g);
                let xh = xhat.as_slice().unwrap();
                let gam = slice_of(self.value(*gamma));
                if self.needs(*beta) {
                    let mut gb = Array1::<F>::zeros(d);
                    for r in 0..m {
                        for j in 0..d {
                            gb[j] = gb[j] + gs[r * d + j];
                        }
                    }
                    self.accumulate(grads, *beta, gb.into_dyn());
                }
                if self.needs(*gamma) {
                    let mut gg = Array1::<F>::zeros(d);
                    for r in 0..m {
                        for j in 0..d {
                            gg[j] = gg[j] + gs[r * d + j] * xh[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg.into_dyn());
                }
                if self.needs(*x) {
                    let inv_d = F::one() / fl::<F>(d as f64);
                    let mut gx = Array2::<F>::zeros((m, d));
                    let gxs = gx.as_slice_mut().unwrap();
                    for r in 0..m {
                        let mut mean_gh = F::zero();
                        let mut mean_ghh = F::zero();
                        for j in 0..d {
                            let gh = gs[r * d + j] * gam[j];
                            mean_gh = mean_gh + gh;
                            mean_ghh = mean_ghh + gh * xh[r * d + j];
                        }
                        mean_gh = mean_gh * inv_d;
                        mean_ghh = mean_ghh * inv_d;
                        for j in 0..d {
                            let gh = gs[r * d + j] * gam[j];
                            gxs[r * d + j] = rstd[r] * (gh - mean_gh - xh[r * d + j] * mean_ghh);
                        }
                    }
                    self.accumulate(grads, *x, gx.into_dyn());
                }
            }
            Op::Gelu(x) => {
                let c0 = fl::<F>(0.7978845608028654);
                let c1 = fl::<F>(0.044715);
                let half = fl::<F>(0.5);
                let three = fl::<F>(3.0);
                let xv = self.value(*x);
                let mut gx = g.clone();
                {
                    let xs = slice_of(xv);
                    let gxs = gx.as_slice_mut().unwrap();
                    for (gv, &v) in gxs.iter_mut().zip(xs) {
                        let u = c0 * (v + c1 * v * v * v);
                        let th = u.tanh();
                        let sech2 = F::one() - th * th;
                        let du = c0 * (F::one() + three * c1 * v * v);
                        let dy = half * (F::one() + th) + half * v * sech2 * du;
                        *gv = *gv * dy;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropyMean { logits, labels, probs } => {
                let (bsz, k) = probs.dim();
                let scale = g.iter().next().copied().unwrap() / fl::<F>(bsz as f64);
                let mut gl = probs.clone();
                {
                    let s = gl.as_slice_mut().unwrap();
                    for (r, &y) in labels.iter().enumerate() {
                        s[r * k + usize::from(y)] = s[r * k + usize::from(y)] - F::one();
                    }
                    for v in s.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.accumulate(grads, *logits, gl.into_dyn());
            }
            Op::L2NormRowsMean { x, norms } => {
                let xv = self.value(*x);
                let rows = norms.len();
                let cols = xv.len() / rows;
                let scale = g.iter().next().copied().unwrap() / fl::<F>(rows as f64);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                {
                    let xs = slice_of(xv);
                    let gxs = gx.as_slice_mut().unwrap();
                    for r in 0..rows {
                        if norms[r] > F::zero() {
                            let c = scale / norms[r];
                            for j in 0..cols {
                                gxs[r * cols + j] = xs[r * cols + j] * c;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g
                    .clone()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("reshape backward");
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatToken { cls, x } => {
                let (bsz, t, d) = {
                    let s = g.shape();
                    (s[0], s[1], s[2])
                };
                let n = t - 1;
                let gs = slice_of(g);
                if self.needs(*cls) {
                    let mut gc = ArrayD::zeros(IxDyn(&[1, 1, d]));
                    {
                        let cs = gc.as_slice_mut().unwrap();
                        for b in 0..bsz {
                            let base = b * t * d;
                            for j in 0..d {
                                cs[j] = cs[j] + gs[base + j];
                            }
                        }
                    }
                    self.accumulate(grads, *cls, gc);
                }
                if self.needs(*x) {
                    let mut gx = ArrayD::zeros(IxDyn(&[bsz, n, d]));
                    {
                        let xs = gx.as_slice_mut().unwrap();
                        for b in 0..bsz {
                            xs[b * n * d..(b + 1) * n * d]
                                .copy_from_slice(&gs[b * t * d + d..(b + 1) * t * d]);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SelectToken { x, index } => {
                let xv = self.value(*x);
                let (bsz, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gs = slice_of(g);
                {
                    let xs = gx.as_slice_mut().unwrap();
                    for b in 0..bsz {
                        let dst = (b * t + index) * d;
                        xs[dst..dst + d].copy_from_slice(&gs[b * d..(b + 1) * d]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SplitHeads { x, heads } => {
                let xv = self.value(*x);
                let (bsz, t, dm) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let d = dm / heads;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gs = slice_of(g);
                {
                    let xs = gx.as_slice_mut().unwrap();
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for tt in 0..t {
                                let src = ((b * heads + h) * t + tt) * d;
                                let dst = (b * t + tt) * dm + h * d;
                                xs[dst..dst + d].copy_from_slice(&gs[src..src + d]);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MergeHeads { x, heads } => {
                let xv = self.value(*x);
                let (bh, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let bsz = bh / heads;
                let dm = d * heads;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gs = slice_of(g);
                {
                    let xs = gx.as_slice_mut().unwrap();
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for tt in 0..t {
                                let src = (b * t + tt) * dm + h * d;
                                let dst = ((b * heads + h) * t + tt) * d;
                                xs[dst..dst + d].copy_from_slice(&gs[src..src + d]);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanHeads { x, heads } => {
                let xv = self.value(*x);
                let (bh, t, s) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let bsz = bh / heads;
                let inv = F::one() / fl::<F>(*heads as f64);
                let plane = t * s;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gs = slice_of(g);
                {
                    let xs = gx.as_slice_mut().unwrap();
                    for b in 0..bsz {
                        let src = &gs[b * plane..(b + 1) * plane];
                        for h in 0..*heads {
                            let dst = &mut xs[(b * heads + h) * plane..(b * heads + h + 1) * plane];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o = v * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ExtractPatches { x, patch } => {
                let xv = self.value(*x);
                let (bsz, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (gh, gw) = (h / patch, w / patch);
                let n = gh * gw;
                let pp = c * patch * patch;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gs = slice_of(g);
                {
                    let xs = gx.as_slice_mut().unwrap();
                    for b in 0..bsz {
                        for gr in 0..gh {
                            for gc in 0..gw {
                                let pi = gr * gw + gc;
                                for ch in 0..c {
                                    for pr in 0..*patch {
                                        let dst =
                                            ((b * c + ch) * h + gr * patch + pr) * w + gc * patch;
                                        let src = (b * n + pi) * pp + (ch * patch + pr) * patch;
                                        xs[dst..dst + patch].copy_from_slice(&gs[src..src + patch]);
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::InsertTrigger { x, t, locs, patch } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.needs(*t) {
                    let tv = self.value(*t);
                    let (c, _, _) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
                    let (h, w) = (g.shape()[2], g.shape()[3]);
                    let mut gt = ArrayD::zeros(tv.raw_dim());
                    let gs = slice_of(g);
                    {
                        let ts = gt.as_slice_mut().unwrap();
                        for (b, &(gr, gc)) in locs.iter().enumerate() {
                            for ch in 0..c {
                                for pr in 0..*patch {
                                    let src = ((b * c + ch) * h + gr * patch + pr) * w + gc * patch;
                                    let dst = (ch * patch + pr) * patch;
                                    for j in 0..*patch {
                                        ts[dst + j] = ts[dst + j] + gs[src + j];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *t, gt);
                }
            }
            Op::SliceLast { x, start, len } => {
                let xv = self.value(*x);
                let k = *xv.shape().last().unwrap();
                let rows = xv.len() / k;
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gs = slice_of(g);
                {
                    let xs = gx.as_slice_mut().unwrap();
                    for r in 0..rows {
                        xs[r * k + start..r * k + start + len]
                            .copy_from_slice(&gs[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Returns a view of the value reshaped to 2-D with the given row count.
pub fn rows_view<F: Scalar>(a: &ArrayD<F>, rows: usize) -> ArrayView2<'_, F> {
    let cols = a.len() / rows;
    ArrayViewD::from_shape(IxDyn(&[rows, cols]), a.as_slice().unwrap())
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap()
}
