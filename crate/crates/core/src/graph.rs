//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations evaluate eagerly and record themselves; [`Graph::backward`]
//! replays the tape in reverse, accumulating vector-Jacobian products.
//! Generic over [`Scalar`]: f32 for training, f64 for gradient checks.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a @ b
    Matmul { a: usize, b: usize },
    /// out = a^T @ b
    MatmulAT { a: usize, b: usize },
    /// out = a @ b^T
    MatmulBT { a: usize, b: usize },
    /// Cross-correlation of N x Cin x H x W with Cout x Cin x kh x kw.
    Conv2d {
        input: usize,
        kernels: usize,
        stride: usize,
        padding: usize,
    },
    /// x: N x C x H x W plus per-channel bias [C].
    BiasAddChannel { input: usize, bias: usize },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { x: usize, c: f64 },
    MeanAxis { x: usize, axis: usize },
    SumAxis { x: usize, axis: usize },
    /// Max along `axis`; gradient routes to the lowest-index argmax.
    ReduceMaxAxis { x: usize, axis: usize },
    /// Row-wise exp-normalization with max subtraction, x: R x C.
    SoftmaxRows { x: usize },
    Sqrt { x: usize },
    Reshape { x: usize },
    /// R x C -> C x R
    Transpose2d { x: usize },
    SliceAxis {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Row-concatenation of rank-2 tensors with equal column counts.
    ConcatRows { xs: Vec<usize> },
    /// Part-separated linear maps: w: P x O x I, x: P x I -> P x O.
    PartLinear { w: usize, x: usize },
    /// Mean over rows of (logsumexp(row) - row[label]); logits: R x C.
    CrossEntropyRows { logits: usize, labels: Vec<usize> },
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b }
        | Op::MatmulAT { a, b }
        | Op::MatmulBT { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b } => vec![*a, *b],
        Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
        Op::BiasAddChannel { input, bias } => vec![*input, *bias],
        Op::Relu { x }
        | Op::MulScalar { x, .. }
        | Op::MeanAxis { x, .. }
        | Op::SumAxis { x, .. }
        | Op::ReduceMaxAxis { x, .. }
        | Op::SoftmaxRows { x }
        | Op::Sqrt { x }
        | Op::Reshape { x }
        | Op::Transpose2d { x }
        | Op::SliceAxis { x, .. } => vec![*x],
        Op::ConcatRows { xs } => xs.clone(),
        Op::PartLinear { w, x } => vec![*w, *x],
        Op::CrossEntropyRows { logits, .. } => vec![*logits],
    }
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Gradients flow through this node (it is a tracked leaf or depends
    /// on one).
    requires_grad: bool,
    /// Tracked leaf whose gradient persists across backward passes.
    user_tracked: bool,
    /// Persistent gradient buffer, allocated lazily on first backward
    /// flow to keep tracked forward passes allocation-free.
    grad: Option<Vec<S>>,
    op: Op,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ── dense kernels ────────────────────────────────────────────────────

/// Output-column block size: keeps the active b-panel L1 resident while the
/// row loop reuses it.
const MM_JBLK: usize = 512;

/// c += a @ b with a: m x k, b: k x n. Column-blocked with four k-steps per
/// pass so small-k cases (3x3 kernels, thin backward shapes) stay compute
/// bound.
pub(crate) fn mm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 < n {
        let jl = MM_JBLK.min(n - j0);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n + j0..i * n + j0 + jl];
            let mut kk = 0;
            while kk + 4 <= k {
                let a0 = arow[kk];
                let a1 = arow[kk + 1];
                let a2 = arow[kk + 2];
                let a3 = arow[kk + 3];
                let b0 = &b[kk * n + j0..kk * n + j0 + jl];
                let b1 = &b[(kk + 1) * n + j0..(kk + 1) * n + j0 + jl];
                let b2 = &b[(kk + 2) * n + j0..(kk + 2) * n + j0 + jl];
                let b3 = &b[(kk + 3) * n + j0..(kk + 3) * n + j0 + jl];
                for j in 0..jl {
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                kk += 4;
            }
            while kk < k {
                let av = arow[kk];
                let brow = &b[kk * n + j0..kk * n + j0 + jl];
                for j in 0..jl {
                    crow[j] += av * brow[j];
                }
                kk += 1;
            }
        }
        j0 += jl;
    }
}

/// c += a^T @ b with a: k x m, b: k x n.
fn mm_at<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 < n {
        let jl = MM_JBLK.min(n - j0);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j0 + jl];
            let mut kk = 0;
            while kk + 4 <= k {
                let a0 = a[kk * m + i];
                let a1 = a[(kk + 1) * m + i];
                let a2 = a[(kk + 2) * m + i];
                let a3 = a[(kk + 3) * m + i];
                let b0 = &b[kk * n + j0..kk * n + j0 + jl];
                let b1 = &b[(kk + 1) * n + j0..(kk + 1) * n + j0 + jl];
                let b2 = &b[(kk + 2) * n + j0..(kk + 2) * n + j0 + jl];
                let b3 = &b[(kk + 3) * n + j0..(kk + 3) * n + j0 + jl];
                for j in 0..jl {
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                kk += 4;
            }
            while kk < k {
                let av = a[kk * m + i];
                let brow = &b[kk * n + j0..kk * n + j0 + jl];
                for j in 0..jl {
                    crow[j] += av * brow[j];
                }
                kk += 1;
            }
        }
        j0 += jl;
    }
}

/// c += a @ b^T with a: m x k, b: n x k.
fn mm_bt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for l in 0..k {
                s += arow[l] * brow[l];
            }
            c[i * n + j] += s;
        }
    }
}

/// Unpack one Cin x H x W sample into (Cin*kh*kw) x (hout*wout) columns.
/// Each output row splits into zero edges and a contiguous (stride 1) or
/// strided interior copy.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    cols: &mut [S],
) {
    let cols_w = hout * wout;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[(c * kh * kw + ky * kw + kx) * cols_w
                    ..(c * kh * kw + ky * kw + kx + 1) * cols_w];
                let off = kx as isize - pad as isize;
                // valid ox range: 0 <= ox*stride + off < w
                let ox_lo = if off < 0 {
                    ((-off) as usize).div_ceil(stride)
                } else {
                    0
                }
                .min(wout);
                let ox_hi = if off >= w as isize {
                    0
                } else {
                    (((w as isize - off) as usize).div_ceil(stride)).min(wout)
                }
                .max(ox_lo);
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wout..(oy + 1) * wout];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for v in &mut dst[..ox_lo] {
                        *v = S::zero();
                    }
                    if stride == 1 {
                        let s0 = (ox_lo as isize + off) as usize;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[s0..s0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[((ox * stride) as isize + off) as usize];
                        }
                    }
                    for v in &mut dst[ox_hi..] {
                        *v = S::zero();
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back into a Cin x H x W sample.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    x: &mut [S],
) {
    let cols_w = hout * wout;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[(c * kh * kw + ky * kw + kx) * cols_w
                    ..(c * kh * kw + ky * kw + kx + 1) * cols_w];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Split a shape at `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = match op {
            Op::Leaf => false, // set by leaf()
            ref o => op_inputs(o)
                .iter()
                .any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            requires_grad: requires,
            user_tracked: false,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Install a tensor as a tape input.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        self.nodes[v.0].user_tracked = requires_grad;
        v
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![S::from_f64(v)], Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; None until backward has reached the node.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Zero every persistent gradient buffer.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                for v in g.iter_mut() {
                    *v = S::zero();
                }
            }
        }
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dim {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape2(a, "matmul")?;
        let (kb, n) = self.shape2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dim {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        mm(self.data(a), self.data(b), &mut out, m, ka, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// a^T @ b with a: K x M, b: K x N.
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ka, m) = self.shape2(a, "matmul_at")?;
        let (kb, n) = self.shape2(b, "matmul_at")?;
        if ka != kb {
            return Err(Error::Dim {
                op: "matmul_at",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        mm_at(self.data(a), self.data(b), &mut out, m, ka, n);
        Ok(self.push(vec![m, n], out, Op::MatmulAT { a: a.0, b: b.0 }))
    }

    /// a @ b^T with a: M x K, b: N x K.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape2(a, "matmul_bt")?;
        let (n, kb) = self.shape2(b, "matmul_bt")?;
        if ka != kb {
            return Err(Error::Dim {
                op: "matmul_bt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        mm_bt(self.data(a), self.data(b), &mut out, m, ka, n);
        Ok(self.push(vec![m, n], out, Op::MatmulBT { a: a.0, b: b.0 }))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let ins = self.shape(input).to_vec();
        let ks = self.shape(kernels).to_vec();
        if ins.len() != 4 || ks.len() != 4 || ins[1] != ks[1] {
            return Err(Error::Dim {
                op: "conv2d",
                lhs: ins,
                rhs: ks,
            });
        }
        let (n, cin, h, w) = (ins[0], ins[1], ins[2], ins[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let hnum = h + 2 * padding - kh;
        let wnum = w + 2 * padding - kw;
        if hnum % stride != 0 || wnum % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        }
        let hout = hnum / stride + 1;
        let wout = wnum / stride + 1;
        let ckk = cin * kh * kw;
        let mut cols = vec![S::zero(); ckk * hout * wout];
        let mut out = vec![S::zero(); n * cout * hout * wout];
        let xdata = &self.nodes[input.0].data;
        let kdata = &self.nodes[kernels.0].data;
        for s in 0..n {
            im2col(
                &xdata[s * cin * h * w..(s + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                hout,
                wout,
                &mut cols,
            );
            mm(
                kdata,
                &cols,
                &mut out[s * cout * hout * wout..(s + 1) * cout * hout * wout],
                cout,
                ckk,
                hout * wout,
            );
        }
        Ok(self.push(
            vec![n, cout, hout, wout],
            out,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                stride,
                padding,
            },
        ))
    }

    pub fn bias_add_channel(&mut self, input: Var, bias: Var) -> Result<Var> {
        let ins = self.shape(input).to_vec();
        let bs = self.shape(bias).to_vec();
        if ins.len() != 4 || bs.len() != 1 || bs[0] != ins[1] {
            return Err(Error::Dim {
                op: "bias_add_channel",
                lhs: ins,
                rhs: bs,
            });
        }
        let (n, c, h, w) = (ins[0], ins[1], ins[2], ins[3]);
        let mut out = self.nodes[input.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for s in 0..n {
            for ch in 0..c {
                let bv = b[ch];
                for v in &mut out[(s * c + ch) * h * w..(s * c + ch + 1) * h * w] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(
            ins,
            out,
            Op::BiasAddChannel {
                input: input.0,
                bias: bias.0,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN propagates rather than clamping to zero
        let out: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v > S::zero() {
                    v
                } else if v.is_nan() {
                    v
                } else {
                    S::zero()
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x: x.0 })
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * cs).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::MulScalar { x: x.0, c })
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for rank {rank}"
            )));
        }
        if self.shape(x)[axis] == 0 {
            return Err(Error::Contract(format!("{op}: empty axis {axis}")));
        }
        Ok(())
    }

    fn reduce_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = shape.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![S::zero(); outer * inner];
        let d = &self.nodes[x.0].data;
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + a) * inner + i];
                }
            }
        }
        Ok(self.push(
            Self::reduce_shape(&shape, axis),
            out,
            Op::SumAxis { x: x.0, axis },
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let inv = S::from_f64(1.0 / len as f64);
        let mut out = vec![S::zero(); outer * inner];
        let d = &self.nodes[x.0].data;
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + a) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        Ok(self.push(
            Self::reduce_shape(&shape, axis),
            out,
            Op::MeanAxis { x: x.0, axis },
        ))
    }

    pub fn reduce_max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "reduce_max_axis")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                for a in 1..len {
                    let v = d[(o * len + a) * inner + i];
                    if v > best {
                        best = v;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        Ok(self.push(
            Self::reduce_shape(&shape, axis),
            out,
            Op::ReduceMaxAxis { x: x.0, axis },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "softmax_rows")?;
        let d = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = S::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows { x: x.0 }))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > S::zero() { v.sqrt() } else { S::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sqrt { x: x.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].data.len() {
            return Err(Error::Dim {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { x: x.0 }))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "transpose2d")?;
        let d = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose2d { x: x.0 }))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice_axis")?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "slice_axis: [{start}, {}) out of range for extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let d = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = (o * alen + start + a) * inner;
                let dst = (o * len + a) * inner;
                out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(
            oshape,
            out,
            Op::SliceAxis {
                x: x.0,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows: no inputs".into()));
        }
        let (_, c0) = self.shape2(xs[0], "concat_rows")?;
        let mut rows = 0;
        for &v in xs {
            let (r, c) = self.shape2(v, "concat_rows")?;
            if c != c0 {
                return Err(Error::Dim {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        for &v in xs {
            out.extend_from_slice(&self.nodes[v.0].data);
        }
        Ok(self.push(
            vec![rows, c0],
            out,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    pub fn part_linear(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 3 || xs.len() != 2 || ws[0] != xs[0] || ws[2] != xs[1] {
            return Err(Error::Dim {
                op: "part_linear",
                lhs: ws,
                rhs: xs,
            });
        }
        let (p, o, i) = (ws[0], ws[1], ws[2]);
        let wd = &self.nodes[w.0].data;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![S::zero(); p * o];
        for pp in 0..p {
            let xrow = &xd[pp * i..(pp + 1) * i];
            for oo in 0..o {
                let wrow = &wd[(pp * o + oo) * i..(pp * o + oo + 1) * i];
                let mut s = S::zero();
                for ii in 0..i {
                    s += wrow[ii] * xrow[ii];
                }
                out[pp * o + oo] = s;
            }
        }
        Ok(self.push(vec![p, o], out, Op::PartLinear { w: w.0, x: x.0 }))
    }

    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape2(logits, "cross_entropy_rows")?;
        if labels.len() != r {
            return Err(Error::Dim {
                op: "cross_entropy_rows",
                lhs: vec![r, c],
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(Error::Contract(format!(
                    "cross_entropy_rows: label {l} out of range for {c} classes"
                )));
            }
        }
        let d = &self.nodes[logits.0].data;
        let mut total = S::zero();
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for &v in row {
                sum += (v - mx).exp();
            }
            total += sum.ln() + mx - row[labels[i]];
        }
        let val = total * S::from_f64(1.0 / r as f64);
        Ok(self.push(
            vec![1],
            vec![val],
            Op::CrossEntropyRows {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Backward from a scalar loss; cotangent 1. Gradients accumulate into
    /// the persistent per-node buffers, so repeated calls without
    /// [`Graph::reset_grads`] sum their results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].data[0].is_finite() {
            return Err(Error::Contract("backward: loss is not finite".into()));
        }
        self.backward_seeded(&[(loss, vec![S::one()])])
    }

    /// Backward with explicit output cotangents (used to chain tapes).
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<S>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut cot: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, seed) in seeds {
            if seed.len() != self.nodes[v.0].data.len() {
                return Err(Error::Dim {
                    op: "backward_seeded",
                    lhs: self.nodes[v.0].shape.clone(),
                    rhs: vec![seed.len()],
                });
            }
            if !self.nodes[v.0].requires_grad {
                continue; // nothing tracked below this output
            }
            match &mut cot[v.0] {
                Some(c) => {
                    for (x, y) in c.iter_mut().zip(seed) {
                        *x += *y;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
            top = top.max(v.0);
        }
        for id in (0..=top).rev() {
            let Some(gout) = cot[id].take() else { continue };
            if self.nodes[id].user_tracked {
                // persist: leaves end the chain, so the buffer moves in
                debug_assert!(matches!(self.nodes[id].op, Op::Leaf));
                match &mut self.nodes[id].grad {
                    Some(g) => {
                        for (x, y) in g.iter_mut().zip(&gout) {
                            *x += *y;
                        }
                    }
                    slot => *slot = Some(gout),
                }
                continue;
            }
            self.propagate(id, gout, &mut cot);
        }
        Ok(())
    }

    fn add_cot(&self, cot: &mut [Option<Vec<S>>], id: usize, contrib: &[S]) {
        if !self.nodes[id].requires_grad {
            return; // nothing tracked at or below this node
        }
        match &mut cot[id] {
            Some(c) => {
                for (x, y) in c.iter_mut().zip(contrib) {
                    *x += *y;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// Like [`Graph::add_cot`] but takes ownership, avoiding a copy when
    /// this is the first contribution.
    fn add_cot_owned(&self, cot: &mut [Option<Vec<S>>], id: usize, contrib: Vec<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut cot[id] {
            Some(c) => {
                for (x, y) in c.iter_mut().zip(&contrib) {
                    *x += *y;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, mut gout: Vec<S>, cot: &mut [Option<Vec<S>>]) {
        let _ = &mut gout;
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA = dOut @ B^T
                    let mut da = vec![S::zero(); m * k];
                    mm_bt(&gout, &self.nodes[b].data, &mut da, m, n, k);
                    self.add_cot_owned(cot, a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T @ dOut
                    let mut db = vec![S::zero(); k * n];
                    mm_at(&self.nodes[a].data, &gout, &mut db, k, m, n);
                    self.add_cot_owned(cot, b, db);
                }
            }
            Op::MatmulAT { a, b } => {
                // out = A^T @ B, A: k x m, B: k x n, out: m x n
                let (k, m) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    // dA = B @ dOut^T  (k x n @ n x m -> k x m)
                    let mut da = vec![S::zero(); k * m];
                    mm_bt(&self.nodes[b].data, &gout, &mut da, k, n, m);
                    self.add_cot_owned(cot, a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = A @ dOut  (k x m @ m x n -> k x n)
                    let mut db = vec![S::zero(); k * n];
                    mm(&self.nodes[a].data, &gout, &mut db, k, m, n);
                    self.add_cot_owned(cot, b, db);
                }
            }
            Op::MatmulBT { a, b } => {
                // out = A @ B^T, A: m x k, B: n x k, out: m x n
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                if self.nodes[a].requires_grad {
                    // dA = dOut @ B  (m x n @ n x k)
                    let mut da = vec![S::zero(); m * k];
                    mm(&gout, &self.nodes[b].data, &mut da, m, n, k);
                    self.add_cot_owned(cot, a, da);
                }
                if self.nodes[b].requires_grad {
                    // dB = dOut^T @ A  (n x m @ m x k)
                    let mut db = vec![S::zero(); n * k];
                    mm_at(&gout, &self.nodes[a].data, &mut db, n, m, k);
                    self.add_cot_owned(cot, b, db);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => {
                let ins = self.nodes[input].shape.clone();
                let ks = self.nodes[kernels].shape.clone();
                let (n, cin, h, w) = (ins[0], ins[1], ins[2], ins[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let hout = (h + 2 * padding - kh) / stride + 1;
                let wout = (w + 2 * padding - kw) / stride + 1;
                let ckk = cin * kh * kw;
                let want_dx = self.nodes[input].requires_grad;
                let want_dk = self.nodes[kernels].requires_grad;
                let mut cols = vec![S::zero(); ckk * hout * wout];
                let mut cols_t = vec![S::zero(); ckk * hout * wout];
                let mut dk = vec![S::zero(); cout * ckk];
                let mut dx = vec![S::zero(); n * cin * h * w];
                let mut dcols = vec![S::zero(); ckk * hout * wout];
                for s in 0..n {
                    let gslice = &gout[s * cout * hout * wout..(s + 1) * cout * hout * wout];
                    if want_dk {
                        im2col(
                            &self.nodes[input].data[s * cin * h * w..(s + 1) * cin * h * w],
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            padding,
                            hout,
                            wout,
                            &mut cols,
                        );
                        // dK = dOut @ cols^T through the row kernel
                        let hw = hout * wout;
                        for r in 0..ckk {
                            for cidx in 0..hw {
                                cols_t[cidx * ckk + r] = cols[r * hw + cidx];
                            }
                        }
                        mm(gslice, &cols_t, &mut dk, cout, hw, ckk);
                    }
                    if want_dx {
                        for v in dcols.iter_mut() {
                            *v = S::zero();
                        }
                        mm_at(
                            &self.nodes[kernels].data,
                            gslice,
                            &mut dcols,
                            ckk,
                            cout,
                            hout * wout,
                        );
                        col2im_add(
                            &dcols,
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            padding,
                            hout,
                            wout,
                            &mut dx[s * cin * h * w..(s + 1) * cin * h * w],
                        );
                    }
                }
                if want_dk {
                    self.add_cot_owned(cot, kernels, dk);
                }
                if want_dx {
                    self.add_cot_owned(cot, input, dx);
                }
            }
            Op::BiasAddChannel { input, bias } => {
                if self.nodes[bias].requires_grad {
                    let s = &self.nodes[input].shape;
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut db = vec![S::zero(); c];
                    for ss in 0..n {
                        for ch in 0..c {
                            let base = (ss * c + ch) * hw;
                            for k in 0..hw {
                                db[ch] += gout[base + k];
                            }
                        }
                    }
                    self.add_cot_owned(cot, bias, db);
                }
                self.add_cot_owned(cot, input, gout);
            }
            Op::Relu { x } => {
                for (g, &v) in gout.iter_mut().zip(&self.nodes[x].data) {
                    if v <= S::zero() {
                        *g = S::zero();
                    }
                }
                self.add_cot_owned(cot, x, gout);
            }
            Op::Add { a, b } => {
                self.add_cot(cot, a, &gout);
                self.add_cot_owned(cot, b, gout);
            }
            Op::Sub { a, b } => {
                self.add_cot(cot, a, &gout);
                for g in gout.iter_mut() {
                    *g = -*g;
                }
                self.add_cot_owned(cot, b, gout);
            }
            Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let da: Vec<S> = gout
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.add_cot_owned(cot, a, da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<S> = gout
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.add_cot_owned(cot, b, db);
                }
            }
            Op::MulScalar { x, c } => {
                let cs = S::from_f64(c);
                for g in gout.iter_mut() {
                    *g = *g * cs;
                }
                self.add_cot_owned(cot, x, gout);
            }
            Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
                let shape = self.nodes[x].shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                let scale = match self.nodes[id].op {
                    Op::MeanAxis { .. } => S::from_f64(1.0 / len as f64),
                    _ => S::one(),
                };
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = gout[o * inner + i] * scale;
                        }
                    }
                }
                self.add_cot_owned(cot, x, dx);
            }
            Op::ReduceMaxAxis { x, axis } => {
                let shape = self.nodes[x].shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                let d = &self.nodes[x].data;
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        // ties route to the lowest index
                        let mut best = 0usize;
                        let mut bv = d[o * len * inner + i];
                        for a in 1..len {
                            let v = d[(o * len + a) * inner + i];
                            if v > bv {
                                bv = v;
                                best = a;
                            }
                        }
                        dx[(o * len + best) * inner + i] = gout[o * inner + i];
                    }
                }
                self.add_cot_owned(cot, x, dx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                let y = &self.nodes[id].data;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gout[i * c..(i + 1) * c];
                    let mut dot = S::zero();
                    for j in 0..c {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_cot_owned(cot, x, dx);
            }
            Op::Sqrt { x } => {
                let half = S::from_f64(0.5);
                let dx: Vec<S> = self.nodes[x]
                    .data
                    .iter()
                    .zip(self.nodes[id].data.iter())
                    .zip(&gout)
                    .map(|((&v, &y), &g)| {
                        if v > S::zero() {
                            g * half / y
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.add_cot_owned(cot, x, dx);
            }
            Op::Reshape { x } => {
                self.add_cot_owned(cot, x, gout);
            }
            Op::Transpose2d { x } => {
                let (c, r) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                // out is c x r, input r x c
                let mut dx = vec![S::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = gout[i * r + j];
                    }
                }
                self.add_cot_owned(cot, x, dx);
            }
            Op::SliceAxis {
                x,
                axis,
                start,
                len,
            } => {
                let shape = self.nodes[x].shape.clone();
                let (outer, alen, inner) = axis_split(&shape, axis);
                let mut dx = vec![S::zero(); outer * alen * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let dst = (o * alen + start + a) * inner;
                        let src = (o * len + a) * inner;
                        dx[dst..dst + inner].copy_from_slice(&gout[src..src + inner]);
                    }
                }
                self.add_cot_owned(cot, x, dx);
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for xi in xs {
                    let n = self.nodes[xi].data.len();
                    let piece = gout[offset..offset + n].to_vec();
                    self.add_cot_owned(cot, xi, piece);
                    offset += n;
                }
            }
            Op::PartLinear { w, x } => {
                let ws = self.nodes[w].shape.clone();
                let (p, o, i) = (ws[0], ws[1], ws[2]);
                if self.nodes[w].requires_grad {
                    let mut dw = vec![S::zero(); p * o * i];
                    let xd = &self.nodes[x].data;
                    for pp in 0..p {
                        for oo in 0..o {
                            let g = gout[pp * o + oo];
                            for ii in 0..i {
                                dw[(pp * o + oo) * i + ii] += g * xd[pp * i + ii];
                            }
                        }
                    }
                    self.add_cot_owned(cot, w, dw);
                }
                if self.nodes[x].requires_grad {
                    let mut dx = vec![S::zero(); p * i];
                    let wd = &self.nodes[w].data;
                    for pp in 0..p {
                        for oo in 0..o {
                            let g = gout[pp * o + oo];
                            for ii in 0..i {
                                dx[pp * i + ii] += g * wd[(pp * o + oo) * i + ii];
                            }
                        }
                    }
                    self.add_cot_owned(cot, x, dx);
                }
            }
            Op::CrossEntropyRows { logits, labels } => {
                let (r, c) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                let d = &self.nodes[logits].data;
                let g = gout[0] * S::from_f64(1.0 / r as f64);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let row = &d[i * c..(i + 1) * c];
                    let mut mx = row[0];
                    for &v in row {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = S::zero();
                    for &v in row {
                        sum += (v - mx).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / sum;
                        let ind = if j == labels[i] { S::one() } else { S::zero() };
                        dx[i * c + j] = g * (p - ind);
                    }
                }
                self.add_cot_owned(cot, logits, dx);
            }
        }
    }
}


/// Benchmarking shim for the dense kernel (examples only).
#[doc(hidden)]
pub fn mm_bench(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    mm(a, b, c, m, k, n)
}
