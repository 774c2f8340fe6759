//! Eager tape-based reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node to the tape. The
//! tape order is the execution order, so [`Graph::backward`] walks it once in
//! reverse. Parameters are bound by name so their gradients can be collected
//! after the backward pass.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, ensure, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Ln(Var),
    Sigmoid(Var),
    Gelu(Var),
    MatMul { a: Var, b: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize, groups: usize },
    UpsampleNearest { x: Var, factor: usize },
    Sum(Var),
    Mean(Var),
    BceWithLogits { logits: Var, targets: Var },
    SoftDice { probs: Var, targets: Var, smooth: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Ln(x) | Op::Sigmoid(x) | Op::Gelu(x) | Op::Reshape(x) | Op::Sum(x) | Op::Mean(x) => {
                vec![*x]
            }
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Permute { x, .. } | Op::Slice { x, .. } | Op::Softmax { x, .. } | Op::UpsampleNearest { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
            Op::SoftDice { probs, targets, .. } => vec![*probs, *targets],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of executed operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Outer count, axis length and inner count of `shape` split at `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each element of `a_shape`, the flat index of the broadcast element of `b_shape`.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    ensure!(b_shape.len() <= a_shape.len(), Config, "cannot broadcast {:?} into {:?}", b_shape, a_shape);
    let off = a_shape.len() - b_shape.len();
    let bstr = strides(b_shape);
    let mut eff = vec![0usize; a_shape.len()];
    for (i, (&bd, &bs)) in b_shape.iter().zip(&bstr).enumerate() {
        let ad = a_shape[off + i];
        ensure!(bd == ad || bd == 1, Config, "cannot broadcast {:?} into {:?}", b_shape, a_shape);
        eff[off + i] = if bd == 1 { 0 } else { bs };
    }
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..a_shape.len()).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < a_shape[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(map)
}

/// Range of output positions `o` whose input position `o*stride + k - pad` lies in `[0, in_len)`.
fn valid_range(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let (k, s, p, n) = (k as isize, stride as isize, pad as isize, in_len as isize);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let hi = if n + p > k { (n + p - k + s - 1) / s } else { 0 };
    let hi = hi.clamp(0, out_len as isize) as usize;
    let lo = (lo.max(0) as usize).min(hi);
    (lo, hi)
}

struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize, groups: usize) -> Result<ConvGeom> {
    let [b, cin, h, wd] = x[..] else { bail!(Config, "conv2d input must be (B, C, H, W), got {:?}", x) };
    let [cout, cin_g, kh, kw] = w[..] else { bail!(Config, "conv2d kernel must be (O, I/groups, kH, kW), got {:?}", w) };
    ensure!(stride > 0 && groups > 0, Config, "conv2d stride and groups must be positive");
    ensure!(cin % groups == 0 && cout % groups == 0, Config, "channels {}->{} not divisible by groups {}", cin, cout, groups);
    ensure!(cin_g == cin / groups, Config, "kernel {:?} inconsistent with {} input channels in {} groups", w, cin, groups);
    ensure!(h + 2 * padding >= kh && wd + 2 * padding >= kw, Config, "kernel {}x{} larger than padded input {}x{}", kh, kw, h, wd);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    Ok(ConvGeom { b, cin, h, w: wd, cout, kh, kw, oh, ow, cin_g, cout_g: cout / groups })
}

/// Column matrix of one group: rows `(ic, ky, kx)`, columns `(b, oy, ox)`.
fn im2col(xd: &[f64], geo: &ConvGeom, grp: usize, stride: usize, padding: usize) -> Vec<f64> {
    let ohw = geo.oh * geo.ow;
    let n = geo.b * ohw;
    let mut col = vec![0.0; geo.cin_g * geo.kh * geo.kw * n];
    for icg in 0..geo.cin_g {
        let ic = grp * geo.cin_g + icg;
        for ky in 0..geo.kh {
            let (oy0, oy1) = valid_range(ky, stride, padding, geo.h, geo.oh);
            for kx in 0..geo.kw {
                let (ox0, ox1) = valid_range(kx, stride, padding, geo.w, geo.ow);
                let row = &mut col[((icg * geo.kh + ky) * geo.kw + kx) * n..][..n];
                for bi in 0..geo.b {
                    let inp = &xd[(bi * geo.cin + ic) * geo.h * geo.w..][..geo.h * geo.w];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let dst = &mut row[bi * ohw + oy * geo.ow..][..geo.ow];
                        for ox in ox0..ox1 {
                            dst[ox] = inp[iy * geo.w + ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    col
}

fn conv_gemm_forward(xd: &[f64], wd: &[f64], geo: &ConvGeom, stride: usize, padding: usize) -> Vec<f64> {
    let ohw = geo.oh * geo.ow;
    let n = geo.b * ohw;
    let k = geo.cin_g * geo.kh * geo.kw;
    let mut out = vec![0.0; geo.b * geo.cout * ohw];
    let groups = geo.cout / geo.cout_g;
    let mut acc = vec![0.0; n];
    for grp in 0..groups {
        let col = im2col(xd, geo, grp, stride, padding);
        for oc in grp * geo.cout_g..(grp + 1) * geo.cout_g {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let wrow = &wd[oc * k..(oc + 1) * k];
            for (ki, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (a, &c) in acc.iter_mut().zip(&col[ki * n..(ki + 1) * n]) {
                    *a += wv * c;
                }
            }
            for bi in 0..geo.b {
                out[(bi * geo.cout + oc) * ohw..][..ohw].copy_from_slice(&acc[bi * ohw..(bi + 1) * ohw]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_gemm_backward(xd: &[f64], wd: &[f64], g: &[f64], geo: &ConvGeom, stride: usize, padding: usize, mut gx: Option<&mut [f64]>, mut gw: Option<&mut [f64]>) {
    let ohw = geo.oh * geo.ow;
    let n = geo.b * ohw;
    let k = geo.cin_g * geo.kh * geo.kw;
    let groups = geo.cout / geo.cout_g;
    let mut grow = vec![0.0; n];
    for grp in 0..groups {
        let col = im2col(xd, geo, grp, stride, padding);
        let mut gcol = if gx.is_some() { vec![0.0; k * n] } else { Vec::new() };
        for oc in grp * geo.cout_g..(grp + 1) * geo.cout_g {
            for bi in 0..geo.b {
                grow[bi * ohw..(bi + 1) * ohw].copy_from_slice(&g[(bi * geo.cout + oc) * ohw..][..ohw]);
            }
            if let Some(gw) = gw.as_deref_mut() {
                for ki in 0..k {
                    let c = &col[ki * n..(ki + 1) * n];
                    gw[oc * k + ki] += c.iter().zip(&grow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if gx.is_some() {
                for ki in 0..k {
                    let wv = wd[oc * k + ki];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &gv) in gcol[ki * n..(ki + 1) * n].iter_mut().zip(&grow) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            for icg in 0..geo.cin_g {
                let ic = grp * geo.cin_g + icg;
                for ky in 0..geo.kh {
                    let (oy0, oy1) = valid_range(ky, stride, padding, geo.h, geo.oh);
                    for kx in 0..geo.kw {
                        let (ox0, ox1) = valid_range(kx, stride, padding, geo.w, geo.ow);
                        let row = &gcol[((icg * geo.kh + ky) * geo.kw + kx) * n..][..n];
                        for bi in 0..geo.b {
                            let dst = &mut gx[(bi * geo.cin + ic) * geo.h * geo.w..][..geo.h * geo.w];
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - padding;
                                let src = &row[bi * ohw + oy * geo.ow..][..geo.ow];
                                for ox in ox0..ox1 {
                                    dst[iy * geo.w + ox * stride + kx - padding] += src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
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

    fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            bail!(Numeric, "non-finite value produced by {}", op_name(&op));
        }
        value.requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure!(value.is_finite(), Numeric, "non-finite leaf value");
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input; it is differentiable when `t.requires_grad` is set.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad;
        self.leaf(t, rg)
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Bind a named trainable parameter. Binding the same name twice returns the same handle.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(t.clone(), true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0].value;
        node.grad.as_ref().map(|g| Tensor::new(node.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every bound parameter. Parameters the root does not depend on get zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Clear stored gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(ta.shape() == tb.shape(), Config, "add shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Add(a, b))
    }

    /// `a + b` with `b` broadcast to `a`'s shape (right-aligned, unit dims stretch).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let map = broadcast_map(ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data = ta.data().iter().zip(&map).map(|(x, &j)| x + bd[j]).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::AddBroadcast(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(ta.shape() == tb.shape(), Config, "mul shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure!(t.data().iter().all(|&v| v > 0.0), Numeric, "ln of non-positive value");
        let out = t.map(libm::log);
        self.push(out, Op::Ln(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    // ----- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes. `a` is `(..., M, K)`; `b` is either
    /// `(..., K, N)` with the same leading axes or a plain `(K, N)` matrix shared by
    /// every leading index.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        ensure!(sa.len() >= 2 && sb.len() >= 2, Config, "matmul needs rank >= 2, got {:?} x {:?}", sa, sb);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        ensure!(k == k2, Config, "matmul inner dimensions differ: {:?} x {:?}", sa, sb);
        let shared = sb.len() == 2;
        ensure!(shared || sb[..sb.len() - 2] == sa[..sa.len() - 2], Config, "matmul batch dimensions differ: {:?} x {:?}", sa, sb);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for bi in 0..batch {
            let am = &ad[bi * m * k..(bi + 1) * m * k];
            let bm = if shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
            let cm = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = am[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bm[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::MatMul { a, b })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        ensure!(axes.len() == shape.len(), Config, "permute axes {:?} for rank {}", axes, shape.len());
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            ensure!(a < axes.len() && !seen[a], Config, "invalid permutation {:?}", axes);
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(t.data(), shape, axes);
        let out = Tensor::new(&out_shape, out)?;
        self.push(out, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        ensure!(r >= 2, Config, "transpose needs rank >= 2");
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), Config, "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(axis < first.len(), Config, "concat axis {} out of range for {:?}", axis, first);
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                Config,
                "concat shape mismatch {:?} vs {:?} on axis {}",
                s,
                first,
                axis
            );
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        ensure!(axis < shape.len() && start + len <= shape[axis], Config, "slice [{}, {}) out of range on axis {} of {:?}", start, start + len, axis, shape);
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.push(out, Op::Slice { x, axis, start })
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        ensure!(axis < self.shape(x).len() && total == self.shape(x)[axis], Config, "split sizes {:?} do not cover axis {} of {:?}", sizes, axis, self.shape(x));
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        self.split(x, 1, sizes)
    }

    /// `(B, C, H, W)` to `(B, H*W, C)`.
    pub fn flatten_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let r = self.reshape(x, &[b, c, h * w])?;
        self.permute(r, &[0, 2, 1])
    }

    /// `(B, H*W, C)` back to `(B, C, H, W)`.
    pub fn unflatten_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [b, n, c] = self.shape(x)[..] else { bail!(Config, "unflatten_tokens expects (B, N, C), got {:?}", self.shape(x)) };
        ensure!(n == h * w, Config, "token count {} != {}x{}", n, h, w);
        let p = self.permute(x, &[0, 2, 1])?;
        self.reshape(p, &[b, c, h, w])
    }

    // ----- normalization and attention pieces ---------------------------

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        ensure!(axis < shape.len(), Config, "softmax axis {} out of range for {:?}", axis, shape);
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = libm::exp(out[base + j * inner] - mx);
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&0);
        ensure!(c > 0, Config, "layer_norm on empty last axis");
        ensure!(self.shape(gamma) == [c] && self.shape(beta) == [c], Config, "layer_norm affine must have length {}", c);
        let rows = t.len() / c;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gd[j] + bd[j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Batch normalization of a `(B, C, H, W)` map.
    ///
    /// Train mode normalizes each channel over batch and space with the biased
    /// variance and folds the batch statistics into `stats` (unbiased variance,
    /// momentum [`BN_MOMENTUM`]). Eval mode uses `stats` and leaves them alone.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats, mode: Mode, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = t.dims4()?;
        ensure!(b > 0, Config, "batch_norm on an empty batch");
        ensure!(self.shape(gamma) == [c] && self.shape(beta) == [c], Config, "batch_norm affine must have length {}", c);
        ensure!(stats.mean.len() == c && stats.var.len() == c, Config, "running statistics sized for {} channels, input has {}", stats.mean.len(), c);
        let hw = h * w;
        let count = (b * hw) as f64;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let xd = t.data();
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        let mut rstd = vec![0.0; c];
        for ci in 0..c {
            let (mean, rs) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        sum += xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = ss / count;
                    let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
                    stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean;
                    stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * unbiased;
                    (mean, 1.0 / libm::sqrt(var + eps))
                }
                Mode::Eval => (stats.mean[ci], 1.0 / libm::sqrt(stats.var[ci] + eps)),
            };
            rstd[ci] = rs;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for p in 0..hw {
                    let xh = (xd[base + p] - mean) * rs;
                    xhat[base + p] = xh;
                    out[base + p] = xh * gd[ci] + bd[ci];
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd, train: mode == Mode::Train })
    }

    /// Direct 2-D cross-correlation. `w` is `(C_out, C_in / groups, kH, kW)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let g = conv_geom(self.shape(x), self.shape(w), stride, padding, groups)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if g.cin_g > 1 {
            let out = conv_gemm_forward(xd, wd, &g, stride, padding);
            let out = Tensor::new(&[g.b, g.cout, g.oh, g.ow], out)?;
            return self.push(out, Op::Conv2d { x, w, stride, padding, groups });
        }
        let mut out = vec![0.0; g.b * g.cout * g.oh * g.ow];
        for bi in 0..g.b {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let plane = &mut out[(bi * g.cout + oc) * g.oh * g.ow..(bi * g.cout + oc + 1) * g.oh * g.ow];
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let inp = &xd[(bi * g.cin + ic) * g.h * g.w..(bi * g.cin + ic + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(ky, stride, padding, g.h, g.oh);
                        for kx in 0..g.kw {
                            let wv = wd[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox0, ox1) = valid_range(kx, stride, padding, g.w, g.ow);
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - padding;
                                let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                                let irow = &inp[iy * g.w..(iy + 1) * g.w];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[g.b, g.cout, g.oh, g.ow], out)?;
        self.push(out, Op::Conv2d { x, w, stride, padding, groups })
    }

    /// Nearest-neighbour upsampling of a `(B, C, H, W)` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = t.dims4()?;
        ensure!(factor > 0, Config, "upsample factor must be positive");
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &t.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    dst[y * ow + xo] = src[(y / factor) * w + xo / factor];
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        self.push(out, Op::UpsampleNearest { x, factor })
    }

    // ----- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure!(!t.is_empty(), Config, "mean of an empty tensor");
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, in the
    /// log-sum-exp form `max(x, 0) - x t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (tl, tt) = (self.value(logits), self.value(targets));
        ensure!(tl.shape() == tt.shape(), Config, "bce shape mismatch {:?} vs {:?}", tl.shape(), tt.shape());
        ensure!(!tl.is_empty(), Config, "bce of an empty tensor");
        ensure!(tt.data().iter().all(|&t| (0.0..=1.0).contains(&t)), Data, "bce targets must lie in [0, 1]");
        let s: f64 = tl
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + libm::log1p(libm::exp(-libm::fabs(x))))
            .sum();
        let loss = s / tl.len() as f64;
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets })
    }

    /// Soft Dice loss `1 - mean_c (2 Σ p t + s) / (Σ p + Σ t + s)` where sums run over
    /// batch and space of each channel `c` of a `(B, C, H, W)` pair.
    pub fn soft_dice(&mut self, probs: Var, targets: Var, smooth: f64) -> Result<Var> {
        let (tp, tt) = (self.value(probs), self.value(targets));
        ensure!(tp.shape() == tt.shape(), Config, "dice shape mismatch {:?} vs {:?}", tp.shape(), tt.shape());
        let (b, c, h, w) = tp.dims4()?;
        let stats = dice_sums(tp.data(), tt.data(), b, c, h * w);
        let mut acc = 0.0;
        for &(inter, ps, ts) in &stats {
            let den = ps + ts + smooth;
            acc += if den > 0.0 { (2.0 * inter + smooth) / den } else { 1.0 };
        }
        let loss = 1.0 - acc / c as f64;
        self.push(Tensor::scalar(loss), Op::SoftDice { probs, targets, smooth })
    }

    // ----- backward --------------------------------------------------------

    /// Accumulate d(root)/d(v) into every differentiable node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(!self.backward_done, Usage, "backward already ran on this graph; call reset_grads first");
        ensure!(self.value(root).len() == 1, Usage, "backward root must be a scalar, got shape {:?}", self.shape(root));
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[v.0].value.requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                bail!(Numeric, "non-finite gradient at {}", op_name(&self.nodes[i].op));
            }
            self.nodes[i].value.grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::AddBroadcast(a, b) => {
                res.push((*a, g.to_vec()));
                if self.rg(*b) {
                    let map = broadcast_map(out.shape(), self.shape(*b))?;
                    let mut gb = vec![0.0; self.value(*b).len()];
                    for (gv, &j) in g.iter().zip(&map) {
                        gb[j] += gv;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    res.push((*a, g.iter().zip(bd).map(|(g, y)| g * y).collect()));
                }
                if self.rg(*b) {
                    res.push((*b, g.iter().zip(ad).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Ln(x) => res.push((*x, g.iter().zip(self.value(*x).data()).map(|(g, v)| g / v).collect())),
            Op::Sigmoid(x) => res.push((*x, g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect())),
            Op::Gelu(x) => res.push((*x, g.iter().zip(self.value(*x).data()).map(|(g, &v)| g * gelu_grad(v)).collect())),
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (ad, bd) = (ta.data(), tb.data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for bi in 0..batch {
                        let bm = if shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        for r in 0..m {
                            let grow = &g[(bi * m + r) * n..(bi * m + r + 1) * n];
                            for p in 0..k {
                                let brow = &bm[p * n..(p + 1) * n];
                                ga[(bi * m + r) * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for bi in 0..batch {
                        let off = if shared { 0 } else { bi * k * n };
                        for r in 0..m {
                            let grow = &g[(bi * m + r) * n..(bi * m + r + 1) * n];
                            for p in 0..k {
                                let av = ad[(bi * m + r) * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[off + p * n..off + (p + 1) * n];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                res.push((*x, permute_data(g, out.shape(), &inv)));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            gi.extend_from_slice(&g[base..base + len * inner]);
                        }
                        res.push((v, gi));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = split_at_axis(in_shape, *axis);
                let len = out.shape()[*axis];
                let mut gi = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, gi));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_at_axis(out.shape(), *axis);
                let y = out.data();
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * n * inner + ii;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            gi[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                res.push((*x, gi));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let rows = xhat.len() / c;
                let gd = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                            gbeta[j] += g[r * c + j];
                        }
                    }
                    res.push((*gamma, gg));
                    res.push((*beta, gbeta));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gd[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let dxh = g[r * c + j] * gd[j];
                            gx[r * c + j] = rstd[r] * (dxh - s1 / c as f64 - xhat[r * c + j] * s2 / c as f64);
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let (b, c, h, w) = out.dims4()?;
                let hw = h * w;
                let count = (b * hw) as f64;
                let gd = self.value(*gamma).data();
                let (train, xh) = (*train, &xhat[..]);
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for p in 0..hw {
                            gg[ci] += g[base + p] * xh[base + p];
                            gbeta[ci] += g[base + p];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; out.len()];
                    for ci in 0..c {
                        let scale = gd[ci] * rstd[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * hw;
                            for p in 0..hw {
                                gx[base + p] = if train {
                                    scale * (g[base + p] - gbeta[ci] / count - xh[base + p] * gg[ci] / count)
                                } else {
                                    scale * g[base + p]
                                };
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, gg));
                res.push((*beta, gbeta));
            }
            Op::Conv2d { x, w, stride, padding, groups } => {
                let (stride, padding) = (*stride, *padding);
                let geo = conv_geom(self.shape(*x), self.shape(*w), stride, padding, *groups)?;
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; wd.len()] } else { Vec::new() };
                if geo.cin_g > 1 {
                    conv_gemm_backward(xd, wd, g, &geo, stride, padding, need_x.then_some(&mut gx[..]), need_w.then_some(&mut gw[..]));
                }
                for bi in 0..if geo.cin_g > 1 { 0 } else { geo.b } {
                    for oc in 0..geo.cout {
                        let grp = oc / geo.cout_g;
                        let gplane = &g[(bi * geo.cout + oc) * geo.oh * geo.ow..(bi * geo.cout + oc + 1) * geo.oh * geo.ow];
                        for icg in 0..geo.cin_g {
                            let ic = grp * geo.cin_g + icg;
                            let in_off = (bi * geo.cin + ic) * geo.h * geo.w;
                            for ky in 0..geo.kh {
                                let (oy0, oy1) = valid_range(ky, stride, padding, geo.h, geo.oh);
                                for kx in 0..geo.kw {
                                    let widx = ((oc * geo.cin_g + icg) * geo.kh + ky) * geo.kw + kx;
                                    let wv = wd[widx];
                                    let (ox0, ox1) = valid_range(kx, stride, padding, geo.w, geo.ow);
                                    let mut acc = 0.0;
                                    for oy in oy0..oy1 {
                                        let iy = oy * stride + ky - padding;
                                        let grow = &gplane[oy * geo.ow..(oy + 1) * geo.ow];
                                        let row_off = in_off + iy * geo.w;
                                        if need_w {
                                            let irow = &xd[row_off..row_off + geo.w];
                                            for ox in ox0..ox1 {
                                                acc += grow[ox] * irow[ox * stride + kx - padding];
                                            }
                                        }
                                        if need_x && wv != 0.0 {
                                            let girow = &mut gx[row_off..row_off + geo.w];
                                            for ox in ox0..ox1 {
                                                girow[ox * stride + kx - padding] += wv * grow[ox];
                                            }
                                        }
                                    }
                                    if need_w {
                                        gw[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    res.push((*x, gx));
                }
                if need_w {
                    res.push((*w, gw));
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (h * factor, w * factor);
                let mut gi = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dst = &mut gi[bc * h * w..(bc + 1) * h * w];
                    for y in 0..oh {
                        for xo in 0..ow {
                            dst[(y / factor) * w + xo / factor] += src[y * ow + xo];
                        }
                    }
                }
                res.push((*x, gi));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::BceWithLogits { logits, targets } => {
                let (tl, tt) = (self.value(*logits), self.value(*targets));
                let n = tl.len() as f64;
                if self.rg(*logits) {
                    res.push((*logits, tl.data().iter().zip(tt.data()).map(|(&x, &t)| g[0] * (sigmoid(x) - t) / n).collect()));
                }
                if self.rg(*targets) {
                    res.push((*targets, tl.data().iter().map(|&x| -g[0] * x / n).collect()));
                }
            }
            Op::SoftDice { probs, targets, smooth } => {
                let (tp, tt) = (self.value(*probs), self.value(*targets));
                let (b, c, h, w) = tp.dims4()?;
                let hw = h * w;
                let stats = dice_sums(tp.data(), tt.data(), b, c, hw);
                let cf = c as f64;
                let mut gp = vec![0.0; tp.len()];
                let mut gt = vec![0.0; tt.len()];
                for (ci, &(inter, ps, ts)) in stats.iter().enumerate() {
                    let den = ps + ts + smooth;
                    if den <= 0.0 {
                        continue;
                    }
                    let num = 2.0 * inter + smooth;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for p in 0..hw {
                            let (pv, tv) = (tp.data()[base + p], tt.data()[base + p]);
                            gp[base + p] = -g[0] / cf * (2.0 * tv * den - num) / (den * den);
                            gt[base + p] = -g[0] / cf * (2.0 * pv * den - num) / (den * den);
                        }
                    }
                }
                if self.rg(*probs) {
                    res.push((*probs, gp));
                }
                if self.rg(*targets) {
                    res.push((*targets, gt));
                }
            }
        }
        Ok(res)
    }
}

/// Per-channel `(Σ p t, Σ p, Σ t)` of a `(B, C, HW)` pair.
fn dice_sums(p: &[f64], t: &[f64], b: usize, c: usize, hw: usize) -> Vec<(f64, f64, f64)> {
    (0..c)
        .map(|ci| {
            let mut acc = (0.0, 0.0, 0.0);
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for k in base..base + hw {
                    acc.0 += p[k] * t[k];
                    acc.1 += p[k];
                    acc.2 += t[k];
                }
            }
            acc
        })
        .collect()
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_str = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_str: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(data[cur]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            cur += src_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= src_str[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBroadcast(..) => "add_broadcast",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Ln(..) => "ln",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
        Op::MatMul { .. } => "matmul",
        Op::Permute { .. } => "permute",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Conv2d { .. } => "conv2d",
        Op::UpsampleNearest { .. } => "upsample_nearest",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::SoftDice { .. } => "soft_dice",
    }
}

