//! Parameterized layers: convolutions, normalization, attention, patch
//! embedding, transformer blocks and the decoder up-sampling block.
//!
//! Layers are plain structs that remember the dotted names of their
//! parameters. They are created once against a [`ParamBuilder`] (which
//! allocates and initializes the tensors) and evaluated many times through a
//! [`Ctx`] that binds those names into a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, ensure, Error, Result};
use crate::graph::{BnStats, Graph, Mode, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    pub init_seed: u64,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        ensure!(slot.shape() == t.shape(), Config, "parameter `{}` has shape {:?}, got {:?}", name, slot.shape(), t.shape());
        *slot = t;
        Ok(())
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<()> {
        ensure!(!self.tensors.contains_key(&name), Internal, "duplicate parameter `{}`", name);
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Running statistics of every batch-norm layer, keyed by layer name.
pub type BufferSet = BTreeMap<String, BnStats>;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled outside two deviations.
    TruncNormal(f64),
    /// Uniform on `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
}

/// Allocates parameters in a deterministic order from one seeded stream.
pub struct ParamBuilder {
    params: ParamSet,
    buffers: BufferSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { params: ParamSet { tensors: BTreeMap::new(), init_seed: seed }, buffers: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<String> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{e}")))?;
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if libm::fabs(v) <= 2.0 * std {
                        break v;
                    }
                })
            }
            Init::KaimingUniform { fan_in } => {
                ensure!(fan_in > 0, Config, "fan_in of `{}` must be positive", name);
                let bound = libm::sqrt(6.0 / fan_in as f64);
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
        };
        self.params.insert(name.to_string(), t)?;
        Ok(name.to_string())
    }

    pub fn add_bn_stats(&mut self, name: &str, channels: usize) -> Result<String> {
        ensure!(!self.buffers.contains_key(name), Internal, "duplicate buffer `{}`", name);
        self.buffers.insert(name.to_string(), BnStats::new(channels));
        Ok(name.to_string())
    }

    pub fn finish(self) -> (ParamSet, BufferSet) {
        (self.params, self.buffers)
    }
}

/// Evaluation context binding a parameter set and running statistics into a graph.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a ParamSet,
    pub buffers: &'a mut BufferSet,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamSet, buffers: &'a mut BufferSet, mode: Mode) -> Self {
        Self { g, params, buffers, mode }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        self.g.param(name, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Cnn,
    Vit,
}

/// One encoder stage: channel widths and the resolution relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resolution_divisor: usize,
    pub kind: StageKind,
}

impl StageSpec {
    pub fn validate(&self, input_size: (usize, usize)) -> Result<()> {
        ensure!(self.in_channels > 0 && self.out_channels > 0, Config, "stage channels must be positive");
        ensure!(self.resolution_divisor.is_power_of_two(), Config, "resolution divisor {} is not a power of two", self.resolution_divisor);
        ensure!(
            input_size.0.is_multiple_of(self.resolution_divisor) && input_size.1.is_multiple_of(self.resolution_divisor),
            Config,
            "divisor {} does not divide input {}x{}",
            self.resolution_divisor,
            input_size.0,
            input_size.1
        );
        Ok(())
    }
}

// ----- basic layers ---------------------------------------------------------------

/// Dense projection over the last axis: `x W (+ b)` with `W: (in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = pb.add(&format!("{prefix}.w"), &[in_dim, out_dim], Init::TruncNormal(0.02))?;
        let b = if bias { Some(pb.add(&format!("{prefix}.b"), &[out_dim], Init::Zeros)?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let last = *cx.g.shape(x).last().unwrap_or(&0);
        ensure!(last == self.in_dim, Config, "linear `{}` expects {} features, got {}", self.w, self.in_dim, last);
        let w = cx.p(&self.w)?;
        let y = cx.g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = cx.p(b)?;
                cx.g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution layer with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: String,
    pub b: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        ensure!(groups > 0 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups), Config, "`{}`: channels {}->{} not divisible by {} groups", prefix, in_channels, out_channels, groups);
        let fan_in = in_channels / groups * kernel * kernel;
        let w = pb.add(&format!("{prefix}.w"), &[out_channels, in_channels / groups, kernel, kernel], Init::KaimingUniform { fan_in })?;
        let b = if bias { Some(pb.add(&format!("{prefix}.b"), &[out_channels, 1, 1], Init::Zeros)?) } else { None };
        Ok(Self { w, b, in_channels, out_channels, kernel, stride, padding, groups })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(&self.w)?;
        let y = cx.g.conv2d(x, w, self.stride, self.padding, self.groups)?;
        match &self.b {
            Some(b) => {
                let b = cx.p(b)?;
                cx.g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub stats: String,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.add(&format!("{prefix}.gamma"), &[channels], Init::Ones)?,
            beta: pb.add(&format!("{prefix}.beta"), &[channels], Init::Zeros)?,
            stats: pb.add_bn_stats(prefix, channels)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.p(&self.gamma)?;
        let beta = cx.p(&self.beta)?;
        let stats = cx.buffers.get_mut(&self.stats).ok_or_else(|| Error::Internal(format!("unknown buffer `{}`", self.stats)))?;
        cx.g.batch_norm(x, gamma, beta, stats, cx.mode, BN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: pb.add(&format!("{prefix}.gamma"), &[dim], Init::Ones)?, beta: pb.add(&format!("{prefix}.beta"), &[dim], Init::Zeros)? })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.p(&self.gamma)?;
        let beta = cx.p(&self.beta)?;
        cx.g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

// ----- composite blocks -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Full convolution with a `k x k` kernel.
    Dense,
    /// Depth-wise `k x k` followed by point-wise `1 x 1`.
    Separable,
}

/// Conv-BN-GELU. Padding is `(k - 1) / 2`, so stride 1 keeps the spatial size.
#[derive(Clone, Debug)]
pub struct ConvBnGelu {
    pub convs: Vec<Conv>,
    pub bn: BatchNorm2d,
}

impl ConvBnGelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, kind: ConvKind) -> Result<Self> {
        let pad = (kernel - 1) / 2;
        let convs = match kind {
            ConvKind::Dense => alloc::vec![Conv::new(pb, &format!("{prefix}.conv"), in_channels, out_channels, kernel, stride, pad, 1, false)?],
            ConvKind::Separable => alloc::vec![
                Conv::new(pb, &format!("{prefix}.dw"), in_channels, in_channels, kernel, stride, pad, in_channels, false)?,
                Conv::new(pb, &format!("{prefix}.pw"), in_channels, out_channels, 1, 1, 0, 1, false)?,
            ],
        };
        let bn = BatchNorm2d::new(pb, &format!("{prefix}.bn"), out_channels)?;
        Ok(Self { convs, bn })
    }

    /// Stem variant: a `k x k` stride-`k` patchifying convolution without padding.
    pub fn patchify(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, out_channels: usize, k: usize) -> Result<Self> {
        let conv = Conv::new(pb, &format!("{prefix}.conv"), in_channels, out_channels, k, k, 0, 1, false)?;
        let bn = BatchNorm2d::new(pb, &format!("{prefix}.bn"), out_channels)?;
        Ok(Self { convs: alloc::vec![conv], bn })
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let in_c = cx.g.shape(x).get(1).copied().unwrap_or(0);
        ensure!(in_c == self.convs[0].in_channels, Config, "`{}` expects {} channels, got {}", self.convs[0].w, self.convs[0].in_channels, in_c);
        let mut y = x;
        for c in &self.convs {
            y = c.forward(cx, y)?;
        }
        let y = self.bn.forward(cx, y)?;
        cx.g.gelu(y)
    }
}

/// Depth-wise 3x3 convolution with bias.
#[derive(Clone, Debug)]
pub struct DwConvBlock {
    pub conv: Conv,
}

impl DwConvBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(pb, prefix, channels, channels, 3, 1, 1, channels, true)? })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.conv.forward(cx, x)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
///
/// Used as self-attention by passing the same tokens twice. Each head uses the
/// scale `1 / sqrt(C / heads)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, dim: usize, heads: usize, out_proj: bool) -> Result<Self> {
        ensure!(heads > 0 && dim.is_multiple_of(heads), Config, "`{}`: {} channels not divisible by {} heads", prefix, dim, heads);
        Ok(Self {
            wq: Linear::new(pb, &format!("{prefix}.wq"), dim, dim, false)?,
            wk: Linear::new(pb, &format!("{prefix}.wk"), dim, dim, false)?,
            wv: Linear::new(pb, &format!("{prefix}.wv"), dim, dim, false)?,
            wo: if out_proj { Some(Linear::new(pb, &format!("{prefix}.wo"), dim, dim, true)?) } else { None },
            heads,
            dim,
        })
    }

    /// `q_tokens: (B, Nq, C)`, `kv_tokens: (B, Nk, C)` to `(B, Nq, C)`.
    pub fn forward(&self, cx: &mut Ctx, q_tokens: Var, kv_tokens: Var) -> Result<Var> {
        let [b, nq, c] = cx.g.shape(q_tokens)[..] else { bail!(Config, "attention queries must be (B, N, C), got {:?}", cx.g.shape(q_tokens)) };
        let [b2, nk, c2] = cx.g.shape(kv_tokens)[..] else { bail!(Config, "attention keys must be (B, N, C), got {:?}", cx.g.shape(kv_tokens)) };
        ensure!(b == b2 && c == self.dim && c2 == self.dim, Config, "attention token/channel mismatch: {:?} vs {:?} for dim {}", [b, nq, c], [b2, nk, c2], self.dim);
        let q = self.wq.forward(cx, q_tokens)?;
        let k = self.wk.forward(cx, kv_tokens)?;
        let v = self.wv.forward(cx, kv_tokens)?;
        let o = attend(cx.g, q, k, v, self.heads)?;
        match &self.wo {
            Some(wo) => wo.forward(cx, o),
            None => Ok(o),
        }
    }
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head for already projected `(B, N, C)` tensors.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let [b, nq, c] = g.shape(q)[..] else { bail!(Config, "attend expects (B, N, C)") };
    let nk = g.shape(k)[1];
    let dh = c / heads;
    let split = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
        let r = g.reshape(x, &[b, n, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let (qh, kh, vh) = (split(g, q, nq)?, split(g, k, nk)?, split(g, v, nk)?);
    let kt = g.transpose_last2(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
    let attn = g.softmax(scores, 3)?;
    let o = g.matmul(attn, vh)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, nq, c])
}

/// Default head count: `ceil(C / 32)`, at least 1.
pub fn default_heads(channels: usize) -> usize {
    channels.div_ceil(32).max(1)
}

/// Pre-norm transformer block: attention and a GELU MLP (ratio 2), both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(pb, &format!("{prefix}.ln1"), dim)?,
            attn: Attention::new(pb, &format!("{prefix}.attn"), dim, heads, true)?,
            ln2: LayerNorm::new(pb, &format!("{prefix}.ln2"), dim)?,
            fc1: Linear::new(pb, &format!("{prefix}.fc1"), dim, 2 * dim, true)?,
            fc2: Linear::new(pb, &format!("{prefix}.fc2"), 2 * dim, dim, true)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, tokens: Var) -> Result<Var> {
        let h = self.ln1.forward(cx, tokens)?;
        let a = self.attn.forward(cx, h, h)?;
        let x = cx.g.add(tokens, a)?;
        let h = self.ln2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.g.gelu(h)?;
        let h = self.fc2.forward(cx, h)?;
        cx.g.add(x, h)
    }
}

/// Strided-convolution tokenizer with a learned additive positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv,
    pub pos: String,
    pub stride: usize,
}

impl PatchEmbed {
    /// `out_hw` is the output grid size, used to shape the positional embedding.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, spec: &StageSpec, stride: usize, out_hw: (usize, usize)) -> Result<Self> {
        ensure!(stride > 0, Config, "patch stride must be positive");
        let conv = Conv::new(pb, &format!("{prefix}.proj"), spec.in_channels, spec.out_channels, stride, stride, 0, 1, true)?;
        let pos = pb.add(&format!("{prefix}.pos"), &[1, spec.out_channels, out_hw.0, out_hw.1], Init::TruncNormal(0.02))?;
        Ok(Self { conv, pos, stride })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (_, _, h, w) = cx.g.value(x).dims4()?;
        ensure!(h % self.stride == 0 && w % self.stride == 0, Config, "patch stride {} does not divide {}x{}", self.stride, h, w);
        let y = self.conv.forward(cx, x)?;
        let pos = cx.p(&self.pos)?;
        ensure!(cx.g.shape(pos)[1..] == cx.g.shape(y)[1..], Config, "positional embedding {:?} does not match tokens {:?}", cx.g.shape(pos), cx.g.shape(y));
        cx.g.add_broadcast(y, pos)
    }
}

/// Decoder step: nearest x2 + 3x3 Conv-BN-GELU halving the channels, concatenate
/// the skip feature, then a 3x3 Conv-BN-GELU back to half the input width.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub up: ConvBnGelu,
    pub fuse: ConvBnGelu,
    pub in_channels: usize,
    pub skip_channels: usize,
}

impl UpsampleBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, skip_channels: usize) -> Result<Self> {
        ensure!(in_channels >= 2 && in_channels.is_multiple_of(2), Config, "`{}`: input width {} cannot be halved", prefix, in_channels);
        let half = in_channels / 2;
        Ok(Self {
            up: ConvBnGelu::new(pb, &format!("{prefix}.up"), in_channels, half, 3, 1, ConvKind::Dense)?,
            fuse: ConvBnGelu::new(pb, &format!("{prefix}.fuse"), half + skip_channels, half, 3, 1, ConvKind::Dense)?,
            in_channels,
            skip_channels,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, skip: Var) -> Result<Var> {
        let (b, c, h, w) = cx.g.value(x).dims4()?;
        let (bs, cs, hs, ws) = cx.g.value(skip).dims4()?;
        ensure!(c == self.in_channels, Config, "upsample block expects {} channels, got {}", self.in_channels, c);
        ensure!(bs == b && cs == self.skip_channels && hs == 2 * h && ws == 2 * w, Config, "skip {:?} does not match upsampled input {:?}", [bs, cs, hs, ws], [b, c, 2 * h, 2 * w]);
        let u = cx.g.upsample_nearest(x, 2)?;
        let u = self.up.forward(cx, u)?;
        let cat = cx.g.concat_channels(&[u, skip])?;
        self.fuse.forward(cx, cat)
    }
}
