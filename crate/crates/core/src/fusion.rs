//! Feature enhancement (FEB), feature fusion (FFB) and global attention (GAB)
//! blocks, plus the adapter that aligns a shallow ViT feature to a deeper CNN
//! grid for staggered fusion.

use alloc::format;

use crate::error::{bail, ensure, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attend, Attention, Conv, ConvBnGelu, ConvKind, Ctx, DwConvBlock, LayerNorm, Linear, ParamBuilder};

/// A (CNN stage, ViT stage) pair consumed by one fusion block. Stages count from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct FusionPair {
    pub cnn_stage: usize,
    pub vit_stage: usize,
}

impl FusionPair {
    /// A staggered pair: the CNN side must be strictly deeper.
    pub fn stagger(cnn_stage: usize, vit_stage: usize) -> Result<Self> {
        ensure!(cnn_stage > vit_stage, Config, "stagger pair needs cnn_stage > vit_stage, got ({}, {})", cnn_stage, vit_stage);
        Ok(Self { cnn_stage, vit_stage })
    }

    pub fn unstagger(stage: usize) -> Self {
        Self { cnn_stage: stage, vit_stage: stage }
    }

    pub fn is_stagger(&self) -> bool {
        self.cnn_stage > self.vit_stage
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FebHook {
    #[default]
    None,
    /// Skip projection and attention so only the depth-wise convolutions act.
    BypassAttention,
}

/// Joint self-attention over two consecutive ViT stages followed by a depth-wise
/// convolution per branch. Output shapes equal input shapes.
///
/// Each branch is projected to the narrower of the two channel widths before the
/// token sequences are concatenated, and projected back afterwards. The attention
/// result is added to the input feature.
#[derive(Clone, Debug)]
pub struct Feb {
    pub proj_in: [Linear; 2],
    pub norm: LayerNorm,
    pub attn: Attention,
    pub proj_out: [Linear; 2],
    pub dw: [DwConvBlock; 2],
    pub channels: [usize; 2],
    pub hook: FebHook,
}

impl Feb {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, channels: [usize; 2], heads: usize) -> Result<Self> {
        let width = channels[0].min(channels[1]);
        Ok(Self {
            proj_in: [
                Linear::new(pb, &format!("{prefix}.in0"), channels[0], width, true)?,
                Linear::new(pb, &format!("{prefix}.in1"), channels[1], width, true)?,
            ],
            norm: LayerNorm::new(pb, &format!("{prefix}.norm"), width)?,
            attn: Attention::new(pb, &format!("{prefix}.attn"), width, heads, true)?,
            proj_out: [
                Linear::new(pb, &format!("{prefix}.out0"), width, channels[0], true)?,
                Linear::new(pb, &format!("{prefix}.out1"), width, channels[1], true)?,
            ],
            dw: [DwConvBlock::new(pb, &format!("{prefix}.dw0"), channels[0])?, DwConvBlock::new(pb, &format!("{prefix}.dw1"), channels[1])?],
            channels,
            hook: FebHook::None,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f_i: Var, f_ip1: Var) -> Result<(Var, Var)> {
        let (b0, c0, h0, w0) = cx.g.value(f_i).dims4()?;
        let (b1, c1, h1, w1) = cx.g.value(f_ip1).dims4()?;
        ensure!(b0 == b1, Config, "FEB batch mismatch {} vs {}", b0, b1);
        ensure!([c0, c1] == self.channels, Config, "FEB built for channels {:?}, got [{}, {}]", self.channels, c0, c1);
        let (e0, e1) = match self.hook {
            FebHook::BypassAttention => (f_i, f_ip1),
            FebHook::None => {
                let t0 = cx.g.flatten_tokens(f_i)?;
                let t1 = cx.g.flatten_tokens(f_ip1)?;
                let t0 = self.proj_in[0].forward(cx, t0)?;
                let t1 = self.proj_in[1].forward(cx, t1)?;
                let joint = cx.g.concat(&[t0, t1], 1)?;
                let h = self.norm.forward(cx, joint)?;
                let a = self.attn.forward(cx, h, h)?;
                let parts = cx.g.split(a, 1, &[h0 * w0, h1 * w1])?;
                let u0 = self.proj_out[0].forward(cx, parts[0])?;
                let u1 = self.proj_out[1].forward(cx, parts[1])?;
                let u0 = cx.g.unflatten_tokens(u0, h0, w0)?;
                let u1 = cx.g.unflatten_tokens(u1, h1, w1)?;
                (cx.g.add(f_i, u0)?, cx.g.add(f_ip1, u1)?)
            }
        };
        Ok((self.dw[0].forward(cx, e0)?, self.dw[1].forward(cx, e1)?))
    }
}

/// Two-round concatenate-and-convolve fusion of a `4d`-channel CNN feature with a
/// `d`-channel ViT feature into a `2d`-channel fused feature.
#[derive(Clone, Debug)]
pub struct Ffb {
    pub first: ConvBnGelu,
    pub second: ConvBnGelu,
    pub d: usize,
}

impl Ffb {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, d: usize) -> Result<Self> {
        ensure!(d > 0, Config, "FFB width must be positive");
        Ok(Self {
            first: ConvBnGelu::new(pb, &format!("{prefix}.first"), 5 * d, 2 * d, 3, 1, ConvKind::Separable)?,
            second: ConvBnGelu::new(pb, &format!("{prefix}.second"), 6 * d, 2 * d, 3, 1, ConvKind::Separable)?,
            d,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f_c: Var, f_t: Var) -> Result<Var> {
        Ok(self.forward_traced(cx, f_c, f_t)?.0)
    }

    /// Forward pass that also reports the channel count after each step:
    /// `[concat, first conv, second concat, fused]`.
    pub fn forward_traced(&self, cx: &mut Ctx, f_c: Var, f_t: Var) -> Result<(Var, [usize; 4])> {
        let (bc, cc, hc, wc) = cx.g.value(f_c).dims4()?;
        let (bt, ct, ht, wt) = cx.g.value(f_t).dims4()?;
        ensure!(cc == 4 * ct, Config, "FFB needs CNN channels = 4 x ViT channels, got {} and {} (mis-wired stagger pair?)", cc, ct);
        ensure!(ct == self.d, Config, "FFB built for d = {}, got ViT width {}", self.d, ct);
        ensure!(bc == bt && hc == ht && wc == wt, Config, "FFB spatial mismatch {:?} vs {:?}", [bc, hc, wc], [bt, ht, wt]);
        let f1 = cx.g.concat_channels(&[f_c, f_t])?;
        let f2 = self.first.forward(cx, f1)?;
        let f3 = cx.g.concat_channels(&[f2, f_c])?;
        let fused = self.second.forward(cx, f3)?;
        let ch = |g: &Graph, v: Var| g.shape(v)[1];
        let trace = [ch(cx.g, f1), ch(cx.g, f2), ch(cx.g, f3), ch(cx.g, fused)];
        Ok((fused, trace))
    }
}

/// Stand-in for [`Ffb`] when the block is ablated: concatenation and a 1x1 conv to `2d`.
#[derive(Clone, Debug)]
pub struct ConcatFuse {
    pub conv: Conv,
    pub d: usize,
}

impl ConcatFuse {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(pb, &format!("{prefix}.conv"), 5 * d, 2 * d, 1, 1, 0, 1, true)?, d })
    }

    pub fn forward(&self, cx: &mut Ctx, f_c: Var, f_t: Var) -> Result<Var> {
        let cat = cx.g.concat_channels(&[f_c, f_t])?;
        self.conv.forward(cx, cat)
    }
}

/// Intermediate values of the global attention computation, all `(B, N, d)` except
/// `f_sum` which is `(B, N, N)`.
#[derive(Clone, Copy, Debug)]
pub struct GabParts {
    pub f_sum: Var,
    pub f1: Var,
    pub f2: Var,
    pub out: Var,
}

/// Sum of two self-attention maps, value swap between the layers, then
/// cross-attention with queries from the first and keys/values from the second.
///
/// The deeper input is upsampled x2 and linearly projected to the shallower
/// input's width first so both token sets have the same length.
#[derive(Clone, Debug)]
pub struct Gab {
    pub align: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub d: usize,
    pub deep_channels: usize,
}

impl Gab {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, d: usize, deep_channels: usize) -> Result<Self> {
        Ok(Self {
            align: Linear::new(pb, &format!("{prefix}.align"), deep_channels, d, true)?,
            wq: Linear::new(pb, &format!("{prefix}.wq"), d, d, false)?,
            wk: Linear::new(pb, &format!("{prefix}.wk"), d, d, false)?,
            wv: Linear::new(pb, &format!("{prefix}.wv"), d, d, false)?,
            d,
            deep_channels,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, f_in1: Var, f_in2: Var) -> Result<Var> {
        let (b, c, h, w) = cx.g.value(f_in1).dims4()?;
        let (b2, c2, h2, w2) = cx.g.value(f_in2).dims4()?;
        ensure!(c == self.d && c2 == self.deep_channels && b == b2, Config, "GAB built for ({}, {}) channels, got ({}, {})", self.d, self.deep_channels, c, c2);
        ensure!(2 * h2 == h && 2 * w2 == w, Config, "GAB expects the second input at half resolution: {}x{} vs {}x{}", h, w, h2, w2);
        let t1 = cx.g.flatten_tokens(f_in1)?;
        let up = cx.g.upsample_nearest(f_in2, 2)?;
        let t2 = cx.g.flatten_tokens(up)?;
        let t2 = self.align.forward(cx, t2)?;
        let parts = self.forward_tokens(cx, t1, t2)?;
        cx.g.unflatten_tokens(parts.out, h, w)
    }

    /// The attention core on aligned token sets `(B, N, d)`.
    pub fn forward_tokens(&self, cx: &mut Ctx, t1: Var, t2: Var) -> Result<GabParts> {
        if cx.g.shape(t1) != cx.g.shape(t2) {
            bail!(Internal, "GAB token sets differ after alignment: {:?} vs {:?}", cx.g.shape(t1), cx.g.shape(t2));
        }
        let (f_sum, f1, f2) = gab_mix(cx.g, t1, t2, self.d)?;
        let q = self.wq.forward(cx, f1)?;
        let k = self.wk.forward(cx, f2)?;
        let v = self.wv.forward(cx, f2)?;
        let out = attend(cx.g, q, k, v, 1)?;
        Ok(GabParts { f_sum, f1, f2, out })
    }
}

/// `F_sum = softmax(T1 T1^T / sqrt d) + softmax(T2 T2^T / sqrt d)`,
/// `F1 = F_sum T1 + T2`, `F2 = F_sum T2 + T1`.
fn gab_mix(g: &mut Graph, t1: Var, t2: Var, d: usize) -> Result<(Var, Var, Var)> {
    let scale = 1.0 / libm::sqrt(d as f64);
    let self_map = |g: &mut Graph, t: Var| -> Result<Var> {
        let tt = g.transpose_last2(t)?;
        let s = g.matmul(t, tt)?;
        let s = g.scale(s, scale)?;
        g.softmax(s, 2)
    };
    let a1 = self_map(g, t1)?;
    let a2 = self_map(g, t2)?;
    let f_sum = g.add(a1, a2)?;
    let m1 = g.matmul(f_sum, t1)?;
    let f1 = g.add(m1, t2)?;
    let m2 = g.matmul(f_sum, t2)?;
    let f2 = g.add(m2, t1)?;
    Ok((f_sum, f1, f2))
}

/// Strided depth-wise convolution onto a coarser grid followed by a point-wise
/// convolution to the target width. With `stride == 1` only the point-wise part
/// exists (the channel-only adapter of unstaggered fusion).
#[derive(Clone, Debug)]
pub struct StaggerAdapter {
    pub dw: Option<Conv>,
    pub pw: Conv,
    pub stride: usize,
}

impl StaggerAdapter {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        ensure!(stride > 0, Config, "adapter stride must be positive");
        let dw = if stride > 1 { Some(Conv::new(pb, &format!("{prefix}.dw"), in_channels, in_channels, stride, stride, 0, in_channels, false)?) } else { None };
        let pw = Conv::new(pb, &format!("{prefix}.pw"), in_channels, out_channels, 1, 1, 0, 1, true)?;
        Ok(Self { dw, pw, stride })
    }

    /// Adapter with a depth-wise stage even at stride 1 (a per-channel scale).
    pub fn with_depthwise(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        ensure!(stride > 0, Config, "adapter stride must be positive");
        let dw = Some(Conv::new(pb, &format!("{prefix}.dw"), in_channels, in_channels, stride, stride, 0, in_channels, false)?);
        let pw = Conv::new(pb, &format!("{prefix}.pw"), in_channels, out_channels, 1, 1, 0, 1, true)?;
        Ok(Self { dw, pw, stride })
    }

    pub fn forward(&self, cx: &mut Ctx, f_t: Var) -> Result<Var> {
        let (_, c, h, w) = cx.g.value(f_t).dims4()?;
        ensure!(c == self.pw.in_channels, Config, "adapter expects {} channels, got {}", self.pw.in_channels, c);
        ensure!(h % self.stride == 0 && w % self.stride == 0, Config, "adapter stride {} does not divide {}x{}", self.stride, h, w);
        let y = match &self.dw {
            Some(dw) => dw.forward(cx, f_t)?,
            None => f_t,
        };
        self.pw.forward(cx, y)
    }
}

/// Stride that maps a `from` grid onto a `target` grid; errors unless it divides exactly.
pub fn adapter_stride(from: (usize, usize), target: (usize, usize)) -> Result<usize> {
    ensure!(target.0 > 0 && target.1 > 0, Config, "target resolution must be positive");
    ensure!(from.0.is_multiple_of(target.0) && from.1.is_multiple_of(target.1), Config, "target {:?} does not divide {:?}", target, from);
    let s = from.0 / target.0;
    ensure!(from.1 / target.1 == s, Config, "anisotropic adapter stride {:?} -> {:?}", from, target);
    Ok(s)
}
