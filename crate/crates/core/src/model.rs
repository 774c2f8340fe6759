//! The full network: parallel CNN and ViT encoders, FEB on the two shallow ViT
//! stages, two FFB fusions, GAB on the two deep ViT stages, a U-shaped decoder
//! and a deep-supervision head on the fused features.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, ensure, Result};
use crate::fusion::{ConcatFuse, Feb, Ffb, FusionPair, Gab, StaggerAdapter};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{default_heads, BufferSet, Conv, ConvBnGelu, ConvKind, Ctx, ParamBuilder, ParamSet, PatchEmbed, StageKind, StageSpec, TransformerBlock, UpsampleBlock};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Deeper CNN stages fused with shallower (FEB-enhanced) ViT stages.
    #[default]
    Stagger,
    /// CNN and ViT stages with the same index.
    Unstagger,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadKind {
    /// Nearest x4 upsampling then a 1x1 classifier.
    Plain,
    /// Nearest x4 upsampling, concatenation with the input image and a
    /// separable 3x3 Conv-BN-GELU before the 1x1 classifier.
    #[default]
    Refine,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub fusion_mode: FusionMode,
    pub enable_feb: bool,
    pub enable_ffb: bool,
    pub enable_gab: bool,
    pub head: HeadKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            in_channels: 1,
            num_classes: 4,
            base_width: 8,
            fusion_mode: FusionMode::Stagger,
            enable_feb: true,
            enable_ffb: true,
            enable_gab: true,
            head: HeadKind::Refine,
        }
    }
}

/// Names accepted by [`NetworkConfig::ablate`].
pub const ABLATION_FLAGS: [&str; 4] = ["stagger", "feb", "ffb", "gab"];

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        ensure!(h > 0 && w > 0 && h % 32 == 0 && w % 32 == 0, Config, "input size {}x{} must be positive multiples of 32", h, w);
        ensure!(self.in_channels > 0, Config, "in_channels must be positive");
        ensure!(self.num_classes > 0, Config, "num_classes must be positive");
        ensure!(self.base_width > 0, Config, "base_width must be positive");
        Ok(())
    }

    pub fn cnn_channels(&self) -> [usize; 4] {
        let c = self.base_width;
        [4 * c, 8 * c, 16 * c, 32 * c]
    }

    pub fn vit_channels(&self) -> [usize; 4] {
        let c = self.base_width;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Resolution divisor of each stage, shared by both branches.
    pub fn divisors(&self) -> [usize; 4] {
        [4, 8, 16, 32]
    }

    pub fn stage_specs(&self, kind: StageKind) -> [StageSpec; 4] {
        let ch = match kind {
            StageKind::Cnn => self.cnn_channels(),
            StageKind::Vit => self.vit_channels(),
        };
        let div = self.divisors();
        core::array::from_fn(|i| StageSpec {
            in_channels: if i == 0 { self.in_channels } else { ch[i - 1] },
            out_channels: ch[i],
            resolution_divisor: div[i],
            kind,
        })
    }

    pub fn fusion_pairs(&self) -> [FusionPair; 2] {
        match self.fusion_mode {
            FusionMode::Stagger => [FusionPair { cnn_stage: 3, vit_stage: 1 }, FusionPair { cnn_stage: 4, vit_stage: 2 }],
            FusionMode::Unstagger => [FusionPair::unstagger(3), FusionPair::unstagger(4)],
        }
    }

    /// Disable the named components. `stagger` switches to unstaggered fusion.
    pub fn ablate(&self, flags: &[&str]) -> Result<Self> {
        let mut out = self.clone();
        for &f in flags {
            match f {
                "stagger" => out.fusion_mode = FusionMode::Unstagger,
                "feb" => out.enable_feb = false,
                "ffb" => out.enable_ffb = false,
                "gab" => out.enable_gab = false,
                other => bail!(Usage, "unknown ablation flag `{}` (expected one of {:?})", other, ABLATION_FLAGS),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Fuser {
    Ffb(Ffb),
    Concat(ConcatFuse),
}

#[derive(Clone, Debug)]
struct FusionUnit {
    pair: FusionPair,
    adapter: StaggerAdapter,
    fuser: Fuser,
}

impl FusionUnit {
    fn forward(&self, cx: &mut Ctx, f_c: Var, f_t: Var) -> Result<Var> {
        let a = self.adapter.forward(cx, f_t)?;
        match &self.fuser {
            Fuser::Ffb(b) => b.forward(cx, f_c, a),
            Fuser::Concat(b) => b.forward(cx, f_c, a),
        }
    }
}

#[derive(Clone, Debug)]
struct CnnStage {
    down: ConvBnGelu,
    conv: ConvBnGelu,
}

#[derive(Clone, Debug)]
struct VitStage {
    embed: PatchEmbed,
    block: TransformerBlock,
}

#[derive(Clone, Debug)]
struct Layers {
    cnn: Vec<CnnStage>,
    vit: Vec<VitStage>,
    feb: Option<Feb>,
    fuse: [FusionUnit; 2],
    gab: Option<Gab>,
    up: [UpsampleBlock; 3],
    refine: Option<ConvBnGelu>,
    classifier: Conv,
    ds: [Conv; 2],
}

/// Intermediate feature maps of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub cnn: [Tensor; 4],
    /// ViT stage outputs before FEB.
    pub vit: [Tensor; 4],
    /// ViT stages 1 and 2 after FEB (equal to the raw ones when FEB is off).
    pub vit_enhanced: [Tensor; 2],
    pub fused: [Tensor; 2],
    pub gab: Tensor,
    pub decoder: [Tensor; 3],
}

impl ForwardTrace {
    /// `(name, feature)` for every traced architecture point.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.cnn.iter().enumerate() {
            out.push((format!("cnn{}", i + 1), t));
        }
        for (i, t) in self.vit.iter().enumerate() {
            out.push((format!("vit{}", i + 1), t));
        }
        for (i, t) in self.vit_enhanced.iter().enumerate() {
            out.push((format!("feb{}", i + 1), t));
        }
        for (i, t) in self.fused.iter().enumerate() {
            out.push((format!("fuse{}", i + 1), t));
        }
        out.push((String::from("gab"), &self.gab));
        for (i, t) in self.decoder.iter().enumerate() {
            out.push((format!("dec{}", i + 1), t));
        }
        out
    }
}

pub struct ForwardOutput {
    /// Final logits `(B, K, H, W)`.
    pub y_hat: Var,
    /// Deep-supervision logits `(B, K, H, W)`.
    pub y_hat_f: Var,
    pub trace: Option<ForwardTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamSet,
    pub buffers: BufferSet,
    layers: Layers,
}

impl Model {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let layers = build_layers(&mut pb, config)?;
        let (params, buffers) = pb.finish();
        Ok(Self { config: config.clone(), params, buffers, layers })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn fusion_pairs(&self) -> [FusionPair; 2] {
        [self.layers.fuse[0].pair, self.layers.fuse[1].pair]
    }

    /// Run the network on `images: (B, in_channels, H, W)`. Running statistics are
    /// updated in train mode.
    pub fn forward(&mut self, g: &mut Graph, images: Var, mode: Mode, trace: bool) -> Result<ForwardOutput> {
        let (_, c, h, w) = g.value(images).dims4()?;
        ensure!(c == self.config.in_channels, Config, "model expects {} input channels, got {}", self.config.in_channels, c);
        ensure!((h, w) == self.config.input_size, Config, "model built for {:?} inputs, got {}x{}", self.config.input_size, h, w);
        let Model { params, buffers, layers, .. } = self;
        let mut cx = Ctx::new(g, params, buffers, mode);
        layers.forward(&mut cx, images, trace)
    }

    /// Forward with caller-supplied parameters and buffers, e.g. perturbed copies
    /// during gradient checking. Performs no input validation.
    pub fn forward_with(&self, cx: &mut Ctx, images: Var, trace: bool) -> Result<ForwardOutput> {
        self.layers.forward(cx, images, trace)
    }
}

fn build_layers(pb: &mut ParamBuilder, cfg: &NetworkConfig) -> Result<Layers> {
    let cc = cfg.cnn_channels();
    let vc = cfg.vit_channels();
    let (h, w) = cfg.input_size;
    let cin = cfg.in_channels;

    let mut cnn = Vec::with_capacity(4);
    cnn.push(CnnStage {
        down: ConvBnGelu::patchify(pb, "cnn.s1.stem", cin, cc[0], 4)?,
        conv: ConvBnGelu::new(pb, "cnn.s1.conv", cc[0], cc[0], 3, 1, ConvKind::Dense)?,
    });
    for i in 1..4 {
        cnn.push(CnnStage {
            down: ConvBnGelu::new(pb, &format!("cnn.s{}.down", i + 1), cc[i - 1], cc[i], 3, 2, ConvKind::Dense)?,
            conv: ConvBnGelu::new(pb, &format!("cnn.s{}.conv", i + 1), cc[i], cc[i], 3, 1, ConvKind::Dense)?,
        });
    }

    let specs = cfg.stage_specs(StageKind::Vit);
    let mut vit = Vec::with_capacity(4);
    for (i, spec) in specs.iter().enumerate() {
        spec.validate(cfg.input_size)?;
        let stride = if i == 0 { 4 } else { 2 };
        let div = spec.resolution_divisor;
        vit.push(VitStage {
            embed: PatchEmbed::new(pb, &format!("vit.s{}.embed", i + 1), spec, stride, (h / div, w / div))?,
            block: TransformerBlock::new(pb, &format!("vit.s{}.block", i + 1), vc[i], default_heads(vc[i]))?,
        });
    }

    let feb = if cfg.enable_feb { Some(Feb::new(pb, "feb", [vc[0], vc[1]], 1)?) } else { None };

    let pairs = cfg.fusion_pairs();
    let div = cfg.divisors();
    let fuse_unit = |pb: &mut ParamBuilder, k: usize| -> Result<FusionUnit> {
        let pair = pairs[k];
        let (ci, vi) = (pair.cnn_stage - 1, pair.vit_stage - 1);
        let d = cc[ci] / 4;
        let stride = div[ci] / div[vi];
        let prefix = format!("fuse{}", k + 1);
        let adapter = StaggerAdapter::new(pb, &format!("{prefix}.adapter"), vc[vi], d, stride)?;
        let fuser = if cfg.enable_ffb { Fuser::Ffb(Ffb::new(pb, &format!("{prefix}.ffb"), d)?) } else { Fuser::Concat(ConcatFuse::new(pb, &format!("{prefix}.cat"), d)?) };
        Ok(FusionUnit { pair, adapter, fuser })
    };
    let fuse = [fuse_unit(pb, 0)?, fuse_unit(pb, 1)?];

    let gab = if cfg.enable_gab { Some(Gab::new(pb, "gab", vc[2], vc[3])?) } else { None };

    // Fused features are 2d wide: cc[2] / 2 and cc[3] / 2.
    let (fa, fb) = (cc[2] / 2, cc[3] / 2);
    let up = [
        UpsampleBlock::new(pb, "dec.up1", fb, fa + vc[2])?,
        UpsampleBlock::new(pb, "dec.up2", fb / 2, cc[1])?,
        UpsampleBlock::new(pb, "dec.up3", fb / 4, cc[0])?,
    ];
    let top = fb / 8;
    let refine = match cfg.head {
        HeadKind::Plain => None,
        HeadKind::Refine => Some(ConvBnGelu::new(pb, "head.refine", top + cin, top, 3, 1, ConvKind::Separable)?),
    };
    let classifier = Conv::new(pb, "head.cls", top, cfg.num_classes, 1, 1, 0, 1, true)?;
    let ds = [
        Conv::new(pb, "ds.fuse1", fa, cfg.num_classes, 1, 1, 0, 1, true)?,
        Conv::new(pb, "ds.fuse2", fb, cfg.num_classes, 1, 1, 0, 1, false)?,
    ];
    Ok(Layers { cnn, vit, feb, fuse, gab, up, refine, classifier, ds })
}

impl Layers {
    fn forward(&self, cx: &mut Ctx, images: Var, trace: bool) -> Result<ForwardOutput> {
        let mut cnn = [images; 4];
        let mut x = images;
        for (i, s) in self.cnn.iter().enumerate() {
            x = s.down.forward(cx, x)?;
            x = s.conv.forward(cx, x)?;
            cnn[i] = x;
        }

        let mut vit = [images; 4];
        let vit_stage = |cx: &mut Ctx, s: &VitStage, x: Var| -> Result<Var> {
            let e = s.embed.forward(cx, x)?;
            let (_, _, h, w) = cx.g.value(e).dims4()?;
            let t = cx.g.flatten_tokens(e)?;
            let t = s.block.forward(cx, t)?;
            cx.g.unflatten_tokens(t, h, w)
        };
        vit[0] = vit_stage(cx, &self.vit[0], images)?;
        vit[1] = vit_stage(cx, &self.vit[1], vit[0])?;
        let (e1, e2) = match &self.feb {
            Some(feb) => feb.forward(cx, vit[0], vit[1])?,
            None => (vit[0], vit[1]),
        };
        vit[2] = vit_stage(cx, &self.vit[2], e2)?;
        vit[3] = vit_stage(cx, &self.vit[3], vit[2])?;

        let vit_for = |stage: usize| match stage {
            1 => e1,
            2 => e2,
            s => vit[s - 1],
        };
        let mut fused = [images; 2];
        for (k, unit) in self.fuse.iter().enumerate() {
            fused[k] = unit.forward(cx, cnn[unit.pair.cnn_stage - 1], vit_for(unit.pair.vit_stage))?;
        }

        let gab = match &self.gab {
            Some(gab) => gab.forward(cx, vit[2], vit[3])?,
            None => vit[2],
        };

        let skip1 = cx.g.concat_channels(&[fused[0], gab])?;
        let d1 = self.up[0].forward(cx, fused[1], skip1)?;
        let d2 = self.up[1].forward(cx, d1, cnn[1])?;
        let d3 = self.up[2].forward(cx, d2, cnn[0])?;

        let top = cx.g.upsample_nearest(d3, 4)?;
        let top = match &self.refine {
            Some(r) => {
                let cat = cx.g.concat_channels(&[top, images])?;
                r.forward(cx, cat)?
            }
            None => top,
        };
        let y_hat = self.classifier.forward(cx, top)?;

        // A 1x1 conv commutes with nearest upsampling, so classifying each fused map
        // at its own resolution and summing the upsampled logits equals one 1x1 conv
        // over the concatenation of the upsampled maps.
        let (_, _, h, _) = cx.g.value(images).dims4()?;
        let mut y_hat_f = None;
        for (k, conv) in self.ds.iter().enumerate() {
            let logits = conv.forward(cx, fused[k])?;
            let factor = h / cx.g.shape(fused[k])[2];
            let up = cx.g.upsample_nearest(logits, factor)?;
            y_hat_f = Some(match y_hat_f {
                None => up,
                Some(acc) => cx.g.add(acc, up)?,
            });
        }
        let y_hat_f = y_hat_f.unwrap_or(y_hat);

        let trace = if trace {
            let val = |v: Var| cx.g.value(v).clone();
            Some(ForwardTrace {
                cnn: cnn.map(val),
                vit: vit.map(val),
                vit_enhanced: [val(e1), val(e2)],
                fused: fused.map(val),
                gab: val(gab),
                decoder: [val(d1), val(d2), val(d3)],
            })
        } else {
            None
        };
        Ok(ForwardOutput { y_hat, y_hat_f, trace })
    }
}
