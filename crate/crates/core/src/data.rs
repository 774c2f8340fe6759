//! Synthetic segmentation data with targets of very different sizes, slice
//! preprocessing and exact grid augmentations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, ensure, Error, Result};
use crate::metrics::Group;
use crate::tensor::Tensor;
use crate::train::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugOp {
    pub const ALL: [AugOp; 5] = [AugOp::HFlip, AugOp::VFlip, AugOp::Rot90, AugOp::Rot180, AugOp::Rot270];

    pub fn inverse(self) -> Self {
        match self {
            AugOp::Rot90 => AugOp::Rot270,
            AugOp::Rot270 => AugOp::Rot90,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugOp::HFlip => "hflip",
            AugOp::VFlip => "vflip",
            AugOp::Rot90 => "rot90",
            AugOp::Rot180 => "rot180",
            AugOp::Rot270 => "rot270",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMeta {
    pub source: String,
    pub augmentations: Vec<AugOp>,
}

/// Image `(C, H, W)` with a row-major label mask of `H * W` class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub label: Vec<u32>,
    pub meta: SampleMeta,
}

impl SegSample {
    pub fn new(image: Tensor, label: Vec<u32>, source: &str) -> Result<Self> {
        ensure!(image.rank() == 3, Config, "sample image must be (C, H, W), got {:?}", image.shape());
        let (h, w) = (image.shape()[1], image.shape()[2]);
        ensure!(label.len() == h * w, Data, "label has {} entries for a {}x{} image", label.len(), h, w);
        Ok(Self { image, label, meta: SampleMeta { source: String::from(source), augmentations: Vec::new() } })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        let mut out = vec![0; num_classes];
        for &l in &self.label {
            ensure!((l as usize) < num_classes, Data, "label {} >= {} classes in `{}`", l, num_classes, self.meta.source);
            out[l as usize] += 1;
        }
        Ok(out)
    }
}

/// `(clamp(x, lo, hi) - lo) / (hi - lo)`.
pub fn clip_normalize(raw: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    ensure!(lo < hi, Config, "clip bounds must satisfy lo < hi, got [{}, {}]", lo, hi);
    ensure!(raw.is_finite(), Data, "cannot normalize non-finite values");
    Ok(raw.map(|x| (x.clamp(lo, hi) - lo) / (hi - lo)))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear (half-pixel centres) for the image, nearest for the label.
pub fn resize(sample: &SegSample, target: (usize, usize)) -> Result<SegSample> {
    let (th, tw) = target;
    ensure!(th > 0 && tw > 0, Config, "resize target must be positive");
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    if (th, tw) == (h, w) {
        return Ok(sample.clone());
    }
    let src = |o: usize, n_out: usize, n_in: usize| -> f64 { ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64) };
    let near = |o: usize, n_out: usize, n_in: usize| -> usize { ((2 * o + 1) * n_in / (2 * n_out)).min(n_in - 1) };
    let d = sample.image.data();
    let mut img = Vec::with_capacity(c * th * tw);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..th {
            let sy = src(y, th, h);
            let (y0, ty) = (libm::floor(sy) as usize, sy - libm::floor(sy));
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..tw {
                let sx = src(x, tw, w);
                let (x0, tx) = (libm::floor(sx) as usize, sx - libm::floor(sx));
                let x1 = (x0 + 1).min(w - 1);
                let top = lerp(d[base + y0 * w + x0], d[base + y0 * w + x1], tx);
                let bot = lerp(d[base + y1 * w + x0], d[base + y1 * w + x1], tx);
                img.push(lerp(top, bot, ty));
            }
        }
    }
    let mut label = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            label.push(sample.label[near(y, th, h) * w + near(x, tw, w)]);
        }
    }
    Ok(SegSample { image: Tensor::new(&[c, th, tw], img)?, label, meta: sample.meta.clone() })
}

/// Source pixel `(y, x)` read by output pixel `(y, x)` for an `h x w` grid.
fn aug_source(op: AugOp, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    match op {
        AugOp::HFlip => (y, w - 1 - x),
        AugOp::VFlip => (h - 1 - y, x),
        // Counter-clockwise quarter turn.
        AugOp::Rot90 => (x, w - 1 - y),
        AugOp::Rot180 => (h - 1 - y, w - 1 - x),
        AugOp::Rot270 => (h - 1 - x, y),
    }
}

fn remap<T: Copy>(data: &[T], planes: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = f(y, x);
                out.push(data[(p * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Apply one exact grid transform to image and label and record it.
pub fn augment(sample: &SegSample, op: AugOp) -> Result<SegSample> {
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    if matches!(op, AugOp::Rot90 | AugOp::Rot270) {
        ensure!(h == w, Config, "{} needs a square canvas, got {}x{}", op.name(), h, w);
    }
    let img = remap(sample.image.data(), c, h, w, |y, x| aug_source(op, y, x, h, w));
    let label = remap(&sample.label, 1, h, w, |y, x| aug_source(op, y, x, h, w));
    let mut meta = sample.meta.clone();
    meta.augmentations.push(op);
    Ok(SegSample { image: Tensor::new(&[c, h, w], img)?, label, meta })
}

/// Rotation by an arbitrary angle about the canvas centre (bilinear image, nearest
/// label, zero / background fill outside the source).
pub fn rotate_arbitrary(sample: &SegSample, degrees: f64) -> Result<SegSample> {
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    ensure!(h == w, Config, "rotation needs a square canvas, got {}x{}", h, w);
    let (s, co) = libm::sincos(degrees.to_radians());
    let mid = (h as f64 - 1.0) / 2.0;
    let d = sample.image.data();
    let mut img = vec![0.0; c * h * w];
    let mut label = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - mid, x as f64 - mid);
            let sy = co * dy + s * dx + mid;
            let sx = -s * dy + co * dx + mid;
            let (ny, nx) = (libm::round(sy), libm::round(sx));
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                label[y * w + x] = sample.label[ny as usize * w + nx as usize];
            }
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let (y0, x0) = (libm::floor(sy) as usize, libm::floor(sx) as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            for ci in 0..c {
                let b = ci * h * w;
                let top = lerp(d[b + y0 * w + x0], d[b + y0 * w + x1], tx);
                let bot = lerp(d[b + y1 * w + x0], d[b + y1 * w + x1], tx);
                img[b + y * w + x] = lerp(top, bot, ty);
            }
        }
    }
    Ok(SegSample { image: Tensor::new(&[c, h, w], img)?, label, meta: sample.meta.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeFamily {
    /// Filled ellipse; `area` is the fraction of the canvas.
    Ellipse,
    /// Filled disc; `area` is the fraction of the canvas.
    Disc,
    /// Quadratic Bézier stroke with the given brush half-width (pixels);
    /// `area` bounds the chord length as a fraction of the canvas side.
    Curve { half_width: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub family: ShapeFamily,
    pub group: Group,
    pub area: (f64, f64),
    pub count: (usize, usize),
    pub intensity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub canvas: (usize, usize),
    /// Foreground classes; class id `i + 1` is `classes[i]`, 0 is background.
    pub classes: Vec<ClassSpec>,
    pub background: (f64, f64),
    pub noise: f64,
    pub seed: u64,
    pub max_retries: usize,
}

/// Largest area fraction of one small-class instance.
pub const SMALL_MAX_AREA: f64 = 0.02;
/// Smallest area fraction of one large-class instance.
pub const LARGE_MIN_AREA: f64 = 0.10;
pub const TISSUE_MAX_WIDTH: f64 = 3.0;

impl Default for SynthSpec {
    fn default() -> Self {
        let class = |name: &str, family, group, area, count, intensity| ClassSpec { name: String::from(name), family, group, area, count, intensity };
        Self {
            canvas: (64, 64),
            classes: vec![
                class("ellipse", ShapeFamily::Ellipse, Group::Large, (0.12, 0.22), (1, 1), (0.45, 0.55)),
                class("disc", ShapeFamily::Disc, Group::Small, (0.004, 0.015), (1, 3), (0.85, 0.95)),
                class("curve", ShapeFamily::Curve { half_width: 1.0 }, Group::Tissue, (0.35, 0.6), (1, 1), (0.68, 0.75)),
            ],
            background: (0.1, 0.2),
            noise: 0.05,
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn grouping(&self) -> Result<crate::metrics::ClassGrouping> {
        let mut g = vec![Group::Background];
        g.extend(self.classes.iter().map(|c| c.group));
        crate::metrics::ClassGrouping::new(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        ensure!(h >= 8 && w >= 8, Config, "canvas {}x{} too small", h, w);
        ensure!(!self.classes.is_empty(), Config, "synth spec needs at least one class");
        ensure!(self.noise >= 0.0, Config, "noise must be non-negative");
        ensure!(self.max_retries > 0, Config, "max_retries must be positive");
        for c in &self.classes {
            let (lo, hi) = c.area;
            ensure!(0.0 < lo && lo <= hi && hi < 1.0, Config, "class `{}`: bad area range ({}, {})", c.name, lo, hi);
            ensure!(c.count.0 <= c.count.1 && c.count.1 > 0, Config, "class `{}`: bad count range {:?}", c.name, c.count);
            ensure!(c.intensity.0 <= c.intensity.1, Config, "class `{}`: bad intensity range", c.name);
            match (c.group, c.family) {
                (Group::Small, ShapeFamily::Disc | ShapeFamily::Ellipse) => {
                    ensure!(hi < SMALL_MAX_AREA, Config, "small class `{}` must stay below {} of the canvas", c.name, SMALL_MAX_AREA)
                }
                (Group::Large, ShapeFamily::Disc | ShapeFamily::Ellipse) => {
                    ensure!(lo > LARGE_MIN_AREA, Config, "large class `{}` must exceed {} of the canvas", c.name, LARGE_MIN_AREA)
                }
                (_, ShapeFamily::Curve { half_width }) => {
                    ensure!(2.0 * libm::floor(half_width) + 1.0 <= TISSUE_MAX_WIDTH && half_width >= 0.5, Config, "curve class `{}`: stroke wider than {} px", c.name, TISSUE_MAX_WIDTH)
                }
                (Group::Background, _) => bail!(Config, "class `{}` cannot be background", c.name),
                _ => {}
            }
        }
        Ok(())
    }

    /// Expected instance count of every foreground class.
    pub fn expected_counts(&self) -> Vec<f64> {
        self.classes.iter().map(|c| (c.count.0 + c.count.1) as f64 / 2.0).collect()
    }

    /// The sample for `index`; independent of every other index.
    pub fn generate_one(&self, index: u64) -> Result<(SegSample, Vec<usize>)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let (h, w) = self.canvas;
        let mut label = vec![0u32; h * w];
        let mut intensity = vec![0.0f64; h * w];
        let bg = uniform(&mut rng, self.background);
        intensity.iter_mut().for_each(|v| *v = bg);
        let mut counts = Vec::with_capacity(self.classes.len());
        for (ci, spec) in self.classes.iter().enumerate() {
            let id = ci as u32 + 1;
            let n = rng.random_range(spec.count.0..=spec.count.1);
            for k in 0..n {
                let mut placed = false;
                for _ in 0..self.max_retries {
                    let mask = draw_shape(&mut rng, spec, (h, w));
                    let area = mask.iter().filter(|&&m| m).count();
                    if area == 0 || !area_ok(spec, area, h * w) || mask.iter().zip(&label).any(|(&m, &l)| m && l != 0) {
                        continue;
                    }
                    let val = uniform(&mut rng, spec.intensity);
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            label[i] = id;
                            intensity[i] = val;
                        }
                    }
                    placed = true;
                    break;
                }
                if !placed {
                    bail!(Generation, "sample {}: could not place instance {} of class `{}` after {} attempts", index, k + 1, spec.name, self.max_retries);
                }
            }
            counts.push(n);
        }
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(format!("{e}")))?;
        let data: Vec<f64> = intensity.iter().map(|&v| (v + if self.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 }).clamp(0.0, 1.0)).collect();
        let sample = SegSample::new(Tensor::new(&[1, h, w], data)?, label, &format!("synth-{}-{}", self.seed, index))?;
        Ok((sample, counts))
    }

    pub fn generate(&self, n: usize) -> Result<Vec<SegSample>> {
        (0..n as u64).map(|i| self.generate_one(i).map(|(s, _)| s)).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn area_ok(spec: &ClassSpec, pixels: usize, canvas: usize) -> bool {
    let frac = pixels as f64 / canvas as f64;
    match spec.group {
        Group::Small => frac < SMALL_MAX_AREA,
        Group::Large => frac > LARGE_MIN_AREA,
        _ => true,
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, spec: &ClassSpec, (h, w): (usize, usize)) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let (hf, wf) = (h as f64, w as f64);
    match spec.family {
        ShapeFamily::Ellipse | ShapeFamily::Disc => {
            let area = uniform(rng, spec.area) * hf * wf;
            let ratio = if spec.family == ShapeFamily::Disc { 1.0 } else { rng.random_range(0.55..1.0) };
            let a = libm::sqrt(area / (core::f64::consts::PI * ratio));
            let b = ratio * a;
            let theta = if spec.family == ShapeFamily::Disc { 0.0 } else { rng.random_range(0.0..core::f64::consts::PI) };
            let margin = a + 1.0;
            if 2.0 * margin >= hf.min(wf) {
                return mask;
            }
            let cy = rng.random_range(margin..hf - margin);
            let cx = rng.random_range(margin..wf - margin);
            let (s, c) = libm::sincos(theta);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let u = c * dx + s * dy;
                    let v = -s * dx + c * dy;
                    mask[y * w + x] = (u / a) * (u / a) + (v / b) * (v / b) <= 1.0;
                }
            }
        }
        ShapeFamily::Curve { half_width } => {
            let side = hf.min(wf);
            let len = uniform(rng, spec.area) * side;
            let m = half_width + 2.0;
            let p0 = (rng.random_range(m..hf - m), rng.random_range(m..wf - m));
            let ang = rng.random_range(0.0..2.0 * core::f64::consts::PI);
            let p2 = (p0.0 + len * libm::sin(ang), p0.1 + len * libm::cos(ang));
            if p2.0 < m || p2.1 < m || p2.0 > hf - m || p2.1 > wf - m {
                return mask;
            }
            let bend = rng.random_range(-0.4..0.4) * len;
            let mid = ((p0.0 + p2.0) / 2.0 + bend * libm::cos(ang), (p0.1 + p2.1) / 2.0 - bend * libm::sin(ang));
            let p1 = (mid.0.clamp(m, hf - m), mid.1.clamp(m, wf - m));
            let steps = (4.0 * len) as usize + 8;
            let r = libm::floor(half_width) as isize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let py = (1.0 - t) * (1.0 - t) * p0.0 + 2.0 * (1.0 - t) * t * p1.0 + t * t * p2.0;
                let px = (1.0 - t) * (1.0 - t) * p0.1 + 2.0 * (1.0 - t) * t * p1.1 + t * t * p2.1;
                let (cy, cx) = (libm::floor(py) as isize, libm::floor(px) as isize);
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dy.abs() + dx.abs() > r {
                            continue;
                        }
                        let (y, x) = (cy + dy, cx + dx);
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            mask[y as usize * w + x as usize] = true;
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Stack samples into a training batch.
pub fn make_batch(samples: &[&SegSample]) -> Result<Batch> {
    ensure!(!samples.is_empty(), Usage, "empty batch");
    let images = samples
        .iter()
        .map(|s| {
            let mut shape = alloc::vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.reshaped(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u32> = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    Batch::new(Tensor::stack_batch(&images)?, labels)
}

/// Deterministic permutation of `0..n` for the given seed and epoch.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
