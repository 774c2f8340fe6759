//! Segmentation metrics on integer masks: Dice, IoU and (percentile) Hausdorff
//! distance, aggregated per class and per target-size group.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{bail, ensure, Result};

/// Pixel counts of one class in a (prediction, truth) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub pred: u64,
    pub truth: u64,
    pub inter: u64,
}

impl Overlap {
    pub fn union(&self) -> u64 {
        self.pred + self.truth - self.inter
    }

    /// `2|P∩T| / (|P| + |T|)`, `None` when the class is absent from both masks.
    pub fn dice(&self) -> Option<f64> {
        let den = self.pred + self.truth;
        (den > 0).then(|| 2.0 * self.inter as f64 / den as f64)
    }

    /// `|P∩T| / |P∪T|`, `None` when the class is absent from both masks.
    pub fn iou(&self) -> Option<f64> {
        let u = self.union();
        (u > 0).then(|| self.inter as f64 / u as f64)
    }
}

/// Per-class overlaps of two masks with ids `< num_classes`.
pub fn overlaps(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<Vec<Overlap>> {
    ensure!(pred.len() == truth.len(), Config, "mask sizes differ: {} vs {}", pred.len(), truth.len());
    let mut out = vec![Overlap::default(); num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        ensure!((p as usize) < num_classes && (t as usize) < num_classes, Data, "label id {} >= {} classes", p.max(t), num_classes);
        out[p as usize].pred += 1;
        out[t as usize].truth += 1;
        if p == t {
            out[p as usize].inter += 1;
        }
    }
    Ok(out)
}

pub fn dice_score(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(overlaps(pred, truth, num_classes)?.iter().map(Overlap::dice).collect())
}

pub fn iou(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(overlaps(pred, truth, num_classes)?.iter().map(Overlap::iou).collect())
}

/// Pixels of the mask with at least one 4-neighbour outside it (image border counts as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) {
                out[y as usize * w + x as usize] = !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel
/// (separable lower-envelope transform). `None` if there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    if !seeds.iter().any(|&s| s) {
        return None;
    }
    let inf = 1e20;
    let mut f: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { inf }).collect();
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = f[y * w + x];
        }
        let d = edt_1d(&buf[..h]);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = edt_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    Some(f)
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |q: usize| (q * q) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Linear-interpolation percentile of unsorted values, `p` in `[0, 100]`.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// Symmetric Hausdorff distance between the boundaries of two binary masks, in
/// pixels. With `percentile < 100` each directed distance set is reduced to that
/// percentile before taking the maximum. `None` if either mask is empty.
pub fn hausdorff(pred: &[bool], truth: &[bool], h: usize, w: usize, pct: f64) -> Result<Option<f64>> {
    ensure!(pred.len() == h * w && truth.len() == h * w, Config, "mask sizes do not match {}x{}", h, w);
    ensure!((0.0..=100.0).contains(&pct), Config, "percentile {} outside [0, 100]", pct);
    let (bp, bt) = (boundary(pred, h, w), boundary(truth, h, w));
    let (Some(dp), Some(dt)) = (squared_distance_transform(&bp, h, w), squared_distance_transform(&bt, h, w)) else {
        return Ok(None);
    };
    let directed = |from: &[bool], to_dist: &[f64]| -> f64 {
        let mut d: Vec<f64> = from.iter().zip(to_dist).filter(|(&b, _)| b).map(|(_, &d2)| libm::sqrt(d2)).collect();
        percentile(&mut d, pct)
    };
    Ok(Some(directed(&bp, &dt).max(directed(&bt, &dp))))
}

/// Hausdorff distance of one class between two label masks.
pub fn class_hausdorff(pred: &[u32], truth: &[u32], h: usize, w: usize, class: u32, pct: f64) -> Result<Option<f64>> {
    let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let t: Vec<bool> = truth.iter().map(|&v| v == class).collect();
    hausdorff(&p, &t, h, w, pct)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Background,
    Tissue,
    Small,
    Large,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Background => "background",
            Group::Tissue => "tissue",
            Group::Small => "small",
            Group::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "background" => Group::Background,
            "tissue" => Group::Tissue,
            "small" => Group::Small,
            "large" => Group::Large,
            other => bail!(Config, "unknown class group `{}`", other),
        })
    }
}

/// Group of every class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGrouping {
    groups: Vec<Group>,
}

impl ClassGrouping {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        ensure!(!groups.is_empty(), Config, "grouping lists no classes");
        Ok(Self { groups })
    }

    /// Parse `class_id=group` lines; `#` starts a comment. Every id in
    /// `0..num_classes` must be listed exactly once.
    pub fn parse(text: &str, num_classes: usize) -> Result<Self> {
        let mut groups: Vec<Option<Group>> = vec![None; num_classes];
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else { bail!(Config, "grouping line {}: expected `class=group`", ln + 1) };
            let id: usize = k.trim().parse().map_err(|_| crate::Error::Config(format!("grouping line {}: bad class id `{}`", ln + 1, k.trim())))?;
            ensure!(id < num_classes, Config, "grouping line {}: class {} >= {} classes", ln + 1, id, num_classes);
            ensure!(groups[id].is_none(), Config, "grouping line {}: class {} listed twice", ln + 1, id);
            groups[id] = Some(Group::parse(v.trim())?);
        }
        let groups = groups.into_iter().enumerate().map(|(i, g)| g.ok_or_else(|| crate::Error::Config(format!("class {i} has no group")))).collect::<Result<Vec<_>>>()?;
        Self::new(groups)
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().enumerate().filter(|(_, &g)| g != Group::Background).map(|(i, _)| i)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, g) in self.groups.iter().enumerate() {
            let _ = writeln!(s, "{i}={}", g.name());
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricRow {
    pub dice: Option<f64>,
    pub hd: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub hd_percentile: f64,
    /// `(class id, metrics)` for every foreground class.
    pub classes: Vec<(usize, MetricRow)>,
    /// `(group, metrics)` for every non-background group that has classes.
    pub groups: Vec<(Group, MetricRow)>,
    pub overall: MetricRow,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs.flatten() {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a MetricRow> + Clone) -> MetricRow {
    MetricRow { dice: mean(rows.clone().map(|r| r.dice)), hd: mean(rows.clone().map(|r| r.hd)), iou: mean(rows.map(|r| r.iou)) }
}

impl MetricReport {
    pub fn mean_foreground_dice(&self) -> Option<f64> {
        self.overall.dice
    }

    /// CSV with a `# hd_percentile=..` comment line and `class,dice,hd,iou` header;
    /// missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut s = format!("# hd_percentile={}\nclass,dice,hd,iou\n", self.hd_percentile);
        let mut row = |name: &str, r: &MetricRow| {
            let _ = writeln!(s, "{name},{},{},{}", f(r.dice), f(r.hd), f(r.iou));
        };
        for (c, r) in &self.classes {
            row(&c.to_string(), r);
        }
        for (g, r) in &self.groups {
            row(&format!("group:{}", g.name()), r);
        }
        row("overall", &self.overall);
        s
    }
}

/// Per-sample accumulation of class metrics; each sample-level value is averaged
/// over the samples where it is defined.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    num_classes: usize,
    hd_percentile: f64,
    sums: Vec<[(f64, usize); 3]>,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize, hd_percentile: f64) -> Result<Self> {
        ensure!((0.0..=100.0).contains(&hd_percentile), Config, "hd percentile {} outside [0, 100]", hd_percentile);
        Ok(Self { num_classes, hd_percentile, sums: vec![[(0.0, 0); 3]; num_classes] })
    }

    pub fn add(&mut self, pred: &[u32], truth: &[u32], h: usize, w: usize) -> Result<()> {
        let ov = overlaps(pred, truth, self.num_classes)?;
        for (c, o) in ov.iter().enumerate() {
            let hd = if o.pred > 0 && o.truth > 0 { class_hausdorff(pred, truth, h, w, c as u32, self.hd_percentile)? } else { None };
            for (slot, v) in self.sums[c].iter_mut().zip([o.dice(), hd, o.iou()]) {
                if let Some(v) = v {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
        }
        Ok(())
    }

    pub fn class_row(&self, c: usize) -> MetricRow {
        let get = |k: usize| {
            let (s, n) = self.sums[c][k];
            (n > 0).then(|| s / n as f64)
        };
        MetricRow { dice: get(0), hd: get(1), iou: get(2) }
    }

    pub fn finish(&self, grouping: &ClassGrouping) -> Result<MetricReport> {
        ensure!(grouping.num_classes() == self.num_classes, Config, "grouping has {} classes, metrics {}", grouping.num_classes(), self.num_classes);
        let classes: Vec<(usize, MetricRow)> = grouping.foreground().map(|c| (c, self.class_row(c))).collect();
        let mut groups = Vec::new();
        for g in [Group::Tissue, Group::Small, Group::Large] {
            let members: Vec<&MetricRow> = classes.iter().filter(|(c, _)| grouping.group(*c) == g).map(|(_, r)| r).collect();
            if !members.is_empty() {
                groups.push((g, mean_rows(members.iter().copied())));
            }
        }
        let overall = mean_rows(classes.iter().map(|(_, r)| r));
        Ok(MetricReport { hd_percentile: self.hd_percentile, classes, groups, overall })
    }
}
