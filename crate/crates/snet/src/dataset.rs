//! On-disk datasets: `manifest.tsv` lists `image<TAB>label<TAB>split` per
//! line (paths relative to the dataset directory), images and labels are STNT
//! files. A `# classes=N` comment fixes the class count; `grouping.cfg`, when
//! present, holds the `class=group` table used for reporting.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use snet_core::data::{SegSample, SynthSpec};
use snet_core::metrics::ClassGrouping;

use crate::config::render_synth_spec;
use crate::error::{Error, Result};
use crate::stnt::{read_array, write_array, write_tensor, Array};

pub const MANIFEST: &str = "manifest.tsv";
pub const GROUPING: &str = "grouping.cfg";
pub const SPEC: &str = "spec.cfg";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub num_classes: usize,
    pub grouping: Option<ClassGrouping>,
    pub samples: Vec<SegSample>,
    pub splits: Vec<String>,
}

impl Dataset {
    /// Samples of one split, in manifest order.
    pub fn split(&self, name: &str) -> Vec<&SegSample> {
        self.samples.iter().zip(&self.splits).filter(|(_, s)| *s == name).map(|(x, _)| x).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.samples.first().map_or(1, |s| s.channels())
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest).map_err(Error::io(&manifest))?;
    let mut declared: Option<usize> = None;
    let (mut samples, mut splits) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(n) = comment.trim().strip_prefix("classes=") {
                declared = Some(n.trim().parse().map_err(|_| data_err(&manifest, i + 1, format!("bad class count `{n}`")))?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image, label, split] = fields[..] else {
            return Err(data_err(&manifest, i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let img = read_array(&dir.join(image))?;
        let mut image_t = img.to_tensor()?;
        if image_t.rank() == 2 {
            let (h, w) = (image_t.shape()[0], image_t.shape()[1]);
            image_t = image_t.reshaped(&[1, h, w])?;
        }
        if image_t.rank() != 3 {
            return Err(data_err(&manifest, i + 1, format!("image `{image}` has shape {:?}, expected (C, H, W)", image_t.shape())));
        }
        if !image_t.is_finite() {
            return Err(data_err(&manifest, i + 1, format!("image `{image}` holds non-finite values")));
        }
        let lab = read_array(&dir.join(label))?;
        if lab.shape != image_t.shape()[1..] {
            return Err(data_err(&manifest, i + 1, format!("label shape {:?} does not match image {:?}", lab.shape, image_t.shape())));
        }
        let sample = SegSample::new(image_t, lab.to_labels()?, image)?;
        if let Some(first) = samples.first().map(|f: &SegSample| f.image.shape()) {
            if first != sample.image.shape() {
                return Err(data_err(&manifest, i + 1, format!("image `{image}` has shape {:?}, earlier images {first:?}", sample.image.shape())));
            }
        }
        samples.push(sample);
        splits.push(split.to_string());
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", manifest.display())));
    }
    let max_label = samples.iter().flat_map(|s| s.label.iter()).copied().max().unwrap_or(0) as usize;
    let num_classes = declared.unwrap_or(max_label + 1);
    if max_label >= num_classes {
        return Err(Error::Data(format!("label {max_label} found but the manifest declares {num_classes} classes")));
    }
    let gpath = dir.join(GROUPING);
    let grouping = match std::fs::read_to_string(&gpath) {
        Ok(t) => Some(ClassGrouping::parse(&t, num_classes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::Io { path: gpath, source: e }),
    };
    Ok(Dataset { root: dir.to_path_buf(), num_classes, grouping, samples, splits })
}

/// Write samples with their split names, the class count and an optional grouping.
pub fn write_dataset(dir: &Path, samples: &[SegSample], splits: &[&str], num_classes: usize, grouping: Option<&ClassGrouping>) -> Result<()> {
    if samples.len() != splits.len() {
        return Err(Error::Data(format!("{} samples but {} split names", samples.len(), splits.len())));
    }
    for sub in ["images", "labels"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(Error::io(dir.join(sub)))?;
    }
    let mut manifest = format!("# classes={num_classes}\n");
    for (i, (s, split)) in samples.iter().zip(splits).enumerate() {
        let (img, lab) = (format!("images/{i:05}.stnt"), format!("labels/{i:05}.stnt"));
        write_tensor(&dir.join(&img), &s.image)?;
        write_array(&dir.join(&lab), &Array::labels(&[s.height(), s.width()], s.label.clone())?)?;
        let _ = writeln!(manifest, "{img}\t{lab}\t{split}");
    }
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(Error::io(&mpath))?;
    if let Some(g) = grouping {
        let gpath = dir.join(GROUPING);
        std::fs::write(&gpath, g.render()).map_err(Error::io(&gpath))?;
    }
    Ok(())
}

/// Generate `count` samples; the last `round(count * val_fraction)` go to the
/// `val` split, the rest to `train`.
pub fn generate_dataset(dir: &Path, spec: &SynthSpec, count: usize, val_fraction: f64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1]")));
    }
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let samples = spec.generate(count)?;
    let n_val = (count as f64 * val_fraction).round() as usize;
    let splits: Vec<&str> = (0..count).map(|i| if i + n_val >= count { "val" } else { "train" }).collect();
    let grouping = spec.grouping()?;
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_dataset(dir, &samples, &splits, spec.num_classes(), Some(&grouping))?;
    let spath = dir.join(SPEC);
    std::fs::write(&spath, render_synth_spec(spec)).map_err(Error::io(&spath))?;
    load_dataset(dir)
}
