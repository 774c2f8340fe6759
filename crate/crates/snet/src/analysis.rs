//! Evaluation and diagnostics of a trained model on a list of samples.

use std::path::Path;

use snet_core::data::{make_batch, SegSample};
use snet_core::info::{diagnose as diagnose_features, DiagnosticsReport, StageFeatures};
use snet_core::metrics::{ClassGrouping, Group, MetricAccumulator, MetricReport};
use snet_core::model::Model;
use snet_core::train::predict;
use snet_core::{Graph, Mode};

use crate::error::{Error, Result};

/// The dataset's grouping, or background plus one "large" group for every
/// foreground class when the dataset has none.
pub fn grouping_or_default(g: Option<&ClassGrouping>, num_classes: usize) -> Result<ClassGrouping> {
    match g {
        Some(g) => Ok(g.clone()),
        None => Ok(ClassGrouping::new((0..num_classes).map(|c| if c == 0 { Group::Background } else { Group::Large }).collect())?),
    }
}

/// Images must match the network input and labels its class count.
pub fn check_compatible(model: &Model, samples: &[&SegSample], num_classes: usize) -> Result<()> {
    let c = &model.config;
    if num_classes != c.num_classes {
        return Err(Error::Config(format!("checkpoint predicts {} classes, dataset has {num_classes}", c.num_classes)));
    }
    if let Some(s) = samples.first() {
        if (s.channels(), s.height(), s.width()) != (c.in_channels, c.input_size.0, c.input_size.1) {
            return Err(Error::Config(format!(
                "images are {}x{}x{}, the network expects {}x{}x{}",
                s.channels(),
                s.height(),
                s.width(),
                c.in_channels,
                c.input_size.0,
                c.input_size.1
            )));
        }
    }
    Ok(())
}

/// Eval-mode predictions scored per class, then averaged per group.
pub fn evaluate(model: &mut Model, samples: &[&SegSample], grouping: &ClassGrouping, hd_percentile: f64, batch_size: usize) -> Result<MetricReport> {
    check_compatible(model, samples, grouping.num_classes())?;
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut acc = MetricAccumulator::new(grouping.num_classes(), hd_percentile)?;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk)?;
        let preds = predict(model, &batch.images)?;
        for (p, s) in preds.iter().zip(chunk) {
            acc.add(p, &s.label, s.height(), s.width())?;
        }
    }
    Ok(acc.finish(grouping)?)
}

/// Traced eval-mode forwards on at most `max_samples` samples, fed to the
/// information diagnostics.
pub fn diagnose(model: &mut Model, samples: &[&SegSample], bins: usize, max_samples: usize, batch_size: usize) -> Result<DiagnosticsReport> {
    check_compatible(model, samples, model.config.num_classes)?;
    let samples = &samples[..samples.len().min(max_samples)];
    if samples.is_empty() {
        return Err(Error::Data("nothing to diagnose".into()));
    }
    let mut parts = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk)?;
        let mut g = Graph::new();
        let x = g.input(batch.images)?;
        let out = model.forward(&mut g, x, Mode::Eval, true)?;
        let trace = out.trace.ok_or_else(|| Error::Core(snet_core::Error::Internal("traced forward returned no trace".into())))?;
        parts.push(StageFeatures::from_trace(&trace)?);
    }
    Ok(diagnose_features(&StageFeatures::concat(&parts)?, bins)?)
}

pub const REPORT_FILES: [&str; 4] = ["pairs.csv", "selected.csv", "han.csv", "histograms.csv"];

/// Write the four CSV views of a diagnostics report into `dir`.
pub fn write_diagnostics(dir: &Path, r: &DiagnosticsReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (name, body) in REPORT_FILES.iter().zip([r.to_csv(), r.selected_csv(), r.han_csv(), r.histograms_csv()]) {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(Error::io(&p))?;
    }
    Ok(())
}
