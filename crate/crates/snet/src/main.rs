use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snet::analysis::{diagnose, evaluate, write_diagnostics};
use snet::checkpoint::Checkpoint;
use snet::config::{parse_synth_spec, RunConfig};
use snet::dataset::{generate_dataset, load_dataset};
use snet::trainer::train;
use snet::{Error, Result};
use snet_core::metrics::ClassGrouping;

/// Stagger Network: synthetic data, training, evaluation and diagnostics.
#[derive(Parser)]
#[command(name = "snet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of samples placed in the `val` split.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Train from a key = value run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `class=group` lines; defaults to the dataset's grouping.
        #[arg(long)]
        grouping: Option<PathBuf>,
        #[arg(long, default_value_t = 95.0)]
        hd_percentile: f64,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy, mutual information and KL diagnostics of the encoder stages.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value = "val")]
        split: String,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::io(path))
}

fn split_or_all<'a>(data: &'a snet::dataset::Dataset, split: &str) -> Result<Vec<&'a snet_core::data::SegSample>> {
    let s = if split == "all" { data.samples.iter().collect() } else { data.split(split) };
    if s.is_empty() {
        return Err(Error::Data(format!("{}: split `{split}` is empty", data.root.display())));
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, out, count, seed, val_fraction } => {
            let mut spec = parse_synth_spec(&read(&spec)?)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let d = generate_dataset(&out, &spec, count, val_fraction)?;
            println!("wrote {} samples ({} train, {} val) to {}", d.samples.len(), d.split("train").len(), d.split("val").len(), out.display());
        }
        Cmd::Train { config, out, resume } => {
            let mut run = RunConfig::parse(&read(&config)?)?;
            if run.data.is_relative() {
                run.data = config.parent().unwrap_or(Path::new(".")).join(&run.data);
            }
            let data = load_dataset(&run.data)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train(&run, &data, &out, resume)?;
            for row in &outcome.log {
                eprintln!("{}", row.csv_row());
            }
            if let Some((e, d)) = outcome.best {
                println!("best held-out dice {d:.4} at epoch {e}");
            }
        }
        Cmd::Eval { checkpoint, data, grouping, hd_percentile, split, out } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&data)?;
            let grouping = match grouping {
                Some(p) => ClassGrouping::parse(&read(&p)?, data.num_classes)?,
                None => snet::analysis::grouping_or_default(data.grouping.as_ref(), data.num_classes)?,
            };
            let samples = split_or_all(&data, &split)?;
            let report = evaluate(&mut ck.model, &samples, &grouping, hd_percentile, 4)?;
            match out {
                Some(p) => std::fs::write(&p, report.to_csv()).map_err(Error::io(&p))?,
                None => print!("{}", report.to_csv()),
            }
        }
        Cmd::Diagnose { checkpoint, data, bins, out, samples, split } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            let data = load_dataset(&data)?;
            let chosen = split_or_all(&data, &split)?;
            snet::analysis::check_compatible(&ck.model, &chosen, data.num_classes)?;
            let report = diagnose(&mut ck.model, &chosen, bins, samples, 4)?;
            write_diagnostics(&out, &report)?;
            for c in &report.selected {
                println!("cnn{} -> vit{} (KL {:.4})", c.pair.cnn_stage, c.pair.vit_stage, c.kl);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
