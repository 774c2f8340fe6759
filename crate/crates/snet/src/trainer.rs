//! The training loop: shuffled mini-batches, optional flips and right-angle
//! rotations, SGD with momentum, periodic held-out evaluation and checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snet_core::data::{augment, make_batch, shuffled_indices, AugOp, SegSample};
use snet_core::loss::{LossBreakdown, LossWeights};
use snet_core::model::{Model, NetworkConfig};
use snet_core::optim::Sgd;
use snet_core::train::train_step;

use crate::analysis::{evaluate, grouping_or_default};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const LOG_FILE: &str = "log.csv";
pub const LAST: &str = "last.snck";
pub const BEST: &str = "best.snck";
pub const LOG_HEADER: &str = "epoch,lr,loss,bce,dice,bce_f,dice_f,eval_dice";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Sample-weighted mean of the per-batch loss terms.
    pub loss: LossBreakdown,
    pub eval_dice: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let eval = self.eval_dice.map_or(String::new(), |d| format!("{d:.6}"));
        format!("{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{eval}", self.epoch, self.lr, l.total, l.bce, l.dice, l.bce_f, l.dice_f)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Sgd,
    pub log: Vec<EpochLog>,
    pub best: Option<(usize, f64)>,
}

/// The network configuration for a dataset: class count, channels and input
/// size come from the data unless the run fixes them, in which case they must agree.
pub fn network_for(run: &RunConfig, data: &Dataset) -> Result<NetworkConfig> {
    let mut net = run.network.clone();
    let (h, w) = data.image_size().ok_or_else(|| Error::Data("empty dataset".into()))?;
    if run.explicit_classes {
        if net.num_classes != data.num_classes || net.in_channels != data.in_channels() {
            return Err(Error::Config(format!(
                "config asks for {} classes / {} channels, dataset has {} / {}",
                net.num_classes,
                net.in_channels,
                data.num_classes,
                data.in_channels()
            )));
        }
    } else {
        net.num_classes = data.num_classes;
        net.in_channels = data.in_channels();
    }
    if net.input_size != (h, w) {
        return Err(Error::Config(format!("network input {:?} differs from the {h}x{w} dataset images", net.input_size)));
    }
    net.validate()?;
    Ok(net)
}

/// Deterministic augmentation of one sample: identity or one of the five
/// flips/rotations (flips only on non-square images), chosen from `(seed, epoch, index)`.
pub fn augment_for(sample: &SegSample, seed: u64, epoch: usize, index: usize) -> Result<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a06e_0000_0000);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    let ops: &[AugOp] = if sample.height() == sample.width() { &AugOp::ALL } else { &AugOp::ALL[..2] };
    let k = rng.random_range(0..=ops.len());
    Ok(if k == 0 { sample.clone() } else { augment(sample, ops[k - 1])? })
}

fn weighted(acc: &mut LossBreakdown, l: &LossBreakdown, w: f64) {
    acc.total += w * l.total;
    acc.bce += w * l.bce;
    acc.dice += w * l.dice;
    acc.bce_f += w * l.bce_f;
    acc.dice_f += w * l.dice_f;
}

fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    std::fs::write(path, s).map_err(Error::io(path))
}

fn append_log(path: &Path, row: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path).map_err(Error::io(path))?;
    writeln!(f, "{}", row.csv_row()).map_err(Error::io(path))
}

/// Parse the rows of a log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("{}:{}: malformed log row", path.display(), i + 1));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            loss: LossBreakdown { total: num(f[2])?, bce: num(f[3])?, dice: num(f[4])?, bce_f: num(f[5])?, dice_f: num(f[6])? },
            eval_dice: if f[7].is_empty() { None } else { Some(num(f[7])?) },
        });
    }
    Ok(out)
}

/// Train on the `train` split, evaluating on `val`. `last.snck` is rewritten
/// after every epoch (and once before the first), `best.snck` whenever the
/// held-out dice improves. A non-finite loss aborts with a numeric error and
/// leaves the last good checkpoint in place. With `early_stop_dice` set the
/// run ends after the first evaluation that reaches it.
pub fn train(run: &RunConfig, data: &Dataset, out: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    run.validate()?;
    let net = network_for(run, data)?;
    let train_set = data.split("train");
    if train_set.is_empty() {
        return Err(Error::Data(format!("{}: no `train` samples", data.root.display())));
    }
    let val_set = data.split("val");
    let grouping = grouping_or_default(data.grouping.as_ref(), data.num_classes)?;
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let (last, best_path, log_path): (PathBuf, PathBuf, PathBuf) = (out.join(LAST), out.join(BEST), out.join(LOG_FILE));

    let (mut model, mut opt, mut state, mut log) = match resume {
        Some(ck) => {
            if ck.model.config != net {
                return Err(Error::Config("checkpoint network differs from the run configuration".into()));
            }
            let opt = ck.optimizer.ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
            let log: Vec<EpochLog> = match read_log(&log_path) {
                Ok(rows) => rows.into_iter().filter(|r| r.epoch <= ck.state.epoch).collect(),
                Err(_) => Vec::new(),
            };
            (ck.model, opt, ck.state, log)
        }
        None => {
            let model = Model::build(&net, run.seed)?;
            let opt = Sgd::new(run.lr, run.momentum, run.weight_decay)?;
            (model, opt, TrainState { epoch: 0, seed: run.seed, best: None }, Vec::new())
        }
    };
    if state.epoch >= run.epochs {
        return Err(Error::Config(format!("checkpoint already has {} epochs, run asks for {}", state.epoch, run.epochs)));
    }
    write_log(&log_path, &log)?;
    let snapshot = |model: &Model, opt: &Sgd, state: &TrainState, path: &Path| -> Result<()> {
        Checkpoint { model: model.clone(), optimizer: Some(opt.clone()), state: state.clone() }.save(path)
    };
    snapshot(&model, &opt, &state, &last)?;

    let weights = LossWeights { deep_supervision: run.ds_weight, ..LossWeights::default() };
    let per_epoch = train_set.len().div_ceil(run.batch_size) as u64;
    let total_steps = per_epoch * run.epochs as u64;
    for epoch in state.epoch..run.epochs {
        let order = shuffled_indices(train_set.len(), run.seed, epoch as u64);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(run.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| if run.augment { augment_for(train_set[i], run.seed, epoch, i) } else { Ok(train_set[i].clone()) })
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&samples.iter().collect::<Vec<_>>())?;
            opt.lr = run.schedule.lr_at(run.lr, opt.step, total_steps);
            let step = opt.step;
            let abort = |why: String| Error::Core(snet_core::Error::Numeric(format!("epoch {} step {step}: {why}; last good checkpoint kept at {}", epoch + 1, last.display())));
            let parts = match train_step(&mut model, &mut opt, &batch, &weights) {
                Ok(p) if p.total.is_finite() => p,
                Ok(p) => return Err(abort(format!("loss is {}", p.total))),
                Err(snet_core::Error::Numeric(m)) => return Err(abort(m)),
                Err(e) => return Err(e.into()),
            };
            weighted(&mut sum, &parts, chunk.len() as f64);
        }
        let n = train_set.len() as f64;
        let loss = LossBreakdown { total: sum.total / n, bce: sum.bce / n, dice: sum.dice / n, bce_f: sum.bce_f / n, dice_f: sum.dice_f / n };
        let due = run.eval_every > 0 && ((epoch + 1) % run.eval_every == 0 || epoch + 1 == run.epochs) && !val_set.is_empty();
        let eval_dice = if due { evaluate(&mut model, &val_set, &grouping, run.hd_percentile, run.batch_size)?.mean_foreground_dice() } else { None };
        state.epoch = epoch + 1;
        let improved = matches!((eval_dice, state.best), (Some(d), None) if d.is_finite()) || matches!((eval_dice, state.best), (Some(d), Some((_, b))) if d > b);
        if improved {
            state.best = Some((epoch + 1, eval_dice.unwrap()));
            snapshot(&model, &opt, &state, &best_path)?;
        }
        snapshot(&model, &opt, &state, &last)?;
        let row = EpochLog { epoch: epoch + 1, lr: opt.lr, loss, eval_dice };
        append_log(&log_path, &row)?;
        log.push(row);
        if matches!((eval_dice, run.early_stop_dice), (Some(d), Some(t)) if d >= t) {
            break;
        }
    }
    Ok(TrainOutcome { model, optimizer: opt, log, best: state.best })
}
