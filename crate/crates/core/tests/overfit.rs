//! Fitting a single synthetic sample: the learning smoke test for the whole
//! gradient path. One 500-step run is shared by every test in this file.

use std::sync::OnceLock;

use snet_core::data::{make_batch, SegSample, SynthSpec};
use snet_core::loss::{LossBreakdown, LossWeights};
use snet_core::metrics::dice_score;
use snet_core::model::{Model, NetworkConfig};
use snet_core::optim::Sgd;
use snet_core::train::{predict, train_step};

const STEPS: usize = 500;
const LR: f64 = 0.05;

struct Run {
    sample: SegSample,
    losses: Vec<LossBreakdown>,
    foreground_dice: Vec<f64>,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let spec = SynthSpec::default();
        let (sample, _) = spec.generate_one(0).unwrap();
        let mut model = Model::build(&NetworkConfig::default(), 0).unwrap();
        let mut opt = Sgd::new(LR, 0.9, 1e-4).unwrap();
        let batch = make_batch(&[&sample]).unwrap();
        let losses = (0..STEPS).map(|_| train_step(&mut model, &mut opt, &batch, &LossWeights::default()).unwrap()).collect();
        let pred = predict(&mut model, &batch.images).unwrap();
        let k = spec.num_classes();
        let foreground_dice = dice_score(&pred[0], &sample.label, k).unwrap()[1..].iter().map(|d| d.unwrap()).collect();
        Run { sample, losses, foreground_dice }
    })
}

#[test]
fn reaches_high_foreground_dice() {
    let r = run();
    for (c, d) in r.foreground_dice.iter().enumerate() {
        assert!(*d >= 0.95, "class {} dice {d}", c + 1);
    }
}

#[test]
fn loss_falls_across_consecutive_windows() {
    let means: Vec<f64> = run().losses.chunks(100).map(|w| w.iter().map(|l| l.total).sum::<f64>() / w.len() as f64).collect();
    assert_eq!(means.len(), 5);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "window means {means:?}");
    }
}

#[test]
fn final_head_terms_vanish() {
    let last = run().losses.last().unwrap();
    assert!(0.6 * last.bce + 0.4 * last.dice <= 0.02, "{last:?}");
    assert!(last.total.is_finite());
}

/// Binary entropy in nats.
fn h_b(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (-p).ln_1p())
    }
}

/// Exact lower bound on the auxiliary-head BCE: its logits are constant on
/// every 16x16 block (both fused maps are at 1/16 resolution or coarser and are
/// upsampled by nearest neighbour), and the best constant logit on a block
/// with positive fraction `q` costs `H_b(q)` per pixel.
fn auxiliary_bce_bound(sample: &SegSample, k: usize) -> f64 {
    let (h, w) = (sample.height(), sample.width());
    let mut total = 0.0;
    for c in 0..k as u32 {
        for by in (0..h).step_by(16) {
            for bx in (0..w).step_by(16) {
                let mut pos = 0usize;
                for y in by..by + 16 {
                    for x in bx..bx + 16 {
                        pos += (sample.label[y * w + x] == c) as usize;
                    }
                }
                total += 256.0 * h_b(pos as f64 / 256.0);
            }
        }
    }
    total / (k * h * w) as f64
}

#[test]
fn auxiliary_head_bounds_the_combined_loss_away_from_zero() {
    let r = run();
    let bound = auxiliary_bce_bound(&r.sample, SynthSpec::default().num_classes());
    let min_bce_f = r.losses.iter().map(|l| l.bce_f).fold(f64::INFINITY, f64::min);
    assert!(min_bce_f >= bound - 1e-9, "observed {min_bce_f} below bound {bound}");
    // The bound alone keeps the combined loss above 0.02.
    assert!(0.6 * bound > 0.02, "bound {bound}");
}

#[test]
fn combined_loss_reaches_two_hundredths() {
    let best = run().losses.iter().map(|l| l.total).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.02, "lowest combined loss over {STEPS} steps: {best}");
}
