//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes, so it shares no code
//! path with the backward rules it is checking.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::nn::{BufferSet, Ctx, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true gradient is
    /// (close to) zero are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries per input, sampled without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
    pub stencil: Stencil,
}

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// Two evaluations, truncation error `O(h^2)`.
    #[default]
    Central2,
    /// Four evaluations, truncation error `O(h^4)`; allows larger steps, which
    /// keeps round-off in deep compositions below the checked tolerance.
    Central4,
    /// Six evaluations, truncation error `O(h^6)`.
    Central6,
    /// Ridders' extrapolation: central differences at steps shrinking from `h`,
    /// extrapolated to zero, keeping the estimate with the smallest error bound.
    /// Costs up to twenty evaluations but adapts to each coordinate's curvature.
    Ridders,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6, max_entries: None, seed: 0, stencil: Stencil::Central2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.map_or(0.0, |m| m.rel_error)
    }

    pub fn absorb(&mut self, m: Mismatch) {
        self.checked += 1;
        if self.worst.is_none_or(|w| m.rel_error > w.rel_error) {
            self.worst = Some(m);
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if let Some(m) = other.worst {
            if self.worst.is_none_or(|w| m.rel_error > w.rel_error) {
                self.worst = Some(m);
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    libm::fabs(analytic - numeric) / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(+h) - f(-h)) / 2h` where `eval(delta)` evaluates the function with one
/// coordinate shifted by `delta`.
pub fn central_difference(mut eval: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let plus = eval(step)?;
    let minus = eval(-step)?;
    Ok((plus - minus) / (2.0 * step))
}

/// `(-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h`.
pub fn central_difference4(mut eval: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let (p2, p1) = (eval(2.0 * step)?, eval(step)?);
    let (m1, m2) = (eval(-step)?, eval(-2.0 * step)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step))
}

/// `(45 (f(+h) - f(-h)) - 9 (f(+2h) - f(-2h)) + f(+3h) - f(-3h)) / 60h`.
pub fn central_difference6(mut eval: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let (p3, p2, p1) = (eval(3.0 * step)?, eval(2.0 * step)?, eval(step)?);
    let (m1, m2, m3) = (eval(-step)?, eval(-2.0 * step)?, eval(-3.0 * step)?);
    Ok((45.0 * (p1 - m1) - 9.0 * (p2 - m2) + (p3 - m3)) / (60.0 * step))
}

fn difference(eval: impl FnMut(f64) -> Result<f64>, opts: &GradCheckOptions) -> Result<f64> {
    match opts.stencil {
        Stencil::Central2 => central_difference(eval, opts.step),
        Stencil::Central4 => central_difference4(eval, opts.step),
        Stencil::Central6 => central_difference6(eval, opts.step),
        Stencil::Ridders => ridders(eval, opts.step).map(|(d, _)| d),
    }
}

/// Ridders' polynomial extrapolation of central differences.
///
/// Returns the derivative estimate and its error bound.
pub fn ridders(mut eval: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    const SAFE: f64 = 2.0;
    let shrink2 = SHRINK * SHRINK;
    let mut h = step;
    let mut prev = [0.0; ROWS];
    prev[0] = (eval(h)? - eval(-h)?) / (2.0 * h);
    let (mut best, mut err) = (prev[0], f64::INFINITY);
    for i in 1..ROWS {
        h /= SHRINK;
        let mut row = [0.0; ROWS];
        row[0] = (eval(h)? - eval(-h)?) / (2.0 * h);
        let mut fac = shrink2;
        for j in 1..=i {
            row[j] = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = libm::fabs(row[j] - row[j - 1]).max(libm::fabs(row[j] - prev[j - 1]));
            if e <= err {
                err = e;
                best = row[j];
            }
        }
        // Higher orders stopped helping: round-off has taken over.
        if libm::fabs(row[i] - prev[i - 1]) >= SAFE * err {
            break;
        }
        prev = row;
    }
    Ok((best, err))
}

/// Indices to probe for a tensor of `len` entries.
pub fn sample_indices(len: usize, max: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(m) = max {
        if m < len {
            for i in 0..m {
                let j = rng.random_range(i..len);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx.sort_unstable();
        }
    }
    idx
}

/// Check the gradient of the scalar produced by `f` with respect to every input.
///
/// `f` receives a fresh graph and the input handles; it must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone().with_grad())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in sample_indices(inputs[k].len(), opts.max_entries, &mut rng) {
            let orig = inputs[k].data()[i];
            let numeric = difference(
                |d| {
                    work[k].data_mut()[i] = orig + d;
                    eval(&work)
                },
                &opts,
            )?;
            work[k].data_mut()[i] = orig;
            let a = analytic.data()[i];
            report.absorb(Mismatch { input: k, index: i, analytic: a, numeric, rel_error: relative_error(a, numeric, opts.floor) });
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but also probes every named parameter of `params`.
///
/// Running statistics are cloned for each evaluation so train-mode batch norm
/// sees identical buffers throughout.
pub fn check_layer_gradients<F>(params: &ParamSet, buffers: &BufferSet, mode: Mode, inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let eval = |ps: &ParamSet, ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let mut bufs = buffers.clone();
        let vars = ts.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let mut cx = Ctx::new(&mut g, ps, &mut bufs, mode);
        let out = f(&mut cx, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let mut bufs = buffers.clone();
    let vars = inputs.iter().map(|t| g.input(t.clone().with_grad())).collect::<Result<Vec<_>>>()?;
    let out = {
        let mut cx = Ctx::new(&mut g, params, &mut bufs, mode);
        f(&mut cx, &vars)?
    };
    g.backward(out)?;
    let pgrads = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in sample_indices(inputs[k].len(), opts.max_entries, &mut rng) {
            let orig = inputs[k].data()[i];
            let numeric = difference(
                |d| {
                    work[k].data_mut()[i] = orig + d;
                    eval(params, &work)
                },
                &opts,
            )?;
            work[k].data_mut()[i] = orig;
            let a = analytic.data()[i];
            report.absorb(Mismatch { input: k, index: i, analytic: a, numeric, rel_error: relative_error(a, numeric, opts.floor) });
        }
    }
    let mut ps = params.clone();
    for (p, name) in params.names().enumerate() {
        let len = params.get(name)?.len();
        for i in sample_indices(len, opts.max_entries, &mut rng) {
            let orig = params.get(name)?.data()[i];
            let numeric = difference(
                |d| {
                    ps.get_mut(name)?.data_mut()[i] = orig + d;
                    eval(&ps, inputs)
                },
                &opts,
            )?;
            ps.get_mut(name)?.data_mut()[i] = orig;
            let a = pgrads.get(name).map_or(0.0, |t| t.data()[i]);
            report.absorb(Mismatch { input: inputs.len() + p, index: i, analytic: a, numeric, rel_error: relative_error(a, numeric, opts.floor) });
        }
    }
    Ok(report)
}

/// Weighted sum `Σ w_i x_i` with fixed pseudo-random weights, a generic scalar
/// read-out that exercises every output entry of a non-scalar op.
pub fn random_readout(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let wv = g.constant(w)?;
    let p = g.mul(x, wv)?;
    g.sum(p)
}
