//! SGD with momentum and L2 weight decay.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{ensure, Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - step / total)^power`.
    Poly { power: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Poly { power } => {
                let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
                base * libm::pow(1.0 - frac, power)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        ensure!(lr > 0.0 && lr.is_finite(), Config, "learning rate must be positive, got {}", lr);
        ensure!((0.0..1.0).contains(&momentum), Config, "momentum must lie in [0, 1), got {}", momentum);
        ensure!(weight_decay >= 0.0, Config, "weight decay must be non-negative");
        Ok(Self { lr, momentum, weight_decay, velocity: BTreeMap::new(), step: 0 })
    }

    /// `g' = g + wd w`, `v = mu v + g'`, `w -= lr v` for every parameter.
    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let names: alloc::vec::Vec<String> = params.names().cloned().collect();
        for name in &names {
            let g = grads.get(name).ok_or_else(|| Error::Internal(alloc::format!("no gradient for `{name}`")))?;
            let w = params.get_mut(name)?;
            ensure!(g.shape() == w.shape(), Internal, "gradient of `{}` has shape {:?}, parameter {:?}", name, g.shape(), w.shape());
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gd = gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + gd;
                *wi -= self.lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}
