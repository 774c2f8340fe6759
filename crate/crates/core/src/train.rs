//! One optimization step and batched inference on a [`Model`].

use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Mode};
use crate::loss::{combined_objective, one_hot, LossBreakdown, LossWeights};
use crate::model::Model;
use crate::optim::Sgd;
use crate::tensor::Tensor;

/// Images `(B, C, H, W)` and row-major label masks of `B * H * W` class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<u32>) -> Result<Self> {
        let (b, _, h, w) = images.dims4()?;
        ensure!(labels.len() == b * h * w, Config, "batch of {} images {}x{} needs {} labels, got {}", b, h, w, b * h * w, labels.len());
        Ok(Self { images, labels })
    }

    pub fn size(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Loss of the batch without touching the parameters.
pub fn batch_loss(model: &mut Model, batch: &Batch, weights: &LossWeights, mode: Mode) -> Result<(Graph, crate::loss::Objective)> {
    let (b, _, h, w) = batch.images.dims4()?;
    let mut g = Graph::new();
    let x = g.input(batch.images.clone())?;
    let out = model.forward(&mut g, x, mode, false)?;
    let t = g.constant(one_hot(&batch.labels, b, model.config.num_classes, h, w)?)?;
    let obj = combined_objective(&mut g, out.y_hat, out.y_hat_f, t, weights)?;
    Ok((g, obj))
}

/// Forward in train mode, backward, one optimizer update. Returns the loss
/// terms evaluated before the update.
pub fn train_step(model: &mut Model, opt: &mut Sgd, batch: &Batch, weights: &LossWeights) -> Result<LossBreakdown> {
    let (mut g, obj) = batch_loss(model, batch, weights, Mode::Train)?;
    g.backward(obj.total)?;
    let grads = g.param_grads();
    opt.update(&mut model.params, &grads)?;
    Ok(obj.parts)
}

/// Eval-mode logits of the final head.
pub fn predict_logits(model: &mut Model, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(images.clone())?;
    let out = model.forward(&mut g, x, Mode::Eval, false)?;
    Ok(g.value(out.y_hat).clone())
}

/// Eval-mode arg-max masks, one per batch item.
pub fn predict(model: &mut Model, images: &Tensor) -> Result<Vec<Vec<u32>>> {
    predict_logits(model, images)?.argmax_channels()
}
