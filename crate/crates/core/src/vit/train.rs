use serde::{Deserialize, Serialize};

use super::{argmax, cross_entropy, ViTParams};
use crate::error::{FvitError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Momentum coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Decay the step size linearly to 0 over the run.
    pub linear_decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with `(0.9, 0.999)` moment decay; `momentum` is ignored.
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.005,
            batch_size: 16,
            momentum: 0.0,
            optimizer: Optimizer::Adam,
            linear_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Accuracy on the held-out set, if one was given.
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ViTParams,
    pub history: Vec<EpochStats>,
}

pub fn accuracy(params: &ViTParams, set: &[(Tensor, usize)]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, y) in set {
        if argmax(params.forward(x)?.logits.data()) == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

fn adam_step(p: &mut ViTParams, g: &ViTParams, m: &mut ViTParams, v: &mut ViTParams, lr: f64, step: i32) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let c1 = 1.0 - B1.powi(step);
    let c2 = 1.0 - B2.powi(step);
    let grads = g.named_tensors();
    let firsts = m.named_tensors_mut();
    let seconds = v.named_tensors_mut();
    for ((((_, pt), (_, gt)), (_, mt)), (_, vt)) in p.named_tensors_mut().into_iter().zip(grads).zip(firsts).zip(seconds) {
        for (((x, &gi), mi), vi) in pt.data_mut().iter_mut().zip(gt.data()).zip(mt.data_mut()).zip(vt.data_mut()) {
            *mi = B1 * *mi + (1.0 - B1) * gi;
            *vi = B2 * *vi + (1.0 - B2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
        }
    }
}

/// Minibatch training on cross-entropy. Single-threaded; with a fixed `rng` seed
/// the result is bit-reproducible.
pub fn train(
    params: &ViTParams,
    train_set: &[(Tensor, usize)],
    test_set: &[(Tensor, usize)],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(FvitError::param("empty training set"));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(FvitError::Config(format!("invalid training settings {cfg:?}")));
    }
    let classes = params.config().num_classes;
    if let Some((_, y)) = train_set.iter().chain(test_set).find(|(_, y)| *y >= classes) {
        return Err(FvitError::param(format!("label {y} out of range for {classes} classes")));
    }

    let mut p = params.clone();
    let mut velocity = p.zeros_like();
    let mut second = p.zeros_like();
    let mut step = 0i32;
    let total_steps = (cfg.epochs * train_set.len().div_ceil(cfg.batch_size)) as f64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = p.zeros_like();
            for &i in batch {
                let (x, y) = &train_set[i];
                let trace = p.forward(x)?;
                let (loss, dlogits) = cross_entropy(trace.logits.data(), *y);
                loss_sum += loss;
                if argmax(trace.logits.data()) == *y {
                    hits += 1;
                }
                let g = p.backward(&trace, &dlogits, true)?;
                grad.add_scaled(g.params.as_ref().expect("requested"), 1.0 / batch.len() as f64);
            }
            if cfg.lr == 0.0 {
                continue;
            }
            let lr = if cfg.linear_decay {
                cfg.lr * (1.0 - step as f64 / total_steps)
            } else {
                cfg.lr
            };
            match cfg.optimizer {
                Optimizer::Sgd => {
                    velocity.scale_in_place(cfg.momentum);
                    velocity.add_scaled(&grad, 1.0);
                    p.add_scaled(&velocity, -lr);
                    step += 1;
                }
                Optimizer::Adam => {
                    step += 1;
                    adam_step(&mut p, &grad, &mut velocity, &mut second, lr, step);
                }
            }
        }
        if !p.is_finite() {
            return Err(FvitError::Numerical {
                at: "training".into(),
                detail: format!("parameters diverged in epoch {epoch}"),
            });
        }
        let test_accuracy = if test_set.is_empty() {
            None
        } else {
            Some(accuracy(&p, test_set)?)
        };
        history.push(EpochStats {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: hits as f64 / train_set.len() as f64,
            test_accuracy,
        });
    }
    Ok(TrainOutcome { params: p, history })
}
