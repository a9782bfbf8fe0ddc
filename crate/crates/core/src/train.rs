//! Minibatch training loops shared by retraining and the baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::model::{Network, ParamId, Trainable};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Domain(format!("unknown optimizer `{other}` (expected sgd | adam)"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain gradient descent, or Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, net: &mut Network, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {id:?}")));
            }
            let p = net
                .param_mut(*id)
                .ok_or_else(|| Error::Domain(format!("{id:?} is not trainable")))?;
            match self.kind {
                OptimizerKind::Sgd => p.axpy(-self.lr, g)?,
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(*id)
                        .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
                    let c1 = 1.0 - ADAM_BETA1.powi(self.step);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.step);
                    let pd = p.data_mut();
                    for i in 0..g.len() {
                        let gi = g.data()[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        let vi = &mut v.data_mut()[i];
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = m.data()[i] / c1;
                        let vhat = v.data()[i] / c2;
                        pd[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Budget and optimizer for a plain training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

/// What a training run cost and where it ended.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub grad_evals: u64,
    pub steps: usize,
}

/// Minibatch training of the `which` groups of `net` on `data`.
pub fn train(net: &mut Network, which: Trainable, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut outcome = TrainOutcome::default();
    for epoch in 0..cfg.epochs {
        for batch_idx in data.shuffled_batches(cfg.batch_size, cfg.seed, epoch as u64) {
            let batch = data.subset(&batch_idx);
            let (loss, grads) = net.loss_and_grads(&batch, which)?;
            outcome.grad_evals += 1;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: outcome.steps,
                    loss,
                });
            }
            opt.apply(net, &grads)?;
            outcome.steps += 1;
        }
    }
    outcome.final_loss = net.evaluate(data)?.loss;
    if !outcome.final_loss.is_finite() {
        return Err(Error::Training {
            step: outcome.steps,
            loss: outcome.final_loss,
        });
    }
    Ok(outcome)
}
