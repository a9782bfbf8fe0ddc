//! Turning learned selection weights into discrete ranks, then retraining.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::lora::{init_fixed_rank, AlphaVector, ConstraintMode, LoraLinear};
use crate::model::{LayerWeight, Metrics, Network, Trainable};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Discrete rank chosen for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDecision {
    pub layer: usize,
    pub alpha: AlphaVector,
    pub threshold: f64,
    /// Indices `j` with `alpha_j >= threshold`, ascending.
    pub kept: Vec<usize>,
    pub rank: usize,
}

/// Threshold applied to selection weights under each constraint mode.
///
/// Softmax weights average `1/k`; unconstrained weights are compared with
/// their own mean; sigmoid weights with 0.5.
pub fn threshold_for(alpha: &AlphaVector, mode: ConstraintMode) -> f64 {
    match mode {
        ConstraintMode::Softmax => 1.0 / alpha.len() as f64,
        ConstraintMode::None => alpha.sum() / alpha.len() as f64,
        ConstraintMode::Sigmoid => 0.5,
    }
}

/// Keeps every component whose weight reaches the threshold (ties kept).
pub fn threshold_ranks(layer: usize, alpha: &AlphaVector, mode: ConstraintMode) -> Result<RankDecision> {
    if alpha.is_empty() {
        return Err(Error::Domain("selection vector must be nonempty".into()));
    }
    let threshold = threshold_for(alpha, mode);
    let mut kept: Vec<usize> = alpha
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a >= threshold)
        .map(|(j, _)| j)
        .collect();
    // The largest simplex weight is at least the mean; only rounding in the
    // normalization can push every entry a hair below 1/k.
    if kept.is_empty() && mode == ConstraintMode::Softmax {
        let best = alpha
            .values()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        kept.push(best);
    }
    Ok(RankDecision {
        layer,
        alpha: alpha.clone(),
        threshold,
        rank: kept.len(),
        kept,
    })
}

/// Decisions for every LoRA layer of `net` that still has selection logits.
pub fn decide_ranks(net: &Network) -> Result<Vec<RankDecision>> {
    net.lora_layers()
        .into_iter()
        .filter_map(|i| net.lora(i).filter(|l| l.has_selection()).map(|l| (i, l)))
        .map(|(i, l)| threshold_ranks(i, &l.alphas(net.constraint()), net.constraint()))
        .collect()
}

/// Drops the components not in `decision.kept` and folds each kept
/// `alpha_j` into column `j` of `U`. The result has fixed rank and no logits,
/// and its update equals the kept part of the weighted sum exactly.
pub fn prune(layer: &LoraLinear, decision: &RankDecision) -> Result<LoraLinear> {
    if decision.kept.is_empty() {
        return Err(Error::Domain(format!("layer {} would be pruned to rank 0", decision.layer)));
    }
    if decision.alpha.len() != layer.rank() || decision.kept.iter().any(|&j| j >= layer.rank()) {
        return Err(Error::Domain(format!(
            "decision for layer {} does not match a rank-{} layer",
            decision.layer,
            layer.rank()
        )));
    }
    let mut u = layer.u().select_cols(&decision.kept);
    for (c, &j) in decision.kept.iter().enumerate() {
        let a = decision.alpha.values()[j];
        for r in 0..u.rows() {
            u.set(r, c, u.get(r, c) * a);
        }
    }
    let v = layer.v().select_rows(&decision.kept);
    LoraLinear::from_parts(layer.w_tilde().clone(), u, v, None)
}

/// Starting point for the fixed-rank factors during retraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainInit {
    /// New `U ~ N(0, std^2)`, `V = 0` at the chosen rank; head back to pretrained.
    #[default]
    Fresh,
    /// Pruned factors and the searched head.
    Warm,
}

impl fmt::Display for RetrainInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrainInit::Fresh => "fresh",
            RetrainInit::Warm => "warm",
        })
    }
}

impl FromStr for RetrainInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(RetrainInit::Fresh),
            "warm" => Ok(RetrainInit::Warm),
            other => Err(Error::Domain(format!("unknown retrain init `{other}` (expected fresh | warm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub init: RetrainInit,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub net: Network,
    /// Loss on the merged data before any update.
    pub initial: Metrics,
    /// Loss on the merged data after training.
    pub final_metrics: Metrics,
    pub training: TrainOutcome,
}

/// Builds the fixed-rank network implied by `decisions`, before training.
pub fn rebuild_fixed_rank(net: &Network, decisions: &[RankDecision], init: RetrainInit, seed: u64) -> Result<Network> {
    let mut out = net.clone();
    if init == RetrainInit::Fresh {
        out.reset_head();
    }
    for (n, d) in decisions.iter().enumerate() {
        let layer = net
            .lora(d.layer)
            .ok_or_else(|| Error::Domain(format!("layer {} has no low-rank update", d.layer)))?;
        let weight = if d.rank == 0 {
            LayerWeight::Plain(layer.w_tilde().clone())
        } else {
            match init {
                RetrainInit::Warm => LayerWeight::Lora(prune(layer, d)?),
                RetrainInit::Fresh => LayerWeight::Lora(init_fixed_rank(
                    layer.w_tilde().clone(),
                    d.rank,
                    net.spec().init_std,
                    seed.wrapping_add(0x5eed).wrapping_mul(31).wrapping_add(n as u64),
                )?),
            }
        };
        out.replace_layer_weight(d.layer, weight)?;
    }
    Ok(out)
}

/// Retrains fixed-rank factors and the head on the merged training and
/// validation data.
pub fn retrain(net: &Network, decisions: &[RankDecision], d_merged: &Dataset, config: &RetrainConfig) -> Result<RetrainOutcome> {
    let mut fixed = rebuild_fixed_rank(net, decisions, config.init, config.train.seed)?;
    let initial = fixed.evaluate(d_merged)?;
    let training = train(&mut fixed, Trainable::WEIGHTS, d_merged, &config.train)?;
    let final_metrics = fixed.evaluate(d_merged)?;
    Ok(RetrainOutcome {
        net: fixed,
        initial,
        final_metrics,
        training,
    })
}
