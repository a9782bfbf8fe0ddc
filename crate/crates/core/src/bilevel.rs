//! Alternating search over low-rank weights and selection logits.
//!
//! Each meta-epoch first descends the training loss in the weights
//! (`U`, `V`, head), then descends the validation loss *after a virtual
//! one-step weight update* in the selection logits:
//!
//! ```text
//! W^ = W - eta * grad_W L_tr(W, beta)
//! beta <- beta - lr_a * d/dbeta L_val(W^(beta), beta)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::lora::{AlphaVector, ConstraintMode};
use crate::model::{Network, ParamId, Trainable};
use crate::numerics::{Tape, Tensor, Var};
use crate::train::{Optimizer, OptimizerKind};

/// How the derivative of the lookahead validation loss is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMode {
    /// Differentiate through the lookahead step, second-order term included.
    #[default]
    Exact,
    /// Finite-difference Hessian-vector product for the second-order term.
    DartsFd,
    /// Direct term only, i.e. `eta = 0`.
    FirstOrder,
}

impl HypergradMode {
    /// Loss-gradient evaluations charged per hypergradient.
    pub fn grad_evals(self) -> u64 {
        match self {
            // Training gradient kept as a graph, validation backward, and the
            // mixed second-order product riding on that backward.
            HypergradMode::Exact => 3,
            // Training gradient, validation gradient, two perturbed gradients.
            HypergradMode::DartsFd => 4,
            HypergradMode::FirstOrder => 1,
        }
    }
}

impl fmt::Display for HypergradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HypergradMode::Exact => "exact",
            HypergradMode::DartsFd => "darts_fd",
            HypergradMode::FirstOrder => "first_order",
        })
    }
}

impl FromStr for HypergradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HypergradMode::Exact),
            "darts_fd" => Ok(HypergradMode::DartsFd),
            "first_order" => Ok(HypergradMode::FirstOrder),
            other => Err(Error::Domain(format!(
                "unknown hypergradient mode `{other}` (expected exact | darts_fd | first_order)"
            ))),
        }
    }
}

/// Ordering of weight and selection updates within a meta-epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// A full pass of weight updates, then a full pass of selection updates.
    #[default]
    Paired,
    /// One weight update then one selection update, per minibatch.
    Interleaved,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Paired => "paired",
            Schedule::Interleaved => "interleaved",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Schedule::Paired),
            "interleaved" => Ok(Schedule::Interleaved),
            other => Err(Error::Domain(format!("unknown schedule `{other}` (expected paired | interleaved)"))),
        }
    }
}

/// Minimum validation improvement that resets the patience counter.
pub const MIN_IMPROVEMENT: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Lookahead step size.
    pub eta: f64,
    pub lr_w: f64,
    pub lr_a: f64,
    pub batch_size: usize,
    pub max_meta_epochs: usize,
    pub patience: usize,
    pub hypergrad_mode: HypergradMode,
    pub constraint_mode: ConstraintMode,
    pub schedule: Schedule,
    /// Update rule for `U`, `V` and the head in Step 1 (the lookahead is
    /// always a plain gradient step of size `eta`).
    pub weight_optimizer: OptimizerKind,
    /// Update rule for the selection logits in Step 2.
    pub selection_optimizer: OptimizerKind,
    pub seed: u64,
    /// Store wall-clock times; off keeps trajectories bit-reproducible.
    pub record_timings: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eta: 1e-4,
            lr_w: 1e-4,
            lr_a: 1e-3,
            batch_size: 16,
            max_meta_epochs: 50,
            patience: 5,
            hypergrad_mode: HypergradMode::Exact,
            constraint_mode: ConstraintMode::Softmax,
            schedule: Schedule::Paired,
            weight_optimizer: OptimizerKind::Sgd,
            selection_optimizer: OptimizerKind::Sgd,
            seed: 0,
            record_timings: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Domain(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.lr_w > 0.0) || !(self.lr_a > 0.0) {
            return Err(Error::Domain("learning rates must be > 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Domain("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Records a scalar loss from handles for the inner weights and outer variables.
pub trait Objective {
    fn record(&self, tape: &mut Tape, weights: &[Var], outer: &[Var]) -> Result<Var>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    fn record(&self, tape: &mut Tape, weights: &[Var], outer: &[Var]) -> Result<Var> {
        self(tape, weights, outer)
    }
}

fn leaves(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.leaf(t.clone())).collect()
}

fn constants(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn grads_for(tape: &Tape, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss, vars)?;
    let out: Vec<Tensor> = vars.iter().map(|v| g.get(*v).expect("requested").clone()).collect();
    if out.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(out)
}

/// `W - eta * grad_W L_tr(W, outer)`.
pub fn lookahead_weights(
    train: &impl Objective,
    weights: &[Tensor],
    outer: &[Tensor],
    eta: f64,
) -> Result<Vec<Tensor>> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be >= 0, got {eta}")));
    }
    let mut tape = Tape::new();
    let w = leaves(&mut tape, weights);
    let a = constants(&mut tape, outer);
    let loss = train.record(&mut tape, &w, &a)?;
    let g = grads_for(&tape, loss, &w)?;
    weights
        .iter()
        .zip(&g)
        .map(|(wt, gt)| wt.sub(&gt.scale(eta)))
        .collect()
}

/// Hypergradient with respect to `outer`, plus its cost in gradient evaluations.
pub fn hypergradient_of(
    train: &impl Objective,
    val: &impl Objective,
    weights: &[Tensor],
    outer: &[Tensor],
    eta: f64,
    mode: HypergradMode,
) -> Result<(Vec<Tensor>, u64)> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be >= 0, got {eta}")));
    }
    let grads = match mode {
        HypergradMode::FirstOrder => {
            let mut tape = Tape::new();
            let w = constants(&mut tape, weights);
            let a = leaves(&mut tape, outer);
            let loss = val.record(&mut tape, &w, &a)?;
            grads_for(&tape, loss, &a)?
        }
        HypergradMode::Exact => {
            let mut tape = Tape::new();
            let w = leaves(&mut tape, weights);
            let a = leaves(&mut tape, outer);
            let l_tr = train.record(&mut tape, &w, &a)?;
            let g_w = tape.backward_graph(l_tr, &w)?;
            let mut w_hat = Vec::with_capacity(w.len());
            for (&wi, &gi) in w.iter().zip(&g_w) {
                let step = tape.scale(gi, eta);
                w_hat.push(tape.sub(wi, step)?);
            }
            let l_val = val.record(&mut tape, &w_hat, &a)?;
            grads_for(&tape, l_val, &a)?
        }
        HypergradMode::DartsFd => {
            let w_hat = lookahead_weights(train, weights, outer, eta)?;
            let mut tape = Tape::new();
            let wv = leaves(&mut tape, &w_hat);
            let av = leaves(&mut tape, outer);
            let l_val = val.record(&mut tape, &wv, &av)?;
            let mut wanted = wv.clone();
            wanted.extend_from_slice(&av);
            let all = grads_for(&tape, l_val, &wanted)?;
            let (dir, direct) = all.split_at(wv.len());
            let norm = dir.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm == 0.0 {
                direct.to_vec()
            } else {
                let eps = 0.01 / norm;
                let shifted = |sign: f64| -> Result<Vec<Tensor>> {
                    let w: Vec<Tensor> = weights
                        .iter()
                        .zip(dir)
                        .map(|(wt, d)| {
                            let mut t = wt.clone();
                            t.axpy(sign * eps, d)?;
                            Ok(t)
                        })
                        .collect::<Result<_>>()?;
                    let mut tape = Tape::new();
                    let wc = constants(&mut tape, &w);
                    let a = leaves(&mut tape, outer);
                    let loss = train.record(&mut tape, &wc, &a)?;
                    grads_for(&tape, loss, &a)
                };
                let plus = shifted(1.0)?;
                let minus = shifted(-1.0)?;
                direct
                    .iter()
                    .zip(plus.iter().zip(&minus))
                    .map(|(d, (p, m))| d.sub(&p.sub(m)?.scale(eta / (2.0 * eps))))
                    .collect::<Result<_>>()?
            }
        }
    };
    Ok((grads, mode.grad_evals()))
}

/// A network's loss on one batch, viewed as a function of chosen parameters.
struct NetObjective<'a> {
    net: &'a Network,
    batch: &'a Dataset,
    weight_ids: &'a [ParamId],
    outer_ids: &'a [ParamId],
}

impl Objective for NetObjective<'_> {
    fn record(&self, tape: &mut Tape, weights: &[Var], outer: &[Var]) -> Result<Var> {
        let mut vars = self.net.bind(tape, Trainable::NONE);
        for (&id, &v) in self.weight_ids.iter().zip(weights) {
            vars.replace(id, v);
        }
        for (&id, &v) in self.outer_ids.iter().zip(outer) {
            vars.replace(id, v);
        }
        Ok(self.net.forward_on(tape, &vars, self.batch)?.loss)
    }
}

fn values(net: &Network, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| net.param(id).expect("known id").clone()).collect()
}

/// The network with its weights (`U`, `V`, head) moved one gradient step of
/// size `eta` on `batch_tr`. Selection logits and frozen weights are untouched.
pub fn lookahead_step(net: &Network, batch_tr: &Dataset, eta: f64) -> Result<Network> {
    let weight_ids = net.param_ids(Trainable::WEIGHTS);
    let outer_ids = net.param_ids(Trainable::SELECTION);
    let obj = NetObjective {
        net,
        batch: batch_tr,
        weight_ids: &weight_ids,
        outer_ids: &outer_ids,
    };
    let w_hat = lookahead_weights(&obj, &values(net, &weight_ids), &values(net, &outer_ids), eta)?;
    let mut out = net.clone();
    for (id, t) in weight_ids.into_iter().zip(w_hat) {
        *out.param_mut(id).expect("trainable") = t;
    }
    Ok(out)
}

/// Gradient of the lookahead validation loss for every selection logit,
/// keyed by layer index. Also returns the gradient-evaluation cost.
pub fn hypergradient(
    net: &Network,
    batch_tr: &Dataset,
    batch_val: &Dataset,
    eta: f64,
    mode: HypergradMode,
) -> Result<(BTreeMap<usize, Tensor>, u64)> {
    let weight_ids = net.param_ids(Trainable::WEIGHTS);
    let outer_ids = net.param_ids(Trainable::SELECTION);
    let train = NetObjective {
        net,
        batch: batch_tr,
        weight_ids: &weight_ids,
        outer_ids: &outer_ids,
    };
    let val = NetObjective {
        batch: batch_val,
        ..train
    };
    let (g, cost) = hypergradient_of(
        &train,
        &val,
        &values(net, &weight_ids),
        &values(net, &outer_ids),
        eta,
        mode,
    )?;
    let map = outer_ids
        .iter()
        .zip(g)
        .map(|(id, t)| match id {
            ParamId::Beta(i) => (*i, t),
            _ => unreachable!("selection ids are logits"),
        })
        .collect();
    Ok((map, cost))
}

/// State recorded after each completed meta-epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Selection weights per LoRA layer index.
    pub alphas: BTreeMap<usize, AlphaVector>,
    /// Milliseconds since the search began (0 when timings are off).
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Diverged { epoch: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrajectory {
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Loss-gradient evaluations spent by the search.
    pub grad_evals: u64,
}

/// Result of [`meta_search`]: the searched network and how it got there.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub net: Network,
    pub trajectory: SearchTrajectory,
    /// Final selection logits per LoRA layer index.
    pub betas: BTreeMap<usize, Tensor>,
}

impl SearchOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.trajectory.stop, StopReason::Diverged { .. })
    }
}

fn check_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    let key = |d: &Dataset, r: usize| d.features.row(r).iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let seen: HashSet<Vec<u64>> = (0..a.len()).map(|r| key(a, r)).collect();
    if (0..b.len()).any(|r| seen.contains(&key(b, r))) {
        return Err(Error::Domain("training and validation sets share an example".into()));
    }
    Ok(())
}

fn alpha_snapshot(net: &Network) -> BTreeMap<usize, AlphaVector> {
    net.lora_layers()
        .into_iter()
        .filter_map(|i| {
            let l = net.lora(i)?;
            l.has_selection().then(|| (i, l.alphas(net.constraint())))
        })
        .collect()
}

/// Runs the alternating search until `max_meta_epochs` or early stopping.
///
/// A non-finite loss or gradient ends the search early; the trajectory up
/// to that point is returned with [`StopReason::Diverged`] and the network
/// is left at its last finite state.
pub fn meta_search(net: Network, d_tr: &Dataset, d_val: &Dataset, config: &SearchConfig) -> Result<SearchOutcome> {
    config.validate()?;
    check_disjoint(d_tr, d_val)?;
    let mut net = net;
    net.set_constraint(config.constraint_mode);
    let start = Instant::now();
    let initial_train_loss = net.evaluate(d_tr)?.loss;
    let initial_val_loss = net.evaluate(d_val)?.loss;
    let mut trajectory = SearchTrajectory {
        initial_train_loss,
        initial_val_loss,
        epochs: Vec::new(),
        stop: StopReason::MaxEpochs,
        grad_evals: 0,
    };
    let mut best = initial_val_loss;
    let mut stale = 0;
    let mut opts = (
        Optimizer::new(config.weight_optimizer, config.lr_w),
        Optimizer::new(config.selection_optimizer, config.lr_a),
    );

    for epoch in 0..config.max_meta_epochs {
        let snapshot = net.clone();
        match run_epoch(&mut net, &mut opts, d_tr, d_val, config, epoch, &mut trajectory.grad_evals) {
            Ok(()) => {}
            Err(e @ (Error::Numeric(_) | Error::Training { .. })) => {
                net = snapshot;
                trajectory.stop = StopReason::Diverged {
                    epoch,
                    message: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
        let train_loss = net.evaluate(d_tr)?.loss;
        let val_loss = net.evaluate(d_val)?.loss;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            net = snapshot;
            trajectory.stop = StopReason::Diverged {
                epoch,
                message: format!("non-finite loss (train {train_loss}, val {val_loss})"),
            };
            break;
        }
        trajectory.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            alphas: alpha_snapshot(&net),
            wall_ms: if config.record_timings {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
        if val_loss < best - MIN_IMPROVEMENT {
            best = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                trajectory.stop = StopReason::EarlyStop;
                break;
            }
        }
    }

    let betas = net.betas();
    Ok(SearchOutcome { net, trajectory, betas })
}

fn run_epoch(
    net: &mut Network,
    (w_opt, a_opt): &mut (Optimizer, Optimizer),
    d_tr: &Dataset,
    d_val: &Dataset,
    config: &SearchConfig,
    epoch: usize,
    grad_evals: &mut u64,
) -> Result<()> {
    let e = epoch as u64;
    let tr_batches: Vec<Dataset> = d_tr
        .shuffled_batches(config.batch_size, config.seed, 2 * e)
        .iter()
        .map(|b| d_tr.subset(b))
        .collect();
    let val_batches: Vec<Dataset> = d_val
        .shuffled_batches(config.batch_size, config.seed, 2 * e + 1)
        .iter()
        .map(|b| d_val.subset(b))
        .collect();

    let mut weight_step = |net: &mut Network, batch: &Dataset, evals: &mut u64| -> Result<()> {
        let (loss, grads) = net.loss_and_grads(batch, Trainable::WEIGHTS)?;
        *evals += 1;
        if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite training loss {loss}")));
        }
        w_opt.apply(net, &grads)
    };
    let mut selection_step = |net: &mut Network, tb: &Dataset, vb: &Dataset, evals: &mut u64| -> Result<()> {
        let (hg, cost) = hypergradient(net, tb, vb, config.eta, config.hypergrad_mode)?;
        *evals += cost;
        let grads: Vec<(ParamId, Tensor)> = hg.into_iter().map(|(i, g)| (ParamId::Beta(i), g)).collect();
        a_opt.apply(net, &grads)
    };

    match config.schedule {
        Schedule::Paired => {
            for b in &tr_batches {
                weight_step(net, b, grad_evals)?;
            }
            for (i, vb) in val_batches.iter().enumerate() {
                selection_step(net, &tr_batches[i % tr_batches.len()], vb, grad_evals)?;
            }
        }
        Schedule::Interleaved => {
            for (i, tb) in tr_batches.iter().enumerate() {
                weight_step(net, tb, grad_evals)?;
                selection_step(net, tb, &val_batches[i % val_batches.len()], grad_evals)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_train(tape: &mut Tape, w: &[Var], a: &[Var]) -> Result<Var> {
        // 0.5 * a * w^2
        let w2 = tape.hadamard(w[0], w[0])?;
        let aw2 = tape.hadamard(a[0], w2)?;
        Ok(tape.scale(aw2, 0.5))
    }

    fn quadratic_val(tape: &mut Tape, w: &[Var], _a: &[Var]) -> Result<Var> {
        let w2 = tape.hadamard(w[0], w[0])?;
        Ok(tape.scale(w2, 0.5))
    }

    #[test]
    fn scalar_lookahead() {
        let w = lookahead_weights(
            &|tape: &mut Tape, w: &[Var], _a: &[Var]| quadratic_val(tape, w, &[]),
            &[Tensor::scalar(2.0)],
            &[],
            0.1,
        )
        .unwrap();
        assert!((w[0].item() - 1.8).abs() < 1e-15);
    }

    #[test]
    fn scalar_quadratic_hypergradient() {
        let w = [Tensor::scalar(1.0)];
        let a = [Tensor::scalar(1.0)];
        let (g, _) = hypergradient_of(&quadratic_train, &quadratic_val, &w, &a, 0.1, HypergradMode::Exact).unwrap();
        assert!((g[0].item() + 0.09).abs() < 1e-10);
        let (g, _) = hypergradient_of(&quadratic_train, &quadratic_val, &w, &a, 0.1, HypergradMode::DartsFd).unwrap();
        assert!((g[0].item() + 0.09).abs() < 1e-6);
        // No direct dependence on `a` in the validation loss.
        let (g, _) = hypergradient_of(&quadratic_train, &quadratic_val, &w, &a, 0.1, HypergradMode::FirstOrder).unwrap();
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn negative_eta_rejected() {
        let r = hypergradient_of(&quadratic_train, &quadratic_val, &[Tensor::scalar(1.0)], &[Tensor::scalar(1.0)], -0.1, HypergradMode::Exact);
        assert!(r.is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        for bad in [
            SearchConfig { eta: -1.0, ..Default::default() },
            SearchConfig { lr_w: 0.0, ..Default::default() },
            SearchConfig { lr_a: -1e-3, ..Default::default() },
            SearchConfig { patience: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [HypergradMode::Exact, HypergradMode::DartsFd, HypergradMode::FirstOrder] {
            assert_eq!(m.to_string().parse::<HypergradMode>().unwrap(), m);
        }
        assert!("nope".parse::<Schedule>().is_err());
    }
}
