//! Teacher-student regression tasks with a known low-rank shift per layer.

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::model::{pretrain, Network, NetworkSpec, ParamId, Task};
use crate::numerics::{seeded_rng, Tensor};

/// Perturbation norm is `scale * RELATIVE_NORM * ||W~||_F`.
pub const RELATIVE_NORM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTaskSpec {
    /// Student/teacher architecture; must be a regression network.
    pub network: NetworkSpec,
    /// Ground-truth rank of the shift, one per LoRA-masked layer in order.
    pub true_ranks: Vec<usize>,
    pub perturbation_scale: f64,
    pub n_pretrain: usize,
    /// Size of the downstream training set (later split into train/validation).
    pub n_downstream: usize,
    pub n_test: usize,
    /// Standard deviation of Gaussian label noise.
    pub noise: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
}

impl PlantedTaskSpec {
    /// The desk-scale suite: a 16-24-24-24-4 MLP with shifts of rank 1, 3
    /// and 6 on its three hidden layers, budget 8, no label noise.
    pub fn default_suite(seed: u64) -> Self {
        PlantedTaskSpec {
            network: NetworkSpec::mlp(vec![16, 24, 24, 24, 4], Task::Regression { outputs: 4 }),
            true_ranks: vec![1, 3, 6],
            perturbation_scale: 1.0,
            n_pretrain: 512,
            n_downstream: 256,
            n_test: 256,
            noise: 0.0,
            pretrain_steps: 300,
            pretrain_lr: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !matches!(self.network.task, Task::Regression { .. }) {
            return Err(Error::Domain("planted tasks are regression tasks".into()));
        }
        let masked: Vec<(usize, usize, bool)> = self
            .network
            .body_shapes()
            .into_iter()
            .zip(&self.network.lora_mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s)
            .collect();
        if masked.len() != self.true_ranks.len() {
            return Err(Error::Domain(format!(
                "{} planted ranks for {} LoRA layers",
                self.true_ranks.len(),
                masked.len()
            )));
        }
        for (&(m, n, _), &r) in masked.iter().zip(&self.true_ranks) {
            if r == 0 || r > m.min(n) || r > self.network.k_init {
                return Err(Error::Domain(format!(
                    "planted rank {r} infeasible for a {m}x{n} layer with budget {}",
                    self.network.k_init
                )));
            }
        }
        if self.n_pretrain == 0 || self.n_downstream < 2 || self.n_test == 0 {
            return Err(Error::Domain("planted task sizes must be positive".into()));
        }
        if !(self.perturbation_scale >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Domain("scale and noise must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlantedTask {
    pub pretrain_set: Dataset,
    pub downstream_train: Dataset,
    pub downstream_test: Dataset,
    /// Pretrained network: the frozen starting point of every finetune.
    pub pretrained: Network,
    /// Pretrained network plus the planted shifts.
    pub teacher: Network,
    /// Planted shift per LoRA-masked layer, in order.
    pub perturbations: Vec<Tensor>,
}

fn inputs(rng: &mut crate::numerics::Rng, n: usize, width: usize) -> Tensor {
    Tensor::randn(n, width, 1.0, rng)
}

fn labelled(net: &Network, x: Tensor, noise: f64, rng: &mut crate::numerics::Rng, tag: &str) -> Result<Dataset> {
    let outputs = net.spec().task.output_dim();
    let probe = Dataset::new(x.clone(), Labels::Targets(Tensor::zeros(x.rows(), outputs)), tag)?;
    let (_, mut y) = net.predict(&probe)?;
    if noise > 0.0 {
        y = y.add(&Tensor::randn(y.rows(), y.cols(), noise, rng))?;
    }
    Dataset::new(x, Labels::Targets(y), tag)
}

/// Builds the task deterministically from `spec.seed`.
pub fn make_planted_task(spec: &PlantedTaskSpec) -> Result<PlantedTask> {
    spec.validate()?;
    let net_spec = &spec.network;
    let width = net_spec.input_width();
    let tag = format!("planted:seed={}:ranks={:?}", spec.seed, spec.true_ranks);

    let base_teacher = Network::init(net_spec, spec.seed ^ 0xba5e)?;
    let mut data_rng = seeded_rng(spec.seed, 0xda7a);
    let x_pre = inputs(&mut data_rng, spec.n_pretrain, width);
    let pretrain_set = labelled(&base_teacher, x_pre, 0.0, &mut data_rng, &tag)?;
    let pretrained = pretrain(net_spec, &pretrain_set, spec.pretrain_steps, spec.pretrain_lr, spec.seed)?;

    let mut teacher = pretrained.clone();
    let mut perturbations = Vec::new();
    let mut shift_rng = seeded_rng(spec.seed, 0x5417);
    let masked = (0..net_spec.lora_mask.len()).filter(|&i| net_spec.lora_mask[i]);
    for (layer, &r) in masked.zip(&spec.true_ranks) {
        let w = pretrained.param(ParamId::BodyWeight(layer)).expect("body layer").clone();
        let (m, n) = w.shape();
        let a = Tensor::randn(m, r, 1.0, &mut shift_rng);
        let b = Tensor::randn(r, n, 1.0, &mut shift_rng);
        let p = a.matmul(&b)?;
        let target = spec.perturbation_scale * RELATIVE_NORM * w.frobenius_norm();
        let p = p.scale(target / p.frobenius_norm());
        *teacher.param_mut(ParamId::BodyWeight(layer)).expect("plain layer") = w.add(&p)?;
        perturbations.push(p);
    }

    let x_train = inputs(&mut data_rng, spec.n_downstream, width);
    let x_test = inputs(&mut data_rng, spec.n_test, width);
    let downstream_train = labelled(&teacher, x_train, spec.noise, &mut data_rng, &tag)?;
    let downstream_test = labelled(&teacher, x_test, spec.noise, &mut data_rng, &tag)?;
    Ok(PlantedTask {
        pretrain_set,
        downstream_train,
        downstream_test,
        pretrained,
        teacher,
        perturbations,
    })
}
