//! Desk-scale networks whose linear layers can carry low-rank updates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Dataset, Labels};
use crate::lora::{init_fixed_rank, init_lora, ConstraintMode, LoraLinear, LoraVars};
use crate::numerics::{seeded_rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Mlp,
    TinyAttention,
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkKind::Mlp => "mlp",
            NetworkKind::TinyAttention => "tiny_attention",
        })
    }
}

impl FromStr for NetworkKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(NetworkKind::Mlp),
            "tiny_attention" => Ok(NetworkKind::TinyAttention),
            other => Err(Error::Domain(format!("unknown network kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification { num_classes: usize },
    Regression { outputs: usize },
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { num_classes } => num_classes,
            Task::Regression { outputs } => outputs,
        }
    }
}

/// Architecture description.
///
/// For `Mlp`, `layer_dims` is `[input, hidden.., output]`; every linear but
/// the last is a body layer followed by relu, the last is the head.
/// For `TinyAttention`, `layer_dims` is `[d_model, d_ffn, output]` and inputs
/// are flattened sequences of `seq_len` tokens. Body layers are, in order,
/// query, key, value, attention output, ffn-in and ffn-out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub layer_dims: Vec<usize>,
    pub seq_len: usize,
    /// One flag per body linear layer.
    pub lora_mask: Vec<bool>,
    pub k_init: usize,
    pub init_std: f64,
    pub task: Task,
}

impl NetworkSpec {
    /// An MLP with LoRA on every hidden linear layer.
    pub fn mlp(layer_dims: Vec<usize>, task: Task) -> Self {
        let body = layer_dims.len().saturating_sub(2);
        NetworkSpec {
            kind: NetworkKind::Mlp,
            layer_dims,
            seq_len: 1,
            lora_mask: vec![true; body],
            k_init: crate::lora::DEFAULT_RANK_BUDGET,
            init_std: crate::lora::DEFAULT_INIT_STD,
            task,
        }
    }

    /// Single-head attention block with LoRA on the query and value projections.
    pub fn tiny_attention(d_model: usize, d_ffn: usize, seq_len: usize, task: Task) -> Self {
        NetworkSpec {
            kind: NetworkKind::TinyAttention,
            layer_dims: vec![d_model, d_ffn, task.output_dim()],
            seq_len,
            lora_mask: vec![true, false, true, false, false, false],
            k_init: crate::lora::DEFAULT_RANK_BUDGET,
            init_std: crate::lora::DEFAULT_INIT_STD,
            task,
        }
    }

    /// Default LoRA placement for this architecture.
    pub fn default_mask(&self) -> Vec<bool> {
        match self.kind {
            NetworkKind::Mlp => vec![true; self.layer_dims.len().saturating_sub(2)],
            NetworkKind::TinyAttention => vec![true, false, true, false, false, false],
        }
    }

    /// `(in, out, has_bias)` for each body linear layer.
    pub fn body_shapes(&self) -> Vec<(usize, usize, bool)> {
        match self.kind {
            NetworkKind::Mlp => self
                .layer_dims
                .windows(2)
                .take(self.layer_dims.len().saturating_sub(2))
                .map(|w| (w[0], w[1], true))
                .collect(),
            NetworkKind::TinyAttention => {
                let (d, f) = (self.layer_dims[0], self.layer_dims[1]);
                vec![
                    (d, d, false),
                    (d, d, false),
                    (d, d, false),
                    (d, d, false),
                    (d, f, true),
                    (f, d, true),
                ]
            }
        }
    }

    pub fn head_shape(&self) -> (usize, usize) {
        let n = self.layer_dims.len();
        match self.kind {
            NetworkKind::Mlp => (self.layer_dims[n - 2], self.layer_dims[n - 1]),
            NetworkKind::TinyAttention => (self.layer_dims[0], self.layer_dims[2]),
        }
    }

    pub fn input_width(&self) -> usize {
        match self.kind {
            NetworkKind::Mlp => self.layer_dims[0],
            NetworkKind::TinyAttention => self.layer_dims[0] * self.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = match self.kind {
            NetworkKind::Mlp => 2,
            NetworkKind::TinyAttention => 3,
        };
        if self.kind == NetworkKind::TinyAttention && self.layer_dims.len() != 3 {
            return Err(Error::Domain(
                "tiny_attention layer_dims must be [d_model, d_ffn, output]".into(),
            ));
        }
        if self.layer_dims.len() < need || self.layer_dims.contains(&0) {
            return Err(Error::Domain(format!(
                "invalid layer_dims {:?}",
                self.layer_dims
            )));
        }
        if self.kind == NetworkKind::TinyAttention && self.seq_len == 0 {
            return Err(Error::Domain("seq_len must be at least 1".into()));
        }
        let body = self.body_shapes().len();
        if self.lora_mask.len() != body {
            return Err(Error::Domain(format!(
                "lora_mask has {} entries but the network has {body} body layers",
                self.lora_mask.len()
            )));
        }
        if self.lora_mask.iter().any(|&m| m) && self.k_init == 0 {
            return Err(Error::Domain("k_init must be at least 1".into()));
        }
        if *self.layer_dims.last().unwrap() != self.task.output_dim() {
            return Err(Error::Domain(format!(
                "output width {} does not match the task ({})",
                self.layer_dims.last().unwrap(),
                self.task.output_dim()
            )));
        }
        Ok(())
    }
}

/// Weight of a body layer: either trained directly or frozen with a low-rank update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerWeight {
    Plain(Tensor),
    Lora(LoraLinear),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyLayer {
    pub weight: LayerWeight,
    pub bias: Option<Tensor>,
}

/// Output projection `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Identifies a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    /// Weight of a plain body layer (frozen pretrained weight of a LoRA layer).
    BodyWeight(usize),
    BodyBias(usize),
    LoraU(usize),
    LoraV(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
}

/// Which parameter groups are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub lora_factors: bool,
    pub selection: bool,
    pub head: bool,
    pub body: bool,
}

impl Trainable {
    /// Nothing trainable; every tensor is bound as a constant.
    pub const NONE: Trainable = Trainable {
        lora_factors: false,
        selection: false,
        head: false,
        body: false,
    };
    /// `U`, `V` and the head: the weights updated on training data.
    pub const WEIGHTS: Trainable = Trainable {
        lora_factors: true,
        selection: false,
        head: true,
        body: false,
    };
    /// Selection logits only.
    pub const SELECTION: Trainable = Trainable {
        lora_factors: false,
        selection: true,
        head: false,
        body: false,
    };
    /// Everything the search touches.
    pub const SEARCH: Trainable = Trainable {
        lora_factors: true,
        selection: true,
        head: true,
        body: false,
    };
    /// Every plain body weight and bias plus the head.
    pub const FULL: Trainable = Trainable {
        lora_factors: true,
        selection: false,
        head: true,
        body: true,
    };
}

/// Tape handles for every tensor of a network.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<ParamId, Var>,
    w_tilde: BTreeMap<usize, Var>,
    /// Trainable handles in deterministic order.
    trainable: Vec<ParamId>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[&id]
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.iter().map(|id| self.vars[id]).collect()
    }

    /// Replaces the handle of one parameter (used to evaluate at lookahead weights).
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars.insert(id, var);
    }
}

/// Loss node and output node of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub loss: Var,
    pub output: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Instantiated parameters of a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    body: Vec<BodyLayer>,
    head: Dense,
    /// Head as it was before any finetuning; fresh retraining restarts from it.
    pretrained_head: Dense,
    constraint: ConstraintMode,
}

impl Network {
    /// Plain network with zero biases and Gaussian weights: `N(0, 2/fan_in)`
    /// for MLP hidden layers (each feeds a ReLU), `N(0, 1/fan_in)` elsewhere.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed, 0x1a7e);
        let gain = if spec.kind == NetworkKind::Mlp { 2.0 } else { 1.0 };
        let mut dense = |m: usize, n: usize, gain: f64| Tensor::randn(m, n, (gain / m as f64).sqrt(), &mut rng);
        let body = spec
            .body_shapes()
            .into_iter()
            .map(|(m, n, bias)| BodyLayer {
                weight: LayerWeight::Plain(dense(m, n, gain)),
                bias: bias.then(|| Tensor::zeros(1, n)),
            })
            .collect();
        let (hm, hn) = spec.head_shape();
        let head = Dense {
            weight: dense(hm, hn, 1.0),
            bias: Tensor::zeros(1, hn),
        };
        Ok(Network {
            spec: spec.clone(),
            body,
            pretrained_head: head.clone(),
            head,
            constraint: ConstraintMode::Softmax,
        })
    }

    /// Assembles a network from its parts; shapes are validated against `spec`.
    pub fn from_parts(
        spec: NetworkSpec,
        body: Vec<BodyLayer>,
        head: Dense,
        pretrained_head: Dense,
        constraint: ConstraintMode,
    ) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.body_shapes();
        if shapes.len() != body.len() {
            return Err(Error::Domain("body layer count differs from spec".into()));
        }
        for ((m, n, has_bias), layer) in shapes.into_iter().zip(&body) {
            let got = match &layer.weight {
                LayerWeight::Plain(w) => w.shape(),
                LayerWeight::Lora(l) => l.w_tilde().shape(),
            };
            if got != (m, n) || layer.bias.is_some() != has_bias {
                return Err(Error::Dimension {
                    op: "network body",
                    left: (m, n),
                    right: got,
                });
            }
        }
        let (hm, hn) = spec.head_shape();
        for h in [&head, &pretrained_head] {
            if h.weight.shape() != (hm, hn) || h.bias.shape() != (1, hn) {
                return Err(Error::Dimension {
                    op: "network head",
                    left: (hm, hn),
                    right: h.weight.shape(),
                });
            }
        }
        Ok(Network {
            spec,
            body,
            head,
            pretrained_head,
            constraint,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn body(&self) -> &[BodyLayer] {
        &self.body
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn pretrained_head(&self) -> &Dense {
        &self.pretrained_head
    }

    pub fn constraint(&self) -> ConstraintMode {
        self.constraint
    }

    pub fn set_constraint(&mut self, mode: ConstraintMode) {
        self.constraint = mode;
    }

    /// Indices of body layers that carry a low-rank update.
    pub fn lora_layers(&self) -> Vec<usize> {
        self.body
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.weight, LayerWeight::Lora(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn lora(&self, layer: usize) -> Option<&LoraLinear> {
        match &self.body.get(layer)?.weight {
            LayerWeight::Lora(l) => Some(l),
            LayerWeight::Plain(_) => None,
        }
    }

    pub(crate) fn lora_mut(&mut self, layer: usize) -> Option<&mut LoraLinear> {
        match &mut self.body.get_mut(layer)?.weight {
            LayerWeight::Lora(l) => Some(l),
            LayerWeight::Plain(_) => None,
        }
    }

    /// Replaces the low-rank update of a LoRA layer; `w_tilde` must be unchanged.
    pub fn set_lora(&mut self, layer: usize, lora: LoraLinear) -> Result<()> {
        match self.body.get_mut(layer).map(|l| &mut l.weight) {
            Some(LayerWeight::Lora(existing)) if existing.w_tilde() == lora.w_tilde() => {
                *existing = lora;
                Ok(())
            }
            _ => Err(Error::Domain(format!(
                "layer {layer} is not a LoRA layer over the same frozen weight"
            ))),
        }
    }

    /// Swaps the weight of one body layer; the frozen weight must be preserved.
    pub(crate) fn replace_layer_weight(&mut self, layer: usize, weight: LayerWeight) -> Result<()> {
        let frozen = |w: &LayerWeight| match w {
            LayerWeight::Plain(t) => t.clone(),
            LayerWeight::Lora(l) => l.w_tilde().clone(),
        };
        let slot = self
            .body
            .get_mut(layer)
            .ok_or_else(|| Error::Domain(format!("no body layer {layer}")))?;
        if frozen(&slot.weight) != frozen(&weight) {
            return Err(Error::Domain(format!("layer {layer}: frozen weight would change")));
        }
        slot.weight = weight;
        Ok(())
    }

    /// Restores the head to its pretrained value.
    pub fn reset_head(&mut self) {
        self.head = self.pretrained_head.clone();
    }

    /// Selection logits of every LoRA layer that still has them, by layer index.
    pub fn betas(&self) -> BTreeMap<usize, Tensor> {
        self.lora_layers()
            .into_iter()
            .filter_map(|i| self.lora(i)?.beta().map(|b| (i, b.clone())))
            .collect()
    }

    /// Wraps every masked plain layer in a fresh LoRA update with `k` components.
    ///
    /// The current weights become the frozen `w_tilde` and the current head
    /// becomes the pretrained head.
    pub fn attach_lora(&self, seed: u64) -> Result<Network> {
        let mut net = self.clone();
        net.pretrained_head = net.head.clone();
        for (i, layer) in net.body.iter_mut().enumerate() {
            if !self.spec.lora_mask[i] {
                continue;
            }
            if let LayerWeight::Plain(w) = &layer.weight {
                let lora = init_lora(w.clone(), self.spec.k_init, self.spec.init_std, layer_seed(seed, i))?;
                layer.weight = LayerWeight::Lora(lora);
            }
        }
        Ok(net)
    }

    /// Like [`Network::attach_lora`] but with fixed per-layer ranks and no selection.
    ///
    /// `ranks` is indexed like [`Network::lora_layers`] of the result, i.e. in
    /// order of masked layers.
    pub fn attach_fixed_rank(&self, ranks: &[usize], seed: u64) -> Result<Network> {
        let masked: Vec<usize> = (0..self.body.len()).filter(|&i| self.spec.lora_mask[i]).collect();
        if masked.len() != ranks.len() {
            return Err(Error::Domain(format!(
                "{} ranks given for {} LoRA layers",
                ranks.len(),
                masked.len()
            )));
        }
        let mut net = self.clone();
        net.pretrained_head = net.head.clone();
        for (&i, &k) in masked.iter().zip(ranks) {
            let w = match &net.body[i].weight {
                LayerWeight::Plain(w) => w.clone(),
                LayerWeight::Lora(l) => l.w_tilde().clone(),
            };
            net.body[i].weight =
                LayerWeight::Lora(init_fixed_rank(w, k, self.spec.init_std, layer_seed(seed, i))?);
        }
        Ok(net)
    }

    /// Folds every low-rank update into a plain weight.
    pub fn merged(&self) -> Result<Network> {
        let mut net = self.clone();
        for layer in &mut net.body {
            if let LayerWeight::Lora(l) = &layer.weight {
                layer.weight = LayerWeight::Plain(l.effective_weight(self.constraint)?);
            }
        }
        Ok(net)
    }

    /// Parameter ids for the selected groups, in a fixed order.
    pub fn param_ids(&self, which: Trainable) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, layer) in self.body.iter().enumerate() {
            match &layer.weight {
                LayerWeight::Plain(_) => {
                    if which.body {
                        ids.push(ParamId::BodyWeight(i));
                    }
                }
                LayerWeight::Lora(l) => {
                    if which.lora_factors {
                        ids.push(ParamId::LoraU(i));
                        ids.push(ParamId::LoraV(i));
                    }
                    if which.selection && l.has_selection() {
                        ids.push(ParamId::Beta(i));
                    }
                }
            }
            if which.body && layer.bias.is_some() {
                ids.push(ParamId::BodyBias(i));
            }
        }
        if which.head {
            ids.push(ParamId::HeadWeight);
            ids.push(ParamId::HeadBias);
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::BodyWeight(i) => match &self.body.get(i)?.weight {
                LayerWeight::Plain(w) => Some(w),
                LayerWeight::Lora(l) => Some(l.w_tilde()),
            },
            ParamId::BodyBias(i) => self.body.get(i)?.bias.as_ref(),
            ParamId::LoraU(i) => Some(self.lora(i)?.u()),
            ParamId::LoraV(i) => Some(self.lora(i)?.v()),
            ParamId::Beta(i) => self.lora(i)?.beta(),
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
        }
    }

    /// Mutable access to a trainable tensor. Frozen pretrained weights of
    /// LoRA layers are not reachable through this.
    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::BodyWeight(i) => match &mut self.body.get_mut(i)?.weight {
                LayerWeight::Plain(w) => Some(w),
                LayerWeight::Lora(_) => None,
            },
            ParamId::BodyBias(i) => self.body.get_mut(i)?.bias.as_mut(),
            ParamId::LoraU(i) => Some(self.lora_mut(i)?.u_mut()),
            ParamId::LoraV(i) => Some(self.lora_mut(i)?.v_mut()),
            ParamId::Beta(i) => self.lora_mut(i)?.beta_mut(),
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
        }
    }

    /// Trainable scalars for the given groups.
    pub fn parameter_count(&self, which: Trainable) -> usize {
        self.param_ids(which)
            .into_iter()
            .filter_map(|id| self.param(id))
            .map(Tensor::len)
            .sum()
    }

    /// Scalars trained during the search: `U`, `V`, logits and head.
    pub fn trainable_parameter_count(&self) -> usize {
        self.parameter_count(Trainable::SEARCH)
    }

    /// Every scalar in the network, counting merged weights once.
    pub fn total_parameter_count(&self) -> usize {
        let body: usize = self
            .spec
            .body_shapes()
            .iter()
            .map(|&(m, n, b)| m * n + if b { n } else { 0 })
            .sum();
        let (hm, hn) = self.spec.head_shape();
        body + hm * hn + hn
    }

    /// Records every tensor on `tape`: leaves for `which`, constants otherwise.
    pub fn bind(&self, tape: &mut Tape, which: Trainable) -> ParamVars {
        let trainable = self.param_ids(which);
        let mut vars = BTreeMap::new();
        let mut w_tilde = BTreeMap::new();
        let mut put = |tape: &mut Tape, id: ParamId, t: &Tensor| {
            let v = if trainable.contains(&id) {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(id, v);
        };
        for (i, layer) in self.body.iter().enumerate() {
            match &layer.weight {
                LayerWeight::Plain(w) => put(tape, ParamId::BodyWeight(i), w),
                LayerWeight::Lora(l) => {
                    w_tilde.insert(i, tape.constant(l.w_tilde().clone()));
                    put(tape, ParamId::LoraU(i), l.u());
                    put(tape, ParamId::LoraV(i), l.v());
                    if let Some(b) = l.beta() {
                        put(tape, ParamId::Beta(i), b);
                    }
                }
            }
            if let Some(b) = &layer.bias {
                put(tape, ParamId::BodyBias(i), b);
            }
        }
        put(tape, ParamId::HeadWeight, &self.head.weight);
        put(tape, ParamId::HeadBias, &self.head.bias);
        ParamVars {
            vars,
            w_tilde,
            trainable,
        }
    }

    fn layer_weight(&self, tape: &mut Tape, vars: &ParamVars, i: usize) -> Result<Var> {
        match &self.body[i].weight {
            LayerWeight::Plain(_) => Ok(vars.get(ParamId::BodyWeight(i))),
            LayerWeight::Lora(l) => {
                let lv = LoraVars {
                    w_tilde: vars.w_tilde[&i],
                    u: vars.get(ParamId::LoraU(i)),
                    v: vars.get(ParamId::LoraV(i)),
                    beta: l.has_selection().then(|| vars.get(ParamId::Beta(i))),
                };
                lv.effective_weight(tape, self.constraint)
            }
        }
    }

    fn linear(&self, tape: &mut Tape, vars: &ParamVars, weights: &[Var], i: usize, x: Var) -> Result<Var> {
        let z = tape.matmul(x, weights[i])?;
        match self.body[i].bias {
            Some(_) => tape.add_row_bias(z, vars.get(ParamId::BodyBias(i))),
            None => Ok(z),
        }
    }

    /// Pre-head representation of a batch of inputs.
    fn features(&self, tape: &mut Tape, vars: &ParamVars, x: &Tensor) -> Result<Var> {
        if x.cols() != self.spec.input_width() {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape(),
                right: (x.rows(), self.spec.input_width()),
            });
        }
        let weights = (0..self.body.len())
            .map(|i| self.layer_weight(tape, vars, i))
            .collect::<Result<Vec<_>>>()?;
        match self.spec.kind {
            NetworkKind::Mlp => {
                let mut h = tape.constant(x.clone());
                for i in 0..self.body.len() {
                    let z = self.linear(tape, vars, &weights, i, h)?;
                    h = tape.relu(z);
                }
                Ok(h)
            }
            NetworkKind::TinyAttention => {
                let pooled = (0..x.rows())
                    .map(|s| {
                        let seq = Tensor::new(self.spec.seq_len, self.spec.layer_dims[0], x.row(s).to_vec())?;
                        let xs = tape.constant(seq);
                        let (out, _) = self.attention_block(tape, vars, &weights, xs)?;
                        tape.mean_pool_rows(out)
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.stack_rows(&pooled)
            }
        }
    }

    /// One sequence through the attention block; returns the block output and
    /// the attention weight node.
    fn attention_block(&self, tape: &mut Tape, vars: &ParamVars, weights: &[Var], xs: Var) -> Result<(Var, Var)> {
        let d = self.spec.layer_dims[0] as f64;
        let q = self.linear(tape, vars, weights, 0, xs)?;
        let k = self.linear(tape, vars, weights, 1, xs)?;
        let v = self.linear(tape, vars, weights, 2, xs)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / d.sqrt());
        let attn = tape.row_softmax(scores);
        let mixed = tape.matmul(attn, v)?;
        let h = self.linear(tape, vars, weights, 3, mixed)?;
        let r1 = tape.add(xs, h)?;
        let f = self.linear(tape, vars, weights, 4, r1)?;
        let f = tape.relu(f);
        let f = self.linear(tape, vars, weights, 5, f)?;
        Ok((tape.add(r1, f)?, attn))
    }

    /// Records the loss of `batch` under the handles in `vars`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &ParamVars, batch: &Dataset) -> Result<Forward> {
        let h = self.features(tape, vars, &batch.features)?;
        let z = tape.matmul(h, vars.get(ParamId::HeadWeight))?;
        let output = tape.add_row_bias(z, vars.get(ParamId::HeadBias))?;
        let loss = match (&batch.labels, self.spec.task) {
            (Labels::Classes(c), Task::Classification { .. }) => tape.cross_entropy(output, c)?,
            (Labels::Targets(t), Task::Regression { .. }) => {
                let target = tape.constant(t.clone());
                tape.mse(output, target)?
            }
            _ => return Err(Error::Domain("label kind does not match the network task".into())),
        };
        Ok(Forward { loss, output })
    }

    /// Loss and outputs without recording backward structure.
    pub fn predict(&self, batch: &Dataset) -> Result<(f64, Tensor)> {
        let mut tape = Tape::untraced();
        let vars = self.bind(&mut tape, Trainable::SEARCH);
        let fwd = self.forward_on(&mut tape, &vars, batch)?;
        Ok((tape.value(fwd.loss).item(), tape.value(fwd.output).clone()))
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        let (loss, out) = self.predict(data)?;
        let accuracy = match &data.labels {
            Labels::Classes(c) => {
                let hits = c
                    .iter()
                    .enumerate()
                    .filter(|&(r, &label)| argmax(out.row(r)) == label)
                    .count();
                Some(hits as f64 / c.len() as f64)
            }
            Labels::Targets(_) => None,
        };
        Ok(Metrics { loss, accuracy })
    }

    /// Loss of `batch` and its gradient for every parameter in `which`.
    pub fn loss_and_grads(&self, batch: &Dataset, which: Trainable) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, which);
        let fwd = self.forward_on(&mut tape, &vars, batch)?;
        let loss = tape.value(fwd.loss).item();
        let wanted = vars.trainable_vars();
        let grads = tape.backward(fwd.loss, &wanted)?;
        let out = vars
            .trainable()
            .iter()
            .zip(&wanted)
            .map(|(&id, v)| (id, grads.get(*v).expect("requested").clone()))
            .collect();
        Ok((loss, out))
    }

    /// Attention weights per sequence (`seq_len x seq_len`), for inspection.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if self.spec.kind != NetworkKind::TinyAttention {
            return Err(Error::Domain("attention maps need a tiny_attention network".into()));
        }
        let mut tape = Tape::untraced();
        let vars = self.bind(&mut tape, Trainable::SEARCH);
        let weights = (0..self.body.len())
            .map(|i| self.layer_weight(&mut tape, &vars, i))
            .collect::<Result<Vec<_>>>()?;
        (0..x.rows())
            .map(|s| {
                let seq = Tensor::new(self.spec.seq_len, self.spec.layer_dims[0], x.row(s).to_vec())?;
                let xs = tape.constant(seq);
                let (_, attn) = self.attention_block(&mut tape, &vars, &weights, xs)?;
                Ok(tape.value(attn).clone())
            })
            .collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(layer as u64 + 1)
}

/// Trains every weight of a freshly initialized plain network by full-batch
/// gradient descent. The result serves as the frozen pretrained model.
pub fn pretrain(spec: &NetworkSpec, data: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<Network> {
    let mut net = Network::init(spec, seed)?;
    for step in 0..steps {
        let (loss, grads) = net.loss_and_grads(data, Trainable::FULL)?;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        for (id, g) in grads {
            net.param_mut(id).expect("trainable").axpy(-lr, &g)?;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn regression_batch(n: usize, width: usize, outputs: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed, 7);
        Dataset::new(
            Tensor::randn(n, width, 1.0, &mut rng),
            Labels::Targets(Tensor::randn(n, outputs, 1.0, &mut rng)),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn parameter_counts() {
        let spec = NetworkSpec::mlp(vec![8, 16, 16, 4], Task::Classification { num_classes: 4 });
        let net = Network::init(&spec, 0).unwrap().attach_lora(0).unwrap();
        // (8+16)*8+8 + (16+16)*8+8 + 16*4+4
        assert_eq!(net.trainable_parameter_count(), 200 + 264 + 68);

        let mut half = spec.clone();
        half.k_init = 4;
        let net4 = Network::init(&half, 0).unwrap().attach_lora(0).unwrap();
        let factors = |n: &Network| n.parameter_count(Trainable { selection: false, head: false, ..Trainable::SEARCH });
        assert_eq!(factors(&net) , 2 * factors(&net4));
    }

    #[test]
    fn fresh_lora_matches_pretrained_outputs() {
        let spec = NetworkSpec::mlp(vec![5, 7, 6, 3], Task::Regression { outputs: 3 });
        let base = Network::init(&spec, 4).unwrap();
        let lora = base.attach_lora(9).unwrap();
        let batch = regression_batch(11, 5, 3, 1);
        assert_eq!(base.predict(&batch).unwrap().1, lora.predict(&batch).unwrap().1);
    }

    #[test]
    fn zero_input_zero_head() {
        let spec = NetworkSpec::mlp(vec![4, 6, 3], Task::Classification { num_classes: 3 });
        let mut net = Network::init(&spec, 1).unwrap();
        net.head.weight = Tensor::zeros(6, 3);
        let batch = Dataset::new(Tensor::zeros(5, 4), Labels::Classes(vec![0, 1, 2, 0, 1]), "z").unwrap();
        let m = net.evaluate(&batch).unwrap();
        assert!((m.loss - 3f64.ln()).abs() < 1e-15);

        let spec = NetworkSpec::mlp(vec![4, 6, 2], Task::Regression { outputs: 2 });
        let mut net = Network::init(&spec, 1).unwrap();
        net.head.weight = Tensor::zeros(6, 2);
        let targets = Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.0]]);
        let batch = Dataset::new(Tensor::zeros(2, 4), Labels::Targets(targets), "z").unwrap();
        assert!((net.evaluate(&batch).unwrap().loss - 14.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let spec = NetworkSpec::mlp(vec![4, 6, 2], Task::Regression { outputs: 2 });
        let net = Network::init(&spec, 1).unwrap();
        let batch = regression_batch(3, 5, 2, 0);
        assert!(matches!(net.evaluate(&batch), Err(Error::Dimension { .. })));
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetworkSpec::mlp(vec![4, 6, 2], Task::Regression { outputs: 2 });
        spec.lora_mask = vec![true, true];
        assert!(spec.validate().is_err());
        let mut spec = NetworkSpec::mlp(vec![4, 6, 2], Task::Regression { outputs: 2 });
        spec.k_init = 0;
        assert!(spec.validate().is_err());
        let spec = NetworkSpec::mlp(vec![4, 6, 3], Task::Regression { outputs: 2 });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_token_attention_reduces_to_mlp_path() {
        let spec = NetworkSpec::tiny_attention(4, 6, 1, Task::Regression { outputs: 2 });
        let mut net = Network::init(&spec, 3).unwrap().attach_lora(5).unwrap();
        // Make the low-rank updates nonzero so the LoRA path is exercised too.
        let mut rng = seeded_rng(8, 8);
        for i in net.lora_layers() {
            let v = net.param_mut(ParamId::LoraV(i)).unwrap();
            *v = Tensor::randn(v.rows(), v.cols(), 0.3, &mut rng);
        }
        let batch = regression_batch(5, 4, 2, 2);
        let (_, out) = net.predict(&batch).unwrap();

        // Hand reduction: attention over one token is the identity mix.
        let w = |i: usize| match &net.body[i].weight {
            LayerWeight::Plain(w) => w.clone(),
            LayerWeight::Lora(l) => l.effective_weight(ConstraintMode::Softmax).unwrap(),
        };
        for r in 0..5 {
            let x = Tensor::row_vector(batch.features.row(r));
            let h = x.matmul(&w(2)).unwrap().matmul(&w(3)).unwrap();
            let r1 = x.add(&h).unwrap();
            let f = r1.matmul(&w(4)).unwrap().add(net.body[4].bias.as_ref().unwrap()).unwrap().relu();
            let f = f.matmul(&w(5)).unwrap().add(net.body[5].bias.as_ref().unwrap()).unwrap();
            let r2 = r1.add(&f).unwrap();
            let y = r2.matmul(&net.head.weight).unwrap().add(&net.head.bias).unwrap();
            for c in 0..2 {
                assert!((y.get(0, c) - out.get(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let spec = NetworkSpec::tiny_attention(4, 5, 3, Task::Classification { num_classes: 2 });
        let net = Network::init(&spec, 2).unwrap().attach_lora(2).unwrap();
        let mut rng = seeded_rng(1, 1);
        let x = Tensor::randn(4, 12, 2.0, &mut rng);
        for a in net.attention_maps(&x).unwrap() {
            for r in 0..3 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let spec = NetworkSpec::mlp(vec![3, 5, 4, 2], Task::Classification { num_classes: 2 });
        let mut net = Network::init(&spec, 6).unwrap().attach_lora(6).unwrap();
        let mut rng = seeded_rng(2, 2);
        for id in net.param_ids(Trainable::SEARCH) {
            let t = net.param_mut(id).unwrap();
            *t = Tensor::randn(t.rows(), t.cols(), 0.5, &mut rng);
        }
        let batch = Dataset::new(Tensor::randn(6, 3, 1.0, &mut rng), Labels::Classes(vec![0, 1, 1, 0, 1, 0]), "t").unwrap();
        let ids = net.param_ids(Trainable::SEARCH);
        let (_, analytic) = net.loss_and_grads(&batch, Trainable::SEARCH).unwrap();
        let params: Vec<Tensor> = ids.iter().map(|&id| net.param(id).unwrap().clone()).collect();
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = net.clone();
                for (&id, t) in ids.iter().zip(p) {
                    *probe.param_mut(id).unwrap() = t.clone();
                }
                Ok(probe.evaluate(&batch)?.loss)
            },
            &params,
            1e-6,
        )
        .unwrap();
        let analytic: Vec<Tensor> = analytic.into_iter().map(|(_, g)| g).collect();
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn pretrain_zero_steps_is_init_and_deterministic() {
        let spec = NetworkSpec::mlp(vec![3, 4, 1], Task::Regression { outputs: 1 });
        let data = regression_batch(8, 3, 1, 3);
        assert_eq!(pretrain(&spec, &data, 0, 0.1, 5).unwrap(), Network::init(&spec, 5).unwrap());
        assert_eq!(
            pretrain(&spec, &data, 5, 0.1, 5).unwrap(),
            pretrain(&spec, &data, 5, 0.1, 5).unwrap()
        );
    }

    #[test]
    fn pretrain_separates_linear_classes() {
        let spec = NetworkSpec::mlp(vec![2, 8, 2], Task::Classification { num_classes: 2 });
        let mut rng = seeded_rng(11, 0);
        let x = Tensor::randn(200, 2, 1.0, &mut rng);
        // Labels from a fixed hyperplane with a margin.
        let (mut rows, mut labels) = (Vec::new(), Vec::new());
        for r in 0..200 {
            let s = x.get(r, 0) - 0.5 * x.get(r, 1);
            if s.abs() > 0.1 {
                rows.push(r);
                labels.push(usize::from(s > 0.0));
            }
        }
        let data = Dataset::new(x.select_rows(&rows), Labels::Classes(labels), "sep").unwrap();
        let net = pretrain(&spec, &data, 400, 0.5, 0).unwrap();
        assert!(net.evaluate(&data).unwrap().accuracy.unwrap() >= 0.95);
    }
}
