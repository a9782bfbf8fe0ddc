//! Low-rank update matrices written as a weighted sum of rank-1 terms.
//!
//! A layer's weight is `W = W~ + U diag(alpha) V`, where column `j` of `U`
//! and row `j` of `V` form the `j`-th rank-1 component and `alpha_j` is its
//! selection weight. `alpha` is produced from unconstrained logits `beta`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Tape, Tensor, Var};

/// Default number of rank-1 components per layer before selection.
pub const DEFAULT_RANK_BUDGET: usize = 8;

/// Default standard deviation for the Gaussian init of `U`.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// How selection logits map to selection weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// `alpha = softmax(beta)`, so the weights lie on the simplex.
    #[default]
    Softmax,
    /// `alpha_j = sigmoid(beta_j)`, each in (0, 1) with no sum constraint.
    Sigmoid,
    /// `alpha = beta`, unconstrained.
    None,
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintMode::Softmax => "softmax",
            ConstraintMode::Sigmoid => "sigmoid",
            ConstraintMode::None => "none",
        })
    }
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ConstraintMode::Softmax),
            "sigmoid" => Ok(ConstraintMode::Sigmoid),
            "none" => Ok(ConstraintMode::None),
            other => Err(Error::Domain(format!(
                "unknown constraint mode `{other}` (expected softmax | sigmoid | none)"
            ))),
        }
    }
}

/// Selection weights of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlphaVector(Vec<f64>);

impl AlphaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("selection vector must be nonempty".into()));
        }
        Ok(AlphaVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Maps logits to selection weights under `mode`.
pub fn alphas(beta: &[f64], mode: ConstraintMode) -> Result<AlphaVector> {
    if beta.is_empty() {
        return Err(Error::Domain("selection logits must be nonempty".into()));
    }
    let row = Tensor::row_vector(beta);
    let out = match mode {
        ConstraintMode::Softmax => row.row_softmax(),
        ConstraintMode::Sigmoid => row.sigmoid(),
        ConstraintMode::None => row,
    };
    AlphaVector::new(out.into_data())
}

/// Records the logits-to-weights map on a tape.
pub fn alphas_on(tape: &mut Tape, beta: Var, mode: ConstraintMode) -> Var {
    match mode {
        ConstraintMode::Softmax => tape.row_softmax(beta),
        ConstraintMode::Sigmoid => tape.sigmoid(beta),
        ConstraintMode::None => beta,
    }
}

/// `U diag(alpha) V`, the weighted sum of rank-1 components.
pub fn delta(u: &Tensor, v: &Tensor, alpha: &AlphaVector) -> Result<Tensor> {
    if u.cols() != alpha.len() || v.rows() != alpha.len() {
        return Err(Error::Dimension {
            op: "delta",
            left: u.shape(),
            right: (alpha.len(), v.rows()),
        });
    }
    u.matmul(&Tensor::row_vector(alpha.values()).diag()?)?.matmul(v)
}

/// `U diag(alpha) V` on a tape; `alpha` is a `1 x k` node.
pub fn delta_on(tape: &mut Tape, u: Var, v: Var, alpha: Var) -> Result<Var> {
    let d = tape.diag(alpha)?;
    let scaled = tape.matmul(u, d)?;
    tape.matmul(scaled, v)
}

/// A frozen weight plus a trainable low-rank update.
///
/// With `beta` present the update is `U diag(alpha(beta)) V`; once ranks are
/// fixed (`beta` absent) it is the plain product `U V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLinear {
    w_tilde: Tensor,
    u: Tensor,
    v: Tensor,
    beta: Option<Tensor>,
}

impl LoraLinear {
    pub fn from_parts(w_tilde: Tensor, u: Tensor, v: Tensor, beta: Option<Tensor>) -> Result<Self> {
        let (m, n) = w_tilde.shape();
        let k = u.cols();
        if k == 0 {
            return Err(Error::Domain("rank budget must be at least 1".into()));
        }
        if u.rows() != m || v.shape() != (k, n) {
            return Err(Error::Dimension {
                op: "lora_linear",
                left: u.shape(),
                right: v.shape(),
            });
        }
        if let Some(b) = &beta {
            if b.shape() != (1, k) {
                return Err(Error::Dimension {
                    op: "lora_linear beta",
                    left: (1, k),
                    right: b.shape(),
                });
            }
        }
        Ok(LoraLinear { w_tilde, u, v, beta })
    }

    pub fn w_tilde(&self) -> &Tensor {
        &self.w_tilde
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn beta(&self) -> Option<&Tensor> {
        self.beta.as_ref()
    }

    pub(crate) fn u_mut(&mut self) -> &mut Tensor {
        &mut self.u
    }

    pub(crate) fn v_mut(&mut self) -> &mut Tensor {
        &mut self.v
    }

    pub(crate) fn beta_mut(&mut self) -> Option<&mut Tensor> {
        self.beta.as_mut()
    }

    /// Number of rank-1 components.
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.w_tilde.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_tilde.cols()
    }

    pub fn has_selection(&self) -> bool {
        self.beta.is_some()
    }

    /// Trainable scalars: `(m + n) k`, plus `k` logits while selection is live.
    pub fn trainable_count(&self) -> usize {
        let k = self.rank();
        (self.in_dim() + self.out_dim()) * k + if self.has_selection() { k } else { 0 }
    }

    /// Current selection weights; all ones when ranks are fixed.
    pub fn alphas(&self, mode: ConstraintMode) -> AlphaVector {
        match &self.beta {
            Some(b) => alphas(b.data(), mode).expect("k >= 1"),
            None => AlphaVector(vec![1.0; self.rank()]),
        }
    }

    pub fn delta(&self, mode: ConstraintMode) -> Result<Tensor> {
        let mut tape = Tape::untraced();
        let vars = self.bind_constants(&mut tape);
        let d = vars.delta(&mut tape, mode)?;
        Ok(tape.value(d).clone())
    }

    /// `W~ + delta`, computed through the same path as the traced forward.
    pub fn effective_weight(&self, mode: ConstraintMode) -> Result<Tensor> {
        let mut tape = Tape::untraced();
        let vars = self.bind_constants(&mut tape);
        let w = vars.effective_weight(&mut tape, mode)?;
        Ok(tape.value(w).clone())
    }

    fn bind_constants(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            w_tilde: tape.constant(self.w_tilde.clone()),
            u: tape.constant(self.u.clone()),
            v: tape.constant(self.v.clone()),
            beta: self.beta.as_ref().map(|b| tape.constant(b.clone())),
        }
    }
}

/// Tape handles for one LoRA layer's tensors.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub w_tilde: Var,
    pub u: Var,
    pub v: Var,
    pub beta: Option<Var>,
}

impl LoraVars {
    pub fn delta(&self, tape: &mut Tape, mode: ConstraintMode) -> Result<Var> {
        match self.beta {
            Some(beta) => {
                let alpha = alphas_on(tape, beta, mode);
                delta_on(tape, self.u, self.v, alpha)
            }
            None => tape.matmul(self.u, self.v),
        }
    }

    pub fn effective_weight(&self, tape: &mut Tape, mode: ConstraintMode) -> Result<Var> {
        let d = self.delta(tape, mode)?;
        tape.add(self.w_tilde, d)
    }
}

/// Fresh layer over `w_tilde`: `U ~ N(0, std^2)`, `V = 0`, `beta = 0`.
///
/// `V = 0` makes the effective weight equal `w_tilde` exactly at start.
pub fn init_lora(w_tilde: Tensor, k: usize, std: f64, seed: u64) -> Result<LoraLinear> {
    if k == 0 {
        return Err(Error::Domain("rank budget must be at least 1".into()));
    }
    let (m, n) = w_tilde.shape();
    if m == 0 || n == 0 {
        return Err(Error::Domain("layer dimensions must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed, 0x10a);
    let u = Tensor::randn(m, k, std, &mut rng);
    LoraLinear::from_parts(w_tilde, u, Tensor::zeros(k, n), Some(Tensor::zeros(1, k)))
}

/// Fixed-rank layer without selection logits (used for baselines and retraining).
pub fn init_fixed_rank(w_tilde: Tensor, k: usize, std: f64, seed: u64) -> Result<LoraLinear> {
    let mut layer = init_lora(w_tilde, k, std, seed)?;
    layer.beta = None;
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, seeded_rng};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let a = alphas(&[0.0; 8], ConstraintMode::Softmax).unwrap();
        assert!(a.values().iter().all(|&v| close(v, 0.125, 1e-15)));
    }

    #[test]
    fn exact_exponentials() {
        let a = alphas(&[2f64.ln(), 0.0, 0.0], ConstraintMode::Softmax).unwrap();
        let want = [0.5, 0.25, 0.25];
        for (x, y) in a.values().iter().zip(want) {
            assert!(close(*x, y, 1e-15));
        }
    }

    #[test]
    fn one_dominant_logit() {
        // Oracle: e^4 / (e^4 + 7) and 1 / (e^4 + 7), evaluated independently.
        let denom = 4f64.exp() + 7.0;
        let mut beta = [0.0; 8];
        beta[0] = 4.0;
        let a = alphas(&beta, ConstraintMode::Softmax).unwrap();
        assert!(close(a.values()[0], 4f64.exp() / denom, 1e-15));
        assert!(close(a.values()[0], 0.8863, 1e-4));
        for &v in &a.values()[1..] {
            assert!(close(v, 1.0 / denom, 1e-15));
            assert!(close(v, 0.01624, 1e-5));
        }
    }

    #[test]
    fn sigmoid_and_unconstrained_modes() {
        let a = alphas(&[0.0, 2.0], ConstraintMode::Sigmoid).unwrap();
        assert_eq!(a.values()[0], 0.5);
        assert!(close(a.values()[1], 1.0 / (1.0 + (-2f64).exp()), 1e-15));
        let raw = alphas(&[-0.5, 3.0], ConstraintMode::None).unwrap();
        assert_eq!(raw.values(), &[-0.5, 3.0]);
    }

    #[test]
    fn empty_logits_rejected() {
        assert!(matches!(alphas(&[], ConstraintMode::Softmax), Err(Error::Domain(_))));
    }

    #[test]
    fn delta_hand_product() {
        let u = Tensor::from_rows(&[&[1.0], &[0.0]]);
        let v = Tensor::from_rows(&[&[0.0, 2.0]]);
        let d = delta(&u, &v, &AlphaVector::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(d, Tensor::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]));
    }

    #[test]
    fn delta_single_and_uniform_terms() {
        let mut rng = seeded_rng(1, 0);
        let u = Tensor::randn(5, 4, 1.0, &mut rng);
        let v = Tensor::randn(4, 6, 1.0, &mut rng);
        let one_hot = AlphaVector::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let single = u.select_cols(&[2]).matmul(&v.select_rows(&[2])).unwrap();
        assert_eq!(delta(&u, &v, &one_hot).unwrap(), single);

        let uniform = AlphaVector::new(vec![0.25; 4]).unwrap();
        let expect = u.matmul(&v).unwrap().scale(0.25);
        let got = delta(&u, &v, &uniform).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn delta_shape_error() {
        let a = AlphaVector::new(vec![1.0, 1.0]).unwrap();
        assert!(delta(&Tensor::zeros(3, 2), &Tensor::zeros(3, 4), &a).is_err());
    }

    #[test]
    fn fresh_layer_is_identity_update() {
        for seed in 0..5 {
            let mut rng = seeded_rng(seed, 99);
            let w = Tensor::randn(6, 4, 1.0, &mut rng);
            let layer = init_lora(w.clone(), 8, DEFAULT_INIT_STD, seed).unwrap();
            assert_eq!(layer.effective_weight(ConstraintMode::Softmax).unwrap(), w);
            assert_eq!(layer, init_lora(w, 8, DEFAULT_INIT_STD, seed).unwrap());
        }
    }

    #[test]
    fn zero_product_returns_w_tilde() {
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let layer = LoraLinear::from_parts(
            w.clone(),
            Tensor::zeros(2, 3),
            Tensor::from_rows(&[&[1.0, 1.0], &[2.0, 0.0], &[0.0, 5.0]]),
            Some(Tensor::row_vector(&[0.3, -2.0, 7.0])),
        )
        .unwrap();
        assert_eq!(layer.effective_weight(ConstraintMode::Softmax).unwrap(), w);
    }

    #[test]
    fn default_budget_is_eight() {
        let layer = init_lora(Tensor::zeros(3, 3), DEFAULT_RANK_BUDGET, 0.02, 0).unwrap();
        assert_eq!(layer.rank(), 8);
        assert_eq!(layer.beta().unwrap().shape(), (1, 8));
        assert!(init_lora(Tensor::zeros(3, 3), 0, 0.02, 0).is_err());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(5, 0);
        let w = Tensor::randn(4, 3, 1.0, &mut rng);
        let u = Tensor::randn(4, 5, 1.0, &mut rng);
        let v = Tensor::randn(5, 3, 1.0, &mut rng);
        let beta = Tensor::randn(1, 5, 1.0, &mut rng);
        let x = Tensor::randn(7, 4, 1.0, &mut rng);
        let target = Tensor::randn(7, 3, 1.0, &mut rng);

        for mode in [ConstraintMode::Softmax, ConstraintMode::Sigmoid, ConstraintMode::None] {
            let objective = |beta: &Tensor, tape: &mut Tape| -> Result<(Var, Var)> {
                let vars = LoraVars {
                    w_tilde: tape.constant(w.clone()),
                    u: tape.constant(u.clone()),
                    v: tape.constant(v.clone()),
                    beta: Some(tape.leaf(beta.clone())),
                };
                let weight = vars.effective_weight(tape, mode)?;
                let xv = tape.constant(x.clone());
                let y = tape.matmul(xv, weight)?;
                let t = tape.constant(target.clone());
                Ok((tape.mse(y, t)?, vars.beta.unwrap()))
            };
            let mut tape = Tape::new();
            let (loss, bvar) = objective(&beta, &mut tape).unwrap();
            let analytic = tape.backward(loss, &[bvar]).unwrap().get(bvar).unwrap().clone();
            let numeric = finite_diff_grad(
                |p| {
                    let mut t = Tape::new();
                    let (l, _) = objective(&p[0], &mut t)?;
                    Ok(t.value(l).item())
                },
                std::slice::from_ref(&beta),
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(&[analytic], &numeric);
            assert!(err < 1e-6, "{mode}: {err}");
        }
    }
}
