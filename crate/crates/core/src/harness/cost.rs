//! Wall-clock and gradient-evaluation accounting per phase.

use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub phase: String,
    pub grad_evals: u64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub phases: Vec<PhaseCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: impl Into<String>, grad_evals: u64, wall_ms: f64) {
        self.phases.push(PhaseCost {
            phase: phase.into(),
            grad_evals,
            wall_ms,
        });
    }

    pub fn extend(&mut self, other: &CostLedger) {
        self.phases.extend(other.phases.iter().cloned());
    }

    pub fn total_grad_evals(&self) -> u64 {
        self.phases.iter().map(|p| p.grad_evals).sum()
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.phases.iter().map(|p| p.wall_ms).sum()
    }

    pub fn grad_evals_of(&self, phase: &str) -> u64 {
        self.phases.iter().filter(|p| p.phase == phase).map(|p| p.grad_evals).sum()
    }
}

/// Measures elapsed milliseconds, or always reports 0 when disabled so
/// that reports stay byte-identical across runs.
#[derive(Clone, Copy, Debug)]
pub struct Stopwatch(Option<Instant>);

impl Stopwatch {
    pub fn start(enabled: bool) -> Self {
        Stopwatch(enabled.then(Instant::now))
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)
    }
}
