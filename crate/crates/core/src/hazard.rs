//! Additive hazard risk head and the reweighted horizon cross-entropy.
//!
//! `P(k) = σ(B_r(z) + Σ_{i≤k} H_i(z))` with `H_i = softplus(·) ≥ 0`, so the
//! cumulative risk never decreases with the horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{sigmoid_scalar, softplus_scalar, Tensor};

/// Yearly horizons scored by default.
pub const DEFAULT_HORIZONS: usize = 5;

pub const MONTHS_PER_YEAR: f64 = 12.0;

/// Observed outcome, with times in months after the reference visit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Event { time: f64 },
    Censored { follow_up: f64 },
}

impl Outcome {
    pub fn validate(&self) -> Result<()> {
        let t = self.time();
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Data(format!("outcome time must be positive, got {t}")));
        }
        Ok(())
    }

    /// Event time or end of follow-up.
    pub fn time(&self) -> f64 {
        match *self {
            Outcome::Event { time } => time,
            Outcome::Censored { follow_up } => follow_up,
        }
    }

    pub fn is_event(&self) -> bool {
        matches!(self, Outcome::Event { .. })
    }

    /// Label `1{event ≤ k years}` if it is determinable at horizon `k`.
    pub fn label_at(&self, year: usize) -> Option<bool> {
        let horizon = year as f64 * MONTHS_PER_YEAR;
        match *self {
            Outcome::Event { time } => Some(time <= horizon),
            Outcome::Censored { follow_up } => (follow_up >= horizon).then_some(false),
        }
    }
}

/// Risk head output for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskOutput {
    pub baseline_logit: f64,
    /// Non-negative yearly hazard increments `H_1..H_K`.
    pub hazards: Vec<f64>,
    /// Cumulative probabilities `P(1..K)`.
    pub cumulative: Vec<f64>,
}

impl RiskOutput {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::Dimension("need a baseline logit and at least one hazard".into()));
        }
        let hazards: Vec<f64> = logits[1..].iter().map(|&h| softplus_scalar(h)).collect();
        let mut acc = logits[0];
        let cumulative = hazards
            .iter()
            .map(|h| {
                acc += h;
                sigmoid_scalar(acc)
            })
            .collect();
        Ok(Self {
            baseline_logit: logits[0],
            hazards,
            cumulative,
        })
    }

    /// Logit of each cumulative probability.
    pub fn cumulative_logits(&self) -> Vec<f64> {
        let mut acc = self.baseline_logit;
        self.hazards
            .iter()
            .map(|h| {
                acc += h;
                acc
            })
            .collect()
    }

    /// Predicted risk at the last horizon, the default ranking score.
    pub fn score(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }
}

/// Linear map `z ↦ [B_r, Ĥ_1..Ĥ_K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardParams {
    /// `[d, 1 + K]`
    pub weight: Tensor,
    /// `[1 + K]`
    pub bias: Tensor,
}

/// `P(k) = σ(B_r + Σ_{i≤k} softplus(Ĥ_i))`.
pub fn risk_head(z: &[f64], params: &HazardParams) -> Result<RiskOutput> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("embedding is not finite".into()));
    }
    let [d, width] = params.weight.dims2()?;
    if d != z.len() || params.bias.len() != width {
        return Err(Error::Dimension(format!(
            "embedding of width {} for a {d}x{width} head",
            z.len()
        )));
    }
    let mut logits = params.bias.data().to_vec();
    for (i, &zv) in z.iter().enumerate() {
        for (o, w) in logits.iter_mut().zip(&params.weight.data()[i * width..(i + 1) * width]) {
            *o += zv * w;
        }
    }
    RiskOutput::from_logits(&logits)
}

/// Class weights for the horizon cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            positive: 1.0,
            negative: 1.0,
        }
    }
}

impl ClassWeights {
    /// Positive weight = negatives / positives over every determinable
    /// (sample, horizon) pair; the negative weight is 1.
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a Outcome>, horizons: usize) -> Self {
        let (mut pos, mut neg) = (0usize, 0usize);
        for o in outcomes {
            for k in 1..=horizons {
                match o.label_at(k) {
                    Some(true) => pos += 1,
                    Some(false) => neg += 1,
                    None => {}
                }
            }
        }
        let positive = if pos == 0 || neg == 0 {
            1.0
        } else {
            neg as f64 / pos as f64
        };
        Self {
            positive,
            negative: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.positive > 0.0 && self.negative > 0.0) {
            return Err(Error::Config(format!("class weights must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Per-horizon targets and weights; weight 0 marks an indeterminable horizon.
pub fn horizon_targets(outcome: &Outcome, horizons: usize, weights: &ClassWeights) -> (Vec<f64>, Vec<f64>) {
    (1..=horizons)
        .map(|k| match outcome.label_at(k) {
            Some(true) => (1.0, weights.positive),
            Some(false) => (0.0, weights.negative),
            None => (0.0, 0.0),
        })
        .unzip()
}

/// Weighted BCE summed over the determinable horizons. `None` when no
/// horizon is determinable (the sample is skipped).
pub fn loss(risk: &RiskOutput, outcome: &Outcome, weights: &ClassWeights) -> Result<Option<f64>> {
    weights.validate()?;
    let (targets, w) = horizon_targets(outcome, risk.cumulative.len(), weights);
    if w.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let total = risk
        .cumulative_logits()
        .iter()
        .zip(&targets)
        .zip(&w)
        .filter(|(_, &wk)| wk != 0.0)
        .map(|((&s, &y), &wk)| wk * (y * softplus_scalar(-s) + (1.0 - y) * softplus_scalar(s)))
        .sum();
    Ok(Some(total))
}

/// Head on the tape: `z: [d]` → cumulative logits `[K]`.
pub fn risk_logits_on_tape(tape: &mut GradTape, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let d = tape.value(z).len();
    let z = tape.reshape(z, &[1, d])?;
    let logits = tape.matmul(z, weight)?;
    let logits = tape.add_row_bias(logits, bias)?;
    let width = tape.value(logits).len();
    let logits = tape.reshape(logits, &[width])?;
    tape.additive_hazard(logits)
}
