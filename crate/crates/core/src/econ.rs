//! Rational-sequencer economics: detection probability, cheat profit and the
//! per-query settlement rules used by the simulator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_exec::{sample_poq_score, ModelError, QualityModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("{name} = {value} is outside [0,1]")]
    NotAProbability { name: &'static str, value: f64 },
}

fn probability(name: &'static str, value: f64) -> Result<f64, DomainError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(DomainError::NotAProbability { name, value })
    }
}

/// Probability that a cheat is caught by a spot-check or a fisherman.
pub fn p_catch(rho: f64, p_fish: f64) -> Result<f64, DomainError> {
    let rho = probability("rho", rho)?;
    let p_fish = probability("p_fish", p_fish)?;
    Ok(1.0 - (1.0 - rho) * (1.0 - p_fish))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EconParams {
    pub rho: f64,
    pub p_fish: f64,
    /// Gain of a lazy sequencer that skips inference.
    pub g_cheat: f64,
    pub l_slash: f64,
    pub r_user: f64,
    pub c_small: f64,
    pub c_large: f64,
}

impl Default for EconParams {
    fn default() -> Self {
        EconParams {
            rho: 0.01,
            p_fish: 0.9,
            g_cheat: 0.80,
            l_slash: 90.0,
            r_user: 0.90,
            c_small: 0.10,
            c_large: 0.90,
        }
    }
}

impl EconParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("econ.rho", self.rho), ("econ.p_fish", self.p_fish)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} = {v} must lie in [0,1]"));
            }
        }
        for (name, v) in [
            ("econ.g_cheat", self.g_cheat),
            ("econ.l_slash", self.l_slash),
            ("econ.r_user", self.r_user),
            ("econ.c_small", self.c_small),
            ("econ.c_large", self.c_large),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} = {v} must be a finite value >= 0"));
            }
        }
        errs
    }

    pub fn p_catch(&self) -> f64 {
        p_catch(self.rho.clamp(0.0, 1.0), self.p_fish.clamp(0.0, 1.0)).expect("clamped")
    }
}

/// Expected profit per query of serving the small model while charging for the large one.
pub fn expected_cheat_profit(params: &EconParams) -> f64 {
    let p = params.p_catch();
    (1.0 - p) * (params.r_user - params.c_small) - p * params.l_slash
}

/// Decision of a rational lazy sequencer. Indifference resolves to honest.
pub fn will_cheat(params: &EconParams) -> bool {
    let p = params.p_catch();
    (1.0 - p) * params.g_cheat > p * params.l_slash
}

/// Smallest slash that deters a lazy sequencer, `(1−p)·g/p`; infinite when `p = 0`.
pub fn deterrence_threshold(params: &EconParams) -> f64 {
    let p = params.p_catch();
    if p == 0.0 {
        f64::INFINITY
    } else {
        (1.0 - p) * params.g_cheat / p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Honest,
    /// Serves the small model from its own genuine enclave.
    Downgrade,
    /// Serves the small model and signs under the large model's measurement with a leaked key.
    ForgedAttestation,
    /// Skips inference and returns garbage under a leaked key.
    Lazy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Honest, Strategy::Downgrade, Strategy::ForgedAttestation, Strategy::Lazy];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Honest => "honest",
            Strategy::Downgrade => "downgrade",
            Strategy::ForgedAttestation => "forged-attestation",
            Strategy::Lazy => "lazy",
        }
    }

    pub fn is_adversarial(&self) -> bool {
        *self != Strategy::Honest
    }

    /// Whether the strategy needs a leaked enclave key.
    pub fn needs_compromised_key(&self) -> bool {
        matches!(self, Strategy::ForgedAttestation | Strategy::Lazy)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Terminal state of one query as seen by settlement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Settlement {
    HardFinal,
    Slashed,
    /// Refused at intake; the sequencer is not paid.
    Rejected,
}

/// Realized sequencer profit for one query under OTR.
pub fn otr_settlement(strategy: Strategy, outcome: Settlement, params: &EconParams) -> f64 {
    use Settlement::*;
    match (strategy, outcome) {
        (_, Slashed) => -params.l_slash,
        (Strategy::Honest, HardFinal) => params.r_user - params.c_large,
        (Strategy::Honest, Rejected) => -params.c_large,
        (Strategy::Downgrade | Strategy::ForgedAttestation, HardFinal) => params.r_user - params.c_small,
        (Strategy::Downgrade | Strategy::ForgedAttestation, Rejected) => -params.c_small,
        (Strategy::Lazy, HardFinal) => params.g_cheat,
        (Strategy::Lazy, Rejected) => 0.0,
    }
}

/// Realized profit for one query under PoQ: paid iff the judge score clears the threshold.
///
/// `quality_profile` names the score calibration in `qm`; `cost` is what serving cost.
pub fn poq_baseline_settlement<R: Rng + ?Sized>(
    qm: &QualityModel,
    quality_profile: &str,
    cost: f64,
    params: &EconParams,
    rng: &mut R,
) -> Result<PoqSettlement, ModelError> {
    let score = sample_poq_score(qm, quality_profile, rng)?;
    let accepted = score.judge >= qm.acceptance_threshold;
    let revenue = if accepted { params.r_user } else { 0.0 };
    Ok(PoqSettlement { judge_score: score.judge, human_score: score.human, accepted, profit: revenue - cost })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoqSettlement {
    pub judge_score: f64,
    pub human_score: f64,
    pub accepted: bool,
    pub profit: f64,
}

/// Serving cost of a strategy per query.
pub fn serving_cost(strategy: Strategy, params: &EconParams) -> f64 {
    match strategy {
        Strategy::Honest => params.c_large,
        Strategy::Downgrade | Strategy::ForgedAttestation => params.c_small,
        Strategy::Lazy => 0.0,
    }
}

/// Draws one forged-downgrade settlement with independent spot-check and fisherman channels.
pub fn sample_cheat_settlement<R: Rng + ?Sized>(params: &EconParams, rng: &mut R) -> f64 {
    let spot = rng.random::<f64>() < params.rho;
    let fish = rng.random::<f64>() < params.p_fish;
    let outcome = if spot || fish { Settlement::Slashed } else { Settlement::HardFinal };
    otr_settlement(Strategy::ForgedAttestation, outcome, params)
}

/// Per-sequencer running totals.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyProfile {
    pub strategy: Strategy,
    realized_profit: f64,
    times_caught: u64,
    settled: u64,
}

impl StrategyProfile {
    pub fn new(strategy: Strategy) -> Self {
        StrategyProfile { strategy, realized_profit: 0.0, times_caught: 0, settled: 0 }
    }

    pub fn settle(&mut self, outcome: Settlement, params: &EconParams) -> f64 {
        let p = otr_settlement(self.strategy, outcome, params);
        self.record(p, outcome == Settlement::Slashed);
        p
    }

    pub fn record(&mut self, profit: f64, caught: bool) {
        self.realized_profit += profit;
        self.settled += 1;
        if caught {
            self.times_caught += 1;
        }
    }

    pub fn realized_profit(&self) -> f64 {
        self.realized_profit
    }

    pub fn times_caught(&self) -> u64 {
        self.times_caught
    }

    pub fn settled(&self) -> u64 {
        self.settled
    }
}

/// Mean, sample standard deviation and standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub std_err: f64,
    pub min: f64,
    pub max: f64,
}

impl SampleStats {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return SampleStats::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let std = var.sqrt();
        let (min, max) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        SampleStats { n, mean, std, std_err: std / (n as f64).sqrt(), min, max }
    }

    /// Linear-interpolated quantile; `q` in `[0,1]`.
    pub fn quantile(xs: &[f64], q: f64) -> f64 {
        if xs.is_empty() {
            return f64::NAN;
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }
}
