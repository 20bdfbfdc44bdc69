//! Deterministic mock models and the semantic-judge score sampler.
//!
//! A model is a chain of `layer_count × ops_per_layer` digest steps keyed by
//! `(theta_seed, layer, op)`. The trace keeps one digest per layer; op-level
//! states inside a layer are recomputed on demand from the layer input.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::attest::{digest, digest_parts, Digest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model {model_id}: {reason}")]
    InvalidSpec { model_id: String, reason: String },
    #[error("index out of range: layer {layer} op {op} for a {layers}x{ops} model")]
    IndexOutOfRange { layer: u32, op: u32, layers: u32, ops: u32 },
    #[error("unknown quality strategy `{0}`")]
    UnknownStrategy(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub layer_count: u32,
    pub ops_per_layer: u32,
    pub theta_seed: u64,
    /// USD per query at bare metal.
    #[serde(default)]
    pub cost_per_query: f64,
    /// Seconds at bare metal; falls back to the scenario's `latency.t_native`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_latency: Option<f64>,
}

impl ModelSpec {
    pub fn new(model_id: &str, layer_count: u32, ops_per_layer: u32, theta_seed: u64) -> Self {
        ModelSpec {
            model_id: model_id.to_string(),
            layer_count,
            ops_per_layer,
            theta_seed,
            cost_per_query: 0.0,
            native_latency: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| {
            Err(ModelError::InvalidSpec { model_id: self.model_id.clone(), reason: reason.into() })
        };
        if self.layer_count == 0 {
            return fail("layer_count must be >= 1");
        }
        if self.ops_per_layer == 0 {
            return fail("ops_per_layer must be >= 1");
        }
        if !(self.cost_per_query.is_finite() && self.cost_per_query >= 0.0) {
            return fail("cost_per_query must be >= 0");
        }
        if let Some(t) = self.native_latency {
            if !(t.is_finite() && t >= 0.0) {
                return fail("native_latency must be >= 0");
            }
        }
        Ok(())
    }

    pub fn total_ops(&self) -> u64 {
        self.layer_count as u64 * self.ops_per_layer as u64
    }

    fn check_index(&self, layer: u32, op: u32) -> Result<(), ModelError> {
        if layer >= self.layer_count || op >= self.ops_per_layer {
            return Err(ModelError::IndexOutOfRange {
                layer,
                op,
                layers: self.layer_count,
                ops: self.ops_per_layer,
            });
        }
        Ok(())
    }
}

/// One chained operation: the unit re-executed during adjudication.
pub fn op_step(theta_seed: u64, layer: u32, op: u32, input: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([0x4f]);
    h.update(theta_seed.to_le_bytes());
    h.update(layer.to_le_bytes());
    h.update(op.to_le_bytes());
    h.update(input.0);
    Digest(h.finalize().into())
}

/// Injected execution fault: the output of `(layer, op)` is xor-ed with `mask`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub layer: u32,
    pub op: u32,
    pub mask: Digest,
}

impl Fault {
    pub fn new(layer: u32, op: u32, salt: u64) -> Self {
        let mut mask = digest_parts("otr/fault", &[&salt.to_le_bytes()]);
        if mask == Digest::ZERO {
            mask.0[0] = 1;
        }
        Fault { layer, op, mask }
    }

    fn apply(&self, layer: u32, op: u32, state: Digest) -> Digest {
        if layer != self.layer || op != self.op {
            return state;
        }
        let mut out = state;
        for (b, m) in out.0.iter_mut().zip(self.mask.0) {
            *b ^= m;
        }
        out
    }
}

fn faulty_step(spec: &ModelSpec, fault: Option<&Fault>, layer: u32, op: u32, input: &Digest) -> Digest {
    let out = op_step(spec.theta_seed, layer, op, input);
    match fault {
        Some(f) => f.apply(layer, op, out),
        None => out,
    }
}

/// Applies all ops of `layer` to `input`.
pub fn layer_step(spec: &ModelSpec, layer: u32, input: &Digest) -> Digest {
    (0..spec.ops_per_layer).fold(*input, |s, op| op_step(spec.theta_seed, layer, op, &s))
}

/// Response bytes rendered from a final state.
pub fn render_response(final_state: &Digest) -> Vec<u8> {
    format!("otr-output:{}", final_state.to_hex()).into_bytes()
}

/// `H(r)` for the response rendered from `final_state`.
pub fn response_hash_of_state(final_state: &Digest) -> Digest {
    digest(&render_response(final_state))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub query_hash: Digest,
    /// State after each layer.
    pub layer_states: Vec<Digest>,
    pub final_state: Digest,
    pub response: Vec<u8>,
    /// Set only for deliberately corrupted executions.
    pub fault: Option<Fault>,
}

impl ExecutionTrace {
    /// State entering `layer`; the query hash for layer 0.
    pub fn layer_input(&self, layer: u32) -> Digest {
        match layer {
            0 => self.query_hash,
            l => self.layer_states[l as usize - 1],
        }
    }

    pub fn response_hash(&self) -> Digest {
        digest(&self.response)
    }
}

/// `r ← F_θ(q)`.
pub fn run_inference(spec: &ModelSpec, query: &[u8]) -> ExecutionTrace {
    execute(spec, digest(query), None)
}

/// Like [`run_inference`] but with one corrupted operation.
pub fn run_faulty_inference(spec: &ModelSpec, query: &[u8], fault: Fault) -> ExecutionTrace {
    execute(spec, digest(query), Some(fault))
}

/// Execution starting from an already hashed query.
pub fn execute(spec: &ModelSpec, query_hash: Digest, fault: Option<Fault>) -> ExecutionTrace {
    let mut layer_states = Vec::with_capacity(spec.layer_count as usize);
    let mut state = query_hash;
    for layer in 0..spec.layer_count {
        for op in 0..spec.ops_per_layer {
            state = faulty_step(spec, fault.as_ref(), layer, op, &state);
        }
        layer_states.push(state);
    }
    ExecutionTrace {
        query_hash,
        layer_states,
        final_state: state,
        response: render_response(&state),
        fault,
    }
}

/// State after `op` within `layer`, recomputed from the layer input.
pub fn op_state(trace: &ExecutionTrace, spec: &ModelSpec, layer: u32, op: u32) -> Result<Digest, ModelError> {
    spec.check_index(layer, op)?;
    let mut state = trace.layer_input(layer);
    for o in 0..=op {
        state = faulty_step(spec, trace.fault.as_ref(), layer, o, &state);
    }
    Ok(state)
}

/// Every op state of one layer, in order.
pub fn op_states(trace: &ExecutionTrace, spec: &ModelSpec, layer: u32) -> Result<Vec<Digest>, ModelError> {
    spec.check_index(layer, 0)?;
    let mut state = trace.layer_input(layer);
    Ok((0..spec.ops_per_layer)
        .map(|o| {
            state = faulty_step(spec, trace.fault.as_ref(), layer, o, &state);
            state
        })
        .collect())
}

/// Score distribution of one serving strategy as seen by the judge and by humans.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreProfile {
    pub judge_mean: f64,
    pub judge_std: f64,
    pub human_mean: f64,
    pub human_std: f64,
}

impl ScoreProfile {
    pub const fn new(judge_mean: f64, judge_std: f64, human_mean: f64, human_std: f64) -> Self {
        ScoreProfile { judge_mean, judge_std, human_mean, human_std }
    }
}

pub const HONEST_70B: &str = "honest-70b";
pub const STANDARD_8B: &str = "standard-8b";
pub const ADVERSARIAL_8B: &str = "adversarial-8b";

/// Judge committee and per-strategy score calibration.
///
/// `judge_std` is the spread of the aggregated committee score; each of the
/// `judge_count` assessors draws with `judge_std · √k` so the mean keeps the
/// configured spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityModel {
    pub strategies: BTreeMap<String, ScoreProfile>,
    pub judge_count: u32,
    pub acceptance_threshold: f64,
}

impl Default for QualityModel {
    /// Downgrade-attack calibration: honest 70B, standard 8B and reward-hacked 8B.
    fn default() -> Self {
        let strategies = [
            (HONEST_70B, ScoreProfile::new(0.91, 0.02, 0.88, 0.03)),
            (STANDARD_8B, ScoreProfile::new(0.76, 0.04, 0.65, 0.05)),
            (ADVERSARIAL_8B, ScoreProfile::new(0.89, 0.03, 0.52, 0.08)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        QualityModel { strategies, judge_count: 5, acceptance_threshold: 0.80 }
    }
}

impl QualityModel {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.judge_count == 0 {
            errs.push("quality.judge_count must be >= 1".into());
        }
        if !self.acceptance_threshold.is_finite() || self.acceptance_threshold < 0.0 {
            errs.push("quality.acceptance_threshold must be a finite value >= 0".into());
        }
        for (name, p) in &self.strategies {
            if !unit(p.judge_mean) || !unit(p.human_mean) {
                errs.push(format!("quality.strategies.{name}: means must lie in [0,1]"));
            }
            if ![p.judge_std, p.human_std].iter().all(|s| s.is_finite() && *s >= 0.0) {
                errs.push(format!("quality.strategies.{name}: standard deviations must be >= 0"));
            }
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoqScore {
    pub judge: f64,
    pub human: f64,
}

fn clamped_draw<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let n = Normal::new(mean, std).expect("validated std");
    n.sample(rng).clamp(0.0, 1.0)
}

/// `S_final = (1/k) Σ φ(M_i(q,r))` with φ the identity.
pub fn sample_poq_score<R: Rng + ?Sized>(
    qm: &QualityModel,
    strategy: &str,
    rng: &mut R,
) -> Result<PoqScore, ModelError> {
    let p = qm
        .strategies
        .get(strategy)
        .ok_or_else(|| ModelError::UnknownStrategy(strategy.to_string()))?;
    let k = qm.judge_count.max(1);
    let judge = if p.judge_std == 0.0 {
        p.judge_mean.clamp(0.0, 1.0)
    } else {
        let per_assessor = p.judge_std * (k as f64).sqrt();
        (0..k).map(|_| clamped_draw(p.judge_mean, per_assessor, rng)).sum::<f64>() / k as f64
    };
    let human = clamped_draw(p.human_mean, p.human_std, rng);
    Ok(PoqScore { judge, human })
}
