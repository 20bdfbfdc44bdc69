//! Discrete-event harness: latency and cost models, the event queue and the
//! scenario engine.

mod engine;
mod metrics;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::Mode;

pub use engine::run_scenario;
pub use metrics::{Detection, QueryRecord, QueryStatus, RunCounters, RunMetrics, StrategySummary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event at {time} scheduled before the clock at {clock}")]
    TimeTravel { time: f64, clock: f64 },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Contract(#[from] crate::contract::ContractError),
    #[error(transparent)]
    Attest(#[from] crate::attest::AttestError),
    #[error(transparent)]
    Model(#[from] crate::model_exec::ModelError),
    #[error(transparent)]
    Dispute(#[from] crate::dispute::DisputeError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Otr,
    Opml,
    Zkml,
    Poq,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Otr, Protocol::Opml, Protocol::Zkml, Protocol::Poq];

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Otr => "otr",
            Protocol::Opml => "opml",
            Protocol::Zkml => "zkml",
            Protocol::Poq => "poq",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown protocol `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyParams {
    pub t_native: f64,
    pub tee_overhead: f64,
    pub t_sig: f64,
    pub t_zk_prove: f64,
    pub t_zkml_full: f64,
    pub t_chal: f64,
    /// Seconds per bisection round.
    pub t_round: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            t_native: 0.5 / 1.15,
            tee_overhead: 1.15,
            t_sig: 0.001,
            t_zk_prove: 30.0,
            t_zkml_full: 1200.0,
            t_chal: 604_800.0,
            t_round: 1.0,
        }
    }
}

impl LatencyParams {
    pub fn t_tee(&self) -> f64 {
        self.tee_overhead * self.t_native
    }

    /// Same parameters with a model-specific bare-metal latency.
    pub fn with_native(&self, t_native: Option<f64>) -> Self {
        LatencyParams { t_native: t_native.unwrap_or(self.t_native), ..*self }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("latency.t_native", self.t_native),
            ("latency.tee_overhead", self.tee_overhead),
            ("latency.t_sig", self.t_sig),
            ("latency.t_zk_prove", self.t_zk_prove),
            ("latency.t_zkml_full", self.t_zkml_full),
            ("latency.t_chal", self.t_chal),
            ("latency.t_round", self.t_round),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} = {v} must be a finite value >= 0"));
            }
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub cost_tee_compute: f64,
    /// Per-query share of a spot-check proof.
    pub cost_zk_prove: f64,
    pub cost_blob: f64,
    pub cost_sig_verify: f64,
    pub cost_zk_verify_onchain: f64,
    pub cost_dispute: f64,
    /// On-chain commitment fee of a plain optimistic sequencer.
    pub cost_optimistic_commit: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            cost_tee_compute: 0.0,
            cost_zk_prove: 0.0,
            cost_blob: 0.05,
            cost_sig_verify: 0.02,
            cost_zk_verify_onchain: 45.0,
            cost_dispute: 2.5,
            cost_optimistic_commit: 0.01,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("costs.cost_tee_compute", self.cost_tee_compute),
            ("costs.cost_zk_prove", self.cost_zk_prove),
            ("costs.cost_blob", self.cost_blob),
            ("costs.cost_sig_verify", self.cost_sig_verify),
            ("costs.cost_zk_verify_onchain", self.cost_zk_verify_onchain),
            ("costs.cost_dispute", self.cost_dispute),
            ("costs.cost_optimistic_commit", self.cost_optimistic_commit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} = {v} must be a finite value >= 0"));
            }
        }
        errs
    }
}

/// Latency from submission to the first finality tier reached.
pub fn finality_latency(mode: Mode, lat: &LatencyParams) -> f64 {
    match mode {
        Mode::Optimistic => lat.t_tee() + lat.t_sig,
        Mode::SpotCheck => lat.t_tee() + lat.t_zk_prove,
    }
}

/// Closed-form amortized latency `t_tee + ρ·t_zk_prove`.
pub fn amortized_latency(rho: f64, lat: &LatencyParams) -> f64 {
    lat.t_tee() + rho * lat.t_zk_prove
}

/// Exact mean of [`finality_latency`] when each batch is spot-checked with probability ρ.
pub fn expected_finality_latency(rho: f64, lat: &LatencyParams) -> f64 {
    (1.0 - rho) * finality_latency(Mode::Optimistic, lat) + rho * finality_latency(Mode::SpotCheck, lat)
}

/// Closed-form OTR cost per query.
pub fn amortized_cost(rho: f64, costs: &CostParams) -> f64 {
    costs.cost_tee_compute + costs.cost_blob + costs.cost_sig_verify + rho * costs.cost_zk_prove
}

/// Dispute-free cost per query of each protocol.
pub fn baseline_cost(protocol: Protocol, rho: f64, costs: &CostParams) -> f64 {
    match protocol {
        Protocol::Otr => amortized_cost(rho, costs),
        Protocol::Opml => costs.cost_blob + costs.cost_optimistic_commit,
        Protocol::Zkml => costs.cost_blob + costs.cost_zk_verify_onchain,
        Protocol::Poq => costs.cost_blob,
    }
}

/// Latency to the first finality tier for the non-OTR baselines.
pub fn baseline_latency(protocol: Protocol, rho: f64, lat: &LatencyParams) -> f64 {
    match protocol {
        Protocol::Otr => expected_finality_latency(rho, lat),
        Protocol::Opml => lat.t_native + lat.t_chal,
        Protocol::Zkml => lat.t_zkml_full,
        Protocol::Poq => lat.t_native,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    QuerySubmitted,
    InferenceDone,
    BatchCommitted,
    SpotCheckDone,
    WindowExpired,
    DisputeRound,
    SlashExecuted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent<P> {
    pub time: f64,
    pub kind: EventKind,
    pub payload: P,
}

struct Entry<P> {
    time: f64,
    seq: u64,
    event: SimEvent<P>,
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Time-ordered queue; equal times pop in insertion order.
pub struct EventQueue<P> {
    heap: BinaryHeap<Entry<P>>,
    clock: f64,
    seq: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), clock: 0.0, seq: 0 }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, event: SimEvent<P>) -> Result<(), SimError> {
        if event.time.is_nan() || event.time < self.clock {
            return Err(SimError::TimeTravel { time: event.time, clock: self.clock });
        }
        self.heap.push(Entry { time: event.time, seq: self.seq, event });
        self.seq += 1;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let e = self.heap.pop()?;
        self.clock = e.time;
        Some(e.event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time: f64, payload: u32) -> SimEvent<u32> {
        SimEvent { time, kind: EventKind::QuerySubmitted, payload }
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        for (t, p) in [(2.0, 0), (1.0, 1), (2.0, 2), (1.0, 3), (0.5, 4)] {
            q.schedule(ev(t, p)).unwrap();
        }
        let order: Vec<u32> = std::iter::from_fn(|| q.pop()).map(|e| e.payload).collect();
        assert_eq!(order, vec![4, 1, 3, 0, 2]);
        assert_eq!(q.clock(), 2.0);
    }

    #[test]
    fn queue_rejects_the_past() {
        let mut q = EventQueue::new();
        q.schedule(ev(5.0, 0)).unwrap();
        q.pop();
        assert_eq!(q.schedule(ev(4.0, 1)), Err(SimError::TimeTravel { time: 4.0, clock: 5.0 }));
        assert!(q.schedule(ev(5.0, 1)).is_ok());
        assert!(q.schedule(ev(f64::NAN, 1)).is_err());
    }

    #[test]
    fn empty_queue_pops_nothing() {
        let mut q: EventQueue<u32> = EventQueue::new();
        assert!(q.pop().is_none());
        assert!(q.is_empty());
    }

    fn reference_latency() -> LatencyParams {
        LatencyParams { t_native: 0.5, tee_overhead: 1.0, t_sig: 0.0, ..LatencyParams::default() }
    }

    #[test]
    fn finality_tiers() {
        let lat = reference_latency();
        assert_eq!(finality_latency(Mode::Optimistic, &lat), 0.5);
        assert_eq!(finality_latency(Mode::SpotCheck, &lat), 30.5);
        let zero = LatencyParams { t_native: 0.0, ..lat };
        assert_eq!(finality_latency(Mode::SpotCheck, &zero), 30.0);
        let d = LatencyParams::default();
        assert!((d.t_tee() - 0.5).abs() < 1e-12);
        assert!((finality_latency(Mode::Optimistic, &d) - 0.501).abs() < 1e-12);
    }

    #[test]
    fn amortized_latency_examples() {
        let lat = reference_latency();
        assert_eq!(amortized_latency(0.0, &lat), 0.5);
        assert_eq!(amortized_latency(1.0, &lat), 30.5);
        assert!((amortized_latency(0.01, &lat) - 0.8).abs() < 1e-12);
        assert!((expected_finality_latency(0.01, &lat) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cost_table() {
        let c = CostParams::default();
        let cents = |x: f64| (x * 100.0).round() as i64;
        assert_eq!(cents(amortized_cost(0.0, &c)), 7);
        assert_eq!(cents(baseline_cost(Protocol::Otr, 0.01, &c)), 7);
        assert_eq!(cents(baseline_cost(Protocol::Opml, 0.0, &c)), 6);
        assert_eq!(cents(baseline_cost(Protocol::Zkml, 0.0, &c)), 4505);
        let with_proof = CostParams { cost_zk_prove: 10.0, ..c };
        assert!((amortized_cost(0.1, &with_proof) - 1.07).abs() < 1e-12);
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
    }
}
