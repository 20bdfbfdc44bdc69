use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Protocol;
use crate::contract::Mode;
use crate::econ::{SampleStats, Settlement, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryStatus {
    Pending,
    HardFinal,
    Slashed,
    Rejected,
}

impl QueryStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryStatus::Pending => "pending",
            QueryStatus::HardFinal => "hard-final",
            QueryStatus::Slashed => "slashed",
            QueryStatus::Rejected => "rejected",
        }
    }

    pub fn settlement(&self) -> Option<Settlement> {
        match self {
            QueryStatus::Pending => None,
            QueryStatus::HardFinal => Some(Settlement::HardFinal),
            QueryStatus::Slashed => Some(Settlement::Slashed),
            QueryStatus::Rejected => Some(Settlement::Rejected),
        }
    }
}

impl fmt::Display for QueryStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What ended a query other than a clean settlement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Detection {
    None,
    SpotCheck,
    FraudProof,
    Attribution,
    ValidityProof,
    Judge,
    InsufficientStake,
}

impl Detection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Detection::None => "none",
            Detection::SpotCheck => "spot-check",
            Detection::FraudProof => "fraud-proof",
            Detection::Attribution => "attribution",
            Detection::ValidityProof => "validity-proof",
            Detection::Judge => "judge",
            Detection::InsufficientStake => "insufficient-stake",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub query_id: u64,
    pub batch_id: u64,
    pub sequencer: String,
    pub strategy: Strategy,
    pub rho: f64,
    pub mode: Option<Mode>,
    pub status: QueryStatus,
    pub submit_time: f64,
    /// Seconds to the first finality tier reached; `None` when rejected.
    pub latency: Option<f64>,
    /// Seconds to the terminal state.
    pub hard_latency: Option<f64>,
    pub cost: f64,
    pub profit: f64,
    pub detection: Detection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StrategySummary {
    pub queries: usize,
    pub caught: usize,
    pub profit: SampleStats,
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
}

impl StrategySummary {
    fn of(records: &[&QueryRecord]) -> Self {
        let xs: Vec<f64> = records.iter().map(|r| r.profit).collect();
        StrategySummary {
            queries: records.len(),
            caught: records.iter().filter(|r| r.detection != Detection::None).count(),
            profit: SampleStats::of(&xs),
            p05: SampleStats::quantile(&xs, 0.05),
            p50: SampleStats::quantile(&xs, 0.50),
            p95: SampleStats::quantile(&xs, 0.95),
        }
    }
}

/// Counters the engine accumulates alongside the per-query records.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunCounters {
    pub batches: u64,
    pub spot_checks: u64,
    pub disputes: u64,
    pub dispute_rounds: u64,
    /// Device seconds spent on inference.
    pub inference_time: f64,
    /// Device seconds spent on verification: signatures, proofs and bisection rounds.
    pub verify_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub protocol: Protocol,
    pub records: Vec<QueryRecord>,
    pub counters: RunCounters,
    /// Mean of the finality latency samples.
    pub l_avg: f64,
    /// Standard error of `l_avg` with queries clustered by batch.
    pub l_avg_std_err: f64,
    pub provisional_latency: f64,
    pub hard_latency: f64,
    /// Finalized queries per device-busy second.
    pub throughput: f64,
    /// Verification time over inference time.
    pub eta: f64,
    pub mean_cost: f64,
    pub slash_count: usize,
    pub detection_count: usize,
    pub provisional_count: usize,
    pub direct_hard_count: usize,
    pub rejected_count: usize,
    pub strategies: BTreeMap<Strategy, StrategySummary>,
    pub audit: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl RunMetrics {
    pub fn from_records(protocol: Protocol, records: Vec<QueryRecord>, counters: RunCounters, audit: Vec<String>) -> Self {
        let l_avg = mean(records.iter().filter_map(|r| r.latency));
        let l_avg_std_err = clustered_std_err(&records);
        let provisional_latency =
            mean(records.iter().filter(|r| r.mode == Some(Mode::Optimistic)).filter_map(|r| r.latency));
        let hard_latency = mean(records.iter().filter_map(|r| r.hard_latency));
        let finalized = records.iter().filter(|r| r.latency.is_some()).count();
        let busy = counters.inference_time + counters.verify_time;
        let throughput = if busy > 0.0 { finalized as f64 / busy } else { f64::NAN };
        let eta = if counters.inference_time > 0.0 { counters.verify_time / counters.inference_time } else { f64::NAN };
        let mean_cost = mean(records.iter().map(|r| r.cost));
        let count = |f: &dyn Fn(&QueryRecord) -> bool| records.iter().filter(|r| f(r)).count();
        let slash_count = count(&|r| r.status == QueryStatus::Slashed);
        let detection_count = count(&|r| r.detection != Detection::None);
        let provisional_count = count(&|r| r.mode == Some(Mode::Optimistic) && r.latency.is_some());
        let direct_hard_count = count(&|r| r.mode != Some(Mode::Optimistic) && r.latency.is_some());
        let rejected_count = count(&|r| r.status == QueryStatus::Rejected);
        let mut by: BTreeMap<Strategy, Vec<&QueryRecord>> = BTreeMap::new();
        for r in &records {
            by.entry(r.strategy).or_default().push(r);
        }
        let strategies = by.into_iter().map(|(k, v)| (k, StrategySummary::of(&v))).collect();
        RunMetrics {
            protocol,
            records,
            counters,
            l_avg,
            l_avg_std_err,
            provisional_latency,
            hard_latency,
            throughput,
            eta,
            mean_cost,
            slash_count,
            detection_count,
            provisional_count,
            direct_hard_count,
            rejected_count,
            strategies,
            audit,
        }
    }

    /// Mean profit over queries served by non-honest sequencers.
    pub fn adversary_mean_profit(&self) -> Option<f64> {
        let xs: Vec<f64> = self.records.iter().filter(|r| r.strategy.is_adversarial()).map(|r| r.profit).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn strategy(&self, s: Strategy) -> Option<&StrategySummary> {
        self.strategies.get(&s)
    }
}

/// Standard error of the mean latency treating each batch as one cluster.
fn clustered_std_err(records: &[QueryRecord]) -> f64 {
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(l) = r.latency {
            let e = sums.entry(r.batch_id).or_default();
            e.0 += l;
            e.1 += 1;
        }
    }
    let n: usize = sums.values().map(|v| v.1).sum();
    let g = sums.len();
    if n == 0 || g < 2 {
        return f64::NAN;
    }
    let m = sums.values().map(|v| v.0).sum::<f64>() / n as f64;
    let ss: f64 = sums.values().map(|(s, k)| (s - m * *k as f64).powi(2)).sum();
    (ss * g as f64 / (g - 1) as f64).sqrt() / n as f64
}
