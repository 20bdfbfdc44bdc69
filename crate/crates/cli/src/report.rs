use std::fmt::Write as _;

use otr_core::config::ScenarioConfig;
use otr_core::econ::{deterrence_threshold, expected_cheat_profit, will_cheat, Strategy};
use otr_core::simnet::{amortized_cost, amortized_latency, expected_finality_latency, Protocol, RunMetrics};
use serde::Serialize;

use crate::{CliError, ReportBundle};

pub const SCHEMA_LINE: &str = concat!("# schema=otr-metrics/v1 version=", env!("CARGO_PKG_VERSION"));
const SWEEP_SCHEMA_LINE: &str = concat!("# schema=otr-sweep/v1 version=", env!("CARGO_PKG_VERSION"));

#[derive(Serialize)]
struct Row<'a> {
    protocol: &'a str,
    query_id: u64,
    batch_id: u64,
    sequencer: &'a str,
    strategy: &'a str,
    rho: f64,
    mode: &'a str,
    status: &'a str,
    submit_time: f64,
    latency: Option<f64>,
    hard_latency: Option<f64>,
    cost: f64,
    profit: f64,
    detection: &'a str,
}

fn finish_csv(header: &str, w: csv::Writer<Vec<u8>>) -> Result<String, CliError> {
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(format!("{header}\n{}", String::from_utf8(bytes).expect("csv output is utf-8")))
}

/// One row per query per protocol.
pub fn metrics_csv(runs: &[RunMetrics]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for run in runs {
        let protocol = run.protocol.as_str();
        for r in &run.records {
            w.serialize(Row {
                protocol,
                query_id: r.query_id,
                batch_id: r.batch_id,
                sequencer: &r.sequencer,
                strategy: r.strategy.as_str(),
                rho: r.rho,
                mode: match r.mode {
                    Some(otr_core::contract::Mode::SpotCheck) => "spot-check",
                    Some(otr_core::contract::Mode::Optimistic) => "optimistic",
                    None => "",
                },
                status: r.status.as_str(),
                submit_time: r.submit_time,
                latency: r.latency,
                hard_latency: r.hard_latency,
                cost: r.cost,
                profit: r.profit,
                detection: r.detection.as_str(),
            })?;
        }
    }
    finish_csv(SCHEMA_LINE, w)
}

fn opt(x: Option<f64>, prec: usize) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.prec$}"),
        _ => "-".to_string(),
    }
}

fn num(x: f64, prec: usize) -> String {
    opt(Some(x), prec)
}

fn honest_profit(run: &RunMetrics) -> Option<f64> {
    run.strategy(Strategy::Honest).map(|s| s.profit.mean)
}

pub fn summary_text(cfg: &ScenarioConfig, runs: &[RunMetrics]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario summary");
    let _ = writeln!(
        s,
        "seed {}  queries {}  batch size {}  claimed model {}  sequencers {}  fishermen {}",
        cfg.seed,
        cfg.queries,
        cfg.batch_size,
        cfg.claimed_model,
        cfg.sequencers.len(),
        cfg.fishermen.count
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "per protocol");
    let _ = writeln!(
        s,
        "{:<6} {:>8} {:>12} {:>12} {:>12} {:>10} {:>8} {:>8} {:>8} {:>12} {:>12} {:>10} {:>10}",
        "proto",
        "queries",
        "L_avg[s]",
        "provis[s]",
        "hard[s]",
        "cost[$]",
        "slashed",
        "detect",
        "reject",
        "adv_profit",
        "hon_profit",
        "tput[q/s]",
        "eta"
    );
    for r in runs {
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>12} {:>12} {:>12} {:>10} {:>8} {:>8} {:>8} {:>12} {:>12} {:>10} {:>10}",
            r.protocol.as_str(),
            r.records.len(),
            num(r.l_avg, 4),
            num(r.provisional_latency, 4),
            num(r.hard_latency, 2),
            num(r.mean_cost, 4),
            r.slash_count,
            r.detection_count,
            r.rejected_count,
            opt(r.adversary_mean_profit(), 4),
            opt(honest_profit(r), 4),
            num(r.throughput, 4),
            num(r.eta, 4),
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "profit by strategy");
    let _ = writeln!(
        s,
        "{:<6} {:<20} {:>8} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "proto", "strategy", "queries", "caught", "mean", "std", "p05", "p50", "p95"
    );
    for r in runs {
        for (strategy, st) in &r.strategies {
            let _ = writeln!(
                s,
                "{:<6} {:<20} {:>8} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12}",
                r.protocol.as_str(),
                strategy.as_str(),
                st.queries,
                st.caught,
                num(st.profit.mean, 4),
                num(st.profit.std, 4),
                num(st.p05, 4),
                num(st.p50, 4),
                num(st.p95, 4),
            );
        }
    }
    let _ = writeln!(s);
    let e = &cfg.econ;
    let lat = cfg.latency.with_native(cfg.model(&cfg.claimed_model).and_then(|m| m.native_latency));
    let _ = writeln!(s, "closed form (rho = {}, p_fish = {})", e.rho, e.p_fish);
    let _ = writeln!(s, "  amortized latency t_tee + rho*t_zk_prove [s]  {}", num(amortized_latency(e.rho, &lat), 4));
    let _ = writeln!(s, "  expected finality latency incl. t_sig [s]    {}", num(expected_finality_latency(e.rho, &lat), 4));
    let _ = writeln!(s, "  amortized cost per query [$]                 {}", num(amortized_cost(e.rho, &cfg.costs), 4));
    let _ = writeln!(s, "  detection probability                        {}", num(e.p_catch(), 6));
    let _ = writeln!(s, "  expected downgrade profit [$]                {}", num(expected_cheat_profit(e), 4));
    let _ = writeln!(s, "  lazy sequencer cheats                        {}", if will_cheat(e) { "yes" } else { "no" });
    let _ = writeln!(s, "  smallest deterring slash [$]                 {}", num(deterrence_threshold(e), 4));
    if let Some(otr) = runs.iter().find(|r| r.protocol == Protocol::Otr) {
        let _ = writeln!(s, "  zkml speedup t_zkml_full / L_avg(otr)        {}", num(lat.t_zkml_full / otr.l_avg, 1));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub protocol: String,
    pub seed: u64,
    pub queries: usize,
    pub l_avg: f64,
    pub cost_per_query: f64,
    pub slash_count: usize,
    pub detection_count: usize,
    pub adversary_mean_profit: Option<f64>,
    pub honest_mean_profit: Option<f64>,
    pub expected_cheat_profit: f64,
    pub will_cheat: bool,
}

pub fn sweep_rows(param: &str, bundles: &[(f64, ReportBundle)]) -> Vec<SweepRow> {
    bundles
        .iter()
        .flat_map(|(v, b)| {
            b.runs.iter().map(move |r| SweepRow {
                param: param.to_string(),
                value: *v,
                protocol: r.protocol.as_str().to_string(),
                seed: b.config.seed,
                queries: r.records.len(),
                l_avg: r.l_avg,
                cost_per_query: r.mean_cost,
                slash_count: r.slash_count,
                detection_count: r.detection_count,
                adversary_mean_profit: r.adversary_mean_profit(),
                honest_mean_profit: honest_profit(r),
                expected_cheat_profit: expected_cheat_profit(&b.config.econ),
                will_cheat: will_cheat(&b.config.econ),
            })
        })
        .collect()
}

pub fn sweep_csv(param: &str, bundles: &[(f64, ReportBundle)]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in sweep_rows(param, bundles) {
        w.serialize(row)?;
    }
    finish_csv(SWEEP_SCHEMA_LINE, w)
}
