//! Scenario runner: config parsing, single runs, sweeps and report files.

mod report;

use std::fs;
use std::path::{Path, PathBuf};

use otr_core::attest::digest_parts;
use otr_core::config::{ConfigError, ScenarioConfig};
use otr_core::simnet::{run_scenario, RunMetrics, SimError};
use rayon::prelude::*;
use thiserror::Error;

pub use report::{metrics_csv, summary_text, sweep_csv, SweepRow, SCHEMA_LINE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error("unknown preset `{0}` (see `presets list`)")]
    UnknownPreset(String),
    #[error("parameter `{0}` cannot be swept; choose one of rho, p_fish, l_slash, batch_size, query_value")]
    UnknownParameter(String),
    #[error("sweep needs at least one value")]
    EmptyValues,
    #[error("bad value `{value}` for {param}: {reason}")]
    BadValue { param: String, value: String, reason: String },
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot render resolved config: {0}")]
    Render(#[from] toml::ser::Error),
}

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub toml: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "paper-defaults",
        description: "honest sequencer, rho 0.01, 10^5 queries; latency and cost reference",
        toml: include_str!("../presets/paper-defaults.toml"),
    },
    Preset {
        name: "downgrade-attack",
        description: "honest vs truthful downgrade vs forged attestation under all four protocols",
        toml: include_str!("../presets/downgrade-attack.toml"),
    },
    Preset {
        name: "broken-tee",
        description: "leaked enclave keys; lazy and forging sequencers against fishermen",
        toml: include_str!("../presets/broken-tee.toml"),
    },
    Preset {
        name: "rho-sweep",
        description: "OTR-only base scenario for latency-vs-rho sweeps",
        toml: include_str!("../presets/rho-sweep.toml"),
    },
    Preset {
        name: "pricing-bands",
        description: "value-banded rho with a forging sequencer",
        toml: include_str!("../presets/pricing-bands.toml"),
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// Parses, resolves and validates a config. Unknown keys are errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ScenarioConfig, CliError> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| CliError::Parse { origin: origin.to_string(), message: e.to_string() })?;
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file, or a shipped preset when given as `preset:NAME`.
pub fn parse_config(source: &str) -> Result<ScenarioConfig, CliError> {
    if let Some(name) = source.strip_prefix("preset:") {
        let p = preset(name).ok_or_else(|| CliError::UnknownPreset(name.to_string()))?;
        return parse_config_str(p.toml, source);
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text, source)
}

/// The outputs of one scenario run.
pub struct ReportBundle {
    pub config: ScenarioConfig,
    pub runs: Vec<RunMetrics>,
    pub metrics_csv: String,
    pub summary: String,
    pub audit: String,
    pub resolved_config: String,
}

impl ReportBundle {
    pub fn run(&self, protocol: otr_core::simnet::Protocol) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.protocol == protocol)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        for (name, body) in [
            ("metrics.csv", &self.metrics_csv),
            ("summary.txt", &self.summary),
            ("audit.log", &self.audit),
            ("config.resolved.toml", &self.resolved_config),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|source| CliError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Runs every requested baseline and renders the report without touching disk.
pub fn build_report(cfg: &ScenarioConfig) -> Result<ReportBundle, CliError> {
    let runs = cfg
        .baselines
        .par_iter()
        .map(|p| run_scenario(cfg, *p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut audit = String::new();
    for r in &runs {
        for line in &r.audit {
            audit.push_str(line);
            audit.push('\n');
        }
    }
    Ok(ReportBundle {
        metrics_csv: metrics_csv(&runs)?,
        summary: summary_text(cfg, &runs),
        audit,
        resolved_config: toml::to_string(cfg)?,
        config: cfg.clone(),
        runs,
    })
}

/// Runs a scenario and writes `metrics.csv`, `summary.txt`, `audit.log` and
/// `config.resolved.toml` into `out`.
pub fn run(cfg: &ScenarioConfig, out: &Path) -> Result<ReportBundle, CliError> {
    let bundle = build_report(cfg)?;
    bundle.write_to(out)?;
    Ok(bundle)
}

pub const SWEEPABLE: [&str; 5] = ["rho", "p_fish", "l_slash", "batch_size", "query_value"];

/// Applies one sweep value; the sub-run seed is derived from the base seed and the value.
pub fn apply_param(base: &ScenarioConfig, param: &str, value: f64) -> Result<ScenarioConfig, CliError> {
    let bad = |reason: &str| CliError::BadValue {
        param: param.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    };
    let mut cfg = base.clone();
    match param {
        "rho" => {
            cfg.econ.rho = value;
            cfg.pricing = None;
        }
        "p_fish" => cfg.econ.p_fish = value,
        "l_slash" => cfg.econ.l_slash = value,
        "batch_size" => {
            if value.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&value) {
                return Err(bad("batch_size must be a positive integer"));
            }
            cfg.batch_size = value as u32;
        }
        "query_value" => cfg.query_values = vec![value],
        _ => return Err(CliError::UnknownParameter(param.to_string())),
    }
    // Kept within i64 so the echoed config stays valid TOML.
    cfg.seed = digest_parts("otr/sweep-seed", &[&base.seed.to_le_bytes(), &value.to_bits().to_be_bytes()]).leading_u64() >> 1;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_values(param: &str, raw: &str) -> Result<Vec<f64>, CliError> {
    let values: Vec<f64> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|e| CliError::BadValue {
                param: param.to_string(),
                value: s.to_string(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::EmptyValues);
    }
    Ok(values)
}

/// One sub-run per value, each written to `out/<param>=<value>/`, plus `out/sweep.csv`.
pub fn sweep(
    base: &ScenarioConfig,
    param: &str,
    values: &[f64],
    out: Option<&Path>,
) -> Result<Vec<(f64, ReportBundle)>, CliError> {
    if !SWEEPABLE.contains(&param) {
        return Err(CliError::UnknownParameter(param.to_string()));
    }
    if values.is_empty() {
        return Err(CliError::EmptyValues);
    }
    let configs = values.iter().map(|&v| apply_param(base, param, v).map(|c| (v, c))).collect::<Result<Vec<_>, _>>()?;
    let bundles = configs
        .into_par_iter()
        .map(|(v, c)| build_report(&c).map(|b| (v, b)))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out {
        for (v, b) in &bundles {
            b.write_to(&dir.join(format!("{param}={v}")))?;
        }
        let path = dir.join("sweep.csv");
        fs::write(&path, sweep_csv(param, &bundles)?).map_err(|source| CliError::Io { path, source })?;
    }
    Ok(bundles)
}
