//! Scenario configuration with defaults and whole-config validation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attest::measure_enclave;
use crate::contract::{ContractParams, ModelRegistry, PricingPolicy};
use crate::econ::{EconParams, Strategy};
use crate::model_exec::{ModelSpec, QualityModel, ADVERSARIAL_8B, HONEST_70B};
use crate::simnet::{CostParams, LatencyParams, Protocol};

pub const HONEST_MODEL: &str = "honest-70b";
pub const CHEAP_MODEL: &str = "adv-8b";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub model_id: String,
    pub binary_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequencerConfig {
    pub id: String,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_sequencer_stake")]
    pub stake: f64,
    /// Model actually executed; empty means the claimed model for honest and
    /// lazy sequencers and the cheap model otherwise.
    #[serde(default)]
    pub serves: String,
    /// Score calibration used under PoQ; empty picks one by strategy.
    #[serde(default)]
    pub quality_profile: String,
}

fn default_strategy() -> Strategy {
    Strategy::Honest
}

fn default_sequencer_stake() -> f64 {
    1e9
}

impl SequencerConfig {
    pub fn honest(id: &str) -> Self {
        SequencerConfig {
            id: id.to_string(),
            strategy: Strategy::Honest,
            stake: default_sequencer_stake(),
            serves: String::new(),
            quality_profile: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FishermenConfig {
    pub count: u32,
    pub stake: f64,
}

impl Default for FishermenConfig {
    fn default() -> Self {
        FishermenConfig { count: 1, stake: 1e6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisputeParams {
    /// Claimant bond as a fraction of `econ.l_slash`.
    pub bond_fraction: f64,
    pub fisher_reward_fraction: f64,
    /// Seconds a party has to answer a bisection round.
    pub round_timeout: f64,
}

impl Default for DisputeParams {
    fn default() -> Self {
        DisputeParams { bond_fraction: 0.1, fisher_reward_fraction: 0.5, round_timeout: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub queries: u64,
    pub batch_size: u32,
    /// Seconds between batch arrivals.
    pub batch_interval: f64,
    pub users: u32,
    /// Number of distinct prompts users draw from.
    pub prompt_pool: u32,
    /// USD value of a query, cycled per batch; drives ρ when `pricing` is set.
    pub query_values: Vec<f64>,
    pub baselines: Vec<Protocol>,
    /// Model users pay for; empty means the first model.
    pub claimed_model: String,
    /// Value-banded ρ; overrides `econ.rho` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pricing: Option<PricingPolicy>,
    pub models: Vec<ModelSpec>,
    /// Empty registers every model with binary version `v1`.
    pub registry: Vec<RegistryEntry>,
    pub sequencers: Vec<SequencerConfig>,
    pub fishermen: FishermenConfig,
    pub econ: EconParams,
    pub latency: LatencyParams,
    pub costs: CostParams,
    pub dispute: DisputeParams,
    pub quality: QualityModel,
}

pub fn default_models() -> Vec<ModelSpec> {
    let mut big = ModelSpec::new(HONEST_MODEL, 70, 4, 70);
    big.cost_per_query = 0.90;
    let mut small = ModelSpec::new(CHEAP_MODEL, 8, 4, 8);
    small.cost_per_query = 0.10;
    vec![big, small]
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            queries: 10_000,
            batch_size: 16,
            batch_interval: 1.0,
            users: 100,
            prompt_pool: 1024,
            query_values: vec![10.0],
            baselines: Protocol::ALL.to_vec(),
            claimed_model: String::new(),
            pricing: None,
            models: default_models(),
            registry: Vec::new(),
            sequencers: vec![SequencerConfig::honest("seq-0")],
            fishermen: FishermenConfig::default(),
            econ: EconParams::default(),
            latency: LatencyParams::default(),
            costs: CostParams::default(),
            dispute: DisputeParams::default(),
            quality: QualityModel::default(),
        }
    }
}

impl ScenarioConfig {
    /// Fills the defaults that depend on other fields.
    pub fn resolve(mut self) -> Self {
        if self.claimed_model.is_empty() {
            if let Some(m) = self.models.first() {
                self.claimed_model = m.model_id.clone();
            }
        }
        if self.registry.is_empty() {
            self.registry = self
                .models
                .iter()
                .map(|m| RegistryEntry { model_id: m.model_id.clone(), binary_version: "v1".into() })
                .collect();
        }
        let claimed = self.claimed_model.clone();
        let cheap = self
            .models
            .iter()
            .find(|m| m.model_id != claimed)
            .map(|m| m.model_id.clone())
            .unwrap_or_else(|| claimed.clone());
        for s in &mut self.sequencers {
            if s.serves.is_empty() {
                s.serves = match s.strategy {
                    Strategy::Honest | Strategy::Lazy => claimed.clone(),
                    Strategy::Downgrade | Strategy::ForgedAttestation => cheap.clone(),
                };
            }
            if s.quality_profile.is_empty() {
                s.quality_profile = match s.strategy {
                    Strategy::Honest => HONEST_70B,
                    _ => ADVERSARIAL_8B,
                }
                .to_string();
            }
        }
        self
    }

    /// Checks every invariant and reports all violations together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.seed > i64::MAX as u64 {
            errs.push(format!("seed = {} must be <= {}", self.seed, i64::MAX));
        }
        if self.queries == 0 {
            errs.push("queries must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if !(self.batch_interval.is_finite() && self.batch_interval >= 0.0) {
            errs.push(format!("batch_interval = {} must be a finite value >= 0", self.batch_interval));
        }
        if self.users == 0 {
            errs.push("users must be >= 1".into());
        }
        if self.prompt_pool == 0 {
            errs.push("prompt_pool must be >= 1".into());
        }
        if self.query_values.is_empty() {
            errs.push("query_values must not be empty".into());
        }
        if self.query_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            errs.push("query_values entries must be finite values >= 0".into());
        }
        if self.baselines.is_empty() {
            errs.push("baselines must name at least one protocol".into());
        }
        if self.baselines.iter().collect::<BTreeSet<_>>().len() != self.baselines.len() {
            errs.push("baselines must not repeat a protocol".into());
        }

        let mut ids = BTreeSet::new();
        for m in &self.models {
            if let Err(e) = m.validate() {
                errs.push(format!("models: {e}"));
            }
            if !ids.insert(m.model_id.as_str()) {
                errs.push(format!("models: duplicate model_id `{}`", m.model_id));
            }
            if let Some(t) = m.native_latency {
                if !(t.is_finite() && t >= 0.0) {
                    errs.push(format!("models.{}.native_latency = {t} must be >= 0", m.model_id));
                }
            }
        }
        if self.models.is_empty() {
            errs.push("models must not be empty".into());
        }
        if !self.claimed_model.is_empty() && !ids.contains(self.claimed_model.as_str()) {
            errs.push(format!("claimed_model `{}` is not a configured model", self.claimed_model));
        }
        for r in &self.registry {
            if !ids.contains(r.model_id.as_str()) {
                errs.push(format!("registry: model `{}` is not a configured model", r.model_id));
            }
        }
        if let Err(e) = self.build_registry() {
            errs.push(format!("registry: {e}"));
        }

        let mut seq_ids = BTreeSet::new();
        if self.sequencers.is_empty() {
            errs.push("sequencers must not be empty".into());
        }
        for s in &self.sequencers {
            if !seq_ids.insert(s.id.as_str()) {
                errs.push(format!("sequencers: duplicate id `{}`", s.id));
            }
            if s.id.starts_with("fisher-") {
                errs.push(format!("sequencers.{}: the `fisher-` prefix is reserved", s.id));
            }
            if !(s.stake.is_finite() && s.stake >= 0.0) {
                errs.push(format!("sequencers.{}.stake = {} must be >= 0", s.id, s.stake));
            }
            if !s.serves.is_empty() && !ids.contains(s.serves.as_str()) {
                errs.push(format!("sequencers.{}.serves `{}` is not a configured model", s.id, s.serves));
            }
            if !s.quality_profile.is_empty() && !self.quality.strategies.contains_key(&s.quality_profile) {
                errs.push(format!(
                    "sequencers.{}.quality_profile `{}` is not calibrated in quality.strategies",
                    s.id, s.quality_profile
                ));
            }
        }
        if !(self.fishermen.stake.is_finite() && self.fishermen.stake >= 0.0) {
            errs.push(format!("fishermen.stake = {} must be >= 0", self.fishermen.stake));
        }
        if self.fishermen.count == 0 && self.econ.p_fish > 0.0 {
            errs.push("fishermen.count must be >= 1 when econ.p_fish > 0".into());
        }

        errs.extend(self.econ.validate());
        errs.extend(self.latency.validate());
        errs.extend(self.costs.validate());
        errs.extend(self.quality.validate());
        let d = &self.dispute;
        for (name, v) in [("dispute.bond_fraction", d.bond_fraction), ("dispute.fisher_reward_fraction", d.fisher_reward_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} = {v} must lie in [0,1]"));
            }
        }
        if !(d.round_timeout.is_finite() && d.round_timeout > 0.0) {
            errs.push(format!("dispute.round_timeout = {} must be > 0", d.round_timeout));
        }
        if d.round_timeout < self.latency.t_round {
            errs.push(format!(
                "dispute.round_timeout = {} must be >= latency.t_round = {}",
                d.round_timeout, self.latency.t_round
            ));
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn build_registry(&self) -> Result<ModelRegistry, crate::contract::ContractError> {
        let mut r = ModelRegistry::new();
        for e in &self.registry {
            r.register_model(&e.model_id, measure_enclave(&e.model_id, &e.binary_version))?;
        }
        Ok(r)
    }

    /// Binary version an enclave serving `model_id` runs.
    pub fn binary_version(&self, model_id: &str) -> &str {
        self.registry
            .iter()
            .find(|e| e.model_id == model_id)
            .map(|e| e.binary_version.as_str())
            .unwrap_or("v1")
    }

    pub fn model(&self, model_id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    pub fn contract_params(&self) -> ContractParams {
        ContractParams {
            t_chal: self.latency.t_chal,
            t_zk_prove: self.latency.t_zk_prove,
            l_slash: self.econ.l_slash,
            bond_fraction: self.dispute.bond_fraction,
            fisher_reward_fraction: self.dispute.fisher_reward_fraction,
            round_timeout: self.dispute.round_timeout,
        }
    }

    /// ρ applied to a batch of the given query value.
    pub fn rho_for(&self, query_value: f64) -> f64 {
        match &self.pricing {
            Some(p) => crate::contract::choose_rho(query_value, p),
            None => self.econ.rho,
        }
    }
}
