//! Value-banded spot-check probability.

use serde::{Deserialize, Serialize};

use super::ContractError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceBand {
    /// Inclusive lower bound of the band, USD.
    pub min_value: f64,
    pub rho: f64,
}

/// Step function from query value to ρ. A value falls in the last band whose
/// `min_value` does not exceed it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PriceBand>", into = "Vec<PriceBand>")]
pub struct PricingPolicy {
    bands: Vec<PriceBand>,
}

impl Default for PricingPolicy {
    fn default() -> Self {
        PricingPolicy {
            bands: vec![
                PriceBand { min_value: 0.0, rho: 0.0 },
                PriceBand { min_value: 1.0, rho: 0.01 },
                PriceBand { min_value: 100.0, rho: 0.1 },
                PriceBand { min_value: 1000.0, rho: 1.0 },
            ],
        }
    }
}

impl PricingPolicy {
    pub fn new(bands: Vec<PriceBand>) -> Result<Self, ContractError> {
        let bad = |reason: &str| Err(ContractError::InvalidPolicy(reason.to_string()));
        if bands.is_empty() {
            return bad("at least one band is required");
        }
        if bands[0].min_value != 0.0 {
            return bad("the first band must start at 0");
        }
        for w in bands.windows(2) {
            if w[1].min_value.partial_cmp(&w[0].min_value) != Some(std::cmp::Ordering::Greater) {
                return bad("band thresholds must be strictly ascending");
            }
            if w[1].rho < w[0].rho {
                return bad("rho must be non-decreasing across bands");
            }
        }
        if bands.iter().any(|b| !(0.0..=1.0).contains(&b.rho)) {
            return bad("rho must lie in [0,1]");
        }
        Ok(PricingPolicy { bands })
    }

    pub fn bands(&self) -> &[PriceBand] {
        &self.bands
    }
}

impl TryFrom<Vec<PriceBand>> for PricingPolicy {
    type Error = ContractError;

    fn try_from(bands: Vec<PriceBand>) -> Result<Self, Self::Error> {
        PricingPolicy::new(bands)
    }
}

impl From<PricingPolicy> for Vec<PriceBand> {
    fn from(p: PricingPolicy) -> Self {
        p.bands
    }
}

pub fn choose_rho(query_value: f64, policy: &PricingPolicy) -> f64 {
    policy
        .bands
        .iter()
        .take_while(|b| b.min_value <= query_value)
        .last()
        .map_or(policy.bands[0].rho, |b| b.rho)
}
