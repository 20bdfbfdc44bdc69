//! Model registry and the attribution check on commitments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ContractError;
use crate::attest::{verify_quote, CommitmentTuple, Digest, QuoteStatus, RootOfTrust};

/// Maps each model id to the set of enclave measurements allowed to serve it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelRegistry {
    entries: BTreeMap<String, BTreeSet<Digest>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `mrenclave` to the model's allowed set. Re-registering the same pair is a no-op.
    pub fn register_model(&mut self, model_id: &str, mrenclave: Digest) -> Result<(), ContractError> {
        if let Some(owner) = self.model_of(&mrenclave) {
            if owner != model_id {
                return Err(ContractError::AmbiguousAttribution {
                    mrenclave,
                    existing: owner.to_string(),
                    requested: model_id.to_string(),
                });
            }
        }
        self.entries.entry(model_id.to_string()).or_default().insert(mrenclave);
        Ok(())
    }

    pub fn omega(&self, model_id: &str) -> Option<&BTreeSet<Digest>> {
        self.entries.get(model_id)
    }

    /// The model a measurement is attributed to, if any.
    pub fn model_of(&self, mrenclave: &Digest) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, omega)| omega.contains(mrenclave))
            .map(|(id, _)| id.as_str())
    }

    pub fn models(&self) -> impl Iterator<Item = (&str, &BTreeSet<Digest>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoeaVerdict {
    Accept,
    RejectUnregistered,
    RejectWrongModel,
    RejectBadQuote(QuoteStatus),
}

impl PoeaVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, PoeaVerdict::Accept)
    }
}

/// Accepts iff the quote is valid and its measurement is in `Ω(claimed_model)`.
pub fn verify_poea(
    registry: &ModelRegistry,
    tuple: &CommitmentTuple,
    claimed_model: &str,
    root: &RootOfTrust,
) -> PoeaVerdict {
    match verify_quote(tuple, root) {
        QuoteStatus::Valid => {}
        bad => return PoeaVerdict::RejectBadQuote(bad),
    }
    if registry.omega(claimed_model).is_some_and(|o| o.contains(&tuple.mrenclave)) {
        return PoeaVerdict::Accept;
    }
    match registry.model_of(&tuple.mrenclave) {
        Some(_) => PoeaVerdict::RejectWrongModel,
        None => PoeaVerdict::RejectUnregistered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attest::{digest, generate_quote, measure_enclave, Vendor};

    #[test]
    fn registration_is_unambiguous() {
        let mut r = ModelRegistry::new();
        let h1 = measure_enclave("llama3", "v1");
        r.register_model("llama3", h1).unwrap();
        r.register_model("llama3", h1).unwrap();
        assert!(matches!(
            r.register_model("mistral", h1),
            Err(ContractError::AmbiguousAttribution { .. })
        ));
        assert_eq!(r.model_of(&h1), Some("llama3"));
        assert_eq!(r.omega("llama3").unwrap().len(), 1);
    }

    #[test]
    fn downgrade_is_blocked() {
        let vendor = Vendor::from_seed(b"v");
        let root = vendor.root_of_trust();
        let mut r = ModelRegistry::new();
        let big = vendor.provision("e70", "llama3-70b", "v1", b"e70");
        let small = vendor.provision("e8", "llama3-8b", "v1", b"e8");
        r.register_model("llama3-70b", big.mrenclave).unwrap();
        r.register_model("llama3-8b", small.mrenclave).unwrap();

        let t = generate_quote(&big, "s", digest(b"q"), b"r".to_vec(), 0, None).unwrap();
        assert_eq!(verify_poea(&r, &t, "llama3-70b", &root), PoeaVerdict::Accept);

        let t = generate_quote(&small, "s", digest(b"q"), b"r".to_vec(), 0, None).unwrap();
        assert_eq!(verify_poea(&r, &t, "llama3-70b", &root), PoeaVerdict::RejectWrongModel);

        let odd = vendor.provision("e?", "llama3-70b", "v9-unreviewed", b"e?");
        let t = generate_quote(&odd, "s", digest(b"q"), b"r".to_vec(), 0, None).unwrap();
        assert_eq!(verify_poea(&r, &t, "llama3-70b", &root), PoeaVerdict::RejectUnregistered);

        let mut t = generate_quote(&big, "s", digest(b"q"), b"r".to_vec(), 0, None).unwrap();
        t.nonce += 1;
        assert_eq!(
            verify_poea(&r, &t, "llama3-70b", &root),
            PoeaVerdict::RejectBadQuote(QuoteStatus::InvalidSignature)
        );
    }
}
