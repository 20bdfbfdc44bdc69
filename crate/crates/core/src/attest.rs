//! Simulated enclave identities, hash commitments and attestation quotes.
//!
//! A quote binds the report body `H(q) ‖ H(r) ‖ nonce` to the enclave
//! measurement it claims. Enclave signing keys are certified by a vendor key
//! (a single-level chain); a [`RootOfTrust`] holds the vendor verification key
//! and a revocation list.

use std::collections::BTreeSet;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// A 256-bit SHA-256 digest. The single hash used protocol-wide.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }

    /// First eight bytes, big-endian.
    pub fn leading_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("32-byte digest"))
    }

    /// Returns a copy with one bit flipped.
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        self.0[(bit / 8) % 32] ^= 1 << (bit % 8);
        self
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}…)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

/// Plain SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Domain-separated digest over length-prefixed parts.
pub fn digest_parts(domain: &str, parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update((domain.len() as u32).to_le_bytes());
    h.update(domain.as_bytes());
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Measurement of the enclave binary built for `model_id` at `binary_version`.
pub fn measure_enclave(model_id: &str, binary_version: &str) -> Digest {
    digest_parts("otr/mrenclave", &[model_id.as_bytes(), binary_version.as_bytes()])
}

/// Report-body nonce, supplied by the caller so whole runs replay from a seed.
pub type Nonce = u128;

fn report_body(query_hash: &Digest, response_hash: &Digest, nonce: Nonce) -> [u8; 80] {
    let mut body = [0u8; 80];
    body[..32].copy_from_slice(&query_hash.0);
    body[32..64].copy_from_slice(&response_hash.0);
    body[64..].copy_from_slice(&nonce.to_be_bytes());
    body
}

/// Signed quote message: the measurement followed by `Data_body`.
fn quote_message(mrenclave: &Digest, body: &[u8; 80]) -> [u8; 112] {
    let mut msg = [0u8; 112];
    msg[..32].copy_from_slice(&mrenclave.0);
    msg[32..].copy_from_slice(body);
    msg
}

fn cert_message(enclave_id: &str, key: &VerifyingKey) -> Vec<u8> {
    let mut msg = b"otr/enclave-cert".to_vec();
    msg.extend_from_slice(&(enclave_id.len() as u32).to_le_bytes());
    msg.extend_from_slice(enclave_id.as_bytes());
    msg.extend_from_slice(key.as_bytes());
    msg
}

fn key_from_seed(domain: &str, seed: &[u8]) -> SigningKey {
    SigningKey::from_bytes(&digest_parts(domain, &[seed]).0)
}

/// Vendor certificate binding an enclave id to its quote-signing key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveCert {
    pub enclave_id: String,
    pub enclave_key: VerifyingKey,
    pub vendor_signature: Signature,
}

/// The hardware vendor: holds the certification key for enclave signing keys.
pub struct Vendor {
    key: SigningKey,
}

impl Vendor {
    pub fn from_seed(seed: &[u8]) -> Self {
        Vendor { key: key_from_seed("otr/vendor-key", seed) }
    }

    pub fn root_of_trust(&self) -> RootOfTrust {
        RootOfTrust { vendor_public_key: self.key.verifying_key(), revoked: BTreeSet::new() }
    }

    /// Provisions an enclave running the binary `(model_id, binary_version)`.
    pub fn provision(
        &self,
        enclave_id: &str,
        model_id: &str,
        binary_version: &str,
        key_seed: &[u8],
    ) -> EnclaveIdentity {
        let signing_key = key_from_seed("otr/enclave-key", key_seed);
        let enclave_key = signing_key.verifying_key();
        let vendor_signature = self.key.sign(&cert_message(enclave_id, &enclave_key));
        EnclaveIdentity {
            enclave_id: enclave_id.to_string(),
            mrenclave: measure_enclave(model_id, binary_version),
            signing_key,
            vendor_cert: EnclaveCert {
                enclave_id: enclave_id.to_string(),
                enclave_key,
                vendor_signature,
            },
            compromised: false,
        }
    }
}

/// A simulated TEE instance.
#[derive(Clone)]
pub struct EnclaveIdentity {
    pub enclave_id: String,
    pub mrenclave: Digest,
    signing_key: SigningKey,
    pub vendor_cert: EnclaveCert,
    /// Signing key has leaked; the holder may sign any body under any claimed measurement.
    pub compromised: bool,
}

impl fmt::Debug for EnclaveIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveIdentity")
            .field("enclave_id", &self.enclave_id)
            .field("mrenclave", &self.mrenclave)
            .field("compromised", &self.compromised)
            .finish_non_exhaustive()
    }
}

impl EnclaveIdentity {
    /// An enclave whose key was not issued by any trusted vendor.
    pub fn self_signed(enclave_id: &str, model_id: &str, binary_version: &str, seed: &[u8]) -> Self {
        Vendor::from_seed(&[b"rogue/".as_slice(), seed].concat())
            .provision(enclave_id, model_id, binary_version, seed)
    }

    pub fn compromise(mut self) -> Self {
        self.compromised = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RootOfTrust {
    pub vendor_public_key: VerifyingKey,
    pub revoked: BTreeSet<String>,
}

impl RootOfTrust {
    pub fn revoke(&mut self, enclave_id: &str) {
        self.revoked.insert(enclave_id.to_string());
    }
}

/// The unit published to the DA layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitmentTuple {
    pub query_hash: Digest,
    pub response: Vec<u8>,
    pub response_hash: Digest,
    pub nonce: Nonce,
    pub mrenclave: Digest,
    pub signature: Signature,
    pub cert: EnclaveCert,
    pub sequencer_id: String,
}

impl CommitmentTuple {
    /// `Data_body = H(q) ‖ H(r) ‖ nonce`.
    pub fn data_body(&self) -> [u8; 80] {
        report_body(&self.query_hash, &self.response_hash, self.nonce)
    }

    /// `response_hash` commits to `response`.
    pub fn is_self_consistent(&self) -> bool {
        digest(&self.response) == self.response_hash
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("enclave {0} is not compromised and cannot sign under a foreign measurement")]
    ForgeryNotPermitted(String),
}

/// Produces a signed commitment tuple for `response` to the query with hash `query_hash`.
///
/// `forged_mrenclave` requests the stolen-key path: the quote claims a measurement other
/// than the enclave's own. Only a compromised enclave can do that.
pub fn generate_quote(
    enclave: &EnclaveIdentity,
    sequencer_id: &str,
    query_hash: Digest,
    response: Vec<u8>,
    nonce: Nonce,
    forged_mrenclave: Option<Digest>,
) -> Result<CommitmentTuple, AttestError> {
    let mrenclave = match forged_mrenclave {
        Some(m) if m != enclave.mrenclave && !enclave.compromised => {
            return Err(AttestError::ForgeryNotPermitted(enclave.enclave_id.clone()))
        }
        Some(m) => m,
        None => enclave.mrenclave,
    };
    let response_hash = digest(&response);
    let body = report_body(&query_hash, &response_hash, nonce);
    let signature = enclave.signing_key.sign(&quote_message(&mrenclave, &body));
    Ok(CommitmentTuple {
        query_hash,
        response,
        response_hash,
        nonce,
        mrenclave,
        signature,
        cert: enclave.vendor_cert.clone(),
        sequencer_id: sequencer_id.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuoteStatus {
    Valid,
    InvalidSignature,
    UnknownVendor,
    Revoked,
}

/// Checks the certificate chain, the revocation list and the quote signature.
pub fn verify_quote(tuple: &CommitmentTuple, root: &RootOfTrust) -> QuoteStatus {
    let cert = &tuple.cert;
    let cert_msg = cert_message(&cert.enclave_id, &cert.enclave_key);
    if root.vendor_public_key.verify(&cert_msg, &cert.vendor_signature).is_err() {
        return QuoteStatus::UnknownVendor;
    }
    if root.revoked.contains(&cert.enclave_id) {
        return QuoteStatus::Revoked;
    }
    let msg = quote_message(&tuple.mrenclave, &tuple.data_body());
    match cert.enclave_key.verify_strict(&msg, &tuple.signature) {
        Ok(()) => QuoteStatus::Valid,
        Err(_) => QuoteStatus::InvalidSignature,
    }
}
