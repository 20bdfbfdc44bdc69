//! Keyed-digest VRF used for spot-check sampling.
//!
//! The output is `H(key ‖ ξ ‖ height)`; the value is its leading 53 bits scaled
//! to `[0,1)` and the proof is the digest itself, checked by recomputation.

use crate::attest::{digest_parts, Digest};

#[derive(Clone, PartialEq, Eq)]
pub struct VrfKey([u8; 32]);

impl VrfKey {
    pub fn from_seed(seed: &[u8]) -> Self {
        VrfKey(digest_parts("otr/vrf-key", &[seed]).0)
    }
}

impl std::fmt::Debug for VrfKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("VrfKey(..)")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VrfOutput {
    pub value: f64,
    pub proof: Digest,
}

fn unit_value(d: &Digest) -> f64 {
    (d.leading_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// `r_check ← VRF(ξ, block_height)`.
pub fn vrf_eval(key: &VrfKey, seed: &[u8], block_height: u64) -> VrfOutput {
    let proof = digest_parts("otr/vrf", &[&key.0, seed, &block_height.to_be_bytes()]);
    VrfOutput { value: unit_value(&proof), proof }
}

pub fn vrf_verify(key: &VrfKey, seed: &[u8], block_height: u64, out: &VrfOutput) -> bool {
    let expect = vrf_eval(key, seed, block_height);
    expect.proof == out.proof && expect.value.to_bits() == out.value.to_bits()
}

/// Uniform index in `[0, n)` drawn from the VRF output stream.
pub fn select_index(proof: &Digest, n: usize) -> usize {
    assert!(n > 0, "empty batch");
    let x = digest_parts("otr/vrf-index", &[&proof.0]).leading_u64();
    ((x as u128 * n as u128) >> 64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_verifiable() {
        let k = VrfKey::from_seed(b"k");
        let a = vrf_eval(&k, b"xi", 10);
        assert_eq!(a, vrf_eval(&k, b"xi", 10));
        assert!(vrf_verify(&k, b"xi", 10, &a));
        assert!((0.0..1.0).contains(&a.value));

        let tampered = VrfOutput { value: (a.value + 0.5) % 1.0, ..a };
        assert!(!vrf_verify(&k, b"xi", 10, &tampered));
        let tampered = VrfOutput { proof: a.proof.with_bit_flipped(3), ..a };
        assert!(!vrf_verify(&k, b"xi", 10, &tampered));
        assert!(!vrf_verify(&k, b"xi", 11, &a));
        assert!(!vrf_verify(&VrfKey::from_seed(b"other"), b"xi", 10, &a));
    }

    #[test]
    fn index_in_range() {
        let k = VrfKey::from_seed(b"k");
        for h in 0..500 {
            let out = vrf_eval(&k, b"xi", h);
            assert!(select_index(&out.proof, 7) < 7);
            assert_eq!(select_index(&out.proof, 1), 0);
        }
    }
}
