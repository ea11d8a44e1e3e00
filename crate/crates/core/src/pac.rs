//! Emulated ARMv8.6-A pointer authentication (EnhancedPAC2 + FPAC).
//!
//! The QARMA block cipher is replaced by a keyed 64-bit mixer built from two
//! rounds of the SplitMix64 finalizer. Only the PAC insertion/verification
//! semantics are modeled: `pacia` XORs the truncated MAC into the upper bits
//! of the register, `autiza` recomputes it with a zero modifier and traps on
//! mismatch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(MIX_MUL_1);
    x ^= x >> 27;
    x = x.wrapping_mul(MIX_MUL_2);
    x ^= x >> 31;
    x
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("key must be exactly 32 hex digits, got {0} characters")]
    Length(usize),
    #[error("key contains a non-hex character")]
    NotHex,
}

/// 128-bit instruction key A analogue.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PacKey {
    pub k0: u64,
    pub k1: u64,
}

impl PacKey {
    pub const fn new(k0: u64, k1: u64) -> Self {
        Self { k0, k1 }
    }

    /// Parses a 32-hex-digit string; the first 16 digits are `k0`.
    pub fn from_hex(s: &str) -> Result<Self, KeyError> {
        let s = s.trim();
        let s = s.strip_prefix("0x").unwrap_or(s);
        if s.len() != 32 {
            return Err(KeyError::Length(s.len()));
        }
        let bytes = hex::decode(s).map_err(|_| KeyError::NotHex)?;
        let k0 = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
        let k1 = u64::from_be_bytes(bytes[8..].try_into().expect("8 bytes"));
        Ok(Self { k0, k1 })
    }

    pub fn to_hex(&self) -> String {
        format!("{:016x}{:016x}", self.k0, self.k1)
    }

    /// Public fingerprint of the key. Artifacts store this instead of the key.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(b"fipac-key-fingerprint");
        h.update(self.k0.to_be_bytes());
        h.update(self.k1.to_be_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

impl fmt::Debug for PacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // never print key material
        write!(f, "PacKey({})", &self.fingerprint()[..8])
    }
}

impl FromStr for PacKey {
    type Err = KeyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid PAC width {0}: must be within 1..=32")]
pub struct PacWidthError(pub u32);

/// Split of a 64-bit word into PAC field and address payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPacConfig", into = "RawPacConfig")]
pub struct PacConfig {
    pac_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct RawPacConfig {
    va_bits: u32,
    pac_bits: u32,
}

impl TryFrom<RawPacConfig> for PacConfig {
    type Error = PacWidthError;
    fn try_from(raw: RawPacConfig) -> Result<Self, Self::Error> {
        if raw.va_bits + raw.pac_bits != 64 {
            return Err(PacWidthError(raw.pac_bits));
        }
        PacConfig::with_pac_bits(raw.pac_bits)
    }
}

impl From<PacConfig> for RawPacConfig {
    fn from(c: PacConfig) -> Self {
        RawPacConfig { va_bits: c.va_bits(), pac_bits: c.pac_bits }
    }
}

impl Default for PacConfig {
    fn default() -> Self {
        Self { pac_bits: 16 }
    }
}

impl PacConfig {
    pub fn with_pac_bits(pac_bits: u32) -> Result<Self, PacWidthError> {
        if (1..=32).contains(&pac_bits) {
            Ok(Self { pac_bits })
        } else {
            Err(PacWidthError(pac_bits))
        }
    }

    pub fn pac_bits(&self) -> u32 {
        self.pac_bits
    }

    pub fn va_bits(&self) -> u32 {
        64 - self.pac_bits
    }

    /// Mask selecting the payload bits `[va_bits-1:0]`.
    pub fn va_mask(&self) -> u64 {
        (1u64 << self.va_bits()) - 1
    }

    /// Mask selecting the PAC field `[63:va_bits]`.
    pub fn pac_mask(&self) -> u64 {
        !self.va_mask()
    }

    pub fn payload(&self, v: u64) -> u64 {
        v & self.va_mask()
    }

    pub fn pac_field(&self, v: u64) -> u64 {
        v & self.pac_mask()
    }
}

/// Keyed PRF standing in for QARMA.
pub fn compute_pac(payload: u64, modifier: u64, key: PacKey, cfg: PacConfig) -> u64 {
    let d = payload & cfg.va_mask();
    mix64(mix64(d ^ key.k0) ^ modifier ^ key.k1) ^ key.k0
}

/// `PACIA Xd, Xm` with EnhancedPAC2: XOR the truncated PAC into the upper bits.
pub fn pacia(state: u64, modifier: u64, key: PacKey, cfg: PacConfig) -> u64 {
    let pac = compute_pac(state, modifier, key, cfg);
    state ^ cfg.pac_field(pac)
}

/// Builds the valid signed form of `payload` under a zero modifier, i.e. the
/// only value `autiza` accepts for that payload.
pub fn sign_zero(payload: u64, key: PacKey, cfg: PacConfig) -> u64 {
    let p = cfg.payload(payload);
    p | cfg.pac_field(compute_pac(p, 0, key, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("PAC authentication failure on {value:#018x}")]
pub struct AuthFailure {
    pub value: u64,
}

/// `AUTIZA Xd` with FPAC: returns the stripped payload or traps.
pub fn autiza(value: u64, key: PacKey, cfg: PacConfig) -> Result<u64, AuthFailure> {
    let payload = cfg.payload(value);
    let expected = cfg.pac_field(compute_pac(payload, 0, key, cfg));
    if cfg.pac_field(value) == expected {
        Ok(payload)
    } else {
        Err(AuthFailure { value })
    }
}

/// One line of the cross-implementation conformance file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestVector {
    #[serde(with = "crate::hexfmt")]
    pub payload: u64,
    #[serde(with = "crate::hexfmt")]
    pub modifier: u64,
    pub key: String,
    pub va_bits: u32,
    #[serde(with = "crate::hexfmt")]
    pub pac: u64,
    #[serde(with = "crate::hexfmt")]
    pub pacia: u64,
}

/// Deterministic conformance vectors. The first vector is the all-zero case.
pub fn test_vectors(count: usize, seed: u64, cfg: PacConfig) -> Vec<TestVector> {
    let mut s = seed;
    let mut next = move || {
        s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix64(s)
    };
    (0..count)
        .map(|i| {
            let (payload, modifier, key) = if i == 0 {
                (0, 0, PacKey::new(0, 0))
            } else {
                (next(), next(), PacKey::new(next(), next()))
            };
            TestVector {
                payload,
                modifier,
                key: key.to_hex(),
                va_bits: cfg.va_bits(),
                pac: compute_pac(payload, modifier, key, cfg),
                pacia: pacia(payload, modifier, key, cfg),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TEST_KEY: PacKey = PacKey::new(0x0123_4567_89AB_CDEF, 0x89AB_CDEF_0123_4567);

    #[test]
    fn zero_inputs_give_zero_pac() {
        // the finalizer fixes 0, so the whole construction collapses to 0
        assert_eq!(compute_pac(0, 0, PacKey::new(0, 0), PacConfig::default()), 0);
    }

    #[test]
    fn frozen_values() {
        let cfg = PacConfig::default();
        assert_eq!(compute_pac(0x40_0000, 0x40_0004, TEST_KEY, cfg), 0xe05d_0ae9_b7f5_45d6);
        assert_eq!(pacia(0x40_0000, 0x40_0004, TEST_KEY, cfg), 0xe05d_0000_0040_0000);
        let c8 = PacConfig::with_pac_bits(8).unwrap();
        assert_eq!(pacia(0x40_0000, 0x40_0004, TEST_KEY, c8), 0xe000_0000_0040_0000);
        assert_eq!(compute_pac(0xdead_beef, 0x1234, TEST_KEY, cfg), 0xa59b_41f2_82b3_9e6c);
    }

    #[test]
    fn deterministic() {
        let cfg = PacConfig::default();
        assert_eq!(
            compute_pac(17, 99, TEST_KEY, cfg),
            compute_pac(17, 99, TEST_KEY, cfg)
        );
    }

    #[test]
    fn modifier_flip_changes_output() {
        let cfg = PacConfig::default();
        let mut s = 7u64;
        for _ in 0..10_000 {
            s = mix64(s.wrapping_add(1));
            let (x, m) = (s, mix64(s ^ 0x55));
            let k = PacKey::new(mix64(m), mix64(x ^ m));
            assert_ne!(compute_pac(x, m, k, cfg), compute_pac(x, m ^ 1, k, cfg));
        }
    }

    #[test]
    fn bits_above_va_are_ignored() {
        let cfg = PacConfig::default();
        assert_eq!(
            compute_pac(0xffff_0000_0000_1234, 5, TEST_KEY, cfg),
            compute_pac(0x1234, 5, TEST_KEY, cfg)
        );
    }

    #[test]
    fn key_hex_round_trip_and_errors() {
        let k = PacKey::from_hex("0123456789abcdef89abcdef01234567").unwrap();
        assert_eq!(k, TEST_KEY);
        assert_eq!(k.to_hex(), "0123456789abcdef89abcdef01234567");
        assert_eq!(PacKey::from_hex("abc"), Err(KeyError::Length(3)));
        assert_eq!(
            PacKey::from_hex("0123456789abcdef89abcdef0123456z"),
            Err(KeyError::NotHex)
        );
    }

    #[test]
    fn width_bounds() {
        assert!(PacConfig::with_pac_bits(0).is_err());
        assert!(PacConfig::with_pac_bits(33).is_err());
        let c = PacConfig::with_pac_bits(24).unwrap();
        assert_eq!(c.va_bits(), 40);
        assert_eq!(c.va_mask(), (1 << 40) - 1);
    }

    #[test]
    fn single_pac_bit_flip_traps() {
        let cfg = PacConfig::default();
        let signed = pacia(0x1234, 0, TEST_KEY, cfg);
        for bit in cfg.va_bits()..64 {
            assert!(autiza(signed ^ (1 << bit), TEST_KEY, cfg).is_err());
        }
    }

    #[test]
    fn accumulated_pacs_do_not_authenticate() {
        // XOR-sum of two PACs under distinct modifiers is not itself a PAC
        let cfg = PacConfig::default();
        let trials = 100_000u64;
        let mut passed = 0u64;
        for i in 0..trials {
            let k = PacKey::new(mix64(i), mix64(i ^ 0xabcdef));
            let m1 = mix64(i.wrapping_mul(3) + 1) | 1;
            let m2 = m1.wrapping_add(8);
            let v = pacia(pacia(0, m1, k, cfg), m2, k, cfg);
            if autiza(v, k, cfg).is_ok() {
                passed += 1;
            }
        }
        // expect ~1.5 passes; 3-sigma bound around 2^-16 * 1e5
        let p = 1.0 / 65536.0;
        let mean = p * trials as f64;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!((passed as f64) <= mean + 3.0 * sd + 1.0, "passed = {passed}");
    }

    #[test]
    fn truncated_collision_rate_chi_square() {
        for bits in [8u32, 16] {
            let cfg = PacConfig::with_pac_bits(bits).unwrap();
            let n = 200_000u64;
            let mut hits = 0u64;
            for i in 0..n {
                let k = PacKey::new(mix64(i + 11), mix64(i + 12));
                let a = cfg.pac_field(compute_pac(0, mix64(i), k, cfg));
                let b = cfg.pac_field(compute_pac(0, mix64(i) ^ 0x40, k, cfg));
                if a == b {
                    hits += 1;
                }
            }
            let p = (-(bits as f64)).exp2();
            let expected = n as f64 * p;
            // one-degree-of-freedom chi-square with two cells; 10.83 is the 0.1% cut-off
            let chi = (hits as f64 - expected).powi(2) / expected
                + (hits as f64 - expected).powi(2) / (n as f64 - expected);
            assert!(chi < 10.83, "bits={bits} hits={hits} expected={expected}");
        }
    }

    proptest! {
        #[test]
        fn pacia_is_an_involution(s: u64, m: u64, k0: u64, k1: u64, bits in 1u32..=32) {
            let cfg = PacConfig::with_pac_bits(bits).unwrap();
            let k = PacKey::new(k0, k1);
            prop_assert_eq!(pacia(pacia(s, m, k, cfg), m, k, cfg), s);
        }

        #[test]
        fn pacia_preserves_payload(s: u64, m: u64, k0: u64, k1: u64, bits in 1u32..=32) {
            let cfg = PacConfig::with_pac_bits(bits).unwrap();
            let v = pacia(s, m, PacKey::new(k0, k1), cfg);
            prop_assert_eq!(cfg.payload(v), cfg.payload(s));
        }

        #[test]
        fn sign_then_verify(p: u64, k0: u64, k1: u64, bits in 1u32..=32) {
            let cfg = PacConfig::with_pac_bits(bits).unwrap();
            let k = PacKey::new(k0, k1);
            let clean = cfg.payload(p);
            prop_assert_eq!(autiza(pacia(clean, 0, k, cfg), k, cfg), Ok(clean));
            prop_assert_eq!(sign_zero(clean, k, cfg), pacia(clean, 0, k, cfg));
        }
    }
}
