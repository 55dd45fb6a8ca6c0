//! Token/action conversion for 7-DoF action slices.
//!
//! Every DoF is discretized on a uniform grid of `vocab_size` bins spanning
//! `[lo, hi]`. A token decodes to the center of its bin:
//!
//! ```text
//! action = lo + (hi - lo) * (id + 0.5) / vocab_size
//! ```
//!
//! and an action encodes to the bin that contains it, clamped to the grid.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Degrees of freedom per action slice: X, Y, Z, θX, θY, θZ, G.
pub const DOF: usize = 7;

/// Index of the binary gripper DoF.
pub const GRIPPER: usize = 6;

pub const DOF_NAMES: [&str; DOF] = ["x", "y", "z", "rx", "ry", "rz", "g"];

pub const DEFAULT_VOCAB_SIZE: u32 = 256;

pub type TokenId = u32;

/// One action step as token identifiers, one per DoF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSlice(pub [TokenId; DOF]);

impl TokenSlice {
    pub fn ids(&self) -> &[TokenId; DOF] {
        &self.0
    }

    /// Checks every id against the key's vocabulary.
    pub fn validate(&self, key: &NormKey) -> Result<()> {
        for (dof, &id) in self.0.iter().enumerate() {
            if id >= key.vocab_size {
                return Err(Error::InputDomain(format!(
                    "token {id} at dof {dof} outside vocabulary of {}",
                    key.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// One action step as continuous values in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSlice(pub [f64; DOF]);

impl ActionSlice {
    pub const ZERO: ActionSlice = ActionSlice([0.0; DOF]);

    pub fn values(&self) -> &[f64; DOF] {
        &self.0
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(dof) => Err(Error::InputDomain(format!(
                "non-finite action {} at dof {dof}",
                self.0[dof]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DofRange {
    pub lo: f64,
    pub hi: f64,
}

impl DofRange {
    pub const UNIT: DofRange = DofRange { lo: -1.0, hi: 1.0 };

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Per-DoF de-normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormKey {
    ranges: [DofRange; DOF],
    vocab_size: u32,
}

impl Default for NormKey {
    fn default() -> Self {
        NormKey {
            ranges: [DofRange::UNIT; DOF],
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

impl NormKey {
    pub fn new(ranges: [DofRange; DOF], vocab_size: u32) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InputDomain(format!(
                "vocab_size must be at least 2, got {vocab_size}"
            )));
        }
        for (dof, r) in ranges.iter().enumerate() {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                return Err(Error::InputDomain(format!(
                    "dof {dof}: need finite lo < hi, got [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        Ok(NormKey { ranges, vocab_size })
    }

    /// Same range on every DoF.
    pub fn uniform(lo: f64, hi: f64, vocab_size: u32) -> Result<Self> {
        Self::new([DofRange { lo, hi }; DOF], vocab_size)
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn range(&self, dof: usize) -> DofRange {
        self.ranges[dof]
    }

    /// Action width of one token bin on `dof`.
    pub fn bin_width(&self, dof: usize) -> f64 {
        self.ranges[dof].width() / self.vocab_size as f64
    }

    /// Reads `vocab_size` (or `codec.vocab_size`) and `dof<i> = lo,hi`
    /// (or `codec.dof<i>`). Missing entries keep their defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut key = NormKey::default();
        for name in ["vocab_size", "codec.vocab_size"] {
            if let Some(v) = kv.get::<u32>(name)? {
                key.vocab_size = v;
            }
        }
        for dof in 0..DOF {
            for name in [format!("dof{dof}"), format!("codec.dof{dof}")] {
                let Some(raw) = kv.get_str(&name) else {
                    continue;
                };
                let parsed = raw
                    .split_once(',')
                    .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
                let Some((lo, hi)) = parsed else {
                    return Err(kv.parse_error(&name, format!("expected `lo,hi`, got `{raw}`")));
                };
                key.ranges[dof] = DofRange { lo, hi };
            }
        }
        Self::new(key.ranges, key.vocab_size)
            .map_err(|e| Error::Config(format!("{}: {e}", kv.path().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    /// Checks that every value lies inside its DoF's range.
    pub fn contains(&self, slice: &ActionSlice) -> bool {
        slice
            .0
            .iter()
            .zip(&self.ranges)
            .all(|(v, r)| *v >= r.lo && *v <= r.hi)
    }

    fn check_dof(dof: usize) -> Result<()> {
        if dof >= DOF {
            return Err(Error::InputDomain(format!("dof {dof} outside 0..{DOF}")));
        }
        Ok(())
    }
}

impl fmt::Display for NormKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "vocab_size = {}", self.vocab_size)?;
        for (dof, r) in self.ranges.iter().enumerate() {
            writeln!(f, "dof{dof} = {},{}", r.lo, r.hi)?;
        }
        Ok(())
    }
}

/// Center of bin `id` on `dof`'s grid.
pub fn token_to_action(id: TokenId, dof: usize, key: &NormKey) -> Result<f64> {
    NormKey::check_dof(dof)?;
    if id >= key.vocab_size {
        return Err(Error::InputDomain(format!(
            "token {id} outside vocabulary of {}",
            key.vocab_size
        )));
    }
    let r = key.ranges[dof];
    Ok(r.lo + r.width() * (id as f64 + 0.5) / key.vocab_size as f64)
}

/// Bin containing `value`, clamped to `[0, vocab_size - 1]`.
pub fn action_to_token(value: f64, dof: usize, key: &NormKey) -> Result<TokenId> {
    NormKey::check_dof(dof)?;
    if !value.is_finite() {
        return Err(Error::InputDomain(format!("non-finite action {value}")));
    }
    let r = key.ranges[dof];
    let scaled = ((value - r.lo) / r.width() * key.vocab_size as f64).floor();
    Ok(scaled.clamp(0.0, (key.vocab_size - 1) as f64) as TokenId)
}

/// Gripper commands are binary: pick whichever extreme bin is nearer.
pub fn snap_gripper(value: f64, key: &NormKey) -> Result<TokenId> {
    if !value.is_finite() {
        return Err(Error::InputDomain(format!("non-finite action {value}")));
    }
    let r = key.ranges[GRIPPER];
    let mid = 0.5 * (r.lo + r.hi);
    Ok(if value < mid { 0 } else { key.vocab_size - 1 })
}

pub fn decode_slice(tokens: &TokenSlice, key: &NormKey) -> Result<ActionSlice> {
    let mut out = [0.0; DOF];
    for (dof, (slot, &id)) in out.iter_mut().zip(&tokens.0).enumerate() {
        *slot = token_to_action(id, dof, key)?;
    }
    Ok(ActionSlice(out))
}

/// Tokenizes a slice; the gripper DoF is snapped to its two valid tokens.
pub fn encode_slice(actions: &ActionSlice, key: &NormKey) -> Result<TokenSlice> {
    let mut out = [0; DOF];
    for (dof, (slot, &v)) in out.iter_mut().zip(&actions.0).enumerate() {
        *slot = if dof == GRIPPER {
            snap_gripper(v, key)?
        } else {
            action_to_token(v, dof, key)?
        };
    }
    Ok(TokenSlice(out))
}

pub fn token_distance(a: TokenId, b: TokenId) -> u32 {
    a.abs_diff(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> NormKey {
        NormKey::default()
    }

    #[test]
    fn bin_center_examples() {
        assert_eq!(token_to_action(128, 0, &unit()).unwrap(), 0.00390625);
        let two = NormKey::uniform(-1.0, 1.0, 2).unwrap();
        assert_eq!(token_to_action(0, 0, &two).unwrap(), -0.5);
        assert_eq!(token_to_action(1, 0, &two).unwrap(), 0.5);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(action_to_token(0.00390625, 0, &unit()).unwrap(), 128);
        assert_eq!(action_to_token(-5.0, 0, &unit()).unwrap(), 0);
        assert_eq!(action_to_token(5.0, 0, &unit()).unwrap(), 255);
    }

    #[test]
    fn domain_errors() {
        assert!(token_to_action(256, 0, &unit()).is_err());
        assert!(token_to_action(0, 7, &unit()).is_err());
        assert!(action_to_token(f64::NAN, 0, &unit()).is_err());
        assert!(action_to_token(f64::INFINITY, 0, &unit()).is_err());
        assert!(NormKey::uniform(1.0, 1.0, 256).is_err());
        assert!(NormKey::uniform(-1.0, 1.0, 1).is_err());
    }

    #[test]
    fn decode_slice_boundaries_and_midpoint() {
        let key = unit();
        let mid = decode_slice(&TokenSlice([128; DOF]), &key).unwrap();
        // (hi - lo) / (2V) above the midpoint
        assert!(mid.0.iter().all(|&v| v == 2.0 / 512.0));
        let edges = decode_slice(&TokenSlice([0, 255, 0, 255, 0, 255, 0]), &key).unwrap();
        assert_eq!(edges.0[0], -1.0 + 2.0 / 512.0);
        assert_eq!(edges.0[1], 1.0 - 2.0 / 512.0);
    }

    #[test]
    fn worked_example_tokens_decode() {
        // -1 + 2 * (id + 0.5) / 256 by hand
        let a = decode_slice(&TokenSlice([140, 149, 128, 128, 128, 128, 255]), &unit()).unwrap();
        assert_eq!(a.0[0], 0.09765625);
        assert_eq!(a.0[1], 0.16796875);
        assert_eq!(a.0[2], 0.00390625);
        assert!(a.0.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn distances() {
        assert_eq!(token_distance(149, 151), 2);
        assert_eq!(token_distance(7, 7), 0);
        assert_eq!(token_distance(183, 128), 55);
    }

    #[test]
    fn distance_is_a_metric_small_vocab() {
        let v = 12u32;
        for a in 0..v {
            for b in 0..v {
                assert_eq!(token_distance(a, b), token_distance(b, a));
                assert_eq!(token_distance(a, b) == 0, a == b);
                for c in 0..v {
                    assert!(token_distance(a, c) <= token_distance(a, b) + token_distance(b, c));
                }
            }
        }
    }

    #[test]
    fn gripper_snaps_to_extremes() {
        let key = unit();
        assert_eq!(snap_gripper(0.3, &key).unwrap(), 255);
        assert_eq!(snap_gripper(-0.01, &key).unwrap(), 0);
        let t = encode_slice(&ActionSlice([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2]), &key).unwrap();
        assert_eq!(t.0[GRIPPER], 255);
    }

    #[test]
    fn norm_key_file_roundtrip() {
        let key = NormKey::new(
            [
                DofRange { lo: -2.0, hi: 2.0 },
                DofRange::UNIT,
                DofRange { lo: -0.5, hi: 1.5 },
                DofRange::UNIT,
                DofRange::UNIT,
                DofRange::UNIT,
                DofRange { lo: 0.0, hi: 1.0 },
            ],
            64,
        )
        .unwrap();
        let text = key.to_string();
        let parsed = NormKey::from_kv(&KvFile::parse(&text, "key.conf").unwrap()).unwrap();
        assert_eq!(parsed, key);
        let bad = KvFile::parse("dof0 = 1,-1\n", "bad.conf").unwrap();
        assert!(NormKey::from_kv(&bad).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_and_monotone(v in 2u32..1024, lo in -10.0f64..0.0, span in 0.01f64..20.0, dof in 0usize..DOF) {
            let key = NormKey::uniform(lo, lo + span, v).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 0..v {
                let a = token_to_action(k, dof, &key).unwrap();
                prop_assert!(a > prev);
                prev = a;
                prop_assert_eq!(action_to_token(a, dof, &key).unwrap(), k);
            }
        }
    }
}
