//! Acceptance-threshold adjustment driven by kinematic variability.
//!
//! Each slice produces a K_var step value; the change from the previous
//! step, ΔK, moves the threshold `r`. Two update rules are provided:
//!
//! * `literal`: `Δr = (r_max - r_min) * exp((-ΔK / K_ref)^φ)` added to `r`;
//!   once `r <= r_min` the loop stops and `r` stays frozen at `r_min`.
//! * `rectified` (default): `Δr = -sign(ΔK) * τ * (r_max - r_min) *
//!   exp(-|ΔK / K_ref|^φ)`, clamped to `[r_min, r_max]`. Rising variability
//!   lowers `r`. With `φ < 0` the step grows with `|ΔK|`, so this mode
//!   requires a negative exponent.
//!
//! In both rules `ΔK = 0` leaves `r` untouched.

mod calibrate;

pub use calibrate::{calibrate, replay_trace, CalibrationGrid, CalibrationRow, CalibrationTable, LabeledTrace, ReplayStats, TABLE_HEADER};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_R_MAX: f64 = 15.0;
pub const DEFAULT_R_MIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Literal,
    #[default]
    Rectified,
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ThresholdMode::Literal),
            "rectified" => Ok(ThresholdMode::Rectified),
            other => Err(Error::Config(format!(
                "threshold.mode must be literal|rectified, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Literal => "literal",
            ThresholdMode::Rectified => "rectified",
        })
    }
}

/// What a single `adjust` call did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjustEvent {
    /// ΔK was zero.
    Unchanged,
    Adjusted { delta_kvar: f64, delta_r: f64 },
    /// The update produced a non-finite value; `r` was left alone.
    Degenerate { delta_kvar: f64 },
    /// Literal mode hit `r <= r_min` and stopped adjusting.
    Break { delta_r: f64 },
    /// Literal mode after a break.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub r: f64,
    pub r_max: f64,
    pub r_min: f64,
    /// Step-size multiplier (rectified mode only).
    pub tau: f64,
    pub phi: f64,
    /// Reference variability from pre-sampling.
    pub kvar_ref: f64,
    pub prev_kvar: f64,
    frozen: bool,
}

impl ThresholdState {
    /// Starts at `r = r_max` with no previous variability.
    pub fn new(r_max: f64, r_min: f64, tau: f64, phi: f64, kvar_ref: f64) -> Result<Self> {
        let s = ThresholdState {
            r: r_max,
            r_max,
            r_min,
            tau,
            phi,
            kvar_ref,
            prev_kvar: 0.0,
            frozen: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_r(mut self, r: f64) -> Result<Self> {
        self.r = r;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.r, self.r_max, self.r_min, self.tau, self.phi, self.kvar_ref, self.prev_kvar];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputDomain(format!("non-finite threshold state {self:?}")));
        }
        if !(self.r_min >= 0.0 && self.r_max > self.r_min) {
            return Err(Error::InputDomain(format!(
                "need r_max > r_min >= 0, got r_max={} r_min={}",
                self.r_max, self.r_min
            )));
        }
        if !(self.r_min..=self.r_max).contains(&self.r) {
            return Err(Error::InputDomain(format!(
                "r={} outside [{}, {}]",
                self.r, self.r_min, self.r_max
            )));
        }
        if self.kvar_ref <= 0.0 {
            return Err(Error::InputDomain(format!("kvar_ref must be > 0, got {}", self.kvar_ref)));
        }
        if self.prev_kvar < 0.0 {
            return Err(Error::InputDomain("prev_kvar must be >= 0".into()));
        }
        Ok(())
    }

    /// Checks the parameters the given mode needs.
    pub fn validate_for(&self, mode: ThresholdMode) -> Result<()> {
        self.validate()?;
        if mode == ThresholdMode::Rectified && !(self.phi < 0.0 && self.tau > 0.0) {
            return Err(Error::Config(format!(
                "rectified threshold mode needs phi < 0 and tau > 0, got phi={} tau={}",
                self.phi, self.tau
            )));
        }
        Ok(())
    }

    /// Threshold as an integer token distance.
    pub fn applied(&self) -> u32 {
        self.r.floor() as u32
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn literal_delta_r(&self, delta_kvar: f64) -> f64 {
        (self.r_max - self.r_min) * (-delta_kvar / self.kvar_ref).powf(self.phi).exp()
    }

    pub fn rectified_delta_r(&self, delta_kvar: f64) -> f64 {
        let magnitude = (delta_kvar / self.kvar_ref).abs().powf(self.phi);
        -delta_kvar.signum() * self.tau * (self.r_max - self.r_min) * (-magnitude).exp()
    }

    pub fn adjust(&mut self, kvar_step: f64, mode: ThresholdMode) -> Result<AdjustEvent> {
        if !(kvar_step >= 0.0 && kvar_step.is_finite()) {
            return Err(Error::InputDomain(format!(
                "K_var step must be finite and >= 0, got {kvar_step}"
            )));
        }
        if self.frozen {
            return Ok(AdjustEvent::Frozen);
        }
        let delta_kvar = kvar_step - self.prev_kvar;
        self.prev_kvar = kvar_step;
        if delta_kvar == 0.0 {
            return Ok(AdjustEvent::Unchanged);
        }
        match mode {
            ThresholdMode::Literal => {
                let delta_r = self.literal_delta_r(delta_kvar);
                if !delta_r.is_finite() {
                    return Ok(AdjustEvent::Degenerate { delta_kvar });
                }
                let next = self.r + delta_r;
                if next <= self.r_min {
                    self.r = self.r_min;
                    self.frozen = true;
                    return Ok(AdjustEvent::Break { delta_r });
                }
                self.r = next.min(self.r_max);
                Ok(AdjustEvent::Adjusted { delta_kvar, delta_r })
            }
            ThresholdMode::Rectified => {
                let delta_r = self.rectified_delta_r(delta_kvar);
                if !delta_r.is_finite() {
                    return Ok(AdjustEvent::Degenerate { delta_kvar });
                }
                self.r = (self.r + delta_r).clamp(self.r_min, self.r_max);
                Ok(AdjustEvent::Adjusted { delta_kvar, delta_r })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state() -> ThresholdState {
        ThresholdState::new(15.0, 5.0, 1.0, -1.0, 0.05).unwrap()
    }

    #[test]
    fn zero_delta_is_neutral() {
        for mode in [ThresholdMode::Literal, ThresholdMode::Rectified] {
            let mut s = state();
            s.prev_kvar = 0.2;
            let before = s.r;
            assert_eq!(s.adjust(0.2, mode).unwrap(), AdjustEvent::Unchanged);
            assert_eq!(s.r, before);
        }
    }

    #[test]
    fn rectified_rising_variability_lowers_r() {
        let mut s = state();
        let mut prev = s.r;
        for k in 1..40 {
            s.adjust(0.05 * k as f64, ThresholdMode::Rectified).unwrap();
            assert!(s.r <= prev);
            prev = s.r;
        }
        assert_eq!(s.r, 5.0);
    }

    #[test]
    fn rectified_recurrence_by_hand() {
        // r1 = 15 - 10 * exp(-(0.1 / 0.05)^-1) = 15 - 10 e^-0.5
        let mut s = ThresholdState::new(15.0, 5.0, 1.0, -1.0, 0.05).unwrap();
        s.adjust(0.1, ThresholdMode::Rectified).unwrap();
        let r1 = 15.0 - 10.0 * (-0.5f64).exp();
        assert!((s.r - r1).abs() < 1e-12);
        // falling by 0.1 raises r by the same amount
        s.adjust(0.0, ThresholdMode::Rectified).unwrap();
        assert!((s.r - 15.0).abs() < 1e-12);
    }

    #[test]
    fn literal_matches_formula_and_freezes() {
        let mut s = ThresholdState::new(15.0, 5.0, 1.0, 2.0, 0.5).unwrap().with_r(6.0).unwrap();
        s.prev_kvar = 0.3;
        let expected = 10.0 * ((0.3f64 - 0.1) / 0.5).powf(2.0).exp();
        match s.adjust(0.1, ThresholdMode::Literal).unwrap() {
            AdjustEvent::Adjusted { delta_r, .. } => assert!((delta_r - expected).abs() < 1e-12),
            e => panic!("{e:?}"),
        }
        assert_eq!(s.r, 15.0);

        // odd integer exponent, huge rise: exp underflows to 0 and r stays at r_min
        let mut s = ThresholdState::new(15.0, 5.0, 1.0, 1.0, 0.001).unwrap().with_r(5.0).unwrap();
        assert!(matches!(s.adjust(10.0, ThresholdMode::Literal).unwrap(), AdjustEvent::Break { .. }));
        assert!(s.is_frozen());
        assert_eq!(s.adjust(0.0, ThresholdMode::Literal).unwrap(), AdjustEvent::Frozen);
        assert_eq!(s.r, 5.0);
    }

    #[test]
    fn literal_fractional_power_of_negative_base_is_degenerate() {
        let mut s = ThresholdState::new(15.0, 5.0, 1.0, 0.5, 0.1).unwrap();
        let r = s.r;
        assert!(matches!(
            s.adjust(0.2, ThresholdMode::Literal).unwrap(),
            AdjustEvent::Degenerate { .. }
        ));
        assert_eq!(s.r, r);
    }

    #[test]
    fn validation() {
        assert!(ThresholdState::new(5.0, 5.0, 1.0, -1.0, 0.1).is_err());
        assert!(ThresholdState::new(15.0, 5.0, 1.0, -1.0, 0.0).is_err());
        assert!(state().with_r(16.0).is_err());
        let pos_phi = ThresholdState::new(15.0, 5.0, 1.0, 1.0, 0.1).unwrap();
        assert!(pos_phi.validate_for(ThresholdMode::Rectified).is_err());
        assert!(pos_phi.validate_for(ThresholdMode::Literal).is_ok());
        assert!(state().clone().adjust(-1.0, ThresholdMode::Rectified).is_err());
        assert_eq!(state().with_r(14.9).unwrap().applied(), 14);
    }

    proptest! {
        #[test]
        fn rectified_stays_clamped(steps in prop::collection::vec(0.0f64..2.0, 0..80), tau in 0.01f64..3.0, phi in -4.0f64..-0.1) {
            let mut s = ThresholdState::new(15.0, 5.0, tau, phi, 0.2).unwrap();
            for k in steps {
                s.adjust(k, ThresholdMode::Rectified).unwrap();
                prop_assert!(s.r >= 5.0 && s.r <= 15.0);
            }
        }

        #[test]
        fn rectified_monotone_response(a in 0.0f64..3.0, b in 0.0f64..3.0, r in 5.0f64..15.0, phi in -4.0f64..-0.1) {
            prop_assume!(a != b && a > 0.0 && b > 0.0);
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            let base = ThresholdState::new(15.0, 5.0, 1.0, phi, 0.3).unwrap().with_r(r).unwrap();
            let (mut sa, mut sb) = (base, base);
            sa.adjust(hi, ThresholdMode::Rectified).unwrap();
            sb.adjust(lo, ThresholdMode::Rectified).unwrap();
            prop_assert!(sa.r <= sb.r);
        }

        #[test]
        fn literal_never_moves_after_break(steps in prop::collection::vec(0.0f64..50.0, 1..40)) {
            let mut s = ThresholdState::new(15.0, 5.0, 1.0, 1.0, 0.001).unwrap().with_r(5.0).unwrap();
            s.adjust(100.0, ThresholdMode::Literal).unwrap();
            prop_assert!(s.is_frozen());
            for k in steps {
                s.adjust(k, ThresholdMode::Literal).unwrap();
                prop_assert_eq!(s.r, 5.0);
            }
        }
    }
}
