//! Chain-drafted speculative decoding of 7-token action slices.
//!
//! A slice is decoded in draft/verify rounds. Each round drafts up to
//! `depth` tokens, verifies them with one verifier call, and scans for the
//! first rejected position `p`. Under relaxed acceptance a draft token is
//! kept when its id is within `r` of the verifier's token.
//!
//! On a rejection in the slice's first round with compensation enabled,
//! the remaining positions `p+1..6` are filled from the Kalman bank instead
//! of spending further verifier calls. Otherwise the verifier's token is
//! taken at `p` and a new round starts at `p+1`.

mod episode;
mod trace;

pub use episode::{run_episode, EngineConfig, EngineMode, Environment, EpisodeOutcome};
pub use trace::{afep_pooled, EpisodeTrace, SliceRecord};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{
    action_to_token, decode_slice, snap_gripper, token_distance, ActionSlice, NormKey, TokenId,
    TokenSlice, DOF, GRIPPER,
};
use crate::error::{Error, Result};
use crate::kinematics::KfBank;

/// Draft model stand-in, conditioned on an observation `O`.
pub trait DraftOracle<O> {
    /// Drafts `depth` tokens for positions `prefix.len()..prefix.len() + depth`.
    fn draft(&mut self, obs: &O, prefix: &[TokenId], depth: usize) -> Result<Vec<TokenId>>;
}

/// Verification model stand-in.
pub trait VerifyOracle<O> {
    /// Returns the verifier's token at every drafted position in one call.
    fn verify(&mut self, obs: &O, prefix: &[TokenId], drafted: &[TokenId]) -> Result<Vec<TokenId>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptStatus {
    Exact,
    Relaxed,
    Rejected,
}

impl AcceptStatus {
    pub fn is_accepted(self) -> bool {
        self != AcceptStatus::Rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceOutcome {
    pub status: AcceptStatus,
    pub draft_id: TokenId,
    pub true_id: TokenId,
    pub position: usize,
}

/// Where a slice position's final token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Draft,
    VerifyCorrected,
    Kf,
}

/// Which token fills the first rejected position when compensating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PSource {
    #[default]
    Verify,
    Kf,
}

impl FromStr for PSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verify" => Ok(PSource::Verify),
            "kf" => Ok(PSource::Kf),
            other => Err(Error::Config(format!(
                "comp.p_source must be verify|kf, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for PSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PSource::Verify => "verify",
            PSource::Kf => "kf",
        })
    }
}

pub fn relaxed_accept(draft_id: TokenId, true_id: TokenId, r: u32, position: usize) -> AcceptanceOutcome {
    let d = token_distance(draft_id, true_id);
    let status = if d == 0 {
        AcceptStatus::Exact
    } else if d <= r {
        AcceptStatus::Relaxed
    } else {
        AcceptStatus::Rejected
    };
    AcceptanceOutcome {
        status,
        draft_id,
        true_id,
        position,
    }
}

/// Per-slice decoding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceParams {
    /// Relaxed acceptance threshold in token ids.
    pub r: u32,
    pub depth: usize,
    pub compensation: bool,
    pub p_source: PSource,
    /// Which step of the Kalman rollout fills compensated positions.
    pub pl: usize,
}

impl Default for SliceParams {
    fn default() -> Self {
        SliceParams {
            r: 0,
            depth: 4,
            compensation: false,
            p_source: PSource::Verify,
            pl: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceResult {
    pub tokens: TokenSlice,
    pub actions: ActionSlice,
    /// First rejected position, or 7 if every drafted token was accepted.
    pub first_error_position: usize,
    pub sources: [Source; DOF],
    pub outcomes: Vec<AcceptanceOutcome>,
    pub verify_calls: u32,
    pub draft_calls: u32,
    pub comp_fired: bool,
}

impl SliceResult {
    pub fn kf_positions(&self) -> usize {
        self.sources.iter().filter(|s| **s == Source::Kf).count()
    }

    pub fn outcome_at(&self, position: usize) -> Option<&AcceptanceOutcome> {
        self.outcomes.iter().find(|o| o.position == position)
    }
}

/// Decodes one slice and records its actions in `bank`.
pub fn decode_slice_sd<O, D, V>(
    obs: &O,
    draft: &mut D,
    verify: &mut V,
    params: &SliceParams,
    bank: &mut KfBank,
    key: &NormKey,
) -> Result<SliceResult>
where
    D: DraftOracle<O> + ?Sized,
    V: VerifyOracle<O> + ?Sized,
{
    if !(1..=DOF).contains(&params.depth) {
        return Err(Error::InputDomain(format!(
            "draft depth must be in 1..=7, got {}",
            params.depth
        )));
    }
    if params.compensation && bank.is_empty() {
        return Err(Error::State("compensation enabled with no action context".into()));
    }

    let mut tokens: Vec<TokenId> = Vec::with_capacity(DOF);
    let mut sources = [Source::Draft; DOF];
    let mut outcomes = Vec::with_capacity(DOF);
    let mut first_error = DOF;
    let mut verify_calls = 0u32;
    let mut draft_calls = 0u32;
    let mut comp_fired = false;

    while tokens.len() < DOF {
        let start = tokens.len();
        let n = params.depth.min(DOF - start);
        let drafted = draft.draft(obs, &tokens, n)?;
        draft_calls += 1;
        check_tokens("draft", &drafted, n, key)?;
        let truths = verify.verify(obs, &tokens, &drafted)?;
        verify_calls += 1;
        check_tokens("verify", &truths, n, key)?;

        let mut rejected = None;
        for (i, (&d, &t)) in drafted.iter().zip(&truths).enumerate() {
            let outcome = relaxed_accept(d, t, params.r, start + i);
            outcomes.push(outcome);
            if outcome.status.is_accepted() {
                sources[start + i] = Source::Draft;
                tokens.push(d);
            } else {
                rejected = Some(start + i);
                break;
            }
        }

        let Some(p) = rejected else { continue };
        first_error = first_error.min(p);
        let corrected = truths[p - start];

        // Only a first-round rejection is compensated, so a compensated
        // slice always costs exactly one verifier call.
        if params.compensation && verify_calls == 1 && p + 1 < DOF {
            let predicted = *bank
                .kf_predict(params.pl)?
                .last()
                .expect("kf_predict returns pl >= 1 slices");
            let kf_token = |dof: usize| -> Result<TokenId> {
                let v = predicted.0[dof];
                if dof == GRIPPER {
                    snap_gripper(v, key)
                } else {
                    action_to_token(v, dof, key)
                }
            };
            match params.p_source {
                PSource::Verify => {
                    tokens.push(corrected);
                    sources[p] = Source::VerifyCorrected;
                }
                PSource::Kf => {
                    tokens.push(kf_token(p)?);
                    sources[p] = Source::Kf;
                }
            }
            for dof in p + 1..DOF {
                tokens.push(kf_token(dof)?);
                sources[dof] = Source::Kf;
            }
            comp_fired = true;
            break;
        }

        tokens.push(corrected);
        sources[p] = Source::VerifyCorrected;
    }

    let tokens = TokenSlice(tokens.try_into().expect("slice has exactly 7 tokens"));
    let actions = decode_slice(&tokens, key)?;
    bank.push_slice(&actions)?;

    Ok(SliceResult {
        tokens,
        actions,
        first_error_position: first_error,
        sources,
        outcomes,
        verify_calls,
        draft_calls,
        comp_fired,
    })
}

fn check_tokens(who: &str, ids: &[TokenId], expected: usize, key: &NormKey) -> Result<()> {
    if ids.len() != expected {
        return Err(Error::Oracle(format!(
            "{who} oracle returned {} tokens, expected {expected}",
            ids.len()
        )));
    }
    if let Some(bad) = ids.iter().find(|&&id| id >= key.vocab_size()) {
        return Err(Error::Oracle(format!(
            "{who} oracle returned token {bad} outside vocabulary"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{KfParams, DEFAULT_AC};

    /// Replays a fixed draft slice, ignoring the observation.
    struct Scripted {
        draft: [TokenId; DOF],
    }

    impl DraftOracle<()> for Scripted {
        fn draft(&mut self, _: &(), prefix: &[TokenId], depth: usize) -> Result<Vec<TokenId>> {
            Ok(self.draft[prefix.len()..prefix.len() + depth].to_vec())
        }
    }

    struct Truth([TokenId; DOF]);

    impl VerifyOracle<()> for Truth {
        fn verify(&mut self, _: &(), prefix: &[TokenId], drafted: &[TokenId]) -> Result<Vec<TokenId>> {
            Ok(self.0[prefix.len()..prefix.len() + drafted.len()].to_vec())
        }
    }

    fn warm_bank() -> KfBank {
        let mut bank = KfBank::new(KfParams::default(), DEFAULT_AC).unwrap();
        for _ in 0..3 {
            bank.push_slice(&ActionSlice([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        }
        bank
    }

    #[test]
    fn relaxed_accept_examples() {
        assert_eq!(relaxed_accept(149, 151, 14, 1).status, AcceptStatus::Relaxed);
        assert_eq!(relaxed_accept(149, 163, 14, 1).status, AcceptStatus::Relaxed);
        assert_eq!(relaxed_accept(140, 140, 0, 0).status, AcceptStatus::Exact);
        assert_eq!(relaxed_accept(183, 128, 14, 2).status, AcceptStatus::Rejected);
        assert_eq!(relaxed_accept(150, 151, 0, 2).status, AcceptStatus::Rejected);
    }

    #[test]
    fn worked_example_compensates_after_correction() {
        let key = NormKey::default();
        let mut draft = Scripted {
            draft: [140, 149, 183, 0, 0, 0, 0],
        };
        let mut verify = Truth([140, 151, 128, 130, 131, 132, 255]);
        let mut bank = warm_bank();
        let params = SliceParams {
            r: 14,
            depth: 3,
            compensation: true,
            ..SliceParams::default()
        };
        let res = decode_slice_sd(&(), &mut draft, &mut verify, &params, &mut bank, &key).unwrap();
        assert_eq!(&res.tokens.0[..3], &[140, 149, 128]);
        assert_eq!(res.first_error_position, 2);
        assert_eq!(res.verify_calls, 1);
        assert!(res.comp_fired);
        assert_eq!(
            res.sources,
            [
                Source::Draft,
                Source::Draft,
                Source::VerifyCorrected,
                Source::Kf,
                Source::Kf,
                Source::Kf,
                Source::Kf
            ]
        );
        let statuses: Vec<_> = res.outcomes.iter().map(|o| o.status).collect();
        assert_eq!(
            statuses,
            [AcceptStatus::Exact, AcceptStatus::Relaxed, AcceptStatus::Rejected]
        );
        // the bank saw only zero motion, so compensated positions decode near zero
        assert_eq!(res.tokens.0[3], 128);
        assert_eq!(res.tokens.0[6], 255);
        assert_eq!(bank.cache(0).len(), 4);
    }

    #[test]
    fn kf_p_source_replaces_the_corrected_token() {
        let key = NormKey::default();
        let mut draft = Scripted {
            draft: [140, 149, 183, 0, 0, 0, 0],
        };
        let mut verify = Truth([140, 151, 128, 130, 131, 132, 255]);
        let mut bank = warm_bank();
        let params = SliceParams {
            r: 14,
            depth: 3,
            compensation: true,
            p_source: PSource::Kf,
            ..SliceParams::default()
        };
        let res = decode_slice_sd(&(), &mut draft, &mut verify, &params, &mut bank, &key).unwrap();
        assert_eq!(res.sources[2], Source::Kf);
        assert_eq!(res.tokens.0[2], 128);
        assert_eq!(res.kf_positions(), 5);
    }

    #[test]
    fn perfect_draft_needs_ceil_seven_over_depth_rounds() {
        let key = NormKey::default();
        let truth = [10, 20, 30, 40, 50, 60, 255];
        for depth in 1..=7 {
            let mut draft = Scripted { draft: truth };
            let mut verify = Truth(truth);
            let mut bank = warm_bank();
            let params = SliceParams {
                depth,
                compensation: true,
                ..SliceParams::default()
            };
            let res = decode_slice_sd(&(), &mut draft, &mut verify, &params, &mut bank, &key).unwrap();
            assert_eq!(res.first_error_position, DOF);
            assert_eq!(res.kf_positions(), 0);
            assert_eq!(res.verify_calls as usize, DOF.div_ceil(depth));
            assert_eq!(res.tokens.0, truth);
        }
    }

    #[test]
    fn classic_resample_restarts_after_rejection() {
        let key = NormKey::default();
        let truth = [10, 20, 30, 40, 50, 60, 255];
        let mut draft = Scripted {
            draft: [10, 99, 30, 40, 50, 61, 255],
        };
        let mut verify = Truth(truth);
        let mut bank = warm_bank();
        let params = SliceParams {
            depth: 4,
            ..SliceParams::default()
        };
        let res = decode_slice_sd(&(), &mut draft, &mut verify, &params, &mut bank, &key).unwrap();
        // round 1: 0 ok, 1 rejected; round 2: 2..5, 5 rejected; round 3: 6
        assert_eq!(res.verify_calls, 3);
        assert_eq!(res.draft_calls, 3);
        assert_eq!(res.first_error_position, 1);
        assert_eq!(res.tokens.0, truth);
        assert_eq!(res.sources[1], Source::VerifyCorrected);
        assert_eq!(res.sources[5], Source::VerifyCorrected);
        assert_eq!(res.outcomes.len(), 7);
    }

    #[test]
    fn second_round_rejection_is_not_compensated() {
        let key = NormKey::default();
        let truth = [10, 20, 30, 40, 50, 60, 255];
        let mut draft = Scripted {
            draft: [10, 20, 30, 40, 90, 60, 255],
        };
        let mut verify = Truth(truth);
        let mut bank = warm_bank();
        let params = SliceParams {
            depth: 4,
            compensation: true,
            ..SliceParams::default()
        };
        let res = decode_slice_sd(&(), &mut draft, &mut verify, &params, &mut bank, &key).unwrap();
        assert!(!res.comp_fired);
        assert_eq!(res.first_error_position, 4);
        assert_eq!(res.verify_calls, 3);
    }

    #[test]
    fn errors_surface() {
        let key = NormKey::default();
        let truth = [10; DOF];
        let mut empty = KfBank::new(KfParams::default(), 10).unwrap();
        let params = SliceParams {
            compensation: true,
            ..SliceParams::default()
        };
        let res = decode_slice_sd(
            &(),
            &mut Scripted { draft: truth },
            &mut Truth(truth),
            &params,
            &mut empty,
            &key,
        );
        assert!(matches!(res, Err(Error::State(_))));

        let res = decode_slice_sd(
            &(),
            &mut Scripted { draft: [999; DOF] },
            &mut Truth(truth),
            &SliceParams::default(),
            &mut empty,
            &key,
        );
        assert!(matches!(res, Err(Error::Oracle(_))));
    }
}
