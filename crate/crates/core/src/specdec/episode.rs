use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{decode_slice_sd, AcceptStatus, DraftOracle, EpisodeTrace, PSource, SliceParams, SliceRecord, VerifyOracle};
use crate::codec::{token_to_action, ActionSlice, NormKey, DOF};
use crate::error::{Error, Result};
use crate::kinematics::{kin_variability, KfBank, KfParams, KinVar, DEFAULT_AC, DEFAULT_PL};
use crate::threshold::{ThresholdMode, ThresholdState};

/// A task the engine drives one slice at a time.
pub trait Environment {
    /// What the oracles condition on for the next slice.
    type Obs;

    fn observe(&self) -> Result<Self::Obs>;
    fn is_done(&self) -> bool;
    fn elapsed(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn apply(&mut self, actions: &ActionSlice) -> Result<()>;
    fn outcome(&self) -> EpisodeOutcome;
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub steps: usize,
    pub reached_goal: bool,
    pub succeeded: bool,
    pub deviation: f64,
    pub budget: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Strict acceptance, re-inference on every rejection.
    Naive,
    /// Relaxed acceptance at a fixed threshold, re-inference on rejection.
    FixedRelaxed,
    /// Kalman compensation plus variability-driven threshold.
    Kerv,
}

impl EngineMode {
    pub const ALL: [EngineMode; 3] = [EngineMode::Naive, EngineMode::FixedRelaxed, EngineMode::Kerv];
}

impl FromStr for EngineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(EngineMode::Naive),
            "fixed_relaxed" => Ok(EngineMode::FixedRelaxed),
            "kerv" => Ok(EngineMode::Kerv),
            other => Err(Error::Config(format!(
                "mode must be naive|fixed_relaxed|kerv, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for EngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineMode::Naive => "naive",
            EngineMode::FixedRelaxed => "fixed_relaxed",
            EngineMode::Kerv => "kerv",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: EngineMode,
    pub key: NormKey,
    pub depth: usize,
    /// Threshold used by `fixed_relaxed`.
    pub fixed_r: u32,
    /// Slices with compensation disabled after each compensation event.
    pub cooldown: usize,
    pub kf: KfParams,
    pub ac: usize,
    pub pl: usize,
    pub p_source: PSource,
    /// `kerv` ablation switches.
    pub compensation: bool,
    pub adjust: bool,
    pub threshold_mode: ThresholdMode,
    /// Initial threshold state; required in `kerv` mode.
    pub threshold: Option<ThresholdState>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: EngineMode::Naive,
            key: NormKey::default(),
            depth: 4,
            fixed_r: 9,
            cooldown: 4,
            kf: KfParams::default(),
            ac: DEFAULT_AC,
            pl: DEFAULT_PL,
            p_source: PSource::Verify,
            compensation: true,
            adjust: true,
            threshold_mode: ThresholdMode::Rectified,
            threshold: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=DOF).contains(&self.depth) {
            return Err(Error::Config(format!("sd.depth must be in 1..=7, got {}", self.depth)));
        }
        if self.pl == 0 {
            return Err(Error::Config("kf.pl must be at least 1".into()));
        }
        if self.ac == 0 {
            return Err(Error::Config("kf.ac must be at least 1".into()));
        }
        self.kf.validate()?;
        if self.mode == EngineMode::Kerv {
            let t = self
                .threshold
                .as_ref()
                .ok_or_else(|| Error::Config("kerv mode needs a threshold state".into()))?;
            t.validate_for(self.threshold_mode)?;
        }
        Ok(())
    }

    fn initial_r(&self) -> f64 {
        match self.mode {
            EngineMode::Naive => 0.0,
            EngineMode::FixedRelaxed => self.fixed_r as f64,
            EngineMode::Kerv => self.threshold.map_or(0.0, |t| t.r),
        }
    }
}

/// Decodes slices until the environment finishes, recording every slice.
pub fn run_episode<E, D, V>(
    env: &mut E,
    draft: &mut D,
    verify: &mut V,
    config: &EngineConfig,
) -> Result<EpisodeTrace>
where
    E: Environment,
    D: DraftOracle<E::Obs> + ?Sized,
    V: VerifyOracle<E::Obs> + ?Sized,
{
    config.validate()?;
    let key = &config.key;
    let mut bank = KfBank::new(config.kf, config.ac)?;
    let mut threshold = (config.mode == EngineMode::Kerv)
        .then_some(config.threshold)
        .flatten();
    let mut kvar = KinVar::default();
    let mut cooldown = 0usize;
    let mut records = Vec::new();
    let mut failure = None;

    while !env.is_done() {
        let step = env.elapsed();
        if step >= env.max_steps() {
            failure = Some(format!("max-step overflow at {step}"));
            break;
        }
        let obs = env.observe()?;
        let r = threshold.map_or_else(|| config.initial_r(), |t| t.r);
        let in_cooldown = cooldown > 0;
        let compensation =
            config.mode == EngineMode::Kerv && config.compensation && !in_cooldown && !bank.is_empty();
        let params = SliceParams {
            r: r.floor() as u32,
            depth: config.depth,
            compensation,
            p_source: config.p_source,
            pl: config.pl,
        };
        let res = decode_slice_sd(&obs, draft, verify, &params, &mut bank, key)?;

        // Only relaxed-accepted errors count toward K_var.
        let mut correct = res.actions;
        for o in res.outcomes.iter().filter(|o| o.status == AcceptStatus::Relaxed) {
            correct.0[o.position] = token_to_action(o.true_id, o.position, key)?;
        }
        let kvar_step = kin_variability(&correct, &res.actions);
        kvar.accumulate(kvar_step)?;
        if let Some(t) = threshold.as_mut() {
            if config.adjust {
                t.adjust(kvar_step, config.threshold_mode)?;
            }
        }

        if res.comp_fired {
            cooldown = config.cooldown;
        } else if in_cooldown {
            cooldown -= 1;
        }

        let mut draft_ids = [None; DOF];
        let mut true_ids = [None; DOF];
        let mut statuses = [None; DOF];
        for o in &res.outcomes {
            draft_ids[o.position] = Some(o.draft_id);
            true_ids[o.position] = Some(o.true_id);
            statuses[o.position] = Some(o.status);
        }
        records.push(SliceRecord {
            step,
            draft_ids,
            true_ids,
            statuses,
            first_error_pos: res.first_error_position,
            sources: res.sources,
            r,
            kvar_step,
            kvar_cum: kvar.cumulative,
            verify_calls: res.verify_calls,
            draft_calls: res.draft_calls,
            comp_fired: res.comp_fired,
            cooldown_remaining: cooldown,
            tokens: res.tokens.0,
        });

        if let Err(e) = env.apply(&res.actions) {
            failure = Some(e.to_string());
            break;
        }
    }

    let mut outcome = env.outcome();
    if let Some(reason) = failure {
        outcome.succeeded = false;
        outcome.failure = Some(reason);
    }
    Ok(EpisodeTrace { records, outcome })
}
