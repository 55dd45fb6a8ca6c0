//! Synthetic task environments and token oracles.
//!
//! A task is a smooth plan through random waypoints. Positional and
//! rotational DoFs are commanded as per-step deltas; the gripper is
//! commanded absolutely and toggles at the grasp and release waypoints.
//! Plan deltas are quantized to bin centers and plan poses are their
//! prefix sums, so replaying the plan token-for-token tracks it exactly.
//!
//! The verifier returns the closed-loop plan action for the current pose.
//! The drafter returns the same tokens with independent per-position
//! corruption keyed on `(seed, step, position)`, so every engine mode sees
//! the same noise draws.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    action_to_token, decode_slice, encode_slice, snap_gripper, token_to_action, ActionSlice, NormKey,
    TokenId, TokenSlice, DOF, GRIPPER,
};
use crate::error::{Error, Result};
use crate::specdec::{DraftOracle, Environment, EpisodeOutcome, VerifyOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    PickPlace,
    LongHorizon,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Reach, TaskKind::PickPlace, TaskKind::LongHorizon];

    fn salt(self) -> u64 {
        match self {
            TaskKind::Reach => 0x5245_4143,
            TaskKind::PickPlace => 0x5049_434b,
            TaskKind::LongHorizon => 0x4c4f_4e47,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(TaskKind::Reach),
            "pick_place" => Ok(TaskKind::PickPlace),
            "long_horizon" => Ok(TaskKind::LongHorizon),
            _ => Err(Error::Config(format!(
                "unknown task kind `{s}` (expected reach, pick_place or long_horizon)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Reach => "reach",
            TaskKind::PickPlace => "pick_place",
            TaskKind::LongHorizon => "long_horizon",
        })
    }
}

/// Half-width of the box waypoint positions are drawn from.
const POSITION_SPAN: f64 = 15.0;
const ROTATION_SPAN: f64 = 15.0;

/// Knobs for task generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    /// Deviation budget as a fraction of the plan's path length.
    pub budget_frac: f64,
    /// Goal tolerance (max-norm over X, Y, Z).
    pub tolerance: f64,
    /// Target per-step displacement along the dominant DoF.
    pub speed: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            budget_frac: 0.05,
            tolerance: 0.05,
            speed: 0.45,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.budget_frac) && ok(self.tolerance) && ok(self.speed)) {
            return Err(Error::Config(format!("task parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub goal: [f64; 3],
    /// 7-DoF targets the plan passes through, starting pose first.
    pub waypoints: Vec<[f64; DOF]>,
    pub max_steps: usize,
    pub success_tolerance: f64,
    /// Quantized plan actions, one per step.
    pub plan: Vec<ActionSlice>,
    /// Plan poses; `poses[t]` is the pose after `t` plan actions.
    pub poses: Vec<[f64; DOF]>,
    /// Largest deviation a successful episode may accumulate.
    pub budget: f64,
}

impl TaskSpec {
    pub fn plan_len(&self) -> usize {
        self.plan.len()
    }

    /// Plan pose to compare against after `elapsed` steps.
    pub fn reference(&self, elapsed: usize) -> &[f64; DOF] {
        &self.poses[elapsed.min(self.plan.len())]
    }

    /// L1 path length over the non-gripper DoFs.
    pub fn path_length(&self) -> f64 {
        self.plan.iter().map(|a| a.0[..GRIPPER].iter().map(|v| v.abs()).sum::<f64>()).sum()
    }
}

pub fn make_task(kind: TaskKind, seed: u64) -> Result<TaskSpec> {
    make_task_with(kind, seed, &TaskParams::default(), &NormKey::default())
}

pub fn make_task_with(kind: TaskKind, seed: u64, params: &TaskParams, key: &NormKey) -> Result<TaskSpec> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, kind.salt()));
    let open = token_to_action(key.vocab_size() - 1, GRIPPER, key)?;
    let closed = token_to_action(0, GRIPPER, key)?;

    let mut start = [0.0; DOF];
    start[GRIPPER] = open;
    let mut waypoints = vec![start];
    let point = |rng: &mut ChaCha8Rng, gripper: f64| {
        let mut w = [0.0f64; DOF];
        for (d, slot) in w.iter_mut().enumerate().take(GRIPPER) {
            let span = if d < 3 { POSITION_SPAN } else { ROTATION_SPAN };
            *slot = rng.random_range(-span..span);
        }
        // Keep the target away from the start so a motionless policy fails.
        if w[..3].iter().all(|v| v.abs() < 0.3 * POSITION_SPAN) {
            w[0] = POSITION_SPAN * (0.3 + 0.7 * rng.random::<f64>());
        }
        w[GRIPPER] = gripper;
        w
    };
    let pick_place = |rng: &mut ChaCha8Rng, wps: &mut Vec<[f64; DOF]>| {
        wps.push(point(rng, open));
        wps.push(point(rng, closed));
        wps.push(point(rng, closed));
        wps.push(point(rng, open));
    };
    match kind {
        TaskKind::Reach => {
            waypoints.push(point(&mut rng, open));
            waypoints.push(point(&mut rng, open));
        }
        TaskKind::PickPlace => pick_place(&mut rng, &mut waypoints),
        TaskKind::LongHorizon => {
            pick_place(&mut rng, &mut waypoints);
            pick_place(&mut rng, &mut waypoints);
            pick_place(&mut rng, &mut waypoints);
        }
    }

    let (plan, poses) = build_plan(&waypoints, params.speed, key)?;
    let goal_pose = poses.last().expect("plan has a start pose");
    let goal = [goal_pose[0], goal_pose[1], goal_pose[2]];
    let len = plan.len();
    let mut spec = TaskSpec {
        kind,
        seed,
        goal,
        waypoints,
        max_steps: len + (len / 2).max(20),
        success_tolerance: params.tolerance,
        plan,
        poses,
        budget: 0.0,
    };
    spec.budget = params.budget_frac * spec.path_length();
    Ok(spec)
}

/// Catmull-Rom plan through `waypoints`, quantized step by step.
fn build_plan(waypoints: &[[f64; DOF]], speed: f64, key: &NormKey) -> Result<(Vec<ActionSlice>, Vec<[f64; DOF]>)> {
    let n = waypoints.len();
    let at = |i: isize| waypoints[i.clamp(0, n as isize - 1) as usize];
    let mut pose = waypoints[0];
    let mut poses = vec![pose];
    let mut plan = Vec::new();
    for seg in 0..n - 1 {
        let (p0, p1, p2, p3) = (at(seg as isize - 1), at(seg as isize), at(seg as isize + 1), at(seg as isize + 2));
        let span = (0..GRIPPER).map(|d| (p2[d] - p1[d]).abs()).fold(0.0, f64::max);
        let steps = ((span / speed).ceil() as usize).max(4);
        for j in 1..=steps {
            let t = j as f64 / steps as f64;
            let mut action = [0.0; DOF];
            for d in 0..GRIPPER {
                let target = catmull_rom(p0[d], p1[d], p2[d], p3[d], t);
                let id = action_to_token(target - pose[d], d, key)?;
                action[d] = token_to_action(id, d, key)?;
                pose[d] += action[d];
            }
            let g = if j == steps { p2[GRIPPER] } else { p1[GRIPPER] };
            action[GRIPPER] = token_to_action(snap_gripper(g, key)?, GRIPPER, key)?;
            pose[GRIPPER] = action[GRIPPER];
            plan.push(ActionSlice(action));
            poses.push(pose);
        }
    }
    Ok((plan, poses))
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub pose: [f64; DOF],
    pub elapsed: usize,
    /// Accumulated L1 gap to the plan.
    pub deviation: f64,
    pub reached: bool,
    pub done: bool,
    pub succeeded: bool,
}

impl EnvState {
    pub fn new(spec: &TaskSpec) -> Self {
        EnvState {
            pose: spec.poses[0],
            elapsed: 0,
            deviation: 0.0,
            reached: false,
            done: false,
            succeeded: false,
        }
    }
}

/// The verifier's truth: the action that brings the pose back onto the plan.
pub fn oracle_policy(state: &EnvState, spec: &TaskSpec, key: &NormKey) -> Result<TokenSlice> {
    if state.done {
        return Err(Error::State("oracle queried on a finished episode".into()));
    }
    let target = spec.reference(state.elapsed + 1);
    let mut action = [0.0; DOF];
    for d in 0..GRIPPER {
        action[d] = target[d] - state.pose[d];
    }
    action[GRIPPER] = target[GRIPPER];
    encode_slice(&ActionSlice(action), key)
}

pub fn draft_policy(state: &EnvState, spec: &TaskSpec, noise: &DraftNoiseModel, key: &NormKey) -> Result<TokenSlice> {
    let truth = oracle_policy(state, spec, key)?;
    let mut out = truth.0;
    for (pos, slot) in out.iter_mut().enumerate() {
        *slot = noise.corrupt(*slot, state.elapsed, pos, key.vocab_size());
    }
    Ok(TokenSlice(out))
}

/// Applies one slice: deltas on X..θZ, absolute gripper.
pub fn step(state: &mut EnvState, actions: &ActionSlice, spec: &TaskSpec) -> Result<()> {
    if state.done {
        return Err(Error::State("step on a finished episode".into()));
    }
    actions.ensure_finite()?;
    for d in 0..GRIPPER {
        state.pose[d] += actions.0[d];
    }
    state.pose[GRIPPER] = actions.0[GRIPPER];
    state.elapsed += 1;
    let reference = spec.reference(state.elapsed);
    state.deviation += state.pose.iter().zip(reference).map(|(p, r)| (p - r).abs()).sum::<f64>();
    let goal_err = (0..3).map(|d| (state.pose[d] - spec.goal[d]).abs()).fold(0.0, f64::max);
    state.reached = state.elapsed >= spec.plan_len() && goal_err <= spec.success_tolerance;
    state.done = state.reached || state.elapsed >= spec.max_steps;
    state.succeeded = state.reached && state.deviation <= spec.budget;
    Ok(())
}

/// Per-position draft corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftNoiseModel {
    pub q_err: f64,
    /// Signed offsets an error may apply.
    offsets: Vec<i64>,
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
    pub seed: u64,
}

impl DraftNoiseModel {
    /// Zipf-like magnitudes `1..=max_offset` with weight `k^-s`, either sign.
    pub fn zipf(q_err: f64, max_offset: u32, s: f64, seed: u64) -> Result<Self> {
        if max_offset == 0 || !s.is_finite() {
            return Err(Error::Config(format!("bad zipf noise: max_offset={max_offset}, s={s}")));
        }
        let mut offsets = Vec::with_capacity(2 * max_offset as usize);
        let mut weights = Vec::with_capacity(offsets.capacity());
        for k in 1..=max_offset as i64 {
            let w = (k as f64).powf(-s);
            offsets.extend([k, -k]);
            weights.extend([w, w]);
        }
        Self::categorical(q_err, offsets, weights, seed)
    }

    pub fn categorical(q_err: f64, offsets: Vec<i64>, weights: Vec<f64>, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q_err) {
            return Err(Error::Config(format!("q_err must be in [0, 1], got {q_err}")));
        }
        if offsets.is_empty() || offsets.len() != weights.len() || offsets.contains(&0) {
            return Err(Error::Config("noise offsets must be nonzero and match their weights".into()));
        }
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("noise weights: {e}")))?;
        let total: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / total).collect();
        Ok(DraftNoiseModel {
            q_err,
            offsets,
            probs,
            sampler,
            seed,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `(offset, probability)` pairs of the error distribution.
    pub fn distribution(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.offsets.iter().copied().zip(self.probs.iter().copied())
    }

    /// Offset applied at `(step, position)`, or `None` when the draft is clean.
    pub fn offset_at(&self, step: usize, position: usize) -> Option<i64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, (step as u64) << 3 | position as u64));
        if rng.random::<f64>() >= self.q_err {
            return None;
        }
        Some(self.offsets[self.sampler.sample(&mut rng)])
    }

    /// A drawn offset that leaves the vocabulary is reflected, so an error
    /// always changes the token.
    pub fn corrupt(&self, id: TokenId, step: usize, position: usize, vocab_size: u32) -> TokenId {
        let Some(off) = self.offset_at(step, position) else {
            return id;
        };
        let top = vocab_size as i64 - 1;
        let id = id as i64;
        let moved = if (0..=top).contains(&(id + off)) {
            id + off
        } else if (0..=top).contains(&(id - off)) {
            id - off
        } else if id + off > top {
            if id == top { top - 1 } else { top }
        } else if id == 0 {
            1
        } else {
            0
        };
        moved as TokenId
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

/// What the simulated models see before a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SimObs {
    pub step: usize,
    pub truth: TokenSlice,
}

pub struct SimEnv {
    spec: TaskSpec,
    state: EnvState,
    key: NormKey,
}

impl SimEnv {
    pub fn new(spec: TaskSpec, key: NormKey) -> Self {
        let state = EnvState::new(&spec);
        SimEnv { spec, state, key }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }
}

impl Environment for SimEnv {
    type Obs = SimObs;

    fn observe(&self) -> Result<SimObs> {
        Ok(SimObs {
            step: self.state.elapsed,
            truth: oracle_policy(&self.state, &self.spec, &self.key)?,
        })
    }

    fn is_done(&self) -> bool {
        self.state.done
    }

    fn elapsed(&self) -> usize {
        self.state.elapsed
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn apply(&mut self, actions: &ActionSlice) -> Result<()> {
        step(&mut self.state, actions, &self.spec)
    }

    fn outcome(&self) -> EpisodeOutcome {
        EpisodeOutcome {
            steps: self.state.elapsed,
            reached_goal: self.state.reached,
            succeeded: self.state.succeeded,
            deviation: self.state.deviation,
            budget: self.spec.budget,
            failure: None,
        }
    }
}

/// Returns the truth tokens for whatever positions were drafted.
pub struct SimVerifier;

impl VerifyOracle<SimObs> for SimVerifier {
    fn verify(&mut self, obs: &SimObs, prefix: &[TokenId], drafted: &[TokenId]) -> Result<Vec<TokenId>> {
        let end = prefix.len() + drafted.len();
        if end > DOF {
            return Err(Error::Oracle(format!("verify asked for positions up to {end}")));
        }
        Ok(obs.truth.0[prefix.len()..end].to_vec())
    }
}

pub struct SimDrafter {
    pub noise: DraftNoiseModel,
    pub vocab_size: u32,
}

impl DraftOracle<SimObs> for SimDrafter {
    fn draft(&mut self, obs: &SimObs, prefix: &[TokenId], depth: usize) -> Result<Vec<TokenId>> {
        let end = prefix.len() + depth;
        if end > DOF {
            return Err(Error::Oracle(format!("draft asked for positions up to {end}")));
        }
        Ok((prefix.len()..end)
            .map(|pos| self.noise.corrupt(obs.truth.0[pos], obs.step, pos, self.vocab_size))
            .collect())
    }
}

/// Replays a token stream through a fresh environment.
pub fn replay_tokens(spec: &TaskSpec, key: &NormKey, tokens: &[TokenSlice]) -> Result<EnvState> {
    let mut state = EnvState::new(spec);
    for t in tokens {
        step(&mut state, &decode_slice(t, key)?, spec)?;
    }
    Ok(state)
}
