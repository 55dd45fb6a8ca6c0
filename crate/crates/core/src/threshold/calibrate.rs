//! Pre-sampling calibration of the threshold look-up table.
//!
//! For every `(task, robot)` key the pre-sampled traces are replayed under
//! each `(τ, φ)` candidate. A replay walks the recorded draft/verify pairs,
//! re-deciding acceptance with the replayed threshold, and yields
//!
//! * a success proxy: the recorded trajectory deviation with the recorded
//!   accepted-error variability swapped for the replayed one, checked
//!   against the episode's budget;
//! * an inference-round count: chain-drafting rounds needed when every
//!   replayed rejection forces a new round.
//!
//! The candidate maximizing `mean(success) - λ * mean(rounds)` wins; ties
//! keep the earlier grid entry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ThresholdMode, ThresholdState, DEFAULT_R_MAX, DEFAULT_R_MIN};
use crate::codec::{token_distance, token_to_action, NormKey, DOF};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::specdec::{EpisodeOutcome, SliceRecord};

pub const TABLE_HEADER: &str = "task,robot,tau,phi,r_max,r_min,kvar_ref,sr,steps";

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub task: String,
    pub robot: String,
    pub tau: f64,
    pub phi: f64,
    pub r_max: f64,
    pub r_min: f64,
    pub kvar_ref: f64,
    /// Success rate observed while pre-sampling.
    pub sr: f64,
    /// Mean slices per pre-sampled episode.
    pub steps: f64,
}

impl CalibrationRow {
    pub fn state(&self) -> Result<ThresholdState> {
        ThresholdState::new(self.r_max, self.r_min, self.tau, self.phi, self.kvar_ref)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationTable {
    rows: Vec<CalibrationRow>,
}

impl CalibrationTable {
    pub fn new(rows: Vec<CalibrationRow>) -> Result<Self> {
        for row in &rows {
            if !(row.kvar_ref > 0.0 && row.kvar_ref.is_finite()) {
                return Err(Error::Config(format!(
                    "calibration row {}/{} has non-positive kvar_ref {}",
                    row.task, row.robot, row.kvar_ref
                )));
            }
            row.state()
                .map_err(|e| Error::Config(format!("calibration row {}/{}: {e}", row.task, row.robot)))?;
        }
        Ok(CalibrationTable { rows })
    }

    pub fn rows(&self) -> &[CalibrationRow] {
        &self.rows
    }

    pub fn row(&self, task: &str, robot: &str) -> Option<&CalibrationRow> {
        self.rows.iter().find(|r| r.task == task && r.robot == robot)
    }

    /// Initial threshold state for a key; unknown keys are an error.
    pub fn lookup(&self, task: &str, robot: &str) -> Result<ThresholdState> {
        self.row(task, robot)
            .ok_or_else(|| Error::Config(format!("no calibration row for task `{task}`, robot `{robot}`")))?
            .state()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == TABLE_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    msg: format!("expected header `{TABLE_HEADER}`"),
                })
            }
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let err = |msg: String| Error::Parse {
                path: path.into(),
                line: idx + 1,
                msg,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 9 {
                return Err(err(format!("expected 9 columns, got {}", cols.len())));
            }
            let num = |i: usize| -> Result<f64> {
                cols[i]
                    .parse::<f64>()
                    .map_err(|e| err(format!("column {i}: {e}")))
            };
            rows.push(CalibrationRow {
                task: cols[0].to_string(),
                robot: cols[1].to_string(),
                tau: num(2)?,
                phi: num(3)?,
                r_max: num(4)?,
                r_min: num(5)?,
                kvar_ref: num(6)?,
                sr: num(7)?,
                steps: num(8)?,
            });
        }
        Self::new(rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.task, r.robot, r.tau, r.phi, r.r_max, r.r_min, r.kvar_ref, r.sr, r.steps
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Candidate `(τ, φ)` values and the fixed bounds they are searched under.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGrid {
    pub taus: Vec<f64>,
    pub phis: Vec<f64>,
    pub r_max: f64,
    pub r_min: f64,
    /// Weight of inference rounds against the success proxy.
    pub lambda: f64,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        CalibrationGrid {
            taus: vec![0.25, 0.5, 1.0],
            phis: vec![-0.5, -1.0, -2.0],
            r_max: DEFAULT_R_MAX,
            r_min: DEFAULT_R_MIN,
            lambda: 0.01,
        }
    }
}

impl CalibrationGrid {
    /// Reads `tau`, `phi` (comma lists), `r_max`, `r_min`, `lambda`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut grid = CalibrationGrid::default();
        let list = |name: &str| -> Result<Option<Vec<f64>>> {
            let Some(raw) = kv.get_str(name) else {
                return Ok(None);
            };
            raw.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| kv.parse_error(name, format!("bad list for `{name}`: {e}")))
        };
        if let Some(v) = list("tau")? {
            grid.taus = v;
        }
        if let Some(v) = list("phi")? {
            grid.phis = v;
        }
        if let Some(v) = kv.get("r_max")? {
            grid.r_max = v;
        }
        if let Some(v) = kv.get("r_min")? {
            grid.r_min = v;
        }
        if let Some(v) = kv.get("lambda")? {
            grid.lambda = v;
        }
        let known = ["tau", "phi", "r_max", "r_min", "lambda"];
        let unknown: Vec<_> = kv.keys().filter(|k| !known.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown grid keys: {}", unknown.join(", "))));
        }
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    fn candidates(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.taus
            .iter()
            .flat_map(move |&t| self.phis.iter().map(move |&p| (t, p)))
    }
}

/// A pre-sampled episode with the key it was collected under.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub task: String,
    pub robot: String,
    pub outcome: EpisodeOutcome,
    pub records: Vec<SliceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStats {
    /// Threshold at the start of each replayed slice.
    pub r_trajectory: Vec<f64>,
    pub kvar_cum: f64,
    pub rounds: u64,
    /// Slices whose adjustment changed `r`.
    pub adjustments: usize,
    pub success: bool,
}

/// Replays one trace's draft/verify pairs under a threshold state.
pub fn replay_trace(
    trace: &LabeledTrace,
    mut state: ThresholdState,
    key: &NormKey,
    depth: usize,
) -> Result<ReplayStats> {
    if !(1..=DOF).contains(&depth) {
        return Err(Error::InputDomain(format!("draft depth must be in 1..=7, got {depth}")));
    }
    let mut r_trajectory = Vec::with_capacity(trace.records.len());
    let mut kvar_cum = 0.0;
    let mut rounds = 0u64;
    let mut adjustments = 0;
    for rec in &trace.records {
        r_trajectory.push(state.r);
        let r = state.applied();
        let mut rejected = [false; DOF];
        let mut kvar_step = 0.0;
        for pos in 0..DOF {
            let (Some(d), Some(t)) = (rec.draft_ids[pos], rec.true_ids[pos]) else {
                continue;
            };
            let dist = token_distance(d, t);
            if dist > r {
                rejected[pos] = true;
            } else if dist > 0 {
                kvar_step += (token_to_action(d, pos, key)? - token_to_action(t, pos, key)?).abs();
            }
        }
        rounds += chain_rounds(&rejected, depth);
        kvar_cum += kvar_step;
        let before = state.r;
        state.adjust(kvar_step, ThresholdMode::Rectified)?;
        if state.r != before {
            adjustments += 1;
        }
    }
    let recorded_kvar = trace.records.last().map_or(0.0, |r| r.kvar_cum);
    let deviation = trace.outcome.deviation - recorded_kvar + kvar_cum;
    Ok(ReplayStats {
        r_trajectory,
        kvar_cum,
        rounds,
        adjustments,
        success: trace.outcome.reached_goal && deviation <= trace.outcome.budget,
    })
}

/// Draft/verify rounds to finish a slice when each rejection restarts drafting.
fn chain_rounds(rejected: &[bool; DOF], depth: usize) -> u64 {
    let mut start = 0;
    let mut rounds = 0;
    while start < DOF {
        rounds += 1;
        let end = (start + depth).min(DOF);
        start = (start..end).find(|&p| rejected[p]).map_or(end, |p| p + 1);
    }
    rounds
}

pub fn calibrate(
    traces: &[LabeledTrace],
    grid: &CalibrationGrid,
    key: &NormKey,
    depth: usize,
) -> Result<CalibrationTable> {
    if traces.is_empty() {
        return Err(Error::Config("calibration needs at least one trace".into()));
    }
    if grid.taus.is_empty() || grid.phis.is_empty() {
        return Err(Error::Config("calibration grid is empty".into()));
    }

    let mut groups: BTreeMap<(&str, &str), Vec<&LabeledTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry((&t.task, &t.robot)).or_default().push(t);
    }

    let mut rows = Vec::with_capacity(groups.len());
    for ((task, robot), group) in groups {
        let (kvar_sum, n_steps) = group
            .iter()
            .flat_map(|t| &t.records)
            .fold((0.0, 0usize), |(s, n), r| (s + r.kvar_step, n + 1));
        if n_steps == 0 {
            return Err(Error::Config(format!("pre-sample for {task}/{robot} has no slices")));
        }
        let kvar_ref = kvar_sum / n_steps as f64;
        if kvar_ref <= 0.0 {
            return Err(Error::Config(format!(
                "pre-sample for {task}/{robot} shows no kinematic variability"
            )));
        }

        let mut best: Option<(f64, f64, f64)> = None;
        for (tau, phi) in grid.candidates() {
            let state = ThresholdState::new(grid.r_max, grid.r_min, tau, phi, kvar_ref)?;
            state.validate_for(ThresholdMode::Rectified)?;
            let (mut successes, mut rounds) = (0usize, 0u64);
            for t in &group {
                let stats = replay_trace(t, state, key, depth)?;
                successes += stats.success as usize;
                rounds += stats.rounds;
            }
            let n = group.len() as f64;
            let objective = successes as f64 / n - grid.lambda * rounds as f64 / n;
            if best.is_none_or(|(_, _, b)| objective > b) {
                best = Some((tau, phi, objective));
            }
        }
        let (tau, phi, _) = best.expect("grid is non-empty");

        let n = group.len() as f64;
        rows.push(CalibrationRow {
            task: task.to_string(),
            robot: robot.to_string(),
            tau,
            phi,
            r_max: grid.r_max,
            r_min: grid.r_min,
            kvar_ref,
            sr: group.iter().filter(|t| t.outcome.succeeded).count() as f64 / n,
            steps: group.iter().map(|t| t.records.len()).sum::<usize>() as f64 / n,
        });
    }
    CalibrationTable::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specdec::{AcceptStatus, Source};

    fn record(step: usize, pairs: [(u32, u32); DOF], kvar_step: f64, kvar_cum: f64) -> SliceRecord {
        SliceRecord {
            step,
            draft_ids: pairs.map(|p| Some(p.0)),
            true_ids: pairs.map(|p| Some(p.1)),
            statuses: [Some(AcceptStatus::Exact); DOF],
            first_error_pos: DOF,
            sources: [Source::Draft; DOF],
            r: 15.0,
            kvar_step,
            kvar_cum,
            verify_calls: 2,
            draft_calls: 2,
            comp_fired: false,
            cooldown_remaining: 0,
            tokens: pairs.map(|p| p.0),
        }
    }

    fn trace(task: &str, errs: &[u32]) -> LabeledTrace {
        let key = NormKey::default();
        let mut cum = 0.0;
        let records = errs
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let mut pairs = [(100, 100); DOF];
                pairs[0] = (100 + e, 100);
                let k = if e > 0 && e <= 15 { e as f64 * key.bin_width(0) } else { 0.0 };
                cum += k;
                record(i, pairs, k, cum)
            })
            .collect();
        LabeledTrace {
            task: task.into(),
            robot: "sim7dof".into(),
            outcome: EpisodeOutcome {
                steps: errs.len(),
                reached_goal: true,
                succeeded: true,
                deviation: cum + 0.5,
                budget: 1.0,
                failure: None,
            },
            records,
        }
    }

    #[test]
    fn chain_rounds_counts() {
        let none = [false; DOF];
        assert_eq!(chain_rounds(&none, 4), 2);
        assert_eq!(chain_rounds(&none, 1), 7);
        let mut r = [false; DOF];
        r[1] = true;
        r[5] = true;
        assert_eq!(chain_rounds(&r, 4), 3);
    }

    #[test]
    fn single_candidate_grid() {
        let traces = vec![trace("goal", &[0, 3, 7, 0, 12, 2]), trace("goal", &[1, 1, 0, 9])];
        let grid = CalibrationGrid {
            taus: vec![0.5],
            phis: vec![-1.0],
            ..CalibrationGrid::default()
        };
        let table = calibrate(&traces, &grid, &NormKey::default(), 4).unwrap();
        let row = table.row("goal", "sim7dof").unwrap();
        assert_eq!((row.tau, row.phi), (0.5, -1.0));
        let all: Vec<f64> = traces.iter().flat_map(|t| &t.records).map(|r| r.kvar_step).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((row.kvar_ref - mean).abs() < 1e-15);
        assert_eq!(row.steps, 5.0);
        assert_eq!(row.sr, 1.0);
    }

    #[test]
    fn dominant_candidate_wins() {
        // Candidate B never lowers r, so it keeps large errors (fewer rounds
        // but a blown budget); A is dominant once the budget is tight.
        let mut t = trace("spatial", &[14, 14, 2, 14, 14, 1, 14, 14]);
        t.outcome.budget = t.outcome.deviation - 0.2;
        let grid = CalibrationGrid {
            taus: vec![1.0, 1e-9],
            phis: vec![-0.5],
            lambda: 0.0,
            ..CalibrationGrid::default()
        };
        let table = calibrate(&[t], &grid, &NormKey::default(), 4).unwrap();
        assert_eq!(table.rows()[0].tau, 1.0);
    }

    #[test]
    fn errors_and_text_roundtrip() {
        let key = NormKey::default();
        assert!(calibrate(&[], &CalibrationGrid::default(), &key, 4).is_err());
        let empty_grid = CalibrationGrid {
            taus: vec![],
            ..CalibrationGrid::default()
        };
        assert!(calibrate(&[trace("g", &[1])], &empty_grid, &key, 4).is_err());
        assert!(calibrate(&[trace("g", &[0, 0])], &CalibrationGrid::default(), &key, 4).is_err());

        let table = calibrate(&[trace("g", &[3, 0, 5])], &CalibrationGrid::default(), &key, 4).unwrap();
        let parsed = CalibrationTable::parse(&table.to_text(), Path::new("t.csv")).unwrap();
        assert_eq!(parsed, table);
        assert!(parsed.lookup("g", "other").is_err());
        let s = parsed.lookup("g", "sim7dof").unwrap();
        assert_eq!((s.r, s.r_max, s.r_min), (15.0, 15.0, 5.0));
        assert!(CalibrationTable::parse("bad header\n", Path::new("t.csv")).is_err());
        let zero_ref = format!("{TABLE_HEADER}\ng,sim7dof,1,-1,15,5,0,1,10\n");
        assert!(CalibrationTable::parse(&zero_ref, Path::new("t.csv")).is_err());
    }

    #[test]
    fn grid_file() {
        let kv = KvFile::parse("tau = 0.1, 0.2\nphi = -1\nlambda = 0\n", "g").unwrap();
        let g = CalibrationGrid::from_kv(&kv).unwrap();
        assert_eq!(g.taus, vec![0.1, 0.2]);
        assert_eq!(g.phis, vec![-1.0]);
        assert_eq!(g.lambda, 0.0);
        let kv = KvFile::parse("taus = 0.1\n", "g").unwrap();
        assert!(CalibrationGrid::from_kv(&kv).is_err());
    }
}
