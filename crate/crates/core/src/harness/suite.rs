use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use super::{episode_seed, modeled_latency, RunConfig, SuiteConfig};
use crate::error::{Error, Result};
use crate::simenv::{make_task_with, SimDrafter, SimEnv, SimVerifier, TaskKind};
use crate::specdec::{afep_pooled, run_episode, EngineMode, EpisodeTrace};
use crate::threshold::{calibrate, CalibrationTable, LabeledTrace, ThresholdState};

/// Pre-sample seeds live far from every suite's trial seeds.
const PRESAMPLE_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub suite: String,
    pub kind: TaskKind,
    pub mode: EngineMode,
    pub trial: usize,
    pub seed: u64,
    pub trace: EpisodeTrace,
    pub latency: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub suite: String,
    pub mode: EngineMode,
    pub trials: usize,
    pub sr: f64,
    pub modeled_speedup: f64,
    pub wallclock_speedup: Option<f64>,
    pub afep: Option<f64>,
    pub avg_steps: f64,
    pub avg_r: f64,
    pub comp_events: usize,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "suite", "mode", "trials", "sr", "speedup", "wall_speedup", "afep", "avg_steps", "avg_r", "comp_events", "latency",
];

impl SuiteReport {
    pub fn row(&self, suite: &str, mode: EngineMode) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.suite == suite && r.mode == mode)
    }

    /// Whitespace-aligned table with a header line.
    pub fn to_text(&self) -> String {
        let mut cells = vec![REPORT_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            cells.push(vec![
                r.suite.clone(),
                r.mode.to_string(),
                r.trials.to_string(),
                format!("{:.4}", r.sr),
                format!("{:.4}", r.modeled_speedup),
                opt(r.wallclock_speedup),
                opt(r.afep),
                format!("{:.2}", r.avg_steps),
                format!("{:.3}", r.avg_r),
                r.comp_events.to_string(),
                format!("{:.4}", r.latency),
            ]);
        }
        let widths: Vec<usize> = (0..REPORT_HEADER.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in cells {
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: SuiteReport,
    /// Every episode of every reported mode, ordered by (suite, mode, trial).
    pub episodes: Vec<EpisodeRun>,
}

fn run_one(
    config: &RunConfig,
    suite: &SuiteConfig,
    mode: EngineMode,
    trial: usize,
    seed: u64,
    threshold: Option<ThresholdState>,
) -> Result<EpisodeRun> {
    let engine = config.engine(mode, threshold)?;
    let spec = make_task_with(suite.kind, seed, &config.task, &config.key)?;
    let mut env = SimEnv::new(spec, config.key);
    let mut drafter = SimDrafter {
        noise: config.noise.model(seed)?,
        vocab_size: config.key.vocab_size(),
    };
    let started = Instant::now();
    let trace = run_episode(&mut env, &mut drafter, &mut SimVerifier, &engine)?;
    let wall_secs = started.elapsed().as_secs_f64();
    Ok(EpisodeRun {
        suite: suite.name.clone(),
        kind: suite.kind,
        mode,
        trial,
        seed,
        latency: modeled_latency(&trace, &config.cost),
        trace,
        wall_secs,
    })
}

/// Fixed-threshold episodes at `r_max` used to calibrate the threshold.
pub fn presample(config: &RunConfig) -> Result<Vec<LabeledTrace>> {
    let mut pre = config.clone();
    pre.fixed_r = config.grid.r_max.floor() as u32;
    let jobs: Vec<(&SuiteConfig, usize)> = config
        .suites
        .iter()
        .flat_map(|s| (0..config.presample_trials).map(move |t| (s, t)))
        .collect();
    jobs.par_iter()
        .map(|&(suite, trial)| {
            let seed = episode_seed(config.seed, suite.seed_base.wrapping_add(PRESAMPLE_OFFSET), trial);
            let run = run_one(&pre, suite, EngineMode::FixedRelaxed, trial, seed, None)?;
            Ok(LabeledTrace {
                task: suite.name.clone(),
                robot: config.robot.clone(),
                outcome: run.trace.outcome,
                records: run.trace.records,
            })
        })
        .collect()
}

/// Loads the configured table, or calibrates one from a pre-sample.
pub fn prepare_thresholds(config: &RunConfig) -> Result<CalibrationTable> {
    match &config.table {
        Some(path) => CalibrationTable::load(path),
        None => calibrate(&presample(config)?, &config.grid, &config.key, config.depth),
    }
}

pub fn run_suite(config: &RunConfig) -> Result<RunOutput> {
    let needs_table = config.modes.contains(&EngineMode::Kerv) && config.suites.iter().any(|s| s.trials > 0);
    let table = needs_table.then(|| prepare_thresholds(config)).transpose()?;
    run_suite_with(config, table.as_ref())
}

pub fn run_suite_with(config: &RunConfig, table: Option<&CalibrationTable>) -> Result<RunOutput> {
    config.validate()?;
    let mut modes = vec![EngineMode::Naive];
    modes.extend(config.modes.iter().copied().filter(|m| *m != EngineMode::Naive));

    let mut jobs = Vec::new();
    for suite in config.suites.iter().filter(|s| s.trials > 0) {
        let threshold = if config.modes.contains(&EngineMode::Kerv) {
            let table = table.ok_or_else(|| Error::Config("kerv mode needs a calibration table".into()))?;
            Some(table.lookup(&suite.name, &config.robot)?)
        } else {
            None
        };
        for &mode in &modes {
            for trial in 0..suite.trials {
                let seed = episode_seed(config.seed, suite.seed_base, trial);
                jobs.push((suite, mode, trial, seed, threshold.filter(|_| mode == EngineMode::Kerv)));
            }
        }
    }
    let runs: Vec<EpisodeRun> = jobs
        .par_iter()
        .map(|&(suite, mode, trial, seed, th)| run_one(config, suite, mode, trial, seed, th))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for suite in config.suites.iter().filter(|s| s.trials > 0) {
        let of = |mode: EngineMode| runs.iter().filter(move |r| r.suite == suite.name && r.mode == mode);
        let base_latency: f64 = of(EngineMode::Naive).map(|r| r.latency).sum();
        let base_wall: f64 = of(EngineMode::Naive).map(|r| r.wall_secs).sum();
        for &mode in &config.modes {
            let eps: Vec<&EpisodeRun> = of(mode).collect();
            let n = eps.len() as f64;
            let latency: f64 = eps.iter().map(|r| r.latency).sum();
            let wall: f64 = eps.iter().map(|r| r.wall_secs).sum();
            let traces: Vec<EpisodeTrace> = eps.iter().map(|r| r.trace.clone()).collect();
            let slices: usize = traces.iter().map(|t| t.records.len()).sum();
            rows.push(ReportRow {
                suite: suite.name.clone(),
                mode,
                trials: eps.len(),
                sr: eps.iter().filter(|r| r.trace.outcome.succeeded).count() as f64 / n,
                modeled_speedup: if mode == EngineMode::Naive { 1.0 } else { base_latency / latency },
                wallclock_speedup: (config.wallclock && wall > 0.0).then(|| base_wall / wall),
                afep: afep_pooled(&traces),
                avg_steps: traces.iter().map(|t| t.outcome.steps).sum::<usize>() as f64 / n,
                avg_r: traces.iter().flat_map(|t| &t.records).map(|r| r.r).sum::<f64>() / slices.max(1) as f64,
                comp_events: traces.iter().map(|t| t.comp_events()).sum(),
                latency: latency / n,
            });
        }
    }

    let episodes = runs.into_iter().filter(|r| config.modes.contains(&r.mode)).collect();
    Ok(RunOutput {
        report: SuiteReport { rows },
        episodes,
    })
}
