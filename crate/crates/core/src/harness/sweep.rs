use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{prepare_thresholds, run_suite_with, RunConfig};
use crate::error::{Error, Result};
use crate::specdec::EngineMode;

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Compensation cooldown.
    N,
    Ac,
    Pl,
    /// Fixed relaxed-acceptance threshold.
    R,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepParam::N),
            "ac" => Ok(SweepParam::Ac),
            "pl" => Ok(SweepParam::Pl),
            "r" => Ok(SweepParam::R),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (expected n, ac, pl or r)"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::N => "n",
            SweepParam::Ac => "ac",
            SweepParam::Pl => "pl",
            SweepParam::R => "r",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub sr: f64,
    pub modeled_speedup: f64,
    pub afep: Option<f64>,
    pub avg_steps: f64,
}

/// Runs every suite once per value and pools the results.
///
/// `r` sweeps run `fixed_relaxed`; the others run `kerv`.
pub fn run_sweep(config: &RunConfig, param: SweepParam, values: &[usize]) -> Result<Vec<SweepRow>> {
    let mode = if param == SweepParam::R { EngineMode::FixedRelaxed } else { EngineMode::Kerv };
    let mut base = config.clone();
    base.modes = vec![mode];
    // Pre-sampling does not depend on n, AC or PL, so one table serves all.
    let table = (mode == EngineMode::Kerv).then(|| prepare_thresholds(&base)).transpose()?;

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = base.clone();
        match param {
            SweepParam::N => c.cooldown = value,
            SweepParam::Ac => c.ac = value,
            SweepParam::Pl => c.pl = value,
            SweepParam::R => {
                c.fixed_r = u32::try_from(value).map_err(|_| Error::Config(format!("r = {value} too large")))?
            }
        }
        let out = run_suite_with(&c, table.as_ref())?;
        let eps = &out.episodes;
        let n = eps.len().max(1) as f64;
        let rep = &out.report.rows;
        let latency: f64 = rep.iter().map(|r| r.latency * r.trials as f64).sum();
        let base_latency: f64 = rep.iter().map(|r| r.latency * r.trials as f64 * r.modeled_speedup).sum();
        let traces: Vec<_> = eps.iter().map(|e| e.trace.clone()).collect();
        rows.push(SweepRow {
            value,
            sr: eps.iter().filter(|e| e.trace.outcome.succeeded).count() as f64 / n,
            modeled_speedup: if latency > 0.0 { base_latency / latency } else { 1.0 },
            afep: crate::specdec::afep_pooled(&traces),
            avg_steps: eps.iter().map(|e| e.trace.outcome.steps).sum::<usize>() as f64 / n,
        });
    }
    Ok(rows)
}

pub fn sweep_text(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{param}\tsr\tspeedup\tafep\tavg_steps\n");
    for r in rows {
        let afep = r.afep.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{afep}\t{:.2}", r.value, r.sr, r.modeled_speedup, r.avg_steps);
    }
    out
}
