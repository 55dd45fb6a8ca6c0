use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::RunOutput;
use crate::codec::DOF;
use crate::error::{Error, Result};
use crate::specdec::{EpisodeOutcome, EpisodeTrace};
use crate::threshold::LabeledTrace;

pub const EPISODES_HEADER: &str = "suite,mode,trial,kind,robot,seed,steps,reached,succeeded,deviation,budget";

fn trace_name(suite: &str, mode: &str, trial: usize) -> String {
    format!("{suite}__{mode}__{trial}.jsonl")
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.txt`, `episodes.csv`, `traces/` and `plots/` under `out_dir`.
pub fn emit_results(output: &RunOutput, robot: &str, out_dir: &Path) -> Result<()> {
    let traces_dir = out_dir.join("traces");
    let plots_dir = out_dir.join("plots");
    for dir in [out_dir, &traces_dir, &plots_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write(out_dir.join("report.txt"), &output.report.to_text())?;

    let mut episodes = format!("{EPISODES_HEADER}\n");
    let mut r_series = String::from("suite\tmode\ttrial\tstep\tr\n");
    let mut k_series = String::from("suite\tmode\ttrial\tstep\tkvar_step\tkvar_cum\n");
    let mut hist = String::from("suite\tmode\tposition\tcount\n");

    for ep in &output.episodes {
        let o = &ep.trace.outcome;
        let mode = ep.mode.to_string();
        let _ = writeln!(
            episodes,
            "{},{},{},{},{},{},{},{},{},{},{}",
            ep.suite, mode, ep.trial, ep.kind, robot, ep.seed, o.steps, o.reached_goal, o.succeeded, o.deviation, o.budget
        );
        let path = traces_dir.join(trace_name(&ep.suite, &mode, ep.trial));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        ep.trace
            .write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        for rec in &ep.trace.records {
            let _ = writeln!(r_series, "{}\t{mode}\t{}\t{}\t{}", ep.suite, ep.trial, rec.step, rec.r);
            let _ = writeln!(
                k_series,
                "{}\t{mode}\t{}\t{}\t{}\t{}",
                ep.suite, ep.trial, rec.step, rec.kvar_step, rec.kvar_cum
            );
        }
    }

    for row in &output.report.rows {
        let mut counts = [0usize; DOF];
        for ep in output.episodes.iter().filter(|e| e.suite == row.suite && e.mode == row.mode) {
            for rec in ep.trace.records.iter().filter(|r| r.has_rejection()) {
                counts[rec.first_error_pos] += 1;
            }
        }
        for (pos, c) in counts.iter().enumerate() {
            let _ = writeln!(hist, "{}\t{}\t{}\t{c}", row.suite, row.mode, pos + 1);
        }
    }

    write(out_dir.join("episodes.csv"), &episodes)?;
    write(plots_dir.join("r_vs_step.tsv"), &r_series)?;
    write(plots_dir.join("kvar_vs_step.tsv"), &k_series)?;
    write(plots_dir.join("afep_hist.tsv"), &hist)
}

/// Reads the episodes written by [`emit_results`] back as labeled traces.
pub fn load_labeled_traces(dir: &Path) -> Result<Vec<LabeledTrace>> {
    let index = dir.join("episodes.csv");
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h.trim()) != Some(EPISODES_HEADER) {
        return Err(Error::Parse {
            path: index,
            line: 1,
            msg: format!("expected header `{EPISODES_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| Error::Parse {
            path: index.clone(),
            line: idx + 1,
            msg,
        };
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 11 {
            return Err(err(format!("expected 11 columns, got {}", c.len())));
        }
        let trial: usize = c[2].parse().map_err(|e| err(format!("trial: {e}")))?;
        let parse_f = |i: usize| c[i].parse::<f64>().map_err(|e| err(format!("column {i}: {e}")));
        let parse_b = |i: usize| c[i].parse::<bool>().map_err(|e| err(format!("column {i}: {e}")));
        let outcome = EpisodeOutcome {
            steps: c[6].parse().map_err(|e| err(format!("steps: {e}")))?,
            reached_goal: parse_b(7)?,
            succeeded: parse_b(8)?,
            deviation: parse_f(9)?,
            budget: parse_f(10)?,
            failure: None,
        };
        let path = dir.join("traces").join(trace_name(c[0], c[1], trial));
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let records = EpisodeTrace::read_records(BufReader::new(file)).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.clone(),
                line,
                msg,
            },
            other => other,
        })?;
        out.push(LabeledTrace {
            task: c[0].to_string(),
            robot: c[4].to_string(),
            outcome,
            records,
        });
    }
    Ok(out)
}
