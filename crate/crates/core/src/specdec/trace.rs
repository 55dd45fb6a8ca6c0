use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{AcceptStatus, EpisodeOutcome, Source};
use crate::codec::{TokenId, DOF};
use crate::error::{Error, Result};

/// One decoded slice as written to a trace stream.
///
/// Position arrays hold `null` where the position was never drafted
/// (it was filled by the Kalman bank).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub step: usize,
    pub draft_ids: [Option<TokenId>; DOF],
    pub true_ids: [Option<TokenId>; DOF],
    pub statuses: [Option<AcceptStatus>; DOF],
    /// 0-based; 7 when nothing was rejected.
    pub first_error_pos: usize,
    pub sources: [Source; DOF],
    /// Threshold in effect while decoding this slice.
    pub r: f64,
    pub kvar_step: f64,
    pub kvar_cum: f64,
    pub verify_calls: u32,
    pub draft_calls: u32,
    pub comp_fired: bool,
    /// Slices left with compensation disabled after this one.
    pub cooldown_remaining: usize,
    /// Final executed tokens.
    pub tokens: [TokenId; DOF],
}

impl SliceRecord {
    pub fn kf_positions(&self) -> usize {
        self.sources.iter().filter(|s| **s == Source::Kf).count()
    }

    pub fn has_rejection(&self) -> bool {
        self.first_error_pos < DOF
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub records: Vec<SliceRecord>,
    pub outcome: EpisodeOutcome,
}

impl EpisodeTrace {
    /// Mean 1-based first error position over slices with a rejection.
    pub fn afep(&self) -> Option<f64> {
        afep_pooled(std::slice::from_ref(self))
    }

    pub fn verify_calls(&self) -> u64 {
        self.records.iter().map(|r| r.verify_calls as u64).sum()
    }

    pub fn comp_events(&self) -> usize {
        self.records.iter().filter(|r| r.comp_fired).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_records<R: BufRead>(r: R) -> Result<Vec<SliceRecord>> {
        let mut out = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: "<trace>".into(),
                line: idx + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

/// AFEP pooled over every slice of every trace.
pub fn afep_pooled(traces: &[EpisodeTrace]) -> Option<f64> {
    let (sum, n) = traces
        .iter()
        .flat_map(|t| &t.records)
        .filter(|r| r.has_rejection())
        .fold((0usize, 0usize), |(s, n), r| (s + r.first_error_pos + 1, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}
