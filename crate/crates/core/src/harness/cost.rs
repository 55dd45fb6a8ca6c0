use crate::error::{Error, Result};
use crate::specdec::{EpisodeTrace, SliceRecord};

/// Abstract time units charged per operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub verify: f64,
    pub draft: f64,
    pub kf: f64,
    pub adjust: f64,
    /// Host/device round-trip per compensation.
    pub transfer: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            verify: 1.0,
            draft: 0.02,
            kf: 0.001,
            adjust: 0.0005,
            transfer: 0.002,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.verify, self.draft, self.kf, self.adjust, self.transfer];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config(format!("costs must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> CostModel {
        CostModel {
            verify: self.verify * k,
            draft: self.draft * k,
            kf: self.kf * k,
            adjust: self.adjust * k,
            transfer: self.transfer * k,
        }
    }
}

pub fn slice_latency(rec: &SliceRecord, cm: &CostModel) -> f64 {
    let comp = if rec.comp_fired { cm.kf + cm.transfer } else { 0.0 };
    rec.verify_calls as f64 * cm.verify + rec.draft_calls as f64 * cm.draft + comp + cm.adjust
}

pub fn modeled_latency(trace: &EpisodeTrace, cm: &CostModel) -> f64 {
    trace.records.iter().map(|r| slice_latency(r, cm)).sum()
}
