use serde::{Deserialize, Serialize};

use super::SimulationResult;

/// Wait / decode / reconstruct decomposition of a run, summed over traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub decode_seconds: f64,
    pub wait_seconds: f64,
    pub reconstruct_seconds: f64,
    pub end_to_end_seconds: f64,
    pub decode_fraction: f64,
    pub wait_fraction: f64,
    pub reconstruct_fraction: f64,
}

impl TimingReport {
    /// Breakdown from already-aggregated seconds.
    pub fn from_parts(decode: f64, wait: f64, reconstruct: f64, end_to_end: f64) -> Self {
        let total = decode + wait + reconstruct;
        let (df, wf, rf) = if total > 0.0 {
            (decode / total, wait / total, reconstruct / total)
        } else {
            (1.0, 0.0, 0.0)
        };
        TimingReport {
            decode_seconds: decode,
            wait_seconds: wait,
            reconstruct_seconds: reconstruct,
            end_to_end_seconds: end_to_end,
            decode_fraction: df,
            wait_fraction: wf,
            reconstruct_fraction: rf,
        }
    }
}

pub fn timing_report(result: &SimulationResult) -> TimingReport {
    TimingReport::from_parts(
        result.decode_seconds,
        result.wait_seconds,
        result.reconstruct_seconds,
        result.end_to_end_seconds,
    )
}
