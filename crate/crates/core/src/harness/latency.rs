use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-cycle cost model: one target pass plus `depth` draft passes yield `tau` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Target forward latency (ms).
    pub target_ms: f64,
    /// Draft forward latency (ms).
    pub draft_ms: f64,
    /// Draft passes per cycle.
    pub depth: f64,
    /// Mean tokens per cycle.
    pub tau: f64,
}

/// Modelled speedup over plain autoregressive decoding.
///
/// A zero draft latency is allowed and gives `tau`.
pub fn speedup_ratio(model: &LatencyModel) -> Result<f64> {
    let LatencyModel {
        target_ms,
        draft_ms,
        depth,
        tau,
    } = *model;
    let positive = [("target_ms", target_ms), ("depth", depth), ("tau", tau)];
    if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
    }
    if !(draft_ms >= 0.0 && draft_ms.is_finite()) {
        return Err(Error::InvalidInput(format!("draft_ms must be non-negative, got {draft_ms}")));
    }
    Ok(target_ms / (target_ms + depth * draft_ms) * tau)
}
