//! Multiply-accumulate accounting.
//!
//! Convolutions cost `out * in * k * L_out`, dense layers `out * in`. Biases,
//! activations, pooling and residual additions are free.

use serde::Serialize;

use super::{AmcModel, BackboneError};
use crate::FRAME_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostProfile {
    /// Stem plus the stages up to and including the exit point.
    pub macs_prefix: u64,
    pub macs_ee_head: u64,
    /// Stages after the exit point.
    pub macs_suffix: u64,
    pub macs_fe_head: u64,
    pub macs_lbap: u64,
}

impl CostProfile {
    pub fn with_lbap(self, macs_lbap: u64) -> Self {
        Self { macs_lbap, ..self }
    }

    /// Cost of a sample that takes the early exit.
    pub fn exit_cost(&self, uses_lbap: bool) -> u64 {
        self.macs_prefix + self.macs_ee_head + if uses_lbap { self.macs_lbap } else { 0 }
    }

    /// Extra cost paid by a forwarded sample.
    pub fn continuation_cost(&self) -> u64 {
        self.macs_suffix + self.macs_fe_head
    }

    /// Backbone plus final head, the cost of a plain single-exit inference.
    pub fn backbone_only(&self) -> u64 {
        self.macs_prefix + self.macs_suffix + self.macs_fe_head
    }
}

pub fn count_macs(model: &AmcModel) -> Result<CostProfile, BackboneError> {
    let trunk = model.trunk();
    let exit = model.exit_point().stage();
    let mut len = FRAME_LEN;
    let mut prefix = trunk.stem.macs(len)?;
    len = trunk.stem.out_len(len)?;
    let mut suffix = 0;
    for (s, stage) in trunk.stages.iter().enumerate() {
        for block in stage {
            let m = block.macs(len)?;
            if s < exit {
                prefix += m;
            } else {
                suffix += m;
            }
            len = block.conv1.out_len(len)?;
        }
    }
    Ok(CostProfile {
        macs_prefix: prefix,
        macs_ee_head: model.ee_head().macs(),
        macs_suffix: suffix,
        macs_fe_head: trunk.fe_head.macs(),
        macs_lbap: 0,
    })
}

/// Expected per-sample cost when a fraction `forward_fraction` continues to the final exit.
pub fn avg_macs(
    profile: &CostProfile,
    forward_fraction: f64,
    uses_lbap: bool,
) -> Result<f64, BackboneError> {
    if !(0.0..=1.0).contains(&forward_fraction) {
        return Err(BackboneError::InvalidArch(format!(
            "forward fraction {forward_fraction} outside [0, 1]"
        )));
    }
    Ok(profile.exit_cost(uses_lbap) as f64
        + forward_fraction * profile.continuation_cost() as f64)
}

/// Same model with the fraction given as `forwarded / total`, evaluated in integer
/// arithmetic and divided once, so the result is exactly the mean of per-sample costs.
pub fn avg_macs_counts(
    profile: &CostProfile,
    forwarded: usize,
    total: usize,
    uses_lbap: bool,
) -> Result<f64, BackboneError> {
    if total == 0 || forwarded > total {
        return Err(BackboneError::InvalidArch(format!(
            "forwarded count {forwarded} of {total}"
        )));
    }
    let sum = total as u128 * profile.exit_cost(uses_lbap) as u128
        + forwarded as u128 * profile.continuation_cost() as u128;
    Ok(sum as f64 / total as f64)
}
