//! Evaluation protocols: outcome taxonomy, entropy bins, trade-off sweeps, budget and
//! accuracy queries, invocation analysis and SNR bands.

mod report;
mod sweep;

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{AmcModel, BackboneError};
use crate::criteria::{score_entropy, CriteriaError};
use crate::iqgen::{Dataset, Split};
use crate::lbap::{recoverability_label, LbapError, RecovLabel};
use crate::tensornet::ProbVector;

pub use report::{
    write_bins_csv, write_budget_csv, write_calibration_csv, write_invocation_csv,
    write_min_cost_csv, write_snr_csv, write_summary_csv, write_tradeoff_csv, ReportHeader,
    SummaryRow,
};
pub use sweep::{
    criterion_scores, forward_top_k, invocation_vs_recoverable, matched_rate_curve,
    max_acc_under_budget, min_macs_for_accuracy, oracle_benefit, oracle_curve, simulate_costs,
    snr_grouped_tradeoff, sweep_scores, sweep_tradeoff, InvocationPoint, SnrBand, TradeoffCurve,
    TradeoffPoint,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set: {0}")]
    Empty(&'static str),
    #[error("SNR band {0} has no samples")]
    EmptyBand(&'static str),
    #[error("record {0} lacks a final-exit prediction")]
    MissingFinal(usize),
    #[error("{0} scores for {1} records")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Lbap(#[from] LbapError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CaseLabel {
    C11,
    C01,
    C00,
    C10,
}

impl CaseLabel {
    pub const ALL: [CaseLabel; 4] = [CaseLabel::C11, CaseLabel::C01, CaseLabel::C00, CaseLabel::C10];
}

/// First digit: early exit correct; second digit: final exit correct.
pub fn classify_case(yhat_e: usize, yhat_f: usize, y: usize) -> CaseLabel {
    match (yhat_e == y, yhat_f == y) {
        (true, true) => CaseLabel::C11,
        (false, true) => CaseLabel::C01,
        (false, false) => CaseLabel::C00,
        (true, false) => CaseLabel::C10,
    }
}

/// Both exits of one evaluated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Index of the frame in its dataset.
    pub sample_id: usize,
    pub split: Split,
    pub snr_db: i16,
    pub label: usize,
    pub p_e: ProbVector,
    pub p_f: ProbVector,
    pub yhat_e: usize,
    pub yhat_f: usize,
}

impl EvalRecord {
    pub fn case(&self) -> CaseLabel {
        classify_case(self.yhat_e, self.yhat_f, self.label)
    }

    pub fn ee_correct(&self) -> bool {
        self.yhat_e == self.label
    }

    pub fn fe_correct(&self) -> bool {
        self.yhat_f == self.label
    }

    pub fn recov_label(&self) -> RecovLabel {
        recoverability_label(self.yhat_e, self.yhat_f, self.label)
    }
}

/// Full forward pass (both exits) over every frame of `split`, in dataset order.
pub fn evaluate_split(
    model: &AmcModel,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<EvalRecord>, EvalError> {
    let mut out = Vec::new();
    for i in dataset.indices(split) {
        let frame = &dataset.frames[i];
        let pair = model.forward_full(&frame.iq)?;
        let yhat_f = pair.yhat_f.ok_or(EvalError::MissingFinal(i))?;
        out.push(EvalRecord {
            sample_id: i,
            split,
            snr_db: frame.snr_db,
            label: frame.label.index(),
            yhat_e: pair.yhat_e,
            yhat_f,
            p_e: pair.p_e,
            p_f: pair.p_f.ok_or(EvalError::MissingFinal(i))?,
        });
    }
    Ok(out)
}

/// Case counts in the order C11, C01, C00, C10.
pub fn case_counts(records: &[EvalRecord]) -> [usize; 4] {
    let mut c = [0; 4];
    for r in records {
        c[r.case() as usize] += 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub samples_pct: f64,
    pub c11_pct: f64,
    pub c01_pct: f64,
    pub c00_pct: f64,
    pub c10_pct: f64,
}

/// Bin index of an entropy value: `[0, 0.1), ..., [0.9, 1.0]`.
pub fn entropy_bin(h: f64) -> usize {
    ((h * 10.0).floor() as usize).min(9)
}

/// Ten entropy bins of width 0.1 with per-bin case percentages.
pub fn entropy_bin_table(records: &[EvalRecord]) -> Result<Vec<BinRow>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("entropy bins"));
    }
    let mut counts = [[0usize; 4]; 10];
    for r in records {
        counts[entropy_bin(score_entropy(&r.p_e))][r.case() as usize] += 1;
    }
    let n = records.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(b, c)| {
            let total: usize = c.iter().sum();
            let pct = |k: usize| {
                if total == 0 {
                    0.0
                } else {
                    100.0 * c[k] as f64 / total as f64
                }
            };
            BinRow {
                bin_lo: b as f64 / 10.0,
                bin_hi: (b + 1) as f64 / 10.0,
                count: total,
                samples_pct: 100.0 * total as f64 / n,
                c11_pct: pct(0),
                c01_pct: pct(1),
                c00_pct: pct(2),
                c10_pct: pct(3),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryStats {
    pub n: usize,
    pub p_recov: f64,
    /// `|C01| / (|C01| + |C00|)`, absent when no sample is wrong at the early exit.
    pub cond_recov: Option<f64>,
    pub ee_accuracy: f64,
    pub fe_accuracy: f64,
}

pub fn recovery_stats(records: &[EvalRecord]) -> Result<RecoveryStats, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("recovery stats"));
    }
    let [c11, c01, c00, c10] = case_counts(records);
    let n = records.len() as f64;
    Ok(RecoveryStats {
        n: records.len(),
        p_recov: c01 as f64 / n,
        cond_recov: (c01 + c00 > 0).then(|| c01 as f64 / (c01 + c00) as f64),
        ee_accuracy: (c11 + c10) as f64 / n,
        fe_accuracy: (c11 + c01) as f64 / n,
    })
}
