use serde::Serialize;

use super::{CaseLabel, EvalError, EvalRecord};
use crate::backbone::{avg_macs_counts, CostProfile};
use crate::criteria::{
    decide, percentile_threshold, score, sweep_percentiles, CriteriaError, Decision, ScoreKind,
};
use crate::lbap::LbapModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffPoint {
    /// Threshold percentile, or the target forwarding rate for rate-matched curves.
    pub percentile: f64,
    pub threshold: f64,
    pub n: usize,
    pub forwarded: usize,
    pub forward_fraction: f64,
    pub avg_macs: f64,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffCurve {
    pub criterion: String,
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    pub fn at(&self, percentile: f64) -> Option<&TradeoffPoint> {
        self.points.iter().find(|p| p.percentile == percentile)
    }
}

pub fn criterion_scores(
    kind: ScoreKind,
    records: &[EvalRecord],
    lbap: Option<&LbapModel>,
) -> Result<Vec<f64>, EvalError> {
    records
        .iter()
        .map(|r| score(kind, &r.p_e, lbap).map_err(EvalError::from))
        .collect()
}

/// Path cost of every sample under a decision trace.
pub fn simulate_costs(decisions: &[Decision], profile: &CostProfile, uses_lbap: bool) -> Vec<u64> {
    decisions
        .iter()
        .map(|d| {
            let mut c = profile.macs_prefix + profile.macs_ee_head;
            if uses_lbap {
                c += profile.macs_lbap;
            }
            if *d == Decision::Forward {
                c += profile.macs_suffix + profile.macs_fe_head;
            }
            c
        })
        .collect()
}

fn point_from_decisions(
    percentile: f64,
    threshold: f64,
    decisions: &[Decision],
    records: &[EvalRecord],
    profile: &CostProfile,
    uses_lbap: bool,
) -> Result<TradeoffPoint, EvalError> {
    let n = records.len();
    let mut forwarded = 0;
    let mut correct = 0;
    for (d, r) in decisions.iter().zip(records) {
        let right = match d {
            Decision::Exit => r.ee_correct(),
            Decision::Forward => {
                forwarded += 1;
                r.fe_correct()
            }
        };
        correct += usize::from(right);
    }
    Ok(TradeoffPoint {
        percentile,
        threshold,
        n,
        forwarded,
        forward_fraction: forwarded as f64 / n as f64,
        avg_macs: avg_macs_counts(profile, forwarded, n, uses_lbap)?,
        correct,
        accuracy: correct as f64 / n as f64,
    })
}

fn check_lengths(scores: &[f64], records: &[EvalRecord]) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("sweep"));
    }
    if scores.len() != records.len() {
        return Err(EvalError::LengthMismatch(scores.len(), records.len()));
    }
    Ok(())
}

/// 21-point sweep: thresholds resolved on `val_scores`, applied to `eval_scores`.
pub fn sweep_scores(
    kind: ScoreKind,
    val_scores: &[f64],
    eval_scores: &[f64],
    records: &[EvalRecord],
    profile: &CostProfile,
) -> Result<TradeoffCurve, EvalError> {
    check_lengths(eval_scores, records)?;
    let mut points = Vec::with_capacity(21);
    for q in sweep_percentiles() {
        let t = percentile_threshold(kind, val_scores, q)?;
        let decisions: Vec<Decision> = eval_scores.iter().map(|&s| decide(s, &t)).collect();
        points.push(point_from_decisions(
            q,
            t.value,
            &decisions,
            records,
            profile,
            kind.uses_lbap(),
        )?);
    }
    Ok(TradeoffCurve {
        criterion: kind.name().to_string(),
        points,
    })
}

/// Scores both splits with `kind` and sweeps the 21 percentile points.
pub fn sweep_tradeoff(
    kind: ScoreKind,
    val: &[EvalRecord],
    eval: &[EvalRecord],
    lbap: Option<&LbapModel>,
    profile: &CostProfile,
) -> Result<TradeoffCurve, EvalError> {
    if kind.uses_lbap() && lbap.is_none() {
        return Err(CriteriaError::MissingLbap.into());
    }
    let vs = criterion_scores(kind, val, lbap)?;
    let es = criterion_scores(kind, eval, lbap)?;
    sweep_scores(kind, &vs, &es, eval, profile)
}

/// Forwarding flags for the `k` highest scores; equal scores go to the lower index first.
pub fn forward_top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        flags[i] = true;
    }
    flags
}

fn count_for_rate(rate_pct: u32, n: usize) -> usize {
    (rate_pct as usize * n).div_ceil(100).min(n)
}

fn flags_to_decisions(flags: &[bool]) -> Vec<Decision> {
    flags
        .iter()
        .map(|&f| if f { Decision::Forward } else { Decision::Exit })
        .collect()
}

/// Operating points that forward exactly `ceil(rate * n)` samples in score order.
pub fn matched_rate_curve(
    name: &str,
    scores: &[f64],
    records: &[EvalRecord],
    profile: &CostProfile,
    uses_lbap: bool,
    rates_pct: &[u32],
) -> Result<TradeoffCurve, EvalError> {
    check_lengths(scores, records)?;
    let points = rates_pct
        .iter()
        .map(|&r| {
            let k = count_for_rate(r, records.len());
            let d = flags_to_decisions(&forward_top_k(scores, k));
            point_from_decisions(r as f64, f64::NAN, &d, records, profile, uses_lbap)
        })
        .collect::<Result<_, _>>()?;
    Ok(TradeoffCurve {
        criterion: name.to_string(),
        points,
    })
}

/// Signed benefit of forwarding: +1 for a recoverable error, -1 when the final exit
/// would break a correct early prediction, 0 otherwise.
pub fn oracle_benefit(records: &[EvalRecord]) -> Vec<f64> {
    records
        .iter()
        .map(|r| match r.case() {
            CaseLabel::C01 => 1.0,
            CaseLabel::C10 => -1.0,
            CaseLabel::C11 | CaseLabel::C00 => 0.0,
        })
        .collect()
}

/// Oracle operating points at the given forwarded counts.
pub fn oracle_curve(
    records: &[EvalRecord],
    profile: &CostProfile,
    forwarded_counts: &[usize],
) -> Result<TradeoffCurve, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("oracle"));
    }
    let benefit = oracle_benefit(records);
    let n = records.len();
    let points = forwarded_counts
        .iter()
        .map(|&k| {
            let d = flags_to_decisions(&forward_top_k(&benefit, k.min(n)));
            point_from_decisions(100.0 * k as f64 / n as f64, f64::NAN, &d, records, profile, false)
        })
        .collect::<Result<_, _>>()?;
    Ok(TradeoffCurve {
        criterion: "oracle".into(),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvocationPoint {
    pub rate_pct: u32,
    pub forwarded: usize,
    pub recoverable_rate: f64,
}

/// Share of recoverable errors among the forwarded samples at each invocation rate.
pub fn invocation_vs_recoverable(
    scores: &[f64],
    records: &[EvalRecord],
    rates_pct: &[u32],
) -> Result<Vec<InvocationPoint>, EvalError> {
    check_lengths(scores, records)?;
    Ok(rates_pct
        .iter()
        .map(|&r| {
            let k = count_for_rate(r, records.len());
            let flags = forward_top_k(scores, k);
            let recov = records
                .iter()
                .zip(&flags)
                .filter(|(rec, &f)| f && rec.case() == CaseLabel::C01)
                .count();
            InvocationPoint {
                rate_pct: r,
                forwarded: k,
                recoverable_rate: if k == 0 { 0.0 } else { recov as f64 / k as f64 },
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrBand {
    High,
    Medium,
    Low,
    VeryLow,
}

impl SnrBand {
    pub const ALL: [SnrBand; 4] = [SnrBand::High, SnrBand::Medium, SnrBand::Low, SnrBand::VeryLow];

    pub fn name(self) -> &'static str {
        match self {
            SnrBand::High => "high",
            SnrBand::Medium => "medium",
            SnrBand::Low => "low",
            SnrBand::VeryLow => "very_low",
        }
    }

    /// High is closed `[10, 20]`; the others are half-open `[lo, hi)`.
    pub fn of(snr_db: i16) -> Option<SnrBand> {
        match snr_db {
            10..=20 => Some(SnrBand::High),
            0..=9 => Some(SnrBand::Medium),
            -10..=-1 => Some(SnrBand::Low),
            -20..=-11 => Some(SnrBand::VeryLow),
            _ => None,
        }
    }
}

/// Per-band curves with thresholds resolved once on all validation scores.
pub fn snr_grouped_tradeoff(
    kind: ScoreKind,
    val_scores: &[f64],
    eval_scores: &[f64],
    records: &[EvalRecord],
    profile: &CostProfile,
) -> Result<Vec<(SnrBand, TradeoffCurve)>, EvalError> {
    check_lengths(eval_scores, records)?;
    let mut out = Vec::new();
    for band in SnrBand::ALL {
        let (recs, scores): (Vec<EvalRecord>, Vec<f64>) = records
            .iter()
            .zip(eval_scores)
            .filter(|(r, _)| SnrBand::of(r.snr_db) == Some(band))
            .map(|(r, &s)| (r.clone(), s))
            .unzip();
        if recs.is_empty() {
            return Err(EvalError::EmptyBand(band.name()));
        }
        let mut curve = sweep_scores(kind, val_scores, &scores, &recs, profile)?;
        curve.criterion = format!("{}@{}", kind.name(), band.name());
        out.push((band, curve));
    }
    Ok(out)
}

/// Best accuracy among points with `avg_macs < budget`.
pub fn max_acc_under_budget(curve: &TradeoffCurve, budget: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.avg_macs < budget)
        .map(|p| p.accuracy)
        .reduce(f64::max)
}

/// Cheapest average cost among points with `accuracy >= required`.
pub fn min_macs_for_accuracy(curve: &TradeoffCurve, required: f64) -> Option<f64> {
    curve
        .points
        .iter()
        .filter(|p| p.accuracy >= required)
        .map(|p| p.avg_macs)
        .reduce(f64::min)
}
