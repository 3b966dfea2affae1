//! Exit scores, percentile thresholds and the exit rule.
//!
//! Every score is oriented so that low values mean "confident enough to exit": a
//! sample exits iff its score is strictly below the threshold.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lbap::LbapModel;
use crate::tensornet::{ProbVector, TensorError};

#[derive(Debug, Error)]
pub enum CriteriaError {
    #[error("percentile threshold needs at least one score")]
    EmptyScores,
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("the beacon score needs an LBAP model")]
    MissingLbap,
    #[error("the LBAP model has not been trained")]
    UntrainedLbap,
    #[error("unknown score kind {0:?}")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Entropy,
    Msp,
    Margin,
    Top3,
    Gini,
    Beacon,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Entropy,
        ScoreKind::Msp,
        ScoreKind::Margin,
        ScoreKind::Top3,
        ScoreKind::Gini,
        ScoreKind::Beacon,
    ];
    pub const BASELINES: [ScoreKind; 5] = [
        ScoreKind::Entropy,
        ScoreKind::Msp,
        ScoreKind::Margin,
        ScoreKind::Top3,
        ScoreKind::Gini,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Entropy => "entropy",
            ScoreKind::Msp => "msp",
            ScoreKind::Margin => "margin",
            ScoreKind::Top3 => "top3",
            ScoreKind::Gini => "gini",
            ScoreKind::Beacon => "beacon",
        }
    }

    pub fn uses_lbap(self) -> bool {
        self == ScoreKind::Beacon
    }

    /// Closed range of the score over a `classes`-simplex.
    pub fn range(self, classes: usize) -> (f64, f64) {
        let c = classes as f64;
        match self {
            ScoreKind::Entropy | ScoreKind::Margin | ScoreKind::Beacon => (0.0, 1.0),
            ScoreKind::Msp | ScoreKind::Gini => (0.0, 1.0 - 1.0 / c),
            ScoreKind::Top3 => (0.0, (1.0 - 3.0 / c).max(0.0)),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = CriteriaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CriteriaError::UnknownKind(s.to_string()))
    }
}

fn clamp_to(kind: ScoreKind, classes: usize, v: f64) -> f64 {
    let (lo, hi) = kind.range(classes);
    v.clamp(lo, hi)
}

/// Entries in descending order.
fn sorted_desc(p: &ProbVector) -> Vec<f64> {
    let mut v = p.as_slice().to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Normalized Shannon entropy; zero entries contribute nothing.
pub fn score_entropy(p: &ProbVector) -> f64 {
    let c = p.len();
    if c < 2 {
        return 0.0;
    }
    let h: f64 = p
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    clamp_to(ScoreKind::Entropy, c, h / (c as f64).ln())
}

pub fn score_msp(p: &ProbVector) -> f64 {
    let max = p.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    clamp_to(ScoreKind::Msp, p.len(), 1.0 - max)
}

pub fn score_margin(p: &ProbVector) -> f64 {
    let s = sorted_desc(p);
    let second = s.get(1).copied().unwrap_or(0.0);
    clamp_to(ScoreKind::Margin, p.len(), 1.0 - (s[0] - second))
}

pub fn score_top3(p: &ProbVector) -> f64 {
    let mass: f64 = sorted_desc(p).iter().take(3).sum();
    clamp_to(ScoreKind::Top3, p.len(), 1.0 - mass)
}

pub fn score_gini(p: &ProbVector) -> f64 {
    let sq: f64 = p.as_slice().iter().map(|v| v * v).sum();
    clamp_to(ScoreKind::Gini, p.len(), 1.0 - sq)
}

/// LBAP benefit score in inference mode.
pub fn score_beacon(p: &ProbVector, lbap: &LbapModel) -> Result<f64, CriteriaError> {
    if !lbap.is_trained() {
        return Err(CriteriaError::UntrainedLbap);
    }
    Ok(lbap.score(p)?)
}

/// Dispatches on `kind`; `lbap` is required only for the beacon score.
pub fn score(kind: ScoreKind, p: &ProbVector, lbap: Option<&LbapModel>) -> Result<f64, CriteriaError> {
    Ok(match kind {
        ScoreKind::Entropy => score_entropy(p),
        ScoreKind::Msp => score_msp(p),
        ScoreKind::Margin => score_margin(p),
        ScoreKind::Top3 => score_top3(p),
        ScoreKind::Gini => score_gini(p),
        ScoreKind::Beacon => score_beacon(p, lbap.ok_or(CriteriaError::MissingLbap)?)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub kind: ScoreKind,
    pub percentile: f64,
    /// Cutoff; `-inf` at q = 0 (nothing exits) and `+inf` at q = 100 (everything exits).
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Decision {
    Exit,
    Forward,
}

/// Nearest-rank percentile threshold over reference scores.
///
/// For 0 < q < 100 with `r = ceil(q / 100 * n)`, the cutoff is the smallest float above
/// the r-th smallest score, so that under the strict `score < value` rule exactly `r`
/// reference scores exit when there are no ties (ties with the r-th score exit too).
pub fn percentile_threshold(
    kind: ScoreKind,
    scores: &[f64],
    q: f64,
) -> Result<Threshold, CriteriaError> {
    if scores.is_empty() {
        return Err(CriteriaError::EmptyScores);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CriteriaError::NonFiniteScore(i));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(CriteriaError::BadPercentile(q));
    }
    let value = if q == 0.0 {
        f64::NEG_INFINITY
    } else if q == 100.0 {
        f64::INFINITY
    } else {
        let n = scores.len();
        let r = ((q / 100.0 * n as f64).ceil() as usize).clamp(1, n);
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[r - 1].next_up()
    };
    Ok(Threshold {
        kind,
        percentile: q,
        value,
    })
}

/// The 21 sweep percentiles 0, 5, ..., 100.
pub fn sweep_percentiles() -> Vec<f64> {
    (0..=20).map(|i| (i * 5) as f64).collect()
}

pub fn decide(score: f64, t: &Threshold) -> Decision {
    if score < t.value {
        Decision::Exit
    } else {
        Decision::Forward
    }
}

/// One line of a score dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub split: String,
    pub snr_db: i16,
    pub label: usize,
    pub yhat_e: usize,
    pub yhat_f: usize,
    pub score_kind: ScoreKind,
    pub score: f64,
}

pub fn write_score_csv<W: Write>(out: W, rows: &[ScoreRow]) -> Result<(), CriteriaError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        let mut full = v.to_vec();
        full.resize(10, 0.0);
        ProbVector::new(full).unwrap()
    }

    fn baselines(p: &ProbVector) -> [f64; 5] {
        [
            score_entropy(p),
            score_msp(p),
            score_margin(p),
            score_top3(p),
            score_gini(p),
        ]
    }

    #[test]
    fn closed_form_examples() {
        let u = ProbVector::uniform(10);
        let one = ProbVector::one_hot(10, 6);
        let expect_u = [1.0, 0.9, 1.0, 0.7, 0.9];
        for (got, want) in baselines(&u).iter().zip(expect_u) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(baselines(&one), [0.0; 5]);
        let half = pv(&[0.5, 0.5]);
        assert!((score_entropy(&half) - 2f64.ln() / 10f64.ln()).abs() < 1e-12);
        assert!((score_gini(&half) - 0.5).abs() < 1e-15);
        assert!((score_msp(&pv(&[0.7, 0.3])) - 0.3).abs() < 1e-12);
        assert!((score_margin(&pv(&[0.6, 0.4])) - 0.8).abs() < 1e-12);
        assert!(score_top3(&pv(&[0.5, 0.3, 0.2])).abs() < 1e-12);
    }

    #[test]
    fn beacon_needs_a_trained_model() {
        let p = ProbVector::uniform(10);
        assert!(matches!(
            score(ScoreKind::Beacon, &p, None),
            Err(CriteriaError::MissingLbap)
        ));
        assert!(matches!(
            score(ScoreKind::Beacon, &p, Some(&LbapModel::zeros())),
            Err(CriteriaError::UntrainedLbap)
        ));
    }

    #[test]
    fn percentile_examples() {
        let s = [0.1, 0.2, 0.3, 0.4];
        let below = |t: &Threshold| s.iter().filter(|&&v| v < t.value).count();
        let t = percentile_threshold(ScoreKind::Msp, &s, 50.0).unwrap();
        assert_eq!(below(&t), 2);
        assert_eq!(below(&percentile_threshold(ScoreKind::Msp, &s, 100.0).unwrap()), 4);
        assert_eq!(below(&percentile_threshold(ScoreKind::Msp, &s, 0.0).unwrap()), 0);
        assert_eq!(below(&percentile_threshold(ScoreKind::Msp, &s, 1.0).unwrap()), 1);
        assert!(matches!(
            percentile_threshold(ScoreKind::Msp, &[], 50.0),
            Err(CriteriaError::EmptyScores)
        ));
        assert!(percentile_threshold(ScoreKind::Msp, &s, 101.0).is_err());
        assert!(percentile_threshold(ScoreKind::Msp, &[f64::NAN], 5.0).is_err());
    }

    #[test]
    fn decision_boundary_forwards() {
        let t = Threshold {
            kind: ScoreKind::Entropy,
            percentile: 50.0,
            value: 0.5,
        };
        assert_eq!(decide(0.3, &t), Decision::Exit);
        assert_eq!(decide(0.5, &t), Decision::Forward);
        assert_eq!(decide(0.9, &t), Decision::Forward);
    }

    #[test]
    fn kinds_round_trip_through_strings() {
        for k in ScoreKind::ALL {
            assert_eq!(k.name().parse::<ScoreKind>().unwrap(), k);
        }
        assert_eq!("TOP3".parse::<ScoreKind>().unwrap(), ScoreKind::Top3);
        assert!("energy".parse::<ScoreKind>().is_err());
    }

    #[test]
    fn score_csv_layout() {
        let mut buf = Vec::new();
        let row = ScoreRow {
            sample_id: 3,
            split: "test".into(),
            snr_db: -4,
            label: 2,
            yhat_e: 1,
            yhat_f: 2,
            score_kind: ScoreKind::Gini,
            score: 0.25,
        };
        write_score_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_id,split,snr_db,label,yhat_e,yhat_f,score_kind,score\n3,test,-4,2,1,2,gini,0.25\n"
        );
    }

    fn simplex() -> impl Strategy<Value = ProbVector> {
        (prop::collection::vec(0.0f64..1.0, 10), 1u32..6).prop_map(|(raw, sharp)| {
            let w: Vec<f64> = raw.iter().map(|v| v.powi(sharp as i32)).collect();
            let s: f64 = w.iter().sum();
            if s == 0.0 {
                ProbVector::uniform(10)
            } else {
                ProbVector::new(w.iter().map(|v| v / s).collect()).unwrap()
            }
        })
    }

    proptest! {
        #[test]
        fn scores_stay_in_range(p in simplex()) {
            for (k, v) in ScoreKind::BASELINES.iter().zip(baselines(&p)) {
                let (lo, hi) = k.range(10);
                prop_assert!(v >= lo && v <= hi, "{k} = {v}");
            }
        }

        #[test]
        fn baselines_ignore_class_order(p in simplex(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut v = p.as_slice().to_vec();
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let q = ProbVector::new(v).unwrap();
            for (a, b) in baselines(&p).iter().zip(baselines(&q)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn extremes_bound_every_baseline(p in simplex(), k in 0usize..10) {
            let lo = baselines(&ProbVector::one_hot(10, k));
            let hi = baselines(&ProbVector::uniform(10));
            for ((v, l), h) in baselines(&p).iter().zip(lo).zip(hi) {
                prop_assert!(*v >= l - 1e-12 && *v <= h + 1e-12);
            }
        }

        #[test]
        fn exit_sets_nest_as_q_grows(scores in prop::collection::vec(0.0f64..1.0, 1..60)) {
            let mut prev: Option<Vec<bool>> = None;
            for q in sweep_percentiles() {
                let t = percentile_threshold(ScoreKind::Entropy, &scores, q).unwrap();
                let exits: Vec<bool> = scores.iter().map(|&s| decide(s, &t) == Decision::Exit).collect();
                if let Some(p) = &prev {
                    prop_assert!(p.iter().zip(&exits).all(|(a, b)| !a || *b));
                }
                prev = Some(exits);
            }
        }

        #[test]
        fn nearest_rank_count_without_ties(mut scores in prop::collection::btree_set(0u32..100_000, 1..50).prop_map(|s| s.into_iter().map(|v| v as f64 / 1e5).collect::<Vec<_>>()), q in 0.0f64..=100.0) {
            scores.reverse();
            let t = percentile_threshold(ScoreKind::Gini, &scores, q).unwrap();
            let n = scores.len();
            let expect = if q == 0.0 { 0 } else if q == 100.0 { n } else { ((q / 100.0 * n as f64).ceil() as usize).clamp(1, n) };
            prop_assert_eq!(scores.iter().filter(|&&s| s < t.value).count(), expect);
        }
    }
}
