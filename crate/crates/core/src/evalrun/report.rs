//! CSV report emitters. Each file starts with `#` comment lines carrying provenance.

use std::io::Write;

use serde::Serialize;

use super::{BinRow, EvalError, InvocationPoint, SnrBand, TradeoffCurve};
use crate::lbap::Calibration;

/// `# key: value` lines written before the CSV body.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportHeader {
    pub entries: Vec<(String, String)>,
}

impl ReportHeader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    fn write_to<W: Write>(&self, out: &mut W) -> Result<(), EvalError> {
        for (k, v) in &self.entries {
            writeln!(out, "# {k}: {v}")?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_rows<W: Write, R: Serialize>(
    mut out: W,
    header: &ReportHeader,
    rows: impl IntoIterator<Item = R>,
) -> Result<(), EvalError> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_records<W: Write>(
    mut out: W,
    header: &ReportHeader,
    columns: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), EvalError> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the per-model summary (early/final accuracy and recoverability).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub exit_point: u8,
    pub params: usize,
    pub ee_accuracy_pct: f64,
    pub fe_accuracy_pct: f64,
    pub p_recov_pct: f64,
    pub cond_recov_pct: Option<f64>,
}

pub fn write_summary_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    rows: &[SummaryRow],
) -> Result<(), EvalError> {
    write_rows(out, header, rows)
}

pub fn write_bins_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    rows: &[BinRow],
) -> Result<(), EvalError> {
    let cols = [
        "entropy_bin",
        "count",
        "samples_pct",
        "c11_pct",
        "c01_pct",
        "c00_pct",
        "c10_pct",
    ]
    .map(String::from);
    let body = rows.iter().enumerate().map(|(i, r)| {
        let close = if i + 1 == rows.len() { ']' } else { ')' };
        vec![
            format!("[{:.1},{:.1}{close}", r.bin_lo, r.bin_hi),
            r.count.to_string(),
            r.samples_pct.to_string(),
            r.c11_pct.to_string(),
            r.c01_pct.to_string(),
            r.c00_pct.to_string(),
            r.c10_pct.to_string(),
        ]
    });
    write_records(out, header, &cols, body)
}

pub fn write_tradeoff_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    exit_label: &str,
    curves: &[TradeoffCurve],
) -> Result<(), EvalError> {
    let cols = [
        "model",
        "criterion",
        "percentile",
        "threshold",
        "forwarded",
        "forward_fraction",
        "avg_macs",
        "accuracy",
    ]
    .map(String::from);
    let body = curves.iter().flat_map(|c| {
        c.points.iter().map(move |p| {
            vec![
                exit_label.to_string(),
                c.criterion.clone(),
                p.percentile.to_string(),
                p.threshold.to_string(),
                p.forwarded.to_string(),
                p.forward_fraction.to_string(),
                p.avg_macs.to_string(),
                p.accuracy.to_string(),
            ]
        })
    });
    write_records(out, header, &cols, body)
}

fn wide<W: Write>(
    out: W,
    header: &ReportHeader,
    first: &str,
    keys: &[f64],
    curves: &[TradeoffCurve],
    query: impl Fn(&TradeoffCurve, f64) -> Option<f64>,
) -> Result<(), EvalError> {
    let mut cols = vec![first.to_string()];
    cols.extend(curves.iter().map(|c| c.criterion.clone()));
    let body = keys.iter().map(|&k| {
        let mut row = vec![k.to_string()];
        row.extend(curves.iter().map(|c| opt(query(c, k))));
        row
    });
    write_records(out, header, &cols, body)
}

/// Best accuracy per criterion for each budget; empty cells mean no point qualifies.
pub fn write_budget_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    budgets: &[f64],
    curves: &[TradeoffCurve],
) -> Result<(), EvalError> {
    wide(out, header, "budget_macs", budgets, curves, super::max_acc_under_budget)
}

/// Minimum average MACs per criterion for each accuracy target.
pub fn write_min_cost_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    targets: &[f64],
    curves: &[TradeoffCurve],
) -> Result<(), EvalError> {
    wide(out, header, "target_accuracy", targets, curves, super::min_macs_for_accuracy)
}

pub fn write_calibration_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    rows: &[(String, Calibration)],
) -> Result<(), EvalError> {
    let cols = ["model", "avg_predicted", "true_ratio", "abs_gap"].map(String::from);
    let body = rows.iter().map(|(m, c)| {
        vec![
            m.clone(),
            c.avg_predicted.to_string(),
            c.true_ratio.to_string(),
            c.abs_gap.to_string(),
        ]
    });
    write_records(out, header, &cols, body)
}

pub fn write_invocation_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    rows: &[(String, Vec<InvocationPoint>)],
) -> Result<(), EvalError> {
    let cols = ["criterion", "invocation_rate_pct", "forwarded", "recoverable_rate"].map(String::from);
    let body = rows.iter().flat_map(|(name, pts)| {
        pts.iter().map(move |p| {
            vec![
                name.clone(),
                p.rate_pct.to_string(),
                p.forwarded.to_string(),
                p.recoverable_rate.to_string(),
            ]
        })
    });
    write_records(out, header, &cols, body)
}

pub fn write_snr_csv<W: Write>(
    out: W,
    header: &ReportHeader,
    rows: &[(SnrBand, TradeoffCurve)],
) -> Result<(), EvalError> {
    let cols = [
        "band",
        "criterion",
        "percentile",
        "n",
        "forward_fraction",
        "avg_macs",
        "accuracy",
    ]
    .map(String::from);
    let body = rows.iter().flat_map(|(band, c)| {
        c.points.iter().map(move |p| {
            vec![
                band.name().to_string(),
                c.criterion.clone(),
                p.percentile.to_string(),
                p.n.to_string(),
                p.forward_fraction.to_string(),
                p.avg_macs.to_string(),
                p.accuracy.to_string(),
            ]
        })
    });
    write_records(out, header, &cols, body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lines_precede_the_table() {
        let h = ReportHeader::new()
            .with("thresholds", "validation split")
            .with("seed", 7);
        let mut buf = Vec::new();
        let rows = vec![(
            "EE-RS1".to_string(),
            Calibration {
                avg_predicted: 0.5,
                true_ratio: 0.25,
                abs_gap: 0.25,
            },
        )];
        write_calibration_csv(&mut buf, &h, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# thresholds: validation split\n# seed: 7\nmodel,avg_predicted,true_ratio,abs_gap\nEE-RS1,0.5,0.25,0.25\n"
        );
    }
}
