//! Point-level evaluation: TP/FP/FN counting against groundtruth, total
//! and average precision/recall, parameter sweeps and range-limited
//! recall, all emitting plot-ready CSV.
//!
//! Total metrics pool counts over the whole log; average metrics take the
//! per-scan ratio and average it over the scans where the denominator is
//! nonzero (their counts are reported as `n_p` and `n_r`). Undefined
//! metrics stay absent and serialize as `nan`, never as 0 or 1.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{LogRunner, PipelineConfig};
use crate::scan::{Label, LabelImage, LidarScan};
use crate::simulate::GroundTruth;
use crate::trajectory::Trajectory;

/// Point counts for one scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanCounts {
    pub scan_index: usize,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl ScanCounts {
    pub fn precision(&self) -> Option<f64> {
        let den = self.true_positives + self.false_positives;
        (den > 0).then(|| self.true_positives as f64 / den as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let den = self.true_positives + self.false_negatives;
        (den > 0).then(|| self.true_positives as f64 / den as f64)
    }
}

/// Count one scan's prediction against its groundtruth. Grids must be
/// congruent, including their invalid cells; invalid cells never count.
pub fn count_scan(pred: &LabelImage, truth: &GroundTruth) -> Result<ScanCounts> {
    count_scan_filtered(pred, truth, 0, |_, _| true)
}

/// As [`count_scan`], restricted to valid cells whose measured range is
/// within `limit` meters.
pub fn count_scan_within_range(
    pred: &LabelImage,
    truth: &GroundTruth,
    scan: &LidarScan,
    limit: f64,
) -> Result<ScanCounts> {
    if scan.rows() != pred.rows || scan.cols() != pred.cols {
        return Err(Error::GridMismatch(format!(
            "scan is {} x {}, labels are {} x {}",
            scan.rows(),
            scan.cols(),
            pred.rows,
            pred.cols
        )));
    }
    count_scan_filtered(pred, truth, scan.scan_index, |l, c| scan.range(l, c) <= limit)
}

fn count_scan_filtered(
    pred: &LabelImage,
    truth: &GroundTruth,
    scan_index: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<ScanCounts> {
    if pred.rows != truth.rows || pred.cols != truth.cols {
        return Err(Error::GridMismatch(format!(
            "prediction is {} x {}, truth is {} x {}",
            pred.rows, pred.cols, truth.rows, truth.cols
        )));
    }
    let mut counts = ScanCounts {
        scan_index,
        true_positives: 0,
        false_positives: 0,
        false_negatives: 0,
    };
    for l in 0..pred.rows {
        for c in 0..pred.cols {
            let p = pred.get(l, c);
            let t = truth.label(l, c);
            match (p == Label::Invalid, t == Label::Invalid) {
                (true, true) => continue,
                (false, false) => {}
                _ => {
                    return Err(Error::GridMismatch(format!(
                        "invalid cells disagree at ({l},{c})"
                    )))
                }
            }
            if !keep(l, c) {
                continue;
            }
            match (p, t) {
                (Label::Dynamic, Label::Dynamic) => counts.true_positives += 1,
                (Label::Dynamic, Label::Static) => counts.false_positives += 1,
                (Label::Static, Label::Dynamic) => counts.false_negatives += 1,
                _ => {}
            }
        }
    }
    Ok(counts)
}

/// Pooled precision and recall over all scans. A metric whose pooled
/// denominator is zero is absent.
pub fn pr_total(counts: &[ScanCounts]) -> (Option<f64>, Option<f64>) {
    let tp: u64 = counts.iter().map(|c| c.true_positives).sum();
    let fp: u64 = counts.iter().map(|c| c.false_positives).sum();
    let fnn: u64 = counts.iter().map(|c| c.false_negatives).sum();
    let p = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let r = (tp + fnn > 0).then(|| tp as f64 / (tp + fnn) as f64);
    (p, r)
}

/// Per-scan-averaged precision and recall with the valid-scan counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrAverage {
    pub p_avg: Option<f64>,
    pub r_avg: Option<f64>,
    pub n_p: usize,
    pub n_r: usize,
}

/// Average the per-scan ratios over scans with nonzero denominators.
pub fn pr_average(counts: &[ScanCounts]) -> PrAverage {
    let mut p_sum = 0.0;
    let mut n_p = 0usize;
    let mut r_sum = 0.0;
    let mut n_r = 0usize;
    for c in counts {
        if let Some(p) = c.precision() {
            p_sum += p;
            n_p += 1;
        }
        if let Some(r) = c.recall() {
            r_sum += r;
            n_r += 1;
        }
    }
    PrAverage {
        p_avg: (n_p > 0).then(|| p_sum / n_p as f64),
        r_avg: (n_r > 0).then(|| r_sum / n_r as f64),
        n_p,
        n_r,
    }
}

/// Full evaluation report for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct PRReport {
    pub per_scan: Vec<ScanCounts>,
    pub p_total: Option<f64>,
    pub r_total: Option<f64>,
    pub p_avg: Option<f64>,
    pub r_avg: Option<f64>,
    pub n_p: usize,
    pub n_r: usize,
}

pub fn pr_report(per_scan: Vec<ScanCounts>) -> PRReport {
    let (p_total, r_total) = pr_total(&per_scan);
    let avg = pr_average(&per_scan);
    PRReport {
        per_scan,
        p_total,
        r_total,
        p_avg: avg.p_avg,
        r_avg: avg.r_avg,
        n_p: avg.n_p,
        n_r: avg.n_r,
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "nan".to_string(),
    }
}

/// One sweep measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub p_total: Option<f64>,
    pub r_total: Option<f64>,
    pub p_avg: Option<f64>,
    pub r_avg: Option<f64>,
}

/// Rerun the full pipeline once per parameter value and evaluate each run
/// against groundtruth. Rows come back sorted by value. Sweeping
/// `error_threshold` moves `border_tol` with it while the two are coupled
/// (the border tolerance defaults to the error threshold).
pub fn sweep(
    scans: &[LidarScan],
    truths: &[GroundTruth],
    traj: &Trajectory,
    base: &PipelineConfig,
    param: &str,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if base.get_param(param).is_none() {
        return Err(Error::InvalidInput(format!("unknown sweep parameter `{param}`")));
    }
    if scans.len() != truths.len() {
        return Err(Error::GridMismatch(format!(
            "{} scans but {} groundtruth grids",
            scans.len(),
            truths.len()
        )));
    }
    let coupled = param == "error_threshold"
        && base.freespace.border_tol == base.compare.error_threshold;
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(sorted.len());
    for value in sorted {
        let mut cfg = base.clone();
        cfg.set_param(param, value)?;
        if coupled {
            cfg.freespace.border_tol = value;
        }
        let report = run_log(scans, truths, traj, &cfg)?;
        rows.push(SweepRow {
            value,
            p_total: report.p_total,
            r_total: report.r_total,
            p_avg: report.p_avg,
            r_avg: report.r_avg,
        });
    }
    Ok(rows)
}

/// Run the detector over a whole in-memory log and evaluate it.
pub fn run_log(
    scans: &[LidarScan],
    truths: &[GroundTruth],
    traj: &Trajectory,
    cfg: &PipelineConfig,
) -> Result<PRReport> {
    let mut runner = LogRunner::new(traj, cfg.clone())?;
    let mut per_scan = Vec::new();
    let mut eval = |labels: &LabelImage, idx: usize| -> Result<()> {
        per_scan.push(count_scan(labels, &truths[idx])?);
        Ok(())
    };
    for scan in scans {
        let idx = scan.scan_index;
        if let Some(result) = runner.push(scan.clone())? {
            eval(&result.labels, result.scan_index)?;
            debug_assert_eq!(result.scan_index, idx - cfg.freespace.forward_gap);
        }
    }
    for result in runner.finish()? {
        eval(&result.labels, result.scan_index)?;
    }
    Ok(pr_report(per_scan))
}

pub fn write_sweep_csv(path: impl AsRef<Path>, param: &str, rows: &[SweepRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{param},P_t,R_t,P_a,R_a")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.value,
            fmt_metric(r.p_total),
            fmt_metric(r.r_total),
            fmt_metric(r.p_avg),
            fmt_metric(r.r_avg)
        )?;
    }
    Ok(())
}

/// One range-limited recall measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow {
    pub limit: f64,
    pub r_total: Option<f64>,
    pub r_avg: Option<f64>,
    pub n_r: usize,
}

/// Recall restricted to points measured within each range limit.
pub fn recall_vs_range(
    preds: &[LabelImage],
    truths: &[GroundTruth],
    scans: &[LidarScan],
    limits: &[f64],
) -> Result<Vec<RangeRow>> {
    if preds.len() != truths.len() || preds.len() != scans.len() {
        return Err(Error::GridMismatch(
            "predictions, truths and scans must pair up".into(),
        ));
    }
    let mut rows = Vec::with_capacity(limits.len());
    for &limit in limits {
        let mut counts = Vec::with_capacity(preds.len());
        for ((pred, truth), scan) in preds.iter().zip(truths).zip(scans) {
            counts.push(count_scan_within_range(pred, truth, scan, limit)?);
        }
        let (_, r_total) = pr_total(&counts);
        let avg = pr_average(&counts);
        rows.push(RangeRow {
            limit,
            r_total,
            r_avg: avg.r_avg,
            n_r: avg.n_r,
        });
    }
    Ok(rows)
}

pub fn write_range_csv(path: impl AsRef<Path>, rows: &[RangeRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "limit,R_t,R_a")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{}",
            r.limit,
            fmt_metric(r.r_total),
            fmt_metric(r.r_avg)
        )?;
    }
    Ok(())
}
