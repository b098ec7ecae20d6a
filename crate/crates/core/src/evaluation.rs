//! Chronological splits, ROC/AUC, precision/recall/F1 with analytic random
//! baselines, and high-activity week filtering.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::TimeWindow;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("span {0} too short to split")]
    DegenerateSpan(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("prediction and label lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Chronological train/test windows; train strictly precedes test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: TimeWindow,
    pub test: TimeWindow,
}

fn month_index(d: NaiveDate) -> i32 {
    d.year() * 12 + d.month() as i32 - 1
}

fn month_start_of(index: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(index.div_euclid(12), (index.rem_euclid(12) + 1) as u32, 1)
        .expect("valid month")
}

/// Split at the month edge nearest to the ratio point. No shuffling.
pub fn chrono_split(span: TimeWindow, train_ratio: f64) -> Result<SplitSpec, EvalError> {
    assert!(train_ratio > 0.0 && train_ratio < 1.0);
    let first = month_index(span.start);
    let last = month_index(span.end);
    let months = last - first + 1;
    if months < 2 {
        return Err(EvalError::DegenerateSpan(span.to_string()));
    }
    let train_months = ((months as f64 * train_ratio).round() as i32).clamp(1, months - 1);
    let boundary = month_start_of(first + train_months);
    let train = TimeWindow {
        start: span.start,
        end: boundary.pred_opt().expect("valid day"),
    };
    let test = TimeWindow {
        start: boundary,
        end: span.end,
    };
    Ok(SplitSpec { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// TPR/FPR per threshold (prediction = score > threshold), with the
/// trapezoid AUC over the sorted curve including (0,0) and (1,1).
pub fn roc_auc(
    scores: &[f64],
    labels: &[bool],
    grid: &[f64],
) -> Result<(Vec<RocPoint>, f64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut points: Vec<RocPoint> = grid
        .iter()
        .map(|&t| {
            let mut tp = 0;
            let mut fp = 0;
            for (&s, &y) in scores.iter().zip(labels) {
                if s > t {
                    if y {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            RocPoint {
                threshold: t,
                tpr: tp as f64 / pos as f64,
                fpr: fp as f64 / neg as f64,
            }
        })
        .collect();
    points.push(RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    });
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        tpr: 1.0,
        fpr: 1.0,
    });
    points.sort_by(|a, b| {
        (a.fpr, a.tpr)
            .partial_cmp(&(b.fpr, b.tpr))
            .expect("finite rates")
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

/// Evenly spaced unique score values, usable as a threshold grid.
pub fn score_grid(scores: &[f64]) -> Vec<f64> {
    let mut grid = scores.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    grid.dedup();
    grid
}

pub fn write_roc_csv(points: &[RocPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    /// Expected F1 of a fair-coin predictor: 2*0.5*pi / (0.5 + pi).
    pub baseline_uniform_f1: f64,
    /// Expected F1 of a prior-weighted random predictor: pi.
    pub baseline_prior_f1: f64,
    /// Days without a prediction (insufficient history), excluded above.
    pub excluded: usize,
    /// Free-form configuration echo (eta, delta, thresholds, feature...).
    pub note: String,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn prf1(predictions: &[Option<bool>], labels: &[bool]) -> Result<MetricsReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    let mut excluded = 0;
    let mut pos = 0;
    let mut total = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let Some(p) = p else {
            excluded += 1;
            continue;
        };
        total += 1;
        if y {
            pos += 1;
        }
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let rate = |num: usize, den: usize| if den > 0 { num as f64 / den as f64 } else { 0.0 };
    let precision = rate(tp, tp + fp);
    let recall = rate(tp, tp + fn_);
    let pi = rate(pos, total);
    Ok(MetricsReport {
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1: f1_score(precision, recall),
        auc: None,
        baseline_uniform_f1: if pi > 0.0 { 2.0 * 0.5 * pi / (0.5 + pi) } else { 0.0 },
        baseline_prior_f1: pi,
        excluded,
        note: String::new(),
    })
}

/// Monte Carlo baseline F1 (mean over trials) for a random predictor with
/// hit probability 0.5 (uniform) or the class prior.
pub fn sampled_baseline_f1(labels: &[bool], use_prior: bool, seed: u64, trials: usize) -> f64 {
    let pos = labels.iter().filter(|&&y| y).count();
    let p = if use_prior {
        pos as f64 / labels.len() as f64
    } else {
        0.5
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..trials {
        let preds: Vec<Option<bool>> = labels.iter().map(|_| Some(rng.gen_bool(p))).collect();
        sum += prf1(&preds, labels).expect("aligned").f1;
    }
    sum / trials as f64
}

/// Mask over `span` selecting days whose ISO week sums more than
/// `min_per_week` incidents (strict).
pub fn high_activity_filter(
    counts: &BTreeMap<NaiveDate, u32>,
    span: TimeWindow,
    min_per_week: u32,
) -> Vec<bool> {
    let mut weekly: BTreeMap<(i32, u32), u32> = BTreeMap::new();
    for day in span.days() {
        let wk = day.iso_week();
        *weekly.entry((wk.year(), wk.week())).or_insert(0) +=
            counts.get(&day).copied().unwrap_or(0);
    }
    span.days()
        .map(|day| {
            let wk = day.iso_week();
            weekly[&(wk.year(), wk.week())] > min_per_week
        })
        .collect()
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if !self.note.is_empty() {
            writeln!(f, "config: {}", self.note)?;
        }
        writeln!(
            f,
            "confusion: tp={} fp={} tn={} fn={} excluded={}",
            self.tp, self.fp, self.tn, self.fn_, self.excluded
        )?;
        writeln!(
            f,
            "precision={:.4} recall={:.4} f1={:.4}",
            self.precision, self.recall, self.f1
        )?;
        if let Some(auc) = self.auc {
            writeln!(f, "auc={auc:.4}")?;
        }
        write!(
            f,
            "baseline_f1: uniform={:.4} prior={:.4}",
            self.baseline_uniform_f1, self.baseline_prior_f1
        )
    }
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "tp,fp,tn,fn,excluded,precision,recall,f1,auc,baseline_uniform_f1,baseline_prior_f1,note"
    }

    pub fn csv_row(&self) -> String {
        let auc = self.auc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.excluded,
            self.precision,
            self.recall,
            self.f1,
            auc,
            self.baseline_uniform_f1,
            self.baseline_prior_f1,
            self.note.replace(',', ";")
        )
    }
}
