//! Longitudinal logistic regression over lag-window features: ridge and
//! sparse group lasso training, SMOTE oversampling, and prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{EventType, TimeWindow};
use crate::features::{Coverage, FeatureId, FeatureSeries};

#[derive(Debug, Error)]
pub enum SupervisedError {
    #[error("degenerate training set: needs both classes")]
    DegenerateLabels,
    #[error("row length {got} does not match model dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("minority class has {minority} rows, need more than k={k}; use a smaller k")]
    MinorityTooSmall { minority: usize, k: usize },
    #[error("no predictable days in the requested span")]
    NoRows,
    #[error("malformed model file: {0}")]
    MalformedModel(String),
}

/// Index layout of a lag feature row: feature-major, lags descending
/// from delta+eta down to delta.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LagLayout {
    pub features: Vec<FeatureId>,
    pub eta: usize,
    pub delta: usize,
}

impl LagLayout {
    pub fn len(&self) -> usize {
        self.features.len() * (self.eta + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (feature, lag) of entry `index`.
    pub fn label_of(&self, index: usize) -> (FeatureId, usize) {
        let per = self.eta + 1;
        let feature = self.features[index / per];
        let lag = self.delta + self.eta - (index % per);
        (feature, lag)
    }

    /// Weight indices per lag value; each lag is one regularization group.
    pub fn lag_groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.len() {
            let (_, lag) = self.label_of(i);
            groups.entry(lag).or_default().push(i);
        }
        groups.into_iter().collect()
    }
}

/// Design matrix and labels over the predictable days of a span.
#[derive(Debug, Clone, PartialEq)]
pub struct LagDataset {
    pub layout: LagLayout,
    pub days: Vec<NaiveDate>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    /// Days dropped for missing lag history.
    pub excluded: Vec<NaiveDate>,
}

/// Arithmetic mean of one feature across forums, per day. Flagged-zero
/// days participate in the mean.
pub fn forum_average(
    series: &BTreeMap<(FeatureId, String), FeatureSeries>,
    feature: FeatureId,
) -> Option<FeatureSeries> {
    let matching: Vec<&FeatureSeries> = series
        .iter()
        .filter(|((f, _), _)| *f == feature)
        .map(|(_, s)| s)
        .collect();
    let first = matching.first()?;
    let n = matching.len() as f64;
    let mut values = vec![0.0; first.values.len()];
    for s in &matching {
        assert_eq!(s.span, first.span, "aggregated series must share a span");
        for (i, v) in s.values.iter().enumerate() {
            values[i] += v / n;
        }
    }
    Some(FeatureSeries {
        feature_id: feature,
        forum_id: "mean".to_string(),
        span: first.span,
        coverage: vec![Coverage::Computed; values.len()],
        values,
    })
}

/// One row per day of `span` whose full lag window is covered by every
/// aggregate series; labels from the attack-day set.
pub fn build_lag_features(
    aggregates: &[FeatureSeries],
    attack_days: &BTreeSet<NaiveDate>,
    eta: usize,
    delta: usize,
    span: TimeWindow,
) -> LagDataset {
    let layout = LagLayout {
        features: aggregates.iter().map(|s| s.feature_id).collect(),
        eta,
        delta,
    };
    let mut days = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    for day in span.days() {
        let mut row = Vec::with_capacity(layout.len());
        let mut complete = true;
        'outer: for series in aggregates {
            for k in (delta..=delta + eta).rev() {
                let lagged = day - Duration::days(k as i64);
                match series.value_on(lagged) {
                    Some(v) => row.push(v),
                    None => {
                        complete = false;
                        break 'outer;
                    }
                }
            }
        }
        if complete {
            days.push(day);
            rows.push(row);
            labels.push(attack_days.contains(&day));
        } else {
            excluded.push(day);
        }
    }
    LagDataset {
        layout,
        days,
        rows,
        labels,
        excluded,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    Ridge { lambda: f64 },
    SparseGroupLasso { m: f64, l: f64, g: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitModel {
    pub layout: LagLayout,
    pub event_type: Option<EventType>,
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub regularization: Regularization,
    pub decision_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub tolerance: f64,
    pub initial_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 20_000,
            tolerance: 1e-10,
            initial_step: 1.0,
        }
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Negative log-likelihood of the logistic model (no penalty).
fn logistic_loss(rows: &[Vec<f64>], labels: &[bool], intercept: f64, weights: &[f64]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = intercept + dot(x, weights);
            log1p_exp(z) - if y { z } else { 0.0 }
        })
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of the logistic loss wrt (intercept, weights).
fn logistic_gradient(
    rows: &[Vec<f64>],
    labels: &[bool],
    intercept: f64,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let mut g0 = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (x, &y) in rows.iter().zip(labels) {
        let p = sigmoid(intercept + dot(x, weights));
        let err = p - if y { 1.0 } else { 0.0 };
        g0 += err;
        for (gi, xi) in grad.iter_mut().zip(x) {
            *gi += err * xi;
        }
    }
    (g0, grad)
}

fn check_classes(labels: &[bool]) -> Result<(), SupervisedError> {
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(SupervisedError::DegenerateLabels);
    }
    Ok(())
}

fn ridge_objective(
    rows: &[Vec<f64>],
    labels: &[bool],
    lambda: f64,
    intercept: f64,
    weights: &[f64],
) -> f64 {
    logistic_loss(rows, labels, intercept, weights) + lambda * dot(weights, weights)
}

fn minimize_ridge(
    rows: &[Vec<f64>],
    labels: &[bool],
    lambda: f64,
    config: &TrainConfig,
    mut intercept: f64,
    mut weights: Vec<f64>,
) -> (f64, Vec<f64>) {
    let mut obj = ridge_objective(rows, labels, lambda, intercept, &weights);
    let mut step = config.initial_step;
    for _ in 0..config.max_iters {
        let (g0, mut grad) = logistic_gradient(rows, labels, intercept, &weights);
        for (gi, wi) in grad.iter_mut().zip(&weights) {
            *gi += 2.0 * lambda * wi;
        }
        let grad_norm2 = g0 * g0 + dot(&grad, &grad);
        if grad_norm2.sqrt() < 1e-14 {
            break;
        }
        // Backtracking line search (Armijo).
        let mut accepted = false;
        for _ in 0..60 {
            let cand0 = intercept - step * g0;
            let cand: Vec<f64> = weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - step * g)
                .collect();
            let cand_obj = ridge_objective(rows, labels, lambda, cand0, &cand);
            if cand_obj <= obj - 1e-4 * step * grad_norm2 {
                let decrease = obj - cand_obj;
                intercept = cand0;
                weights = cand;
                obj = cand_obj;
                accepted = true;
                // Allow the step to grow back after successes.
                step *= 1.5;
                if decrease < config.tolerance {
                    return (intercept, weights);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (intercept, weights)
}

pub fn train_ridge_logit(
    dataset: &LagDataset,
    lambda: f64,
    config: &TrainConfig,
    event_type: Option<EventType>,
) -> Result<LogitModel, SupervisedError> {
    if dataset.rows.is_empty() {
        return Err(SupervisedError::NoRows);
    }
    check_classes(&dataset.labels)?;
    let init = vec![0.0; dataset.layout.len()];
    let (intercept, weights) =
        minimize_ridge(&dataset.rows, &dataset.labels, lambda, config, 0.0, init);
    Ok(LogitModel {
        layout: dataset.layout.clone(),
        event_type,
        intercept,
        weights,
        regularization: Regularization::Ridge { lambda },
        decision_threshold: 0.5,
    })
}

/// Composite prox: soft-threshold each coordinate by `step * l`, then
/// shrink each group toward zero by `step * g` in norm.
fn prox_sparse_group(
    weights: &mut [f64],
    step: f64,
    l: f64,
    g: f64,
    groups: &[(usize, Vec<usize>)],
) {
    for w in weights.iter_mut() {
        let t = step * l;
        *w = w.signum() * (w.abs() - t).max(0.0);
    }
    for (_, idx) in groups {
        let norm: f64 = idx.iter().map(|&i| weights[i] * weights[i]).sum::<f64>().sqrt();
        let factor = if norm > 0.0 {
            (1.0 - step * g / norm).max(0.0)
        } else {
            0.0
        };
        for &i in idx {
            weights[i] *= factor;
        }
    }
}

fn sparse_group_penalty(weights: &[f64], l: f64, g: f64, groups: &[(usize, Vec<usize>)]) -> f64 {
    let l1: f64 = weights.iter().map(|w| w.abs()).sum();
    let gl: f64 = groups
        .iter()
        .map(|(_, idx)| {
            idx.iter()
                .map(|&i| weights[i] * weights[i])
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    l * l1 + g * gl
}

/// Penalized ridge objective, exposed so external checks can compare the
/// analytic gradient against finite differences of this value.
pub fn ridge_objective_value(
    rows: &[Vec<f64>],
    labels: &[bool],
    lambda: f64,
    intercept: f64,
    weights: &[f64],
) -> f64 {
    ridge_objective(rows, labels, lambda, intercept, weights)
}

/// Gradient of the penalized ridge objective wrt (intercept, weights).
pub fn ridge_objective_gradient(
    rows: &[Vec<f64>],
    labels: &[bool],
    lambda: f64,
    intercept: f64,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let (g0, mut grad) = logistic_gradient(rows, labels, intercept, weights);
    for (gi, wi) in grad.iter_mut().zip(weights) {
        *gi += 2.0 * lambda * wi;
    }
    (g0, grad)
}

/// Full sparse-group objective: logistic loss + (m/2)||w||^2 + penalty.
pub fn sparse_group_objective(
    rows: &[Vec<f64>],
    labels: &[bool],
    m: f64,
    l: f64,
    g: f64,
    groups: &[(usize, Vec<usize>)],
    intercept: f64,
    weights: &[f64],
) -> f64 {
    logistic_loss(rows, labels, intercept, weights)
        + 0.5 * m * dot(weights, weights)
        + sparse_group_penalty(weights, l, g, groups)
}

/// Gradient of the smooth part (loss + ridge term) of the sparse-group
/// objective.
pub fn sparse_group_smooth_gradient(
    rows: &[Vec<f64>],
    labels: &[bool],
    m: f64,
    intercept: f64,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let (g0, mut grad) = logistic_gradient(rows, labels, intercept, weights);
    for (gi, wi) in grad.iter_mut().zip(weights) {
        *gi += m * wi;
    }
    (g0, grad)
}

/// Proximal operator of the sparse-group penalty: coordinate soft-threshold
/// by `step * l`, then per-group norm shrink by `step * g`.
pub fn sparse_group_prox(
    weights: &mut [f64],
    step: f64,
    l: f64,
    g: f64,
    groups: &[(usize, Vec<usize>)],
) {
    prox_sparse_group(weights, step, l, g, groups)
}

/// Ridge training from an explicit starting point; the zero start of
/// `train_ridge_logit` and any other start must reach the same optimum of
/// the strictly convex objective.
pub fn train_ridge_logit_from(
    dataset: &LagDataset,
    lambda: f64,
    config: &TrainConfig,
    event_type: Option<EventType>,
    intercept0: f64,
    weights0: Vec<f64>,
) -> Result<LogitModel, SupervisedError> {
    if dataset.rows.is_empty() {
        return Err(SupervisedError::NoRows);
    }
    check_classes(&dataset.labels)?;
    assert_eq!(weights0.len(), dataset.layout.len());
    let (intercept, weights) = minimize_ridge(
        &dataset.rows,
        &dataset.labels,
        lambda,
        config,
        intercept0,
        weights0,
    );
    Ok(LogitModel {
        layout: dataset.layout.clone(),
        event_type,
        intercept,
        weights,
        regularization: Regularization::Ridge { lambda },
        decision_threshold: 0.5,
    })
}

pub fn train_group_lasso_logit(
    dataset: &LagDataset,
    m: f64,
    l: f64,
    g: f64,
    config: &TrainConfig,
    event_type: Option<EventType>,
) -> Result<LogitModel, SupervisedError> {
    if dataset.rows.is_empty() {
        return Err(SupervisedError::NoRows);
    }
    check_classes(&dataset.labels)?;
    let groups = dataset.layout.lag_groups();
    let rows = &dataset.rows;
    let labels = &dataset.labels;
    let smooth = |b0: f64, w: &[f64]| {
        logistic_loss(rows, labels, b0, w) + 0.5 * m * dot(w, w)
    };
    let composite =
        |b0: f64, w: &[f64]| smooth(b0, w) + sparse_group_penalty(w, l, g, &groups);
    let mut intercept = 0.0;
    let mut weights = vec![0.0; dataset.layout.len()];
    let mut obj = composite(intercept, &weights);
    let mut step = config.initial_step;
    for _ in 0..config.max_iters {
        let (g0, mut grad) = logistic_gradient(rows, labels, intercept, &weights);
        for (gi, wi) in grad.iter_mut().zip(&weights) {
            *gi += m * wi;
        }
        // Monotone proximal step: shrink until the composite objective
        // does not increase.
        let mut accepted = false;
        for _ in 0..60 {
            let cand0 = intercept - step * g0;
            let mut cand: Vec<f64> = weights
                .iter()
                .zip(&grad)
                .map(|(w, gr)| w - step * gr)
                .collect();
            prox_sparse_group(&mut cand, step, l, g, &groups);
            let cand_obj = composite(cand0, &cand);
            if cand_obj <= obj + 1e-15 {
                let decrease = obj - cand_obj;
                intercept = cand0;
                weights = cand;
                obj = cand_obj;
                accepted = true;
                step *= 1.2;
                if decrease < config.tolerance {
                    return Ok(finish_group_lasso(
                        dataset, m, l, g, event_type, intercept, weights,
                    ));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(finish_group_lasso(
        dataset, m, l, g, event_type, intercept, weights,
    ))
}

fn finish_group_lasso(
    dataset: &LagDataset,
    m: f64,
    l: f64,
    g: f64,
    event_type: Option<EventType>,
    intercept: f64,
    weights: Vec<f64>,
) -> LogitModel {
    LogitModel {
        layout: dataset.layout.clone(),
        event_type,
        intercept,
        weights,
        regularization: Regularization::SparseGroupLasso { m, l, g },
        decision_threshold: 0.5,
    }
}

impl LogitModel {
    /// Probability and thresholded label for one lag row.
    pub fn predict(&self, row: &[f64]) -> Result<(f64, bool), SupervisedError> {
        if row.len() != self.weights.len() {
            return Err(SupervisedError::DimensionMismatch {
                got: row.len(),
                expected: self.weights.len(),
            });
        }
        let p = sigmoid(self.intercept + dot(row, &self.weights));
        Ok((p, p > self.decision_threshold))
    }
}

/// SMOTE: synthesize minority rows on segments toward nearest minority
/// neighbors until the class ratio reaches `target_ratio`
/// (minority / majority, 1.0 = balanced).
pub fn smote_oversample(
    rows: &[Vec<f64>],
    labels: &[bool],
    k: usize,
    target_ratio: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), SupervisedError> {
    assert_eq!(rows.len(), labels.len());
    check_classes(labels)?;
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    let minority_label = positives <= negatives;
    let (minority, majority) = if minority_label {
        (positives, negatives)
    } else {
        (negatives, positives)
    };
    if minority <= k {
        return Err(SupervisedError::MinorityTooSmall { minority, k });
    }
    let minority_rows: Vec<&Vec<f64>> = rows
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == minority_label)
        .map(|(r, _)| r)
        .collect();
    let wanted = ((majority as f64 * target_ratio).round() as usize).saturating_sub(minority);
    // k nearest minority neighbors per minority row (Euclidean).
    let neighbors: Vec<Vec<usize>> = minority_rows
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<(f64, usize)> = minority_rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, b)| {
                    let dist: f64 = a
                        .iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    (dist, j)
                })
                .collect();
            d.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_rows = rows.to_vec();
    let mut out_labels = labels.to_vec();
    for _ in 0..wanted {
        let i = rng.gen_range(0..minority_rows.len());
        let nn = neighbors[i][rng.gen_range(0..neighbors[i].len())];
        let u: f64 = rng.gen_range(0.0..1.0);
        let synthetic: Vec<f64> = minority_rows[i]
            .iter()
            .zip(minority_rows[nn].iter())
            .map(|(a, b)| a + u * (b - a))
            .collect();
        out_rows.push(synthetic);
        out_labels.push(minority_label);
    }
    Ok((out_rows, out_labels))
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_logit_model(model: &LogitModel, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "logit-model v1")?;
    match model.event_type {
        Some(e) => writeln!(out, "event {e}")?,
        None => writeln!(out, "event none")?,
    }
    writeln!(out, "eta {}", model.layout.eta)?;
    writeln!(out, "delta {}", model.layout.delta)?;
    writeln!(out, "threshold {}", fmt17(model.decision_threshold))?;
    match model.regularization {
        Regularization::Ridge { lambda } => {
            writeln!(out, "regularization ridge {}", fmt17(lambda))?
        }
        Regularization::SparseGroupLasso { m, l, g } => writeln!(
            out,
            "regularization sparse-group-lasso {} {} {}",
            fmt17(m),
            fmt17(l),
            fmt17(g)
        )?,
    }
    let features: Vec<&str> = model.layout.features.iter().map(|f| f.as_str()).collect();
    writeln!(out, "features {}", features.join(","))?;
    writeln!(out, "intercept {}", fmt17(model.intercept))?;
    for (i, w) in model.weights.iter().enumerate() {
        let (feature, lag) = model.layout.label_of(i);
        writeln!(out, "weight {} {} {}", feature.as_str(), lag, fmt17(*w))?;
    }
    Ok(())
}

pub fn read_logit_model(input: impl BufRead) -> Result<LogitModel, SupervisedError> {
    let bad = |s: &str| SupervisedError::MalformedModel(s.to_string());
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut weight_lines: Vec<(String, usize, f64)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| bad(&e.to_string()))?;
        if i == 0 {
            if line != "logit-model v1" {
                return Err(bad(&format!("bad header: {line}")));
            }
            continue;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| bad(&format!("bad line: {line}")))?;
        if key == "weight" {
            let parts: Vec<&str> = value.split(' ').collect();
            if parts.len() != 3 {
                return Err(bad(&format!("bad weight line: {line}")));
            }
            let lag: usize = parts[1].parse().map_err(|_| bad("bad lag"))?;
            let w: f64 = parts[2].parse().map_err(|_| bad("bad weight"))?;
            weight_lines.push((parts[0].to_string(), lag, w));
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| SupervisedError::MalformedModel(format!("missing {key}")))
    };
    let event_type = match get("event")?.as_str() {
        "none" => None,
        s => Some(s.parse::<EventType>().map_err(|e| bad(&e.to_string()))?),
    };
    let eta: usize = get("eta")?.parse().map_err(|_| bad("bad eta"))?;
    let delta: usize = get("delta")?.parse().map_err(|_| bad("bad delta"))?;
    let decision_threshold: f64 = get("threshold")?.parse().map_err(|_| bad("bad threshold"))?;
    let reg_parts: Vec<&str> = get("regularization")?.split(' ').collect();
    let regularization = match reg_parts.as_slice() {
        ["ridge", lambda] => Regularization::Ridge {
            lambda: lambda.parse().map_err(|_| bad("bad lambda"))?,
        },
        ["sparse-group-lasso", m, l, g] => Regularization::SparseGroupLasso {
            m: m.parse().map_err(|_| bad("bad m"))?,
            l: l.parse().map_err(|_| bad("bad l"))?,
            g: g.parse().map_err(|_| bad("bad g"))?,
        },
        _ => return Err(bad("bad regularization")),
    };
    let features: Vec<FeatureId> = get("features")?
        .split(',')
        .map(|s| s.parse::<FeatureId>().map_err(|e| bad(&e)))
        .collect::<Result<_, _>>()?;
    let intercept: f64 = get("intercept")?.parse().map_err(|_| bad("bad intercept"))?;
    let layout = LagLayout {
        features,
        eta,
        delta,
    };
    if weight_lines.len() != layout.len() {
        return Err(bad("weight count mismatch"));
    }
    let mut weights = vec![0.0; layout.len()];
    for (i, (feature, lag, w)) in weight_lines.iter().enumerate() {
        let (expected_f, expected_lag) = layout.label_of(i);
        if expected_f.as_str() != feature || expected_lag != *lag {
            return Err(bad(&format!("weight order mismatch at index {i}")));
        }
        weights[i] = *w;
    }
    Ok(LogitModel {
        layout,
        event_type,
        intercept,
        weights,
        regularization,
        decision_threshold,
    })
}
