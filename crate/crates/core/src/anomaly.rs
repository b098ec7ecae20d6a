//! Unsupervised attack prediction: PCA subspace residuals over the
//! day-by-forum measurement matrix of a single feature.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::corpus::TimeWindow;
use crate::features::{FeatureId, FeatureSeries};

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("series span {series} does not cover requested span {requested}")]
    SpanMismatch { series: String, requested: String },
    #[error("no series supplied")]
    NoSeries,
    #[error("mixed feature ids in one matrix")]
    MixedFeatures,
    #[error("need r < k <= min(rows, columns): r={r}, k={k}, rows={rows}, cols={cols}")]
    BadRank {
        r: usize,
        k: usize,
        rows: usize,
        cols: usize,
    },
    #[error("row dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
}

/// Day-by-forum matrix of one feature's values.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    pub feature_id: FeatureId,
    pub span: TimeWindow,
    pub forums: Vec<String>,
    /// rows = days of `span`, columns follow `forums`.
    pub data: DMatrix<f64>,
}

/// Stack the per-forum series of one feature into rows over `span`.
/// Column order follows the input order.
pub fn assemble_matrix<'a>(
    series: impl IntoIterator<Item = &'a FeatureSeries>,
    span: TimeWindow,
) -> Result<MeasurementMatrix, AnomalyError> {
    let series: Vec<&FeatureSeries> = series.into_iter().collect();
    if series.is_empty() {
        return Err(AnomalyError::NoSeries);
    }
    let feature_id = series[0].feature_id;
    if series.iter().any(|s| s.feature_id != feature_id) {
        return Err(AnomalyError::MixedFeatures);
    }
    for s in &series {
        if s.span.day_index(span.start).is_none() || s.span.day_index(span.end).is_none() {
            return Err(AnomalyError::SpanMismatch {
                series: s.span.to_string(),
                requested: span.to_string(),
            });
        }
    }
    let rows = span.num_days();
    let cols = series.len();
    let mut data = DMatrix::zeros(rows, cols);
    for (j, s) in series.iter().enumerate() {
        for (i, day) in span.days().enumerate() {
            data[(i, j)] = s.values[s.span.day_index(day).expect("covered")];
        }
    }
    Ok(MeasurementMatrix {
        feature_id,
        span,
        forums: series.iter().map(|s| s.forum_id.clone()).collect(),
        data,
    })
}

/// PCA subspace split: the first `r` of `k` principal axes model normal
/// behavior, the rest carry the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceModel {
    pub feature_id: FeatureId,
    pub forums: Vec<String>,
    pub means: DVector<f64>,
    /// F x k matrix, axis per column, decreasing variance.
    pub axes: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub r: usize,
    /// r reached or exceeded the numerical rank of the training data.
    pub rank_warning: bool,
}

const RANK_TOL: f64 = 1e-10;

pub fn fit_subspace(
    matrix: &MeasurementMatrix,
    k: usize,
    r: usize,
) -> Result<SubspaceModel, AnomalyError> {
    let rows = matrix.data.nrows();
    let cols = matrix.data.ncols();
    if r >= k || k > cols || k > rows {
        return Err(AnomalyError::BadRank { r, k, rows, cols });
    }
    let means = DVector::from_iterator(cols, matrix.data.column_iter().map(|c| c.mean()));
    let mut centered = matrix.data.clone();
    for (j, mean) in means.iter().enumerate() {
        for i in 0..rows {
            centered[(i, j)] -= mean;
        }
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });
    let mut axes = DMatrix::zeros(cols, k);
    let mut singular_values = Vec::with_capacity(k);
    for (col, &src) in order.iter().take(k).enumerate() {
        let mut axis: DVector<f64> = v_t.row(src).transpose();
        // Deterministic sign: largest-magnitude entry positive.
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .expect("non-empty axis");
        if axis[lead] < 0.0 {
            axis.neg_mut();
        }
        axes.set_column(col, &axis);
        singular_values.push(svd.singular_values[src]);
    }
    let rank = singular_values.iter().filter(|&&s| s > RANK_TOL).count();
    Ok(SubspaceModel {
        feature_id: matrix.feature_id,
        forums: matrix.forums.clone(),
        means,
        axes,
        singular_values,
        r,
        rank_warning: r >= rank,
    })
}

impl SubspaceModel {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    fn normal_axes(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.dim(), self.r);
        for j in 0..self.r {
            p.set_column(j, &self.axes.column(j).into_owned());
        }
        p
    }

    /// C = P P^T over the first r axes.
    pub fn normal_projector(&self) -> DMatrix<f64> {
        let p = self.normal_axes();
        &p * p.transpose()
    }

    /// C~ = I - P P^T.
    pub fn residual_projector(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - self.normal_projector()
    }

    /// Squared prediction error of one raw (uncentered) row.
    pub fn spe(&self, row: &DVector<f64>) -> Result<f64, AnomalyError> {
        if row.len() != self.dim() {
            return Err(AnomalyError::DimensionMismatch {
                got: row.len(),
                expected: self.dim(),
            });
        }
        let y = row - &self.means;
        let p = self.normal_axes();
        let residual = &y - &p * (p.transpose() * &y);
        Ok(residual.norm_squared())
    }
}

/// SPE per day, optionally flagged against a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub span: TimeWindow,
    pub spe: Vec<f64>,
    pub threshold: Option<f64>,
    pub flags: Vec<bool>,
}

/// Score every row of `matrix` with the (already fitted) model and the
/// training means. No refit happens here.
pub fn spe_series(
    model: &SubspaceModel,
    matrix: &MeasurementMatrix,
) -> Result<ResidualSeries, AnomalyError> {
    let mut spe = Vec::with_capacity(matrix.data.nrows());
    for i in 0..matrix.data.nrows() {
        let row: DVector<f64> = matrix.data.row(i).transpose();
        spe.push(model.spe(&row)?);
    }
    Ok(ResidualSeries {
        span: matrix.span,
        spe,
        threshold: None,
        flags: Vec::new(),
    })
}

/// How the SPE threshold is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Absolute(f64),
    /// Order statistic of the training SPE distribution, q in (0,1).
    TrainingQuantile(f64),
}

/// The q-th order-statistic threshold of the training SPE values.
pub fn quantile_threshold(training_spe: &[f64], q: f64) -> f64 {
    assert!(!training_spe.is_empty() && q > 0.0 && q < 1.0);
    let mut sorted = training_spe.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite SPE"));
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn flag_anomalies(
    series: &ResidualSeries,
    spec: ThresholdSpec,
    training_spe: &[f64],
) -> ResidualSeries {
    let threshold = match spec {
        ThresholdSpec::Absolute(t) => t,
        ThresholdSpec::TrainingQuantile(q) => quantile_threshold(training_spe, q),
    };
    ResidualSeries {
        span: series.span,
        spe: series.spe.clone(),
        threshold: Some(threshold),
        flags: series.spe.iter().map(|&s| s > threshold).collect(),
    }
}

/// Daily 0/1 attack predictions; None where the flag history is too short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnsupervisedPredictions {
    pub span: TimeWindow,
    pub predictions: Vec<Option<bool>>,
}

impl UnsupervisedPredictions {
    pub fn prediction_on(&self, day: NaiveDate) -> Option<Option<bool>> {
        self.span.day_index(day).map(|i| self.predictions[i])
    }
}

/// Predict an attack on day t when the window [t-eta-delta, t-delta]
/// holds at least max(1, zeta/7) flagged days.
pub fn predict_attacks_unsupervised(
    flagged: &ResidualSeries,
    eta: usize,
    delta: usize,
    zeta: u32,
) -> UnsupervisedPredictions {
    assert!(!flagged.flags.is_empty(), "series must be flagged first");
    let need = (zeta as f64 / 7.0).max(1.0);
    let n = flagged.flags.len();
    let mut predictions = Vec::with_capacity(n);
    for t in 0..n {
        if t < eta + delta {
            predictions.push(None);
            continue;
        }
        let lo = t - eta - delta;
        let hi = t - delta;
        let count = flagged.flags[lo..=hi].iter().filter(|&&f| f).count();
        predictions.push(Some(count as f64 >= need));
    }
    UnsupervisedPredictions {
        span: flagged.span,
        predictions,
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Text serialization: means, axes and split in decimal with 17
/// significant digits, one logical item per line.
pub fn write_model(model: &SubspaceModel, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "subspace-model v1")?;
    writeln!(out, "feature {}", model.feature_id.as_str())?;
    writeln!(out, "forums {}", model.forums.join(","))?;
    writeln!(out, "r {}", model.r)?;
    writeln!(out, "k {}", model.axes.ncols())?;
    let means: Vec<String> = model.means.iter().map(|&m| fmt17(m)).collect();
    writeln!(out, "means {}", means.join(" "))?;
    let sv: Vec<String> = model.singular_values.iter().map(|&s| fmt17(s)).collect();
    writeln!(out, "singular_values {}", sv.join(" "))?;
    for j in 0..model.axes.ncols() {
        let axis: Vec<String> = model.axes.column(j).iter().map(|&v| fmt17(v)).collect();
        writeln!(out, "axis {}", axis.join(" "))?;
    }
    Ok(())
}

pub fn read_model(input: impl BufRead) -> Result<SubspaceModel, AnomalyError> {
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut axes_rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| AnomalyError::MalformedModel(e.to_string()))?;
        if i == 0 {
            if line != "subspace-model v1" {
                return Err(AnomalyError::MalformedModel(format!("bad header: {line}")));
            }
            continue;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| AnomalyError::MalformedModel(format!("bad line: {line}")))?;
        if key == "axis" {
            axes_rows.push(parse_floats(value)?);
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .ok_or_else(|| AnomalyError::MalformedModel(format!("missing {key}")))
    };
    let feature_id: FeatureId = get("feature")?
        .parse()
        .map_err(AnomalyError::MalformedModel)?;
    let forums: Vec<String> = get("forums")?.split(',').map(str::to_string).collect();
    let r: usize = get("r")?
        .parse()
        .map_err(|_| AnomalyError::MalformedModel("bad r".into()))?;
    let k: usize = get("k")?
        .parse()
        .map_err(|_| AnomalyError::MalformedModel("bad k".into()))?;
    let means = parse_floats(get("means")?)?;
    let singular_values = parse_floats(get("singular_values")?)?;
    if axes_rows.len() != k || axes_rows.iter().any(|a| a.len() != means.len()) {
        return Err(AnomalyError::MalformedModel("axis shape mismatch".into()));
    }
    let dim = means.len();
    let mut axes = DMatrix::zeros(dim, k);
    for (j, axis) in axes_rows.iter().enumerate() {
        axes.set_column(j, &DVector::from_row_slice(axis));
    }
    let rank = singular_values.iter().filter(|&&s| s > RANK_TOL).count();
    Ok(SubspaceModel {
        feature_id,
        forums,
        means: DVector::from_row_slice(&means),
        axes,
        singular_values,
        r,
        rank_warning: r >= rank,
    })
}

fn parse_floats(s: &str) -> Result<Vec<f64>, AnomalyError> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| AnomalyError::MalformedModel(format!("bad number: {t}")))
        })
        .collect()
}
