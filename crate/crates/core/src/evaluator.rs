//! Metrics: per-class top-1, harmonic mean, FID, calibration sweeps and
//! embedding export.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::{calibrated_argmax, predict_calibrated_batch, ZslClassifier, ZslMode};
use crate::data::{ClassId, ClassSpace};
use crate::dct::TokenEmbeddingState;
use crate::error::{Error, Result};
use crate::tape::Matrix;

/// Macro-averaged top-1 accuracy over the classes of `subset` that occur in
/// `labels`.
pub fn per_class_top1(predictions: &[ClassId], labels: &[ClassId], subset: &BTreeSet<ClassId>) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::structural("per-class accuracy over an empty class subset"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::structural(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut tally: BTreeMap<&ClassId, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        if !subset.contains(l) {
            return Err(Error::structural(format!("label {l} outside the evaluated subset")));
        }
        let e = tally.entry(l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    if tally.is_empty() {
        return Err(Error::structural("no labeled records to evaluate"));
    }
    Ok(tally.values().map(|(c, n)| *c as f64 / *n as f64).sum::<f64>() / tally.len() as f64)
}

/// Per-class accuracies keyed by class id.
pub fn per_class_breakdown(predictions: &[ClassId], labels: &[ClassId]) -> BTreeMap<ClassId, f64> {
    let mut tally: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        let e = tally.entry(l.clone()).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    tally.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect()
}

pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s > 0.0 {
        2.0 * u * s / (u + s)
    } else {
        0.0
    }
}

/// How the calibration coefficient in a report was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSource {
    Config,
    Override,
    SweepBest,
}

impl LambdaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LambdaSource::Config => "config",
            LambdaSource::Override => "override",
            LambdaSource::SweepBest => "sweep-best",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: ZslMode,
    /// Conventional-setting accuracy.
    pub acc: Option<f64>,
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
    pub per_class: BTreeMap<ClassId, f64>,
    pub lambda: Option<f64>,
    pub lambda_source: Option<LambdaSource>,
    pub config_hash: String,
    pub n_eval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<FidReport>,
}

impl MetricsReport {
    /// Summary lines with metrics rendered as percentages to one decimal.
    pub fn summary_lines(&self) -> Vec<String> {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut lines = Vec::new();
        match self.mode {
            ZslMode::Czsl => lines.push(format!("czsl acc={}", self.acc.map(pct).unwrap_or_default())),
            ZslMode::Gzsl => lines.push(format!(
                "gzsl U={} S={} H={} lambda={} ({})",
                self.u.map(pct).unwrap_or_default(),
                self.s.map(pct).unwrap_or_default(),
                self.h.map(pct).unwrap_or_default(),
                self.lambda.map(|l| format!("{l}")).unwrap_or_default(),
                self.lambda_source.map(LambdaSource::as_str).unwrap_or_default(),
            )),
        }
        if let Some(f) = &self.fid {
            lines.push(format!("fid={:.3} extractor={} clipped={:.2e}", f.value, f.extractor, f.clipped));
        }
        lines
    }
}

/// Conventional-setting report: predictions restricted to unseen classes.
pub fn evaluate_czsl(clf: &ZslClassifier, features: &Matrix, labels: &[ClassId], space: &ClassSpace, config_hash: &str) -> Result<MetricsReport> {
    if clf.mode != ZslMode::Czsl {
        return Err(Error::structural("conventional evaluation needs a conventional-setting classifier"));
    }
    let pred = predict_calibrated_batch(clf, features, 0.0)?;
    let acc = per_class_top1(&pred, labels, space.unseen())?;
    Ok(MetricsReport {
        mode: ZslMode::Czsl,
        acc: Some(acc),
        u: None,
        s: None,
        h: None,
        per_class: per_class_breakdown(&pred, labels),
        lambda: None,
        lambda_source: None,
        config_hash: config_hash.into(),
        n_eval: labels.len(),
        calibration: None,
        fid: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub lambda: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub points: Vec<CalibrationPoint>,
    /// First grid value reaching the highest harmonic mean.
    pub best_lambda: f64,
}

/// U and S at one λ. Predictions range over the whole label space.
fn gzsl_point(pred: &[ClassId], labels: &[ClassId], space: &ClassSpace, lambda: f64) -> Result<CalibrationPoint> {
    let (mut pu, mut lu, mut ps, mut ls) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, l) in pred.iter().zip(labels) {
        if space.is_unseen(l) {
            pu.push(p.clone());
            lu.push(l.clone());
        } else {
            ps.push(p.clone());
            ls.push(l.clone());
        }
    }
    let u = if lu.is_empty() { 0.0 } else { per_class_top1(&pu, &lu, space.unseen())? };
    let s = if ls.is_empty() { 0.0 } else { per_class_top1(&ps, &ls, space.seen())? };
    Ok(CalibrationPoint { lambda, u, s, h: harmonic_mean(u, s) })
}

pub fn calibration_sweep(
    clf: &ZslClassifier,
    features: &Matrix,
    labels: &[ClassId],
    space: &ClassSpace,
    grid: &[f64],
) -> Result<CalibrationCurve> {
    let probs = clf.probabilities(features)?;
    sweep_probabilities(&probs, &clf.label_space, &clf.seen_mask, labels, space, grid)
}

/// Calibration sweep over fixed softmax outputs whose columns follow
/// `label_space`.
pub fn sweep_probabilities(
    probs: &Matrix,
    label_space: &[ClassId],
    seen_mask: &[bool],
    labels: &[ClassId],
    space: &ClassSpace,
    grid: &[f64],
) -> Result<CalibrationCurve> {
    if grid.is_empty() {
        return Err(Error::structural("calibration sweep needs a nonempty grid"));
    }
    if probs.ncols() != label_space.len() || seen_mask.len() != label_space.len() || probs.nrows() != labels.len() {
        return Err(Error::structural("probability matrix does not match the label space or labels"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &l in grid {
        let pred: Vec<ClassId> = probs
            .rows()
            .into_iter()
            .map(|r| label_space[calibrated_argmax(r.as_slice().expect("row"), seen_mask, l)].clone())
            .collect();
        points.push(gzsl_point(&pred, labels, space, l)?);
    }
    let best = points.iter().fold(points[0], |b, p| if p.h > b.h { *p } else { b });
    Ok(CalibrationCurve { points, best_lambda: best.lambda })
}

/// Generalized-setting report. With `sweep_grid` the reported λ is the
/// best-H grid point; otherwise `lambda` is used as given.
pub fn evaluate_gzsl(
    clf: &ZslClassifier,
    features: &Matrix,
    labels: &[ClassId],
    space: &ClassSpace,
    lambda: (f64, LambdaSource),
    sweep_grid: Option<&[f64]>,
    config_hash: &str,
) -> Result<MetricsReport> {
    if clf.mode != ZslMode::Gzsl {
        return Err(Error::structural("generalized evaluation needs a generalized-setting classifier"));
    }
    let curve = sweep_grid.map(|g| calibration_sweep(clf, features, labels, space, g)).transpose()?;
    let (l, source) = match &curve {
        Some(c) => (c.best_lambda, LambdaSource::SweepBest),
        None => lambda,
    };
    let pred = predict_calibrated_batch(clf, features, l)?;
    let point = gzsl_point(&pred, labels, space, l)?;
    Ok(MetricsReport {
        mode: ZslMode::Gzsl,
        acc: None,
        u: Some(point.u),
        s: Some(point.s),
        h: Some(point.h),
        per_class: per_class_breakdown(&pred, labels),
        lambda: Some(l),
        lambda_source: Some(source),
        config_hash: config_hash.into(),
        n_eval: labels.len(),
        calibration: curve,
        fid: None,
    })
}

/// Gaussian sufficient statistics of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetSummary {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub count: usize,
}

impl FeatureSetSummary {
    /// Sample mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &Matrix) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::structural(format!("feature summary needs at least 2 samples, got {n}")));
        }
        let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
        let centred = features - &mean;
        let mut cov = centred.t().dot(&centred) / (n as f64 - 1.0);
        let d = cov.nrows();
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Ok(FeatureSetSummary { mean: mean.to_vec(), cov, count: n })
    }

    pub fn new(mean: Vec<f64>, cov: Matrix, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.dim() != (d, d) {
            return Err(Error::structural(format!("covariance shape {:?} does not match mean length {d}", cov.dim())));
        }
        if count < 2 {
            return Err(Error::structural("feature summary needs at least 2 samples"));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * (1.0 + cov[[i, j]].abs()) {
                    return Err(Error::structural("covariance is not symmetric"));
                }
            }
        }
        Ok(FeatureSetSummary { mean, cov, count })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub value: f64,
    /// Total magnitude of negative eigenvalues clipped to zero.
    pub clipped: f64,
    pub extractor: String,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Symmetric square root with negative eigenvalues clipped; returns the
/// clipped magnitude alongside.
fn sym_sqrt(m: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(m);
    let mut clipped = 0.0;
    let roots = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            clipped += -v;
            0.0
        } else {
            v.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clipped)
}

/// Fréchet distance between two Gaussian summaries. The trace of
/// `(Σ_a Σ_b)^{1/2}` is computed as the trace of `(√Σ_a Σ_b √Σ_a)^{1/2}`.
pub fn fid(a: &FeatureSetSummary, b: &FeatureSetSummary) -> Result<(f64, f64)> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::structural(format!("feature dimensions differ: {} vs {}", a.mean.len(), b.mean.len())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (to_dmatrix(&a.cov), to_dmatrix(&b.cov));
    let (root_a, clip_a) = sym_sqrt(sa.clone());
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut clip_b = 0.0;
    let cross: f64 = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < 0.0 {
                clip_b += -v;
                0.0
            } else {
                v.sqrt()
            }
        })
        .sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok((value.max(0.0), clip_a + clip_b))
}

pub fn fid_report(a: &FeatureSetSummary, b: &FeatureSetSummary, extractor: &str) -> Result<FidReport> {
    let (value, clipped) = fid(a, b)?;
    Ok(FidReport { value, clipped, extractor: extractor.into() })
}

/// One row of the embedding export.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub class_id: ClassId,
    pub display_name: String,
    pub trained: bool,
    pub steps: usize,
    pub values: Vec<f64>,
}

/// Delimited table with one row per token: class id, display name, trained
/// flag, update count and the embedding values.
pub fn export_embeddings(states: &[TokenEmbeddingState]) -> Result<String> {
    let first = states.first().ok_or_else(|| Error::structural("no token embeddings to export"))?;
    let d = first.embedding.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class_id".to_string(), "display_name".into(), "trained".into(), "steps".into()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in states {
        if s.embedding.len() != d {
            return Err(Error::structural(format!(
                "token for {} has dimension {}, expected {d}",
                s.class_id,
                s.embedding.len()
            )));
        }
        let mut row = vec![s.class_id.to_string(), s.class_name.clone(), s.is_trained().to_string(), s.updates().to_string()];
        row.extend(s.embedding.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::structural(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::structural(format!("csv: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::structural(format!("csv: {e}"))
}

pub fn parse_embeddings(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() < 4 {
            return Err(Error::structural("embedding row has fewer than 4 columns"));
        }
        let bad = |what: &str| Error::structural(format!("bad {what} in embedding export"));
        rows.push(EmbeddingRow {
            class_id: ClassId::new(&rec[0]),
            display_name: rec[1].to_string(),
            trained: rec[2].parse().map_err(|_| bad("trained flag"))?,
            steps: rec[3].parse().map_err(|_| bad("step count"))?,
            values: rec.iter().skip(4).map(|v| v.parse().map_err(|_| bad("value"))).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
