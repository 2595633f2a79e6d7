//! Evaluation quantities: accuracy/forgetting summaries, linear CKA,
//! balancedness, OOD AUC, scree spectra and confusion matrices.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};

/// Default kernel width of the balancedness score.
pub const BALANCEDNESS_SIGMA: f64 = 0.5;

/// Per-class accuracies after each stage; row `t` covers every class seen
/// through stage `t`, so rows never shrink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = AccuracyMatrix { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument("accuracy matrix has no stages".into()));
        }
        let mut prev = 0;
        for (t, row) in self.rows.iter().enumerate() {
            if row.is_empty() || row.len() < prev {
                return Err(Error::InvalidArgument(format!("stage {} row drops classes", t + 1)));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument(format!("stage {} row has accuracy outside [0, 1]", t + 1)));
            }
            prev = row.len();
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn final_row(&self) -> &[f64] {
        self.rows.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `(1/T) Σ_t mean_c a_{t,c}`.
    pub fn avg_incremental_accuracy(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.rows.iter().map(|r| mean(r)).sum::<f64>() / self.rows.len() as f64)
    }

    /// Mean accuracy of the last row.
    pub fn end_accuracy(&self) -> Result<f64> {
        self.validate()?;
        Ok(mean(self.final_row()))
    }

    /// `(1/(T-1)) Σ_{t≥2} (1/C^{t-1}) Σ_{c ∈ C^{t-1}} (max_{l<t} a_{l,c} - a_{t,c})`.
    pub fn forgetting(&self) -> Result<f64> {
        self.validate()?;
        let t_count = self.rows.len();
        if t_count < 2 {
            return Err(Error::InvalidArgument("forgetting needs at least two stages".into()));
        }
        let mut total = 0.0;
        for t in 1..t_count {
            let known = self.rows[t - 1].len();
            let drops: f64 = (0..known)
                .map(|c| {
                    let best = self.rows[..t]
                        .iter()
                        .filter_map(|r| r.get(c))
                        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    best - self.rows[t][c]
                })
                .sum();
            total += drops / known as f64;
        }
        Ok(total / (t_count - 1) as f64)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accuracy per class `1..=classes` (NaN for a class with no test examples).
pub fn per_class_accuracy(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Vec<f64>> {
    let cm = confusion_matrix(y_true, y_pred, classes)?;
    Ok((0..classes)
        .map(|c| {
            let total: u64 = cm.row(c).sum();
            if total == 0 {
                f64::NAN
            } else {
                cm[[c, c]] as f64 / total as f64
            }
        })
        .collect())
}

/// Counts `cm[true - 1][pred - 1]` over 1-based labels.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Array2<u64>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!("{} targets, {} predictions", y_true.len(), y_pred.len())));
    }
    let mut cm = Array2::zeros((classes, classes));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for l in [t, p] {
            if l == 0 || l > classes {
                return Err(Error::LabelOutOfRange { label: l, width: classes });
            }
        }
        cm[[t - 1, p - 1]] += 1;
    }
    Ok(cm)
}

fn centered(m: &Array2<f64>) -> Array2<f64> {
    let mean = m.mean_axis(Axis(0)).expect("nonempty");
    m - &mean
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear CKA `‖R1ᵀR2‖²_F / (‖R1ᵀR1‖_F ‖R2ᵀR2‖_F)` after column centering.
pub fn linear_cka(r1: &Array2<f64>, r2: &Array2<f64>) -> Result<f64> {
    if r1.nrows() != r2.nrows() || r1.nrows() == 0 {
        return Err(Error::Shape(format!("CKA needs equal nonzero row counts, got {} and {}", r1.nrows(), r2.nrows())));
    }
    let (a, b) = (centered(r1), centered(r2));
    let cross = frobenius(&a.t().dot(&b));
    let (sa, sb) = (frobenius(&a.t().dot(&a)), frobenius(&b.t().dot(&b)));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::Degenerate("CKA of a constant representation".into()));
    }
    Ok(cross * cross / (sa * sb))
}

/// `β = (1/C²) Σ_{i,j} exp(-|a_i - a_j|² / σ)`.
pub fn balancedness(accuracies: &[f64], sigma: f64) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::InvalidArgument("balancedness of an empty row".into()));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let c = accuracies.len() as f64;
    let mut total = 0.0;
    for &a in accuracies {
        for &b in accuracies {
            total += (-(a - b).powi(2) / sigma).exp();
        }
    }
    Ok(total / (c * c))
}

/// ROC AUC of detecting outliers by a higher score, via midranks:
/// `P(out > in) + P(out = in) / 2`.
pub fn ood_auc(inlier_scores: &[f64], outlier_scores: &[f64]) -> Result<f64> {
    let (n_in, n_out) = (inlier_scores.len(), outlier_scores.len());
    if n_in == 0 || n_out == 0 {
        return Err(Error::InvalidArgument("AUC needs inlier and outlier scores".into()));
    }
    let mut all: Vec<(f64, bool)> = inlier_scores
        .iter()
        .map(|&s| (s, false))
        .chain(outlier_scores.iter().map(|&s| (s, true)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[i..=j].iter().filter(|(_, out)| *out).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_out * (n_out + 1)) as f64 / 2.0;
    Ok(u / (n_in * n_out) as f64)
}

/// Covariance eigenvalues in descending order. With `normalize`, rows are
/// first divided by the largest row norm.
pub fn scree(features: &Array2<f64>, normalize: bool) -> Result<Vec<f64>> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::InvalidArgument("scree needs at least two rows".into()));
    }
    let mut x = features.clone();
    if normalize {
        let max = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
        if max > 0.0 {
            x /= max;
        }
    }
    let c = centered(&x);
    let cov = c.t().dot(&c) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut values: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Sidecar of a representation dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpMeta {
    pub n: usize,
    pub d: usize,
    /// Stage `t` of the encoder (1-based).
    pub stage: usize,
    /// Stage `ṫ` whose test classes were embedded (1-based).
    pub dataset_stage: usize,
}

/// Features of `D_ṫ` under the encoder after stage `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationDump {
    pub meta: DumpMeta,
    pub features: Array2<f64>,
}

impl RepresentationDump {
    pub fn file_stem(stage: usize, dataset_stage: usize) -> String {
        format!("stage_{stage}_{dataset_stage}")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = Self::file_stem(self.meta.stage, self.meta.dataset_stage);
        let path = dir.join(format!("{stem}.f32"));
        archive::save_f32_matrix(&path, &self.features, &dir.join(format!("{stem}.json")), &self.meta)?;
        Ok(path)
    }

    /// Loads `<stem>.f32` using the `<stem>.json` sidecar next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = path.with_extension("json");
        let meta: DumpMeta =
            serde_json::from_slice(&fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?)?;
        let features = archive::load_f32_matrix(path, meta.n, meta.d)?;
        Ok(RepresentationDump { meta, features })
    }

    /// Every dump in a directory, sorted by `(stage, dataset_stage)`.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "f32") {
                out.push(Self::load(&path)?);
            }
        }
        out.sort_by_key(|d| (d.meta.stage, d.meta.dataset_stage));
        Ok(out)
    }
}

/// CKA between contiguous encoders `F_t`, `F_{t+1}` on a fixed `D_ṫ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaCell {
    pub stage: usize,
    pub dataset_stage: usize,
    pub cka: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CkaSummary {
    pub cells: Vec<CkaCell>,
    /// Mean over cells with `ṫ ≤ t`.
    pub seen: Option<f64>,
    /// Mean over cells with `ṫ > t`.
    pub unseen: Option<f64>,
}

/// Builds the contiguous-stage CKA table from dumps.
pub fn cka_table(dumps: &[RepresentationDump]) -> Result<CkaSummary> {
    let find = |t: usize, dt: usize| dumps.iter().find(|d| d.meta.stage == t && d.meta.dataset_stage == dt);
    let mut cells = Vec::new();
    for d in dumps {
        if let Some(next) = find(d.meta.stage + 1, d.meta.dataset_stage) {
            cells.push(CkaCell {
                stage: d.meta.stage,
                dataset_stage: d.meta.dataset_stage,
                cka: linear_cka(&d.features, &next.features)?,
            });
        }
    }
    let avg = |pred: &dyn Fn(&CkaCell) -> bool| {
        let v: Vec<f64> = cells.iter().filter(|c| pred(c)).map(|c| c.cka).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let seen = avg(&|c| c.dataset_stage <= c.stage);
    let unseen = avg(&|c| c.dataset_stage > c.stage);
    Ok(CkaSummary { cells, seen, unseen })
}

/// Summary metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_incremental_accuracy: f64,
    pub end_accuracy: f64,
    pub forgetting: Option<f64>,
    pub balancedness: f64,
    pub final_row: Vec<f64>,
    #[serde(default)]
    pub cka: CkaSummary,
    #[serde(default)]
    pub ood_auc: Option<f64>,
}

impl MetricsReport {
    pub fn from_matrix(matrix: &AccuracyMatrix) -> Result<Self> {
        Ok(MetricsReport {
            avg_incremental_accuracy: matrix.avg_incremental_accuracy()?,
            end_accuracy: matrix.end_accuracy()?,
            forgetting: (matrix.stages() >= 2).then(|| matrix.forgetting()).transpose()?,
            balancedness: balancedness(matrix.final_row(), BALANCEDNESS_SIGMA)?,
            final_row: matrix.final_row().to_vec(),
            cka: CkaSummary::default(),
            ood_auc: None,
        })
    }
}
