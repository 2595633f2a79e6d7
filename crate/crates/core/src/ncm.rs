//! Nearest-class-mean inference over `K` semantic transforms.
//!
//! Class centers `m_ck` are means of encoder features of `S_k`-transformed
//! memory exemplars. A test image is assigned the class minimizing the mean,
//! over available `k`, of its distance to `m_ck`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::augment::SdaConfig;
use crate::error::{Error, Result};
use crate::memory::ReplayMemory;
use crate::network::ModelBundle;
use crate::stream::Image;

/// Relative eigenvalue cutoff for the covariance pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Mahalanobis,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(Metric::Mahalanobis),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown NCM metric `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcmConfig {
    pub metric: Metric,
    /// ℓ2-normalize features before computing centers and distances.
    pub normalize_features: bool,
}

/// Centers `m_ck` keyed by `(class, k)`; absent pairs have no exemplars.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    pub aug_count: usize,
    pub dim: usize,
    /// Sorted class ids present in memory.
    pub classes: Vec<usize>,
    centers: BTreeMap<(usize, usize), (Array1<f64>, usize)>,
}

impl ClassCenters {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Center and group size for class `c`, transform `k` (1-based).
    pub fn get(&self, class: usize, k: usize) -> Option<(&Array1<f64>, usize)> {
        self.centers.get(&(class, k)).map(|(m, n)| (m, *n))
    }

    /// Groups rows of `features` by `(class, k)` and averages them.
    pub fn from_features(features: &Array2<f64>, classes: &[usize], augs: &[usize], aug_count: usize) -> Result<Self> {
        let n = features.nrows();
        if classes.len() != n || augs.len() != n {
            return Err(Error::Shape(format!("{n} feature rows, {} classes, {} augs", classes.len(), augs.len())));
        }
        if n == 0 {
            return Err(Error::Degenerate("no exemplars to compute class centers from".into()));
        }
        if let Some(&k) = augs.iter().find(|&&k| k == 0 || k > aug_count) {
            return Err(Error::InvalidArgument(format!("transform index {k} outside 1..={aug_count}")));
        }
        let dim = features.ncols();
        let mut sums: BTreeMap<(usize, usize), (Array1<f64>, usize)> = BTreeMap::new();
        for ((row, &c), &k) in features.rows().into_iter().zip(classes).zip(augs) {
            let entry = sums.entry((c, k)).or_insert_with(|| (Array1::zeros(dim), 0));
            entry.0 += &row;
            entry.1 += 1;
        }
        for (sum, count) in sums.values_mut() {
            *sum /= *count as f64;
        }
        let mut present: Vec<usize> = sums.keys().map(|&(c, _)| c).collect();
        present.dedup();
        Ok(ClassCenters { aug_count, dim, classes: present, centers: sums })
    }
}

/// Inverse covariance (or identity) and its square-root factor.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricState {
    pub metric: Metric,
    /// `Σ⁻¹`, `d x d`.
    pub precision: Array2<f64>,
    /// `L` with `L Lᵀ = Σ⁻¹`, so `d(x, m) = ‖(x - m) L‖`.
    whitener: Array2<f64>,
}

impl MetricState {
    pub fn euclidean(dim: usize) -> Self {
        MetricState { metric: Metric::Euclidean, precision: Array2::eye(dim), whitener: Array2::eye(dim) }
    }

    /// Fits the metric on the pooled feature set `R` (rows). With fewer than
    /// two rows a Mahalanobis fit degrades to Euclidean.
    pub fn fit(pooled: &Array2<f64>, metric: Metric) -> Self {
        let (n, dim) = pooled.dim();
        if metric == Metric::Euclidean {
            return MetricState::euclidean(dim);
        }
        if n < 2 {
            log::warn!("only {n} exemplar feature(s); falling back to Euclidean NCM");
            return MetricState::euclidean(dim);
        }
        let cov = covariance(pooled);
        let (precision, whitener) = pseudo_inverse_psd(&cov);
        MetricState { metric, precision, whitener }
    }

    pub fn from_precision(precision: Array2<f64>, metric: Metric) -> Self {
        let whitener = sqrt_psd(&precision);
        MetricState { metric, precision, whitener }
    }

    /// Distance matrix between rows of `x` and rows of `centers`.
    pub fn distances(&self, x: &Array2<f64>, centers: &Array2<f64>) -> Array2<f64> {
        let xw = x.dot(&self.whitener);
        let cw = centers.dot(&self.whitener);
        let mut out = Array2::zeros((x.nrows(), centers.nrows()));
        for (i, xr) in xw.rows().into_iter().enumerate() {
            for (j, cr) in cw.rows().into_iter().enumerate() {
                out[[i, j]] = xr.iter().zip(cr.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
        }
        out
    }

    /// `sqrt((x - m)ᵀ Σ⁻¹ (x - m))` for one pair.
    pub fn distance(&self, x: &[f64], m: &[f64]) -> f64 {
        let diff = Array1::from_iter(x.iter().zip(m).map(|(a, b)| a - b));
        diff.dot(&self.precision.dot(&diff)).max(0.0).sqrt()
    }
}

/// Sample covariance with `1/(n-1)` scaling.
pub fn covariance(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mean;
    centered.t().dot(&centered) / (n as f64 - 1.0)
}

fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Pseudo-inverse of a symmetric PSD matrix via its eigendecomposition,
/// discarding eigenvalues below `PINV_RCOND * λ_max`. Also returns
/// `V diag(λ^{-1/2})` over the kept eigenpairs.
pub fn pseudo_inverse_psd(m: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let dim = m.nrows();
    let eig = SymmetricEigen::new(to_nalgebra(m));
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let cutoff = PINV_RCOND * max;
    let kept: Vec<usize> = (0..dim).filter(|&i| max > 0.0 && eig.eigenvalues[i] > cutoff).collect();
    let mut whitener = Array2::zeros((dim, kept.len()));
    for (col, &i) in kept.iter().enumerate() {
        let s = 1.0 / eig.eigenvalues[i].sqrt();
        for r in 0..dim {
            whitener[[r, col]] = eig.eigenvectors[(r, i)] * s;
        }
    }
    let pinv = whitener.dot(&whitener.t());
    (pinv, whitener)
}

/// `V diag(sqrt(max(λ, 0)))`, a factor `L` with `L Lᵀ = m` for PSD `m`.
fn sqrt_psd(m: &Array2<f64>) -> Array2<f64> {
    let dim = m.nrows();
    let eig = SymmetricEigen::new(to_nalgebra(m));
    let mut out = Array2::zeros((dim, dim));
    for i in 0..dim {
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        for r in 0..dim {
            out[[r, i]] = eig.eigenvectors[(r, i)] * s;
        }
    }
    out
}

/// Predictions plus the per-class mean distances behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct NcmPrediction {
    /// Predicted class ids.
    pub labels: Vec<usize>,
    /// Columns follow [`ClassCenters::classes`].
    pub class_distances: Array2<f64>,
}

impl NcmPrediction {
    /// Distance to the nearest class, per input (the OOD score).
    pub fn min_distance(&self) -> Vec<f64> {
        self.class_distances
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// Mean distance over available `k` per class, then argmin with ties to the
/// lowest class id. `features_per_k[k-1]` holds `F(S_k(x))` for every input.
pub fn predict_from_features(
    features_per_k: &[Array2<f64>],
    centers: &ClassCenters,
    state: &MetricState,
) -> Result<NcmPrediction> {
    if centers.is_empty() {
        return Err(Error::Degenerate("no class centers fitted".into()));
    }
    if features_per_k.len() != centers.aug_count {
        return Err(Error::Shape(format!(
            "{} feature sets for {} transforms",
            features_per_k.len(),
            centers.aug_count
        )));
    }
    let n = features_per_k[0].nrows();
    let classes = &centers.classes;
    let mut sums = Array2::<f64>::zeros((n, classes.len()));
    let mut counts = vec![0usize; classes.len()];
    for (k0, feats) in features_per_k.iter().enumerate() {
        if feats.dim() != (n, centers.dim) {
            return Err(Error::Shape(format!("features {:?}, expected ({n}, {})", feats.dim(), centers.dim)));
        }
        let present: Vec<(usize, &Array1<f64>)> = classes
            .iter()
            .enumerate()
            .filter_map(|(ci, &c)| centers.get(c, k0 + 1).map(|(m, _)| (ci, m)))
            .collect();
        if present.is_empty() {
            continue;
        }
        let stacked = ndarray::stack(Axis(0), &present.iter().map(|(_, m)| m.view()).collect::<Vec<_>>())
            .expect("equal-length centers");
        let d = state.distances(feats, &stacked);
        for (col, &(ci, _)) in present.iter().enumerate() {
            sums.column_mut(ci).zip_mut_with(&d.column(col), |s, &v| *s += v);
            counts[ci] += 1;
        }
    }
    for (ci, &count) in counts.iter().enumerate() {
        sums.column_mut(ci).mapv_inplace(|v| v / count as f64);
    }
    let labels = sums
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (ci, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = ci;
                }
            }
            classes[best]
        })
        .collect();
    Ok(NcmPrediction { labels, class_distances: sums })
}

/// Fitted NCM classifier: centers plus metric.
#[derive(Clone, Debug)]
pub struct NcmClassifier {
    pub centers: ClassCenters,
    pub state: MetricState,
    pub config: NcmConfig,
}

fn l2_normalize(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    m
}

/// `F(S_k(x))` for every image and every `k`, optionally normalized.
pub fn transformed_features(
    images: &[&Image],
    model: &ModelBundle,
    sda: &SdaConfig,
    normalize: bool,
) -> Result<Vec<Array2<f64>>> {
    (1..=sda.len())
        .map(|k| {
            let transformed: Vec<Image> = images.iter().map(|im| sda.apply(k, im)).collect();
            let refs: Vec<&Image> = transformed.iter().collect();
            let f = model.forward_features(&refs)?;
            Ok(if normalize { l2_normalize(f) } else { f })
        })
        .collect()
}

impl NcmClassifier {
    /// Computes centers and the metric from the current encoder on memory.
    pub fn fit(memory: &ReplayMemory, model: &ModelBundle, sda: &SdaConfig, config: &NcmConfig) -> Result<Self> {
        if memory.is_empty() {
            return Err(Error::Degenerate("memory is empty".into()));
        }
        let images: Vec<&Image> = memory.slots().iter().map(|e| &e.image).collect();
        let labels: Vec<usize> = memory.slots().iter().map(|e| e.label).collect();
        let per_k = transformed_features(&images, model, sda, config.normalize_features)?;
        let pooled = ndarray::concatenate(Axis(0), &per_k.iter().map(|a| a.view()).collect::<Vec<_>>())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let classes: Vec<usize> = (0..per_k.len()).flat_map(|_| labels.iter().copied()).collect();
        let augs: Vec<usize> = (1..=per_k.len()).flat_map(|k| std::iter::repeat_n(k, labels.len())).collect();
        let centers = ClassCenters::from_features(&pooled, &classes, &augs, sda.len())?;
        let state = MetricState::fit(&pooled, config.metric);
        Ok(NcmClassifier { centers, state, config: config.clone() })
    }

    pub fn predict_batch(&self, images: &[&Image], model: &ModelBundle, sda: &SdaConfig) -> Result<NcmPrediction> {
        let per_k = transformed_features(images, model, sda, self.config.normalize_features)?;
        predict_from_features(&per_k, &self.centers, &self.state)
    }

    pub fn predict(&self, image: &Image, model: &ModelBundle, sda: &SdaConfig) -> Result<usize> {
        Ok(self.predict_batch(&[image], model, sda)?.labels[0])
    }

    /// Writes centers (NaN rows for absent `(c, k)`), group sizes and `Σ⁻¹`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let (c, k, d) = (self.centers.classes.len(), self.centers.aug_count, self.centers.dim);
        let mut centers = Array2::from_elem((c * k, d), f64::NAN);
        let mut counts = Array2::zeros((c, k));
        for (ci, &class) in self.centers.classes.iter().enumerate() {
            for kk in 1..=k {
                if let Some((m, count)) = self.centers.get(class, kk) {
                    centers.row_mut(ci * k + kk - 1).assign(m);
                    counts[[ci, kk - 1]] = count as f64;
                }
            }
        }
        let meta = serde_json::json!({
            "metric": self.state.metric,
            "classes": self.centers.classes,
            "K": k,
            "normalize_features": self.config.normalize_features,
        });
        archive::save(
            dir,
            "ncm",
            &[("centers".into(), &centers), ("counts".into(), &counts), ("precision".into(), &self.state.precision)],
            meta,
        )
    }

    /// Reads an archive written by [`NcmClassifier::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let (index, arrays) = archive::load(dir, "ncm")?;
        let get = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing array `{name}`")))
        };
        let (centers, counts, precision) = (get("centers")?, get("counts")?, get("precision")?);
        let metric: Metric = serde_json::from_value(index.meta["metric"].clone())?;
        let classes: Vec<usize> = serde_json::from_value(index.meta["classes"].clone())?;
        let normalize_features = index.meta["normalize_features"].as_bool().unwrap_or(false);
        let k = counts.ncols();
        let mut map = BTreeMap::new();
        for (ci, &class) in classes.iter().enumerate() {
            for kk in 0..k {
                let count = counts[[ci, kk]] as usize;
                if count > 0 {
                    map.insert((class, kk + 1), (centers.row(ci * k + kk).to_owned(), count));
                }
            }
        }
        Ok(NcmClassifier {
            centers: ClassCenters { aug_count: k, dim: centers.ncols(), classes, centers: map },
            state: MetricState::from_precision(precision, metric),
            config: NcmConfig { metric, normalize_features },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::random;
    use crate::rng;
    use rand::Rng as _;

    /// Box–Muller standard normal draw.
    fn gaussian(r: &mut crate::rng::Rng) -> f64 {
        let u1: f64 = r.gen_range(f64::EPSILON..1.0);
        let u2: f64 = r.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn centers_match_group_means() {
        let feats = random(40, 3, 1);
        let classes: Vec<usize> = (0..40).map(|i| 1 + i % 3).collect();
        let augs: Vec<usize> = (0..40).map(|i| 1 + (i / 3) % 2).collect();
        let centers = ClassCenters::from_features(&feats, &classes, &augs, 2).unwrap();
        assert_eq!(centers.len(), 6);
        for c in 1..=3 {
            for k in 1..=2 {
                let rows: Vec<usize> = (0..40).filter(|&i| classes[i] == c && augs[i] == k).collect();
                let mut mean = [0.0; 3];
                for &i in &rows {
                    for j in 0..3 {
                        mean[j] += feats[[i, j]] / rows.len() as f64;
                    }
                }
                let (m, n) = centers.get(c, k).unwrap();
                assert_eq!(n, rows.len());
                for j in 0..3 {
                    assert!((m[j] - mean[j]).abs() < 1e-6);
                }
            }
        }
        let single = ClassCenters::from_features(&feats.slice(ndarray::s![..1, ..]).to_owned(), &[2], &[1], 1).unwrap();
        assert_eq!(single.get(2, 1).unwrap().0, &feats.row(0).to_owned());
        assert!(ClassCenters::from_features(&Array2::zeros((0, 3)), &[], &[], 1).is_err());
    }

    #[test]
    fn forty_centers_for_ten_classes() {
        let feats = random(80, 2, 2);
        let classes: Vec<usize> = (0..80).map(|i| 1 + i % 10).collect();
        let augs: Vec<usize> = (0..80).map(|i| 1 + (i / 10) % 4).collect();
        assert_eq!(ClassCenters::from_features(&feats, &classes, &augs, 4).unwrap().len(), 40);
    }

    #[test]
    fn isotropic_covariance_inverts_to_scaled_identity() {
        let mut r = rng::substream(3, "iso");
        let sigma = 2.0;
        let x = Array2::from_shape_fn((20_000, 4), |_| sigma * gaussian(&mut r));
        let state = MetricState::fit(&x, Metric::Mahalanobis);
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 0.25 } else { 0.0 };
                assert!((state.precision[[i, j]] - expected).abs() < 0.01, "{i},{j}: {}", state.precision[[i, j]]);
            }
        }
    }

    #[test]
    fn pseudo_inverse_identities_on_rank_deficient_covariance() {
        // 10 samples in 16 dimensions: rank <= 9
        let x = random(10, 16, 4);
        let cov = covariance(&x);
        let state = MetricState::fit(&x, Metric::Mahalanobis);
        let p = &state.precision;
        let pcp = p.dot(&cov).dot(p);
        let cpc = cov.dot(p).dot(&cov);
        assert!((&pcp - p).iter().all(|v| v.abs() < 1e-5));
        assert!((&cpc - &cov).iter().all(|v| v.abs() < 1e-5));
        assert!((p - &p.t()).iter().all(|v| v.abs() < 1e-9));
        // whitened distance agrees with the quadratic form
        let (a, b) = (random(1, 16, 5), random(1, 16, 6));
        let fast = state.distances(&a, &b)[[0, 0]];
        let slow = state.distance(a.row(0).as_slice().unwrap(), b.row(0).as_slice().unwrap());
        assert!((fast - slow).abs() < 1e-6);
    }

    #[test]
    fn euclidean_metric_and_fallback() {
        let x = random(5, 3, 7);
        let e = MetricState::fit(&x, Metric::Euclidean);
        assert_eq!(e.precision, Array2::<f64>::eye(3));
        let one = MetricState::fit(&random(1, 3, 8), Metric::Mahalanobis);
        assert_eq!(one.metric, Metric::Euclidean);

        let (a, b) = (random(6, 3, 9), random(4, 3, 10));
        let d = e.distances(&a, &b);
        let m = MetricState::from_precision(Array2::<f64>::eye(3), Metric::Mahalanobis);
        let dm = m.distances(&a, &b);
        for i in 0..6 {
            for j in 0..4 {
                let direct = (&a.row(i) - &b.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((d[[i, j]] - direct).abs() < 1e-12);
                assert!((dm[[i, j]] - direct).abs() < 1e-6);
            }
        }
    }

    fn brute_force(per_k: &[Array2<f64>], centers: &ClassCenters, state: &MetricState) -> Vec<usize> {
        (0..per_k[0].nrows())
            .map(|i| {
                let mut best = (f64::INFINITY, 0);
                for &c in &centers.classes {
                    let (mut total, mut count) = (0.0, 0);
                    for k in 1..=centers.aug_count {
                        if let Some((m, _)) = centers.get(c, k) {
                            total += state.distance(per_k[k - 1].row(i).as_slice().unwrap(), m.as_slice().unwrap());
                            count += 1;
                        }
                    }
                    let avg = total / count as f64;
                    if avg < best.0 {
                        best = (avg, c);
                    }
                }
                best.1
            })
            .collect()
    }

    #[test]
    fn prediction_matches_brute_force_with_missing_groups() {
        let k = 4;
        let feats = random(60, 5, 11);
        let mut r = rng::substream(12, "missing");
        let classes: Vec<usize> = (0..60).map(|_| r.gen_range(1..=5)).collect();
        // class 5 never appears with k = 3
        let augs: Vec<usize> = classes
            .iter()
            .map(|&c| loop {
                let a = r.gen_range(1..=k);
                if !(c == 5 && a == 3) {
                    break a;
                }
            })
            .collect();
        let centers = ClassCenters::from_features(&feats, &classes, &augs, k).unwrap();
        assert!(centers.get(5, 3).is_none());
        let state = MetricState::fit(&feats, Metric::Mahalanobis);
        let per_k: Vec<Array2<f64>> = (0..k).map(|i| random(50, 5, 100 + i as u64)).collect();
        let pred = predict_from_features(&per_k, &centers, &state).unwrap();
        assert_eq!(pred.labels.len(), 50);
        assert_eq!(pred.labels, brute_force(&per_k, &centers, &state));
        assert!(pred.labels.iter().all(|c| centers.classes.contains(c)));

        // scaling every distance leaves the argmin unchanged
        let scaled = MetricState::from_precision(state.precision.mapv(|v| v * 9.0), Metric::Mahalanobis);
        assert_eq!(predict_from_features(&per_k, &centers, &scaled).unwrap().labels, pred.labels);

        // min-distance column is the row minimum of the class distances
        let mins = pred.min_distance();
        for (i, row) in pred.class_distances.rows().into_iter().enumerate() {
            let ci = centers.classes.iter().position(|&c| c == pred.labels[i]).unwrap();
            assert_eq!(mins[i], row[ci]);
        }
    }

    #[test]
    fn single_class_and_ties() {
        let feats = random(3, 2, 13);
        let centers = ClassCenters::from_features(&feats, &[4, 4, 4], &[1, 1, 1], 1).unwrap();
        let state = MetricState::euclidean(2);
        let pred = predict_from_features(&[random(7, 2, 14)], &centers, &state).unwrap();
        assert!(pred.labels.iter().all(|&c| c == 4));

        // equidistant centers: lowest id wins
        let f = Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap();
        let centers = ClassCenters::from_features(&f, &[7, 3], &[1, 1], 1).unwrap();
        let pred = predict_from_features(&[Array2::zeros((1, 1))], &centers, &state_1d()).unwrap();
        assert_eq!(pred.labels, vec![3]);
    }

    fn state_1d() -> MetricState {
        MetricState::euclidean(1)
    }

    #[test]
    fn export_roundtrip() {
        let feats = random(12, 3, 15);
        let classes: Vec<usize> = (0..12).map(|i| 1 + i % 2).collect();
        let augs: Vec<usize> = (0..12).map(|i| if i == 1 { 1 } else { 2 }).collect();
        let ncm = NcmClassifier {
            centers: ClassCenters::from_features(&feats, &classes, &augs, 2).unwrap(),
            state: MetricState::fit(&feats, Metric::Mahalanobis),
            config: NcmConfig::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        ncm.export(dir.path()).unwrap();
        let back = NcmClassifier::import(dir.path()).unwrap();
        assert_eq!(back.centers, ncm.centers);
        let per_k = vec![random(20, 3, 16), random(20, 3, 17)];
        assert_eq!(
            predict_from_features(&per_k, &back.centers, &back.state).unwrap().labels,
            predict_from_features(&per_k, &ncm.centers, &ncm.state).unwrap().labels
        );
    }
}
