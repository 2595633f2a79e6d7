//! Training objectives: the stop-gradient view loss, the WABS-masked
//! cross-entropy, their weighted total, and supervised contrastive loss.
//!
//! Losses are sums over views, not means; any scale is absorbed by the step
//! size chosen in the harness.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::ViewBatch;
use crate::autograd::{Graph, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::network::Session;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight `λ` of the view loss in the total.
    pub lambda: f64,
    /// Temperature `τ_w` of the keep-rate softmax.
    pub tau_w: f64,
    /// Supervised contrastive temperature.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 1.5, tau_w: 0.5, temperature: 0.07 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("tau_w", self.tau_w), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `-cos(p, z)` for one anchor prediction and its partner projection.
pub fn view_loss(p_anchor: &[f64], z_partner: &[f64]) -> Result<f64> {
    if p_anchor.len() != z_partner.len() {
        return Err(Error::Shape(format!("{} vs {}", p_anchor.len(), z_partner.len())));
    }
    let (np, nz) = (norm(p_anchor), norm(z_partner));
    if np <= COSINE_EPS || nz <= COSINE_EPS {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = p_anchor.iter().zip(z_partner).map(|(a, b)| a * b).sum();
    Ok(-dot / (np * nz))
}

fn reject_zero_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.rows().into_iter().any(|r| r.dot(&r).sqrt() <= COSINE_EPS) {
        return Err(Error::Degenerate(format!("zero-norm {what} row in the view loss")));
    }
    Ok(())
}

/// `sum_r -cos(p_r, t_r)` against fixed targets.
pub fn loss_ss_with_targets(graph: &mut Graph, p: Var, targets: Var) -> Result<Var> {
    reject_zero_rows(graph.value(p), "prediction")?;
    reject_zero_rows(graph.value(targets), "target")?;
    graph.neg_cosine_sum(p, targets)
}

/// View loss over every anchor: row `r` of `p` is compared with the detached
/// projection of its partner `partners[r]`.
pub fn loss_ss(graph: &mut Graph, p: Var, z: Var, partners: &[usize]) -> Result<Var> {
    let stopped = graph.detach(z);
    let targets = graph.select_rows(stopped, partners)?;
    loss_ss_with_targets(graph, p, targets)
}

/// Keep rate `γ = min(1, 2 e^{w_old/τ} / (e^{w_old/τ} + e^{w_new/τ}))`, where
/// `w_old`/`w_new` are mean column norms of the old and current-stage
/// classifier columns. `1` when there are no old classes.
pub fn gamma(weights: &Array2<f64>, aug_count: usize, c_old: usize, c_t: usize, tau_w: f64) -> Result<f64> {
    if c_t == 0 {
        return Err(Error::InvalidArgument("current stage has no classes".into()));
    }
    if c_old == 0 {
        return Ok(1.0);
    }
    let (old_end, new_end) = (aug_count * c_old, aug_count * (c_old + c_t));
    if weights.ncols() < new_end {
        return Err(Error::Shape(format!("{} classifier columns, need {new_end}", weights.ncols())));
    }
    let mean_norm = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        range.map(|c| weights.column(c).dot(&weights.column(c)).sqrt()).sum::<f64>() / len
    };
    Ok(gamma_from_norms(mean_norm(0..old_end), mean_norm(old_end..new_end), tau_w))
}

/// The keep rate from the two mean norms.
pub fn gamma_from_norms(w_old: f64, w_new: f64, tau_w: f64) -> f64 {
    // 2 e^a / (e^a + e^b) = 2 / (1 + e^{b - a}); saturates cleanly either way
    (2.0 / (1.0 + ((w_new - w_old) / tau_w).exp())).min(1.0)
}

/// Per-view keep flags: views with extended label `<= old_width` are always
/// kept; every other view draws `Γ ~ U[0, 1)` and is kept when `Γ < γ`.
pub fn wabs_mask(labels: &[usize], gamma: f64, old_width: usize, rng: &mut Rng) -> Vec<bool> {
    labels
        .iter()
        .map(|&label| label <= old_width || rng.gen::<f64>() < gamma)
        .collect()
}

/// Masked cross-entropy over 1-based (extended) labels.
pub fn loss_wabs(graph: &mut Graph, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
    let width = graph.value(logits).ncols();
    let zero_based = labels
        .iter()
        .map(|&l| l.checked_sub(1).ok_or(Error::LabelOutOfRange { label: l, width }))
        .collect::<Result<Vec<_>>>()?;
    graph.masked_cross_entropy(logits, &zero_based, mask)
}

/// `L_WABS + λ L_SS`.
pub fn total_loss(graph: &mut Graph, l_wabs: Var, l_ss: Var, lambda: f64) -> Result<Var> {
    let weighted = graph.scale(l_ss, lambda);
    graph.add(l_wabs, weighted)
}

/// Supervised contrastive loss over ℓ2-normalized rows of `z`.
pub fn supcon_loss(graph: &mut Graph, z: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    let normalized = graph.l2_normalize_rows(z);
    graph.supcon(normalized, labels, temperature)
}

/// Loss nodes of one SDAF iteration.
#[derive(Clone, Copy, Debug)]
pub struct SdafTerms {
    pub total: Var,
    pub l_wabs: Var,
    pub l_ss: Var,
}

/// The full SDAF objective for a view batch in a training session. The
/// view loss uses every view; the mask only affects the cross-entropy.
pub fn sdaf_objective(session: &mut Session<'_>, views: &ViewBatch, mask: &[bool], cfg: &LossConfig) -> Result<SdafTerms> {
    let partners = views.partner_indices()?;
    let x = session.graph.input(crate::network::images_to_matrix(&views.images())?);
    let r = session.features(x)?;
    let logits = session.logits(r)?;
    let l_wabs = loss_wabs(&mut session.graph, logits, &views.labels(), mask)?;
    let z = session.projection(r)?;
    let p = session.prediction(z)?;
    let l_ss = loss_ss(&mut session.graph, p, z, &partners)?;
    let total = total_loss(&mut session.graph, l_wabs, l_ss, cfg.lambda)?;
    Ok(SdafTerms { total, l_wabs, l_ss })
}

/// Supervised contrastive objective on projector outputs.
pub fn supcon_objective(session: &mut Session<'_>, views: &ViewBatch, temperature: f64) -> Result<Var> {
    let x = session.graph.input(crate::network::images_to_matrix(&views.images())?);
    let r = session.features(x)?;
    let z = session.projection(r)?;
    supcon_loss(&mut session.graph, z, &views.labels(), temperature)
}

/// Plain summed cross-entropy on the classifier head.
pub fn cross_entropy_objective(session: &mut Session<'_>, views: &ViewBatch) -> Result<Var> {
    let x = session.graph.input(crate::network::images_to_matrix(&views.images())?);
    let r = session.features(x)?;
    let logits = session.logits(r)?;
    let mask = vec![true; views.len()];
    loss_wabs(&mut session.graph, logits, &views.labels(), &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::{check_gradient, random};
    use crate::rng;

    fn rows(m: &Array2<f64>, r: usize) -> Vec<f64> {
        m.row(r).to_vec()
    }

    #[test]
    fn view_loss_examples() {
        let v = [0.3, -1.0, 2.0];
        assert!((view_loss(&v, &v).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(view_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(view_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loss_ss_matches_naive_pair_loop() {
        // 4 images x K=4 x 2 views laid out (i, k, j)
        let (n_img, k, n) = (4, 4, 32);
        let p = random(n, 6, 1);
        let z = random(n, 6, 2);
        let idx = |i: usize, kk: usize, j: usize| (i * k + kk) * 2 + j;
        let partners: Vec<usize> = (0..n).map(|r| r ^ 1).collect();
        let mut g = Graph::new();
        let (pv, zv) = (g.input(p.clone()), g.input(z.clone()));
        let l = loss_ss(&mut g, pv, zv, &partners).unwrap();
        let got = g.scalar(l);
        let mut naive = 0.0;
        for i in 0..n_img {
            for kk in 0..k {
                for j in 0..2 {
                    naive += view_loss(&rows(&p, idx(i, kk, j)), &rows(&z, idx(i, kk, 1 - j))).unwrap();
                }
            }
        }
        assert!((got - naive).abs() < 1e-6);
    }

    #[test]
    fn loss_ss_equal_projections_gives_minus_count() {
        let row = random(1, 5, 3);
        let m = Array2::from_shape_fn((160, 5), |(_, c)| row[[0, c]]);
        let partners: Vec<usize> = (0..160).map(|r| r ^ 1).collect();
        let mut g = Graph::new();
        let (pv, zv) = (g.input(m.clone()), g.input(m));
        let l = loss_ss(&mut g, pv, zv, &partners).unwrap();
        assert!((g.scalar(l) + 160.0).abs() < 1e-9);
    }

    #[test]
    fn stop_gradient_blocks_partner_branch() {
        let mut g = Graph::new();
        let p = g.leaf(random(4, 3, 4));
        let z = g.leaf(random(4, 3, 5));
        let l = loss_ss(&mut g, p, z, &[1, 0, 3, 2]).unwrap();
        let grads = g.backward(l);
        assert!(grads.wrt(z).is_none());
        assert!(grads.wrt(p).is_some());

        let target = random(4, 3, 5).select(ndarray::Axis(0), &[1, 0, 3, 2]);
        check_gradient(
            &random(4, 3, 4),
            |g, pv| {
                let t = g.input(target.clone());
                loss_ss_with_targets(g, pv, t).unwrap()
            },
            1e-4,
        );
    }

    #[test]
    fn zero_rows_are_rejected() {
        let mut g = Graph::new();
        let p = g.input(Array2::zeros((2, 3)));
        let z = g.input(random(2, 3, 6));
        assert!(matches!(loss_ss(&mut g, p, z, &[1, 0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_from_norms(0.7, 0.7, 0.5), 1.0);
        assert_eq!(gamma_from_norms(50.0, 0.0, 0.5), 1.0);
        let tau = 0.5;
        // 2e^a/(e^a+e^b) = 1/2  <=>  e^{b-a} = 3
        let g = gamma_from_norms(1.0, 1.0 + tau * 3f64.ln(), tau);
        assert!((g - 0.5).abs() < 1e-12);
        // overflow guard
        assert_eq!(gamma_from_norms(0.0, 1e6, 0.5), 0.0);
        assert_eq!(gamma_from_norms(-1e6, 1e6, 1e-3), 0.0);

        let mut prev = f64::INFINITY;
        for step in -40..40 {
            let g = gamma_from_norms(0.0, step as f64 * 0.1, tau);
            assert!(g <= prev && (0.0..=1.0).contains(&g));
            prev = g;
        }
    }

    #[test]
    fn gamma_reads_column_norms() {
        // K=2, C_old=1, C_t=1: old columns have norm 1, new columns norm 1 + τ ln 3
        let tau = 0.5;
        let big = 1.0 + tau * 3f64.ln();
        let mut w = Array2::zeros((3, 4));
        w[[0, 0]] = 1.0;
        w[[1, 1]] = -1.0;
        w[[2, 2]] = big;
        w[[0, 3]] = big;
        assert!((gamma(&w, 2, 1, 1, tau).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(gamma(&w, 2, 0, 2, tau).unwrap(), 1.0);
        assert!(gamma(&w, 2, 1, 2, tau).is_err());
        assert!(gamma(&w, 2, 1, 0, tau).is_err());
    }

    #[test]
    fn wabs_mask_rates() {
        let mut r = rng::substream(7, "mask");
        let labels: Vec<usize> = (1..=16).collect();
        assert!(wabs_mask(&labels, 1.0, 8, &mut r).iter().all(|&m| m));
        let zero = wabs_mask(&labels, 0.0, 8, &mut r);
        assert!(zero[..8].iter().all(|&m| m));
        assert!(zero[8..].iter().all(|&m| !m));

        let new_labels = vec![9usize; 100_000];
        let kept = wabs_mask(&new_labels, 0.3, 8, &mut r).iter().filter(|&&m| m).count();
        let rate = kept as f64 / 1e5;
        assert!((rate - 0.3).abs() < 0.02, "rate {rate}");
        for g in [0.0, 0.2, 0.9] {
            assert!(wabs_mask(&labels, g, 8, &mut r)[..8].iter().all(|&m| m));
        }
    }

    fn plain_ce(logits: &Array2<f64>, labels: &[usize]) -> f64 {
        logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| {
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[y - 1]
            })
            .sum()
    }

    #[test]
    fn wabs_loss_examples() {
        let mut g = Graph::new();
        let l = g.input(Array2::zeros((1, 8)));
        let v = loss_wabs(&mut g, l, &[5], &[true]).unwrap();
        assert!((g.scalar(v) - 8f64.ln()).abs() < 1e-12);

        let logits = random(6, 8, 8);
        let labels = [1, 8, 3, 5, 2, 7];
        let mut g = Graph::new();
        let lv = g.input(logits.clone());
        let v = loss_wabs(&mut g, lv, &labels, &[true; 6]).unwrap();
        assert!((g.scalar(v) - plain_ce(&logits, &labels)).abs() < 1e-9);
        let v = loss_wabs(&mut g, lv, &labels, &[true, false, true, false, false, false]).unwrap();
        let expected = plain_ce(&logits.select(ndarray::Axis(0), &[0, 2]), &[1, 3]);
        assert!((g.scalar(v) - expected).abs() < 1e-9);

        assert!(matches!(loss_wabs(&mut g, lv, &[9, 1, 1, 1, 1, 1], &[true; 6]), Err(Error::LabelOutOfRange { .. })));
        assert!(loss_wabs(&mut g, lv, &[0, 1, 1, 1, 1, 1], &[true; 6]).is_err());

        check_gradient(
            &logits,
            |g, lv| loss_wabs(g, lv, &labels, &[true, true, false, true, false, true]).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn total_loss_reduces_to_cross_entropy() {
        let logits = random(4, 8, 9);
        let labels = [2, 4, 6, 8];
        let mut g = Graph::new();
        let lv = g.input(logits.clone());
        let wabs = loss_wabs(&mut g, lv, &labels, &[true; 4]).unwrap();
        let (p, z) = (g.input(random(4, 3, 10)), g.input(random(4, 3, 11)));
        let ss = loss_ss(&mut g, p, z, &[1, 0, 3, 2]).unwrap();
        let t0 = total_loss(&mut g, wabs, ss, 0.0).unwrap();
        assert!((g.scalar(t0) - plain_ce(&logits, &labels)).abs() < 1e-9);
        let t = total_loss(&mut g, wabs, ss, 1.5).unwrap();
        assert!((g.scalar(t) - g.scalar(wabs) - 1.5 * g.scalar(ss)).abs() < 1e-12);
    }

    /// Pairwise supervised contrastive loss written out term by term.
    fn supcon_naive(z: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
        let n = z.nrows();
        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = rows(z, i);
                let nr = norm(&r);
                r.iter().map(|v| v / nr).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&unit[i], &unit[a]) / tau).exp()).sum();
            let s: f64 = pos.iter().map(|&p| ((dot(&unit[i], &unit[p]) / tau).exp() / denom).ln()).sum();
            total += -s / pos.len() as f64;
        }
        total / anchors as f64
    }

    #[test]
    fn supcon_examples() {
        // two identical views of one class: log(1) = 0
        let mut g = Graph::new();
        let z = g.input(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let l = supcon_loss(&mut g, z, &[3, 3], 0.07).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);

        let zs = random(12, 5, 12);
        let labels = [1, 2, 3, 1, 2, 3, 1, 2, 4, 1, 2, 3];
        let mut g = Graph::new();
        let zv = g.input(zs.clone());
        let l = supcon_loss(&mut g, zv, &labels, 0.5).unwrap();
        assert!((g.scalar(l) - supcon_naive(&zs, &labels, 0.5)).abs() < 1e-6);

        // permutation symmetry
        let perm = [5, 3, 11, 0, 2, 1, 4, 10, 9, 8, 7, 6];
        let zp = zs.select(ndarray::Axis(0), &perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let zpv = g.input(zp);
        let l2 = supcon_loss(&mut g, zpv, &lp, 0.5).unwrap();
        assert!((g.scalar(l) - g.scalar(l2)).abs() < 1e-9);

        let zv = g.input(random(3, 4, 13));
        assert!(matches!(supcon_loss(&mut g, zv, &[1, 2, 3], 0.07), Err(Error::Degenerate(_))));

        check_gradient(&random(6, 4, 14), |g, zv| supcon_loss(g, zv, &[1, 1, 2, 2, 3, 1], 0.3).unwrap(), 1e-4);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { lambda: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
