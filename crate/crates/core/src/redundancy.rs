//! Interdimensional redundancy and the rule-based bias diagnosis.
//!
//! For a batch feature matrix `Z` (`B × D`) the redundancy score is the
//! mean squared off-diagonal Pearson correlation,
//!
//! ```text
//! R(Z) = 1 / (D (D − 1)) · Σ_{i≠j} C_ij²
//! ```
//!
//! with `C` the population (divisor `B`) correlation matrix. Dimensions
//! whose variance is below a small threshold are dropped first so dead
//! units neither divide by zero nor dilute the score.
//!
//! A modality is diagnosed as biased when its score exceeds the smallest
//! score across modalities by at least `δ`. The minimum itself always has
//! `Δ = 0 < δ`, so at least one modality is always left unbiased.
//!
//! Under a rank-1 shift `z̃ = z + α v` of whitened features, with `α`
//! independent, zero-mean and of variance `σ_α²`, the correlation has the
//! closed form given by [`analytic_shift_correlation`]; it backs the
//! empirical checks in the test suite.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_VARIANCE_EPS: f64 = 1e-8;

/// Default capacity of the per-modality feature queue.
pub const DEFAULT_QUEUE_CAPACITY: usize = 256;

/// Batches smaller than this are scored from the queue when it is enabled.
pub const QUEUE_MIN_BATCH: usize = 32;

fn column_moments(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, d) = (z.rows(), z.cols());
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let mut var = vec![0.0; d];
    for r in 0..b {
        for ((s, v), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s /= b as f64;
    }
    (mean, var)
}

/// Drops every column whose population variance is below `eps`. Surviving
/// columns keep their original order; `kept` lists their indices.
pub fn variance_filter(z: &Tensor, eps: f64) -> Result<(Tensor, Vec<usize>)> {
    if !z.is_matrix() || z.rows() < 2 {
        return Err(Error::Contract(format!(
            "variance filtering needs a B×D matrix with B ≥ 2, got {:?}",
            z.shape()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("variance threshold must be positive, got {eps}")));
    }
    let (_, var) = column_moments(z);
    let kept: Vec<usize> = var
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= eps)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(Error::DegenerateBatch {
            kept: 0,
            total: z.cols(),
        });
    }
    Ok((z.select_columns(&kept), kept))
}

/// Pearson correlation matrix with divisor `B`. Every column must have
/// strictly positive variance.
pub fn correlation_matrix(z: &Tensor) -> Result<Tensor> {
    if !z.is_matrix() || z.rows() < 2 {
        return Err(Error::Contract(format!(
            "correlation needs a B×D matrix with B ≥ 2, got {:?}",
            z.shape()
        )));
    }
    let (b, d) = (z.rows(), z.cols());
    let (mean, var) = column_moments(z);
    if let Some(i) = var.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!(
            "column {i} has variance {} and cannot be normalized; filter it first",
            var[i]
        )));
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    // Standardize once, then C = Sᵀ S / B.
    let mut s = Vec::with_capacity(b * d);
    for r in 0..b {
        for (j, v) in z.row(r).iter().enumerate() {
            s.push((v - mean[j]) / std[j]);
        }
    }
    let mut c = vec![0.0; d * d];
    for r in 0..b {
        let row = &s[r * d..(r + 1) * d];
        for i in 0..d {
            let si = row[i];
            let out = &mut c[i * d..(i + 1) * d];
            for j in i..d {
                out[j] += si * row[j];
            }
        }
    }
    for i in 0..d {
        c[i * d + i] = 1.0;
        for j in i + 1..d {
            let v = (c[i * d + j] / b as f64).clamp(-1.0, 1.0);
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    Tensor::new(vec![d, d], c)
}

/// Mean squared off-diagonal entry of a correlation matrix.
pub fn mean_squared_off_diagonal(c: &Tensor) -> f64 {
    let d = c.rows();
    if d < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += c.get(i, j) * c.get(i, j);
            }
        }
    }
    s / (d * (d - 1)) as f64
}

/// Redundancy score together with how many dimensions it was computed on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Redundancy {
    pub score: f64,
    pub kept_dims: usize,
}

pub fn redundancy_with(z: &Tensor, eps: f64) -> Result<Redundancy> {
    let (filtered, kept) = variance_filter(z, eps)?;
    if kept.len() < 2 {
        return Err(Error::DegenerateBatch {
            kept: kept.len(),
            total: z.cols(),
        });
    }
    let c = correlation_matrix(&filtered)?;
    Ok(Redundancy {
        score: mean_squared_off_diagonal(&c),
        kept_dims: kept.len(),
    })
}

/// `R(Z)` after variance filtering at [`DEFAULT_VARIANCE_EPS`].
pub fn redundancy_score(z: &Tensor) -> Result<f64> {
    redundancy_with(z, DEFAULT_VARIANCE_EPS).map(|r| r.score)
}

/// `Δ^m = r^m − min_n r^n` for every scored modality.
pub fn relative_scores(scores: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let min = scores.values().copied().fold(f64::INFINITY, f64::min);
    scores.iter().map(|(&m, &r)| (m, r - min)).collect()
}

/// `G = { m | Δ^m ≥ δ }` over the diagnosable modalities in `scores`.
pub fn diagnose(scores: &BTreeMap<usize, f64>, delta: f64) -> Result<BTreeSet<usize>> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Contract(format!("threshold δ must be positive, got {delta}")));
    }
    if scores.len() < 2 {
        return Err(Error::DiagnosisUnavailable {
            diagnosable: scores.len(),
        });
    }
    Ok(relative_scores(scores)
        .into_iter()
        .filter(|(_, d)| *d >= delta)
        .map(|(m, _)| m)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityScore {
    pub modality: String,
    /// `None` when the batch was degenerate for this modality.
    pub score: Option<f64>,
    pub relative: Option<f64>,
    pub kept_dims: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub modalities: Vec<ModalityScore>,
    /// Indices of the modalities diagnosed as biased.
    pub biased: BTreeSet<usize>,
    pub threshold: f64,
    /// False when fewer than two modalities could be scored; `biased` is
    /// then empty.
    pub available: bool,
}

impl RedundancyReport {
    pub fn biased_mask(&self) -> Vec<bool> {
        (0..self.modalities.len())
            .map(|m| self.biased.contains(&m))
            .collect()
    }
}

/// Scores each modality's unified-space features and applies the rule.
/// Modalities with degenerate batches are left out of the comparison.
pub fn build_report(features: &[Tensor], names: &[String], delta: f64, eps: f64) -> Result<RedundancyReport> {
    assert_eq!(features.len(), names.len());
    let mut scores = BTreeMap::new();
    let mut kept = Vec::with_capacity(features.len());
    for (m, z) in features.iter().enumerate() {
        match redundancy_with(z, eps) {
            Ok(r) => {
                scores.insert(m, r.score);
                kept.push(r.kept_dims);
            }
            Err(Error::DegenerateBatch { kept: k, .. }) => kept.push(k),
            Err(e) => return Err(e),
        }
    }
    let (biased, available) = match diagnose(&scores, delta) {
        Ok(g) => (g, true),
        Err(Error::DiagnosisUnavailable { .. }) => (BTreeSet::new(), false),
        Err(e) => return Err(e),
    };
    let relative = relative_scores(&scores);
    let modalities = names
        .iter()
        .enumerate()
        .map(|(m, name)| ModalityScore {
            modality: name.clone(),
            score: scores.get(&m).copied(),
            relative: relative.get(&m).copied(),
            kept_dims: kept[m],
        })
        .collect();
    Ok(RedundancyReport {
        modalities,
        biased,
        threshold: delta,
        available,
    })
}

/// Closed-form correlation of `z + α v` when `z` has identity covariance
/// and `α` is independent with variance `σ_α²`:
///
/// ```text
/// C̃_ij = σ_α² v_i v_j / sqrt((1 + σ_α² v_i²)(1 + σ_α² v_j²)),   C̃_ii = 1
/// ```
pub fn analytic_shift_correlation(v: &Tensor, sigma_alpha: f64) -> Tensor {
    let d = v.len();
    let s2 = sigma_alpha * sigma_alpha;
    let v = v.data();
    let mut c = Tensor::eye(d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let num = s2 * v[i] * v[j];
                let den = ((1.0 + s2 * v[i] * v[i]) * (1.0 + s2 * v[j] * v[j])).sqrt();
                c.set(i, j, num / den);
            }
        }
    }
    c
}

/// `R(Z̃)` evaluated on the closed-form correlation.
pub fn redundancy_of_shifted(v: &Tensor, sigma_alpha: f64) -> f64 {
    mean_squared_off_diagonal(&analytic_shift_correlation(v, sigma_alpha))
}

/// FIFO of the most recent feature rows for one modality, used to score
/// redundancy when batches are too small for stable correlation estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    rows: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(2),
            rows: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn push_batch(&mut self, z: &Tensor) {
        for r in 0..z.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(z.row(r).to_vec());
        }
    }

    /// Queue contents as a matrix, oldest row first.
    pub fn matrix(&self) -> Option<Tensor> {
        let first = self.rows.front()?;
        let d = first.len();
        let data: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Tensor::new(vec![self.rows.len(), d], data).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_column_is_dropped() {
        let z = Tensor::from_rows(&[[1.0, 5.0, 2.0], [2.0, 5.0, 0.0], [4.0, 5.0, 1.0]]);
        let (f, kept) = variance_filter(&z, 1e-8).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(f, Tensor::from_rows(&[[1.0, 2.0], [2.0, 0.0], [4.0, 1.0]]));
    }

    #[test]
    fn tiny_eps_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::normal(&[10, 4], 1.0, &mut rng);
        let (f, kept) = variance_filter(&z, 1e-300).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3]);
        assert_eq!(f, z);
    }

    #[test]
    fn all_constant_batch_is_degenerate() {
        let z = Tensor::full(&[5, 3], 2.0);
        assert!(matches!(variance_filter(&z, 1e-8), Err(Error::DegenerateBatch { kept: 0, .. })));
        assert!(matches!(redundancy_score(&z), Err(Error::DegenerateBatch { .. })));
        // one surviving column is still too few for a score
        let z = Tensor::from_rows(&[[1.0, 3.0], [2.0, 3.0], [0.0, 3.0]]);
        assert!(matches!(redundancy_score(&z), Err(Error::DegenerateBatch { kept: 1, .. })));
    }

    #[test]
    fn filter_matches_per_column_variance_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = Tensor::normal(&[12, 6], 1.0, &mut rng);
        for r in 0..12 {
            z.set(r, 1, 0.5);
            let v = z.get(r, 4) * 1e-5;
            z.set(r, 4, v);
        }
        let eps = 1e-8;
        let mut expect = Vec::new();
        for c in 0..6 {
            let col: Vec<f64> = (0..12).map(|r| z.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / 12.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 12.0;
            if v >= eps {
                expect.push(c);
            }
        }
        let (_, kept) = variance_filter(&z, eps).unwrap();
        assert_eq!(kept, expect);
        assert_eq!(kept, vec![0, 2, 3, 5]);
    }

    #[test]
    fn correlation_of_identical_and_orthogonal_columns() {
        let z = Tensor::from_rows(&[[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]]);
        let c = correlation_matrix(&z).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);

        let z = Tensor::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        let c = correlation_matrix(&z).unwrap();
        assert_eq!(c, Tensor::eye(2));
        assert_eq!(redundancy_score(&z).unwrap(), 0.0);
    }

    #[test]
    fn correlation_rejects_zero_variance() {
        let z = Tensor::from_rows(&[[1.0, 3.0], [2.0, 3.0]]);
        assert!(matches!(correlation_matrix(&z), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_columns_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let col = Tensor::normal(&[20, 1], 1.0, &mut rng);
        let data: Vec<f64> = col.data().iter().flat_map(|&v| [v, v, v, v]).collect();
        let z = Tensor::new(vec![20, 4], data).unwrap();
        assert!((redundancy_score(&z).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_collinear_pair_by_hand() {
        let z = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.1]]);
        // Pearson r of (1,2,3) vs (2,4,6.1), worked by hand:
        // centered x = (−1, 0, 1); ȳ = 12.1/3; centered y = (−2.0333…, −0.0333…, 2.0666…)
        // Σxy = 4.1, Σx² = 2, Σy² = 8.42 − … computed below from exact fractions.
        let y = [2.0f64, 4.0, 6.1];
        let ym = y.iter().sum::<f64>() / 3.0;
        let sxy = -1.0 * (y[0] - ym) + 1.0 * (y[2] - ym);
        let syy: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
        let r = sxy / (2.0f64.sqrt() * syy.sqrt());
        assert!((sxy - 4.1).abs() < 1e-12);
        assert!((redundancy_score(&z).unwrap() - r * r).abs() < 1e-10);
    }

    #[test]
    fn diagnose_rule() {
        let s: BTreeMap<usize, f64> = [(0, 0.10), (1, 0.03)].into();
        assert_eq!(diagnose(&s, 0.05).unwrap(), BTreeSet::from([0]));
        let s: BTreeMap<usize, f64> = [(0, 0.04), (1, 0.04)].into();
        assert!(diagnose(&s, 0.05).unwrap().is_empty());
        let s: BTreeMap<usize, f64> = [(0, 0.30), (1, 0.02), (2, 0.09)].into();
        assert_eq!(diagnose(&s, 0.05).unwrap(), BTreeSet::from([0, 2]));
    }

    #[test]
    fn diagnose_needs_two_modalities() {
        let s: BTreeMap<usize, f64> = [(0, 0.5)].into();
        assert!(matches!(
            diagnose(&s, 0.05),
            Err(Error::DiagnosisUnavailable { diagnosable: 1 })
        ));
    }

    #[test]
    fn report_excludes_degenerate_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::normal(&[16, 4], 1.0, &mut rng);
        let v = Tensor::full(&[16, 4], 1.0);
        let names = vec!["audio".to_string(), "video".to_string()];
        let rep = build_report(&[a, v], &names, 0.05, 1e-8).unwrap();
        assert!(!rep.available);
        assert!(rep.biased.is_empty());
        assert_eq!(rep.modalities[1].score, None);
        assert_eq!(rep.modalities[1].kept_dims, 0);
    }

    #[test]
    fn analytic_correlation_cases() {
        let v = Tensor::vector(vec![0.3, -0.7, 0.2, 0.6]);
        assert_eq!(analytic_shift_correlation(&v, 0.0), Tensor::eye(4));
        assert_eq!(redundancy_of_shifted(&v, 0.0), 0.0);

        let e1 = Tensor::vector(vec![1.0, 0.0, 0.0]);
        assert_eq!(analytic_shift_correlation(&e1, 2.0), Tensor::eye(3));

        let ones = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let c = analytic_shift_correlation(&ones, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.5 };
                assert!((c.get(i, j) - expect).abs() < 1e-15);
            }
        }
        assert!((redundancy_of_shifted(&ones, 1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn shifted_redundancy_is_monotone_in_sigma() {
        let v = Tensor::vector(vec![0.5, -0.5, 0.5, 0.5]);
        let mut prev = 0.0;
        for k in 0..=40 {
            let r = redundancy_of_shifted(&v, k as f64 * 0.1);
            assert!(r >= prev);
            if k > 0 {
                assert!(r > 0.0);
            }
            prev = r;
        }
    }

    #[test]
    fn queue_keeps_most_recent_rows() {
        let mut q = FeatureQueue::new(3);
        q.push_batch(&Tensor::from_rows(&[[1.0], [2.0]]));
        q.push_batch(&Tensor::from_rows(&[[3.0], [4.0]]));
        assert_eq!(q.len(), 3);
        assert_eq!(q.matrix().unwrap().data(), &[2.0, 3.0, 4.0]);
    }
}
