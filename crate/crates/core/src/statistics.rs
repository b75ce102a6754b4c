//! Per-class distributions of uninstructed (`Ĝ_c`) and instructed (`G_c`)
//! representations, and sampling of pseudo representations from them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{checksum_tensors, Checksum};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{seeded_rng, Tensor};

pub const RIDGE: f64 = 1e-4;
pub const DEFAULT_K_MAX: usize = 10;
/// Dimensions above this default to diagonal covariances.
pub const FULL_COVARIANCE_MAX_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    FullGaussian,
    DiagGaussian,
    MultiCentroid { k_max: usize },
}

impl StatsMode {
    pub fn default_for_dim(dim: usize) -> Self {
        if dim <= FULL_COVARIANCE_MAX_DIM {
            Self::FullGaussian
        } else {
            Self::DiagGaussian
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Spread {
    /// Covariance and its lower Cholesky factor.
    Full { cov: Tensor, chol: Tensor },
    Diag { var: Vec<f64> },
    Centroids { centroids: Vec<Vec<f64>>, counts: Vec<usize>, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub mean: Vec<f64>,
    pub spread: Spread,
    pub count: usize,
}

impl ClassStats {
    pub fn mode(&self) -> StatsMode {
        match &self.spread {
            Spread::Full { .. } => StatsMode::FullGaussian,
            Spread::Diag { .. } => StatsMode::DiagGaussian,
            Spread::Centroids { centroids, .. } => StatsMode::MultiCentroid { k_max: centroids.len() },
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Gaussian with a given covariance, which must be positive semi-definite.
    pub fn gaussian(mean: Vec<f64>, cov: Tensor, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != [d, d] {
            return Err(shape_err(format!("covariance {:?} for dim {d}", cov.shape())));
        }
        let chol = cholesky_psd(&cov)?;
        Ok(Self { mean, spread: Spread::Full { cov, chol }, count })
    }

    pub fn centroid(centroids: Vec<Vec<f64>>, counts: Vec<usize>, sigma: f64) -> Result<Self> {
        if centroids.is_empty() || centroids.len() != counts.len() || counts.iter().all(|&c| c == 0) {
            return Err(Error::Input("centroid stats need matching non-empty centroids and counts".into()));
        }
        let d = centroids[0].len();
        if centroids.iter().any(|c| c.len() != d) {
            return Err(shape_err("centroids differ in dimension"));
        }
        let total: usize = counts.iter().sum();
        let mut mean = vec![0.0; d];
        for (c, &k) in centroids.iter().zip(&counts) {
            for (m, v) in mean.iter_mut().zip(c) {
                *m += k as f64 * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total as f64);
        Ok(Self { mean, spread: Spread::Centroids { centroids, counts, sigma }, count: total })
    }

    /// Tensors describing the stats, for checksums and checkpoints.
    pub fn tensors(&self) -> Vec<(&'static str, Tensor)> {
        let mut out = vec![("mean", Tensor::vector(self.mean.clone()))];
        match &self.spread {
            Spread::Full { cov, .. } => out.push(("cov", cov.clone())),
            Spread::Diag { var } => out.push(("var", Tensor::vector(var.clone()))),
            Spread::Centroids { centroids, counts, sigma } => {
                out.push(("centroids", Tensor::from_rows(centroids).expect("rectangular")));
                out.push(("counts", Tensor::vector(counts.iter().map(|&c| c as f64).collect())));
                out.push(("sigma", Tensor::vector(vec![*sigma])));
            }
        }
        out.push(("n", Tensor::vector(vec![self.count as f64])));
        out
    }

    pub fn checksum(&self) -> Checksum {
        let ts: Vec<Tensor> = self.tensors().into_iter().map(|(_, t)| t).collect();
        checksum_tensors(&ts)
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`. Zero pivots (within a relative
/// tolerance) yield zero columns, so singular PSD matrices are accepted.
pub fn cholesky_psd(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(shape_err(format!("cholesky of {:?}", a.shape())));
    }
    let scale = (0..n).map(|i| a.get2(i, i).abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-10 * scale;
    for i in 0..n {
        for j in 0..i {
            if (a.get2(i, j) - a.get2(j, i)).abs() > 1e-9 * scale {
                return Err(Error::Numeric("covariance is not symmetric".into()));
            }
        }
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.get2(j, j);
        for k in 0..j {
            d -= l.get2(j, k) * l.get2(j, k);
        }
        if d < -tol {
            return Err(Error::Numeric(format!("covariance is not positive semi-definite (pivot {d:e})")));
        }
        if d <= tol {
            continue;
        }
        let root = d.sqrt();
        l.set2(j, j, root);
        for i in j + 1..n {
            let mut s = a.get2(i, j);
            for k in 0..j {
                s -= l.get2(i, k) * l.get2(j, k);
            }
            l.set2(i, j, s / root);
        }
    }
    Ok(l)
}

fn check_reps(reps: &[Vec<f64>], need: usize) -> Result<usize> {
    if reps.len() < need {
        return Err(Error::Input(format!("{} representations, at least {need} required", reps.len())));
    }
    let d = reps[0].len();
    if reps.iter().any(|r| r.len() != d) {
        return Err(shape_err("representations differ in dimension"));
    }
    Ok(d)
}

fn mean_of(reps: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in reps {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= reps.len() as f64);
    m
}

/// Fits class statistics. Gaussian modes use the unbiased covariance plus a
/// ridge of [`RIDGE`]; centroid mode runs seeded k-means.
pub fn fit_class_stats(reps: &[Vec<f64>], mode: StatsMode, seed: u64) -> Result<ClassStats> {
    match mode {
        StatsMode::FullGaussian => {
            let d = check_reps(reps, 2)?;
            let mean = mean_of(reps, d);
            let centered: Vec<f64> =
                reps.iter().flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
            let x = Tensor::matrix(reps.len(), d, centered)?;
            let mut cov = x.transpose().matmul(&x)?.scale(1.0 / (reps.len() - 1) as f64);
            for i in 0..d {
                for j in 0..i {
                    let s = 0.5 * (cov.get2(i, j) + cov.get2(j, i));
                    cov.set2(i, j, s);
                    cov.set2(j, i, s);
                }
                cov.set2(i, i, cov.get2(i, i) + RIDGE);
            }
            ClassStats::gaussian(mean, cov, reps.len())
        }
        StatsMode::DiagGaussian => {
            let d = check_reps(reps, 2)?;
            let mean = mean_of(reps, d);
            let mut var = vec![0.0; d];
            for r in reps {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v = *v / (reps.len() - 1) as f64 + RIDGE);
            Ok(ClassStats { mean, spread: Spread::Diag { var }, count: reps.len() })
        }
        StatsMode::MultiCentroid { k_max } => {
            check_reps(reps, 1)?;
            if k_max == 0 {
                return Err(Error::Config("k_max must be positive".into()));
            }
            let (centroids, counts, sigma) = kmeans(reps, k_max, seed);
            ClassStats::centroid(centroids, counts, sigma)
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns the non-empty clusters,
/// their sizes, and the mean per-coordinate within-cluster standard deviation.
pub fn kmeans(reps: &[Vec<f64>], k_max: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let n = reps.len();
    let d = reps[0].len();
    let k = k_max.min(n);
    let mut rng = seeded_rng(seed, 0x4B4D);
    let mut centers: Vec<Vec<f64>> = vec![reps[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = reps.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut idx = n - 1;
        for (i, &w) in nearest.iter().enumerate() {
            if pick < w {
                idx = i;
                break;
            }
            pick -= w;
        }
        centers.push(reps[idx].clone());
        for (nd, r) in nearest.iter_mut().zip(reps) {
            *nd = nd.min(sq_dist(r, centers.last().unwrap()));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, r) in reps.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let dd = sq_dist(r, ctr);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (r, &a) in reps.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        for ((ctr, s), &c) in centers.iter_mut().zip(&sums).zip(&counts) {
            if c > 0 {
                *ctr = s.iter().map(|v| v / c as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; centers.len()];
    let mut ss = vec![0.0; centers.len()];
    for (r, &a) in reps.iter().zip(&assign) {
        counts[a] += 1;
        ss[a] += sq_dist(r, &centers[a]);
    }
    let mut kept = Vec::new();
    let mut kept_counts = Vec::new();
    let mut sigma_sum = 0.0;
    for ((ctr, &c), s) in centers.into_iter().zip(&counts).zip(&ss) {
        if c > 0 {
            sigma_sum += (s / (c * d) as f64).sqrt();
            kept.push(ctr);
            kept_counts.push(c);
        }
    }
    let sigma = sigma_sum / kept.len() as f64;
    (kept, kept_counts, sigma)
}

/// Draws `n` pseudo representations; deterministic given `seed`. Centroids
/// are picked with probability proportional to their cluster size.
pub fn sample_pseudo(stats: &ClassStats, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sample_pseudo_with(stats, n, &mut seeded_rng(seed, 0x5A))
}

pub fn sample_pseudo_with(stats: &ClassStats, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    let d = stats.dim();
    let mut out = Vec::with_capacity(n);
    match &stats.spread {
        Spread::Full { chol, .. } => {
            for _ in 0..n {
                let zs: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mut x = stats.mean.clone();
                for (i, xi) in x.iter_mut().enumerate() {
                    let row = chol.row_slice(i);
                    *xi += row[..=i].iter().zip(&zs).map(|(l, v)| l * v).sum::<f64>();
                }
                out.push(x);
            }
        }
        Spread::Diag { var } => {
            for _ in 0..n {
                out.push(stats.mean.iter().zip(var).map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect());
            }
        }
        Spread::Centroids { centroids, counts, sigma } => {
            let total: usize = counts.iter().sum();
            for _ in 0..n {
                let mut r = rng.random_range(0..total);
                let mut pick = 0;
                while r >= counts[pick] {
                    r -= counts[pick];
                    pick += 1;
                }
                out.push(centroids[pick].iter().map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal)).collect());
            }
        }
    }
    Ok(out)
}

pub fn class_mean(stats: &ClassStats) -> &[f64] {
    &stats.mean
}

/// Class-conditional statistics for both representation kinds, keyed by
/// `(task, class)`, plus the registry of classes per task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsStore {
    registry: Vec<Vec<usize>>,
    shared_labels: bool,
    uninstructed: BTreeMap<(usize, usize), ClassStats>,
    instructed: BTreeMap<(usize, usize), ClassStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepKind {
    Uninstructed,
    Instructed,
}

impl StatsStore {
    /// `shared_labels` allows the same class in several tasks (domain-incremental).
    pub fn new(shared_labels: bool) -> Self {
        Self { shared_labels, ..Self::default() }
    }

    pub fn register_task(&mut self, t: usize, classes: &[usize]) -> Result<()> {
        if t != self.registry.len() {
            return Err(Error::State(format!("registering task {t} after {} tasks", self.registry.len())));
        }
        if classes.is_empty() {
            return Err(Error::Input(format!("task {t} has no classes")));
        }
        if !self.shared_labels {
            if let Some(c) = classes.iter().find(|c| self.task_of(**c).is_some()) {
                return Err(Error::State(format!("class {c} already registered")));
            }
        }
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        self.registry.push(sorted);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.registry.len()
    }

    pub fn classes(&self, t: usize) -> Result<&[usize]> {
        self.registry.get(t).map(Vec::as_slice).ok_or(Error::Index { index: t, len: self.registry.len() })
    }

    /// Sorted union of the classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.registry.iter().take(t + 1).flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.registry.iter().position(|cs| cs.binary_search(&class).is_ok())
    }

    fn map(&self, kind: RepKind) -> &BTreeMap<(usize, usize), ClassStats> {
        match kind {
            RepKind::Uninstructed => &self.uninstructed,
            RepKind::Instructed => &self.instructed,
        }
    }

    /// Stores stats once; a second insertion for the same key is an error.
    pub fn insert(&mut self, kind: RepKind, task: usize, class: usize, stats: ClassStats) -> Result<()> {
        if !self.classes(task)?.contains(&class) {
            return Err(Error::Input(format!("class {class} not registered to task {task}")));
        }
        let map = match kind {
            RepKind::Uninstructed => &mut self.uninstructed,
            RepKind::Instructed => &mut self.instructed,
        };
        if map.contains_key(&(task, class)) {
            return Err(Error::State(format!("stats for task {task} class {class} already stored")));
        }
        map.insert((task, class), stats);
        Ok(())
    }

    pub fn get(&self, kind: RepKind, task: usize, class: usize) -> Option<&ClassStats> {
        self.map(kind).get(&(task, class))
    }

    /// Entries of one kind, in `(task, class)` order.
    pub fn entries(&self, kind: RepKind) -> impl Iterator<Item = (&(usize, usize), &ClassStats)> {
        self.map(kind).iter()
    }

    pub fn len(&self, kind: RepKind) -> usize {
        self.map(kind).len()
    }

    /// Checksum over every stored entry of task `t`.
    pub fn task_checksum(&self, t: usize) -> Checksum {
        let mut ts = Vec::new();
        for kind in [RepKind::Uninstructed, RepKind::Instructed] {
            for (_, s) in self.map(kind).range((t, 0)..(t + 1, 0)) {
                ts.extend(s.tensors().into_iter().map(|(_, x)| x));
            }
        }
        checksum_tensors(&ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn gaussian_draws(mean: &[f64], l: &[[f64; 3]; 3], n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed, 1);
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                (0..3).map(|i| mean[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>()).collect()
            })
            .collect()
    }

    #[test]
    fn degenerate_cloud_has_ridge_covariance() {
        let reps = vec![vec![1.5, -2.0]; 5];
        let s = fit_class_stats(&reps, StatsMode::FullGaussian, 0).unwrap();
        assert_eq!(s.mean, vec![1.5, -2.0]);
        let Spread::Full { cov, .. } = &s.spread else { panic!() };
        assert!(cov.max_abs_diff(&Tensor::identity(2).scale(RIDGE)) < 1e-18);
    }

    #[test]
    fn two_point_mean() {
        let s = fit_class_stats(&[vec![0.0, 0.0], vec![2.0, 2.0]], StatsMode::DiagGaussian, 0).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(fit_class_stats(&[vec![1.0]], StatsMode::FullGaussian, 0), Err(Error::Input(_))));
        assert!(matches!(fit_class_stats(&[], StatsMode::MultiCentroid { k_max: 3 }, 0), Err(Error::Input(_))));
        assert!(fit_class_stats(&[vec![1.0]], StatsMode::MultiCentroid { k_max: 3 }, 0).is_ok());
    }

    #[test]
    fn fitted_mean_concentrates() {
        let truth = [1.0, -2.0, 0.5];
        let l = [[1.0, 0.0, 0.0], [0.5, 2.0, 0.0], [-0.3, 0.2, 0.7]];
        let reps = gaussian_draws(&truth, &l, 1000, 3);
        let s = fit_class_stats(&reps, StatsMode::FullGaussian, 0).unwrap();
        for i in 0..3 {
            let sd = (0..=i).map(|k| l[i][k] * l[i][k]).sum::<f64>().sqrt();
            assert!((s.mean[i] - truth[i]).abs() < 5.0 * sd / 1000f64.sqrt());
        }
    }

    #[test]
    fn covariance_eigenvalues_respect_ridge() {
        let reps = gaussian_draws(&[0.0; 3], &[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 50, 4);
        let s = fit_class_stats(&reps, StatsMode::FullGaussian, 0).unwrap();
        let Spread::Full { cov, chol } = &s.spread else { panic!() };
        let m = DMatrix::from_row_slice(3, 3, cov.data());
        let eig = SymmetricEigen::new(m.clone());
        assert!(eig.eigenvalues.iter().all(|&e| e >= RIDGE * (1.0 - 1e-6)));
        let lm = DMatrix::from_row_slice(3, 3, chol.data());
        assert!((&lm * lm.transpose() - m).abs().max() < 1e-12);
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let s = ClassStats::gaussian(vec![3.0, 4.0], Tensor::zeros(&[2, 2]), 1).unwrap();
        for x in sample_pseudo(&s, 20, 1).unwrap() {
            assert_eq!(x, vec![3.0, 4.0]);
        }
        let bad = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(ClassStats::gaussian(vec![0.0; 2], bad, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn sampling_is_seeded_and_unbiased() {
        let l = [[1.0, 0.0, 0.0], [0.4, 0.8, 0.0], [0.1, -0.2, 0.5]];
        let reps = gaussian_draws(&[4.0, -3.0, 6.0], &l, 500, 9);
        for mode in [StatsMode::FullGaussian, StatsMode::DiagGaussian, StatsMode::MultiCentroid { k_max: 10 }] {
            let s = fit_class_stats(&reps, mode, 2).unwrap();
            assert_eq!(sample_pseudo(&s, 5, 7).unwrap(), sample_pseudo(&s, 5, 7).unwrap());
            let draws = sample_pseudo(&s, 10_000, 8).unwrap();
            let m = mean_of(&draws, 3);
            for i in 0..3 {
                assert_relative_eq!(m[i], s.mean[i], max_relative = 0.01);
            }
        }
        let s = fit_class_stats(&reps, StatsMode::FullGaussian, 0).unwrap();
        assert!(matches!(sample_pseudo(&s, 0, 1), Err(Error::Input(_))));
    }

    #[test]
    fn resampled_fit_round_trips() {
        let l = [[1.0, 0.0, 0.0], [0.6, 1.2, 0.0], [-0.4, 0.3, 0.9]];
        let reps = gaussian_draws(&[2.0, 5.0, -4.0], &l, 400, 21);
        let s = fit_class_stats(&reps, StatsMode::FullGaussian, 0).unwrap();
        let draws = sample_pseudo(&s, 100_000, 22).unwrap();
        let refit = fit_class_stats(&draws, StatsMode::FullGaussian, 0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(refit.mean[i], s.mean[i], max_relative = 0.01);
        }
        let (Spread::Full { cov: a, .. }, Spread::Full { cov: b, .. }) = (&s.spread, &refit.spread) else { panic!() };
        assert!((a.frobenius() - b.frobenius()).abs() / a.frobenius() < 0.05);
    }

    #[test]
    fn centroid_means() {
        let one = ClassStats::centroid(vec![vec![1.0, 2.0]], vec![4], 0.1).unwrap();
        assert_eq!(class_mean(&one), &[1.0, 2.0]);
        let two = ClassStats::centroid(vec![vec![0.0, 0.0], vec![4.0, 8.0]], vec![1, 3], 0.1).unwrap();
        assert_eq!(class_mean(&two), &[3.0, 6.0]);
    }

    #[test]
    fn kmeans_finds_separated_clusters_and_drops_empty_ones() {
        let mut reps = Vec::new();
        for c in 0..3 {
            for i in 0..20 {
                reps.push(vec![c as f64 * 100.0 + (i % 3) as f64 * 0.01, 0.0]);
            }
        }
        let s = fit_class_stats(&reps, StatsMode::MultiCentroid { k_max: 10 }, 5).unwrap();
        let Spread::Centroids { centroids, counts, .. } = &s.spread else { panic!() };
        assert!(centroids.len() <= 10 && !centroids.is_empty());
        assert_eq!(counts.iter().sum::<usize>(), 60);
        // Duplicate points leave clusters empty, which are dropped.
        let dup = fit_class_stats(&[vec![1.0], vec![1.0], vec![1.0]], StatsMode::MultiCentroid { k_max: 10 }, 0).unwrap();
        let Spread::Centroids { centroids, sigma, .. } = &dup.spread else { panic!() };
        assert_eq!(centroids.len(), 1);
        assert_eq!(*sigma, 0.0);
    }

    #[test]
    fn store_bookkeeping() {
        let mut store = StatsStore::new(false);
        store.register_task(0, &[3, 1]).unwrap();
        assert!(matches!(store.register_task(1, &[1, 5]), Err(Error::State(_))));
        store.register_task(1, &[5, 6]).unwrap();
        assert_eq!(store.seen_classes(1), vec![1, 3, 5, 6]);
        assert_eq!(store.task_of(6), Some(1));
        let s = fit_class_stats(&[vec![0.0], vec![1.0]], StatsMode::FullGaussian, 0).unwrap();
        store.insert(RepKind::Uninstructed, 0, 3, s.clone()).unwrap();
        assert!(matches!(store.insert(RepKind::Uninstructed, 0, 3, s.clone()), Err(Error::State(_))));
        assert!(matches!(store.insert(RepKind::Instructed, 0, 5, s.clone()), Err(Error::Input(_))));
        let before = store.task_checksum(0);
        store.insert(RepKind::Instructed, 1, 5, s).unwrap();
        assert_eq!(store.task_checksum(0), before);
        let mut shared = StatsStore::new(true);
        shared.register_task(0, &[0, 1]).unwrap();
        shared.register_task(1, &[0, 1]).unwrap();
    }

    proptest! {
        #[test]
        fn gaussian_fits_are_psd(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 2..12),
        ) {
            let s = fit_class_stats(&pts, StatsMode::FullGaussian, 0).unwrap();
            let Spread::Full { cov, .. } = &s.spread else { unreachable!() };
            let m = DMatrix::from_row_slice(4, 4, cov.data());
            prop_assert!((&m - m.transpose()).abs().max() < 1e-12);
            let eig = SymmetricEigen::new(m);
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= RIDGE - 1e-6));
        }
    }
}
