//! Diffusion maps over a similarity matrix.
//!
//! The kernel `k = exp(-(1 - S)/eps)` is row-normalized into a Markov matrix
//! `p = Z^{-1} k`. Its spectrum is obtained from the symmetric conjugate
//! `Z^{-1/2} k Z^{-1/2}`, so eigenvalues are real and eigenvectors come out
//! orthonormal in the `z/sum(z)` weighted inner product. A set of `c` mutually
//! dissimilar groups shows up as `c` eigenvalues exponentially close to 1.

use crate::error::{Error, Result};
use crate::scalar::{derive_seed, Real};
use crate::similarity::SimilarityMatrix;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn build_kernel<T: Real>(s: &SimilarityMatrix<T>, epsilon: T) -> Result<DMatrix<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let m = s.len();
    Ok(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            T::one()
        } else {
            (-(T::one() - s.get(i, j)) / epsilon).exp()
        }
    }))
}

/// Row-stochastic `p = Z^{-1} k` and the degrees `z_l = sum_l' k_ll'`.
pub fn transition_matrix<T: Real>(kernel: &DMatrix<T>) -> Result<(DMatrix<T>, Vec<T>)> {
    let z: Vec<T> = kernel
        .row_iter()
        .map(|r| r.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    if z.iter().any(|&v| !(v > T::zero())) {
        return Err(Error::InvalidConfig(
            "kernel has a row with zero total weight".into(),
        ));
    }
    let mut p = kernel.clone();
    for (i, mut row) in p.row_iter_mut().enumerate() {
        row /= z[i];
    }
    Ok((p, z))
}

#[derive(Debug, Clone)]
pub struct DiffusionResult<T: Real> {
    pub epsilon: T,
    /// Descending.
    pub eigenvalues: Vec<T>,
    /// Right eigenvectors `psi_n` as columns, with `sum_l (z_l/sum z) psi_n(l)^2 = 1`
    /// and the largest-magnitude entry positive.
    pub eigenvectors: DMatrix<T>,
    pub degrees: Vec<T>,
}

impl<T: Real> DiffusionResult<T> {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn degeneracy_count(&self, near_one_delta: f64) -> usize {
        degeneracy_count(&self.eigenvalues, near_one_delta)
    }

    pub fn gap(&self, near_one_delta: f64) -> f64 {
        gap_after(&self.eigenvalues, self.degeneracy_count(near_one_delta))
    }

    /// Coordinates `(psi_1(l), ..., psi_d(l))` of every sample.
    pub fn embedding(&self, d: usize) -> Vec<Vec<f64>> {
        let d = d.min(self.len().saturating_sub(1));
        (0..self.len())
            .map(|l| {
                (1..=d)
                    .map(|n| self.eigenvectors[(l, n)].as_f64())
                    .collect()
            })
            .collect()
    }
}

pub fn degeneracy_count<T: Real>(eigenvalues: &[T], near_one_delta: f64) -> usize {
    eigenvalues
        .iter()
        .filter(|v| v.as_f64() > 1.0 - near_one_delta)
        .count()
}

/// `lambda_{k-1} - lambda_k`, or 0 when `k` is 0 or covers the whole spectrum.
pub fn gap_after<T: Real>(eigenvalues: &[T], k: usize) -> f64 {
    if k == 0 || k >= eigenvalues.len() {
        0.0
    } else {
        (eigenvalues[k - 1] - eigenvalues[k]).as_f64()
    }
}

fn symmetric_conjugate<T: Real>(p: &DMatrix<T>, z: &[T]) -> DMatrix<T> {
    let m = p.nrows();
    let sq: Vec<T> = z.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(m, m, |i, j| sq[i] * p[(i, j)] / sq[j]);
    (&a + a.transpose()) * T::lit(0.5)
}

fn sign_fix<T: Real>(v: &mut [T]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < T::zero()) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn lex_cmp<T: Real>(a: &[T], b: &[T]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.as_f64().total_cmp(&y.as_f64()) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Full eigendecomposition of a row-stochastic `p` with degrees `z`.
///
/// `sqrt(z)` is an exact eigenvector of the symmetric conjugate with eigenvalue 1.
/// It is deflated before diagonalizing and restored as the leading pair, so
/// `psi_0` stays constant even when further eigenvalues are within rounding of 1.
pub fn spectrum<T: Real>(p: &DMatrix<T>, z: &[T], epsilon: T) -> Result<DiffusionResult<T>> {
    let m = p.nrows();
    let a = symmetric_conjugate(p, z);
    let total = z.iter().fold(T::zero(), |s, &v| s + v);
    let u0 = DVector::from_iterator(m, z.iter().map(|&v| (v / total).sqrt()));
    let au = &a * &u0;
    let lambda0 = u0.dot(&au);
    let deflated =
        &a - &u0 * au.transpose() - &au * u0.transpose() + &u0 * u0.transpose() * lambda0;
    let eig = SymmetricEigen::try_new(deflated, T::default_epsilon(), 0)
        .ok_or_else(|| Error::Eigen(format!("no convergence for m = {m}")))?;
    let k0 = (0..m)
        .max_by(|&i, &j| {
            let oi = eig.eigenvectors.column(i).dot(&u0).abs();
            let oj = eig.eigenvectors.column(j).dot(&u0).abs();
            oi.as_f64().total_cmp(&oj.as_f64())
        })
        .unwrap_or(0);
    let scale: Vec<T> = z.iter().map(|&v| (total / v).sqrt()).collect();
    let mut rest: Vec<(T, Vec<T>)> = (0..m)
        .filter(|&n| n != k0)
        .map(|n| {
            let mut psi: Vec<T> = (0..m)
                .map(|l| eig.eigenvectors[(l, n)] * scale[l])
                .collect();
            sign_fix(&mut psi);
            (eig.eigenvalues[n], psi)
        })
        .collect();
    rest.sort_by(|a, b| {
        b.0.as_f64()
            .total_cmp(&a.0.as_f64())
            .then_with(|| lex_cmp(&a.1, &b.1))
    });
    let mut pairs = Vec::with_capacity(m);
    pairs.push((lambda0, vec![T::one(); m]));
    pairs.extend(rest);
    let eigenvalues = pairs.iter().map(|p| p.0).collect();
    let eigenvectors = DMatrix::from_fn(m, m, |l, n| pairs[n].1[l]);
    Ok(DiffusionResult {
        epsilon,
        eigenvalues,
        eigenvectors,
        degrees: z.to_vec(),
    })
}

/// Descending eigenvalues only; cheaper than [`spectrum`].
pub fn eigenvalues<T: Real>(p: &DMatrix<T>, z: &[T]) -> Vec<T> {
    let mut ev: Vec<T> = symmetric_conjugate(p, z)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.as_f64().total_cmp(&a.as_f64()));
    ev
}

pub fn diffusion_map<T: Real>(s: &SimilarityMatrix<T>, epsilon: T) -> Result<DiffusionResult<T>> {
    let (p, z) = transition_matrix(&build_kernel(s, epsilon)?)?;
    spectrum(&p, &z, epsilon)
}

/// `sum_l'' (1/z_l'') [(p^t)_{l l''} - (p^t)_{l' l''}]^2`.
pub fn diffusion_distance_direct<T: Real>(
    p: &DMatrix<T>,
    z: &[T],
    t: usize,
    l: usize,
    l2: usize,
) -> T {
    let mut pt = p.clone();
    for _ in 1..t {
        pt = &pt * p;
    }
    (0..p.ncols()).fold(T::zero(), |acc, k| {
        let d = pt[(l, k)] - pt[(l2, k)];
        acc + d * d / z[k]
    })
}

/// `(1/sum z) sum_{n >= 1} lambda_n^{2t} (psi_n(l) - psi_n(l'))^2`; equals the
/// direct form under the weighted normalization of the eigenvectors.
pub fn diffusion_distance_spectral<T: Real>(
    r: &DiffusionResult<T>,
    t: usize,
    l: usize,
    l2: usize,
) -> T {
    let total = r.degrees.iter().fold(T::zero(), |s, &v| s + v);
    let sum = (1..r.len()).fold(T::zero(), |acc, n| {
        let d = r.eigenvectors[(l, n)] - r.eigenvectors[(l2, n)];
        acc + r.eigenvalues[n].powi(2 * t as i32) * d * d
    });
    sum / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub near_one_delta: f64,
    pub gap_threshold: f64,
    /// Contiguous grid points a degeneracy must persist for.
    pub min_persistence: usize,
    /// Largest degeneracy reported as a sector count.
    pub max_sectors: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            near_one_delta: 1e-3,
            gap_threshold: 0.1,
            min_persistence: 3,
            max_sectors: 16,
        }
    }
}

/// `n` log-spaced points over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn default_epsilon_grid() -> Vec<f64> {
    log_grid(1e-3, 1.0, 30)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub eigenvalues: Vec<f64>,
    pub degeneracy: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub sector_count: usize,
    /// Grid index range `[start, end]` supporting the reported count.
    pub range: Option<(usize, usize)>,
}

impl SweepResult {
    /// Whether `count` near-1 eigenvalues followed by a gap appear at the grid
    /// point closest to `epsilon`.
    pub fn degenerate_at(&self, epsilon: f64, count: usize, gap_threshold: f64) -> bool {
        self.points
            .iter()
            .min_by(|a, b| {
                (a.epsilon.ln() - epsilon.ln())
                    .abs()
                    .total_cmp(&(b.epsilon.ln() - epsilon.ln()).abs())
            })
            .is_some_and(|p| p.degeneracy == count && p.gap > gap_threshold)
    }
}

/// Sector count from per-point degeneracies: among counts `2..=max_sectors`
/// (and below the sample count) that hold with a gap above threshold on at
/// least `min_persistence` contiguous points, the one with the longest run,
/// larger count on ties. 1 if none qualifies.
pub fn detect_sectors(
    points: &[SweepPoint],
    m: usize,
    cfg: &SweepConfig,
) -> (usize, Option<(usize, usize)>) {
    let mut best: Option<(usize, usize, usize)> = None;
    let mut i = 0;
    while i < points.len() {
        let c = points[i].degeneracy;
        let ok = |p: &SweepPoint| p.degeneracy == c && p.gap > cfg.gap_threshold;
        if !ok(&points[i]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < points.len() && ok(&points[j + 1]) {
            j += 1;
        }
        let len = j - i + 1;
        if c >= 2 && c <= cfg.max_sectors && c < m && len >= cfg.min_persistence {
            let better = match best {
                None => true,
                Some((bc, bs, be)) => len > be - bs + 1 || (len == be - bs + 1 && c > bc),
            };
            if better {
                best = Some((c, i, j));
            }
        }
        i = j + 1;
    }
    match best {
        Some((c, s, e)) => (c, Some((s, e))),
        None => (1, None),
    }
}

pub fn epsilon_sweep<T: Real>(
    s: &SimilarityMatrix<T>,
    grid: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("epsilon grid is empty".into()));
    }
    if grid.iter().any(|&e| !(e > 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "epsilon grid must be positive and increasing".into(),
        ));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &eps in grid {
        let (p, z) = transition_matrix(&build_kernel(s, T::lit(eps))?)?;
        let ev: Vec<f64> = eigenvalues(&p, &z).iter().map(|v| v.as_f64()).collect();
        let degeneracy = degeneracy_count(&ev, cfg.near_one_delta);
        let gap = gap_after(&ev, degeneracy);
        points.push(SweepPoint {
            epsilon: eps,
            eigenvalues: ev,
            degeneracy,
            gap,
        });
    }
    let (sector_count, range) = detect_sectors(&points, s.len(), cfg);
    Ok(SweepResult {
        points,
        sector_count,
        range,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub n_restarts: usize,
    pub max_iter: usize,
    /// Relative inertia change below which Lloyd iterations stop.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            n_restarts: 32,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = dist2(x, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, cfg: &KMeansConfig) -> ClusterAssignment {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut inertia = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let mut new_inertia = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centers);
            *l = c;
            new_inertia += d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centers[labels[a]])
                            .total_cmp(&dist2(&points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                labels[far] = c;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let done = (inertia - new_inertia).abs() <= cfg.tol * new_inertia.max(f64::MIN_POSITIVE);
        inertia = new_inertia;
        if done {
            break;
        }
    }
    let mut final_inertia = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (c, d) = nearest(p, &centers);
        *l = c;
        final_inertia += d;
    }
    ClusterAssignment {
        k,
        labels,
        centers,
        inertia: final_inertia,
    }
}

/// Best-inertia k-means over `cfg.n_restarts` plus-plus seeded restarts;
/// restart `r` draws from `derive_seed(seed, r)`.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<ClusterAssignment> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    let mut best: Option<ClusterAssignment> = None;
    for r in 0..cfg.n_restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let a = lloyd(points, plus_plus_seeds(points, k, &mut rng), cfg);
        if best.as_ref().is_none_or(|b| a.inertia < b.inertia) {
            best = Some(a);
        }
    }
    Ok(best.unwrap())
}

/// k-means on the leading `max(k - 1, 1)` nontrivial eigenvectors.
pub fn kmeans_embed<T: Real>(
    r: &DiffusionResult<T>,
    k: usize,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<ClusterAssignment> {
    kmeans(&r.embedding((k.max(2)) - 1), k, cfg, seed)
}

/// Fraction of samples on which two labelings agree under the best one-to-one
/// relabeling (exhaustive over permutations; labels up to 8 classes).
pub fn label_agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let k = ka.max(kb);
    assert!(k <= 8, "label_agreement supports at most 8 classes");
    let mut confusion = vec![vec![0usize; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        confusion[x][y] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        best = best.max((0..k).map(|i| confusion[i][p[i]]).sum::<usize>());
    });
    best as f64 / a.len() as f64
}

fn permute(v: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == v.len() {
        f(v);
        return;
    }
    for j in i..v.len() {
        v.swap(i, j);
        permute(v, i + 1, f);
        v.swap(i, j);
    }
}
