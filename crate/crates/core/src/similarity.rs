//! Pairwise similarity between network states.
//!
//! * `S_q`: squared overlap of the normalized wavefunctions (exact or sampled).
//! * `S_n`: gauge-invariant comparison of the parameters cell by cell,
//!   `1/2 + 1/(10N) sum_X max_tau [sum_j cos 2(tau w^a_Xj - w^b_Xj) + cos 2(tau b^a_X - b^b_X)]`.
//! * `S_str`: `S_n` maximized greedily over `pi/2` loop shifts of the first argument.
//! * Euclidean distance of the raw parameters, a gauge-blind control.
//! * A mixture of `S_n` with rescaled `S_q` on a random fraction of pairs.

use crate::error::{Error, Result};
use crate::hamiltonian::check_budget;
use crate::lattice::{Direction, Lattice, LoopPath};
use crate::persist;
use crate::rbm::{log_amplitude, CellTables, RbmParams};
use crate::scalar::{derive_seed, Real};
use crate::vmc::{for_each_sample, McEstimate, SamplerConfig};
use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Configurations per block in the exact Gram accumulation.
const GRAM_CHUNK: usize = 4096;
/// `ln` of the largest amplitude ratio admitted by the sampled overlap.
const LOG_RATIO_CAP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Measure {
    /// Exact quantum overlap.
    Q,
    Eu,
    N,
    Str {
        n_g: usize,
    },
    Mixed {
        f: f64,
    },
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Measure::Q => write!(f, "q"),
            Measure::Eu => write!(f, "eu"),
            Measure::N => write!(f, "n"),
            Measure::Str { n_g } => write!(f, "str({n_g})"),
            Measure::Mixed { f: frac } => write!(f, "mixed({frac})"),
        }
    }
}

/// Squared normalized overlap `|<a|b>|^2` by full enumeration.
pub fn overlap_exact<T: Real>(lat: &Lattice, a: &RbmParams<T>, b: &RbmParams<T>) -> Result<T> {
    let m = overlap_matrix(lat, &[a.clone(), b.clone()])?;
    Ok(m.get(0, 1))
}

/// Exact Gram matrix `G_ab = <a|b>` of unnormalized states, accumulated over
/// blocks of configurations.
pub fn gram_matrix<T: Real>(lat: &Lattice, states: &[RbmParams<T>]) -> Result<DMatrix<T>> {
    check_budget(lat)?;
    for s in states {
        s.check_lattice(lat)?;
    }
    let m = states.len();
    let tables: Vec<CellTables<T>> = states.iter().map(|s| CellTables::new(lat, s)).collect();
    let total = 1usize << lat.n_spins();
    let mut gram = DMatrix::<T>::zeros(m, m);
    let mut block = DMatrix::<T>::zeros(m, GRAM_CHUNK.min(total));
    let mut start = 0;
    while start < total {
        let len = GRAM_CHUNK.min(total - start);
        if block.ncols() != len {
            block = DMatrix::zeros(m, len);
        }
        for c in 0..len {
            let bits = (start + c) as u64;
            for (s, t) in tables.iter().enumerate() {
                block[(s, c)] = t.amplitude(bits);
            }
        }
        gram.gemm(T::one(), &block, &block.transpose(), T::one());
        start += len;
    }
    Ok(gram)
}

/// Matrix of exact `S_q`.
pub fn overlap_matrix<T: Real>(
    lat: &Lattice,
    states: &[RbmParams<T>],
) -> Result<SimilarityMatrix<T>> {
    let g = gram_matrix(lat, states)?;
    if (0..states.len()).any(|i| g[(i, i)] <= T::zero()) {
        return Err(Error::ZeroNorm);
    }
    Ok(SimilarityMatrix::from_fn(
        states.len(),
        Measure::Q,
        |i, j| {
            let v = g[(i, j)] * g[(i, j)] / (g[(i, i)] * g[(j, j)]);
            v.min(T::one())
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledOverlap<T> {
    pub estimate: McEstimate<T>,
    /// Some amplitude ratio hit the clipping cap.
    pub clipped: bool,
    /// The estimate is indistinguishable from zero at the sampling resolution.
    pub below_resolution: bool,
}

fn ratio_series<T: Real>(
    lat: &Lattice,
    from: &RbmParams<T>,
    to: &RbmParams<T>,
    sc: &SamplerConfig,
) -> Result<(McEstimate<T>, bool)> {
    let mut series = vec![Vec::new(); sc.n_chains];
    let mut clipped = false;
    let mut err = None;
    for_each_sample(lat, from, sc, |c, w| {
        let amp = |p: &RbmParams<T>| log_amplitude(lat, p, w.config());
        match (amp(from), amp(to)) {
            (Ok(a), Ok(b)) => {
                let v = if b.is_zero {
                    T::zero()
                } else {
                    let mut lr = b.log_abs - a.log_abs;
                    if lr.as_f64() > LOG_RATIO_CAP {
                        lr = T::lit(LOG_RATIO_CAP);
                        clipped = true;
                    }
                    let sign = if a.sign == b.sign {
                        T::one()
                    } else {
                        -T::one()
                    };
                    sign * lr.exp()
                };
                series[c].push(v);
            }
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((McEstimate::from_chains(&series), clipped))
}

/// `E_{|psi_a|^2}[psi_b/psi_a] * E_{|psi_b|^2}[psi_a/psi_b]`. The error of the
/// product of two independent estimates keeps the `se_1 se_2` term, which
/// dominates for near-orthogonal pairs.
pub fn overlap_sampled<T: Real>(
    lat: &Lattice,
    a: &RbmParams<T>,
    b: &RbmParams<T>,
    sc: &SamplerConfig,
) -> Result<SampledOverlap<T>> {
    let (r1, c1) = ratio_series(lat, a, b, sc)?;
    let (r2, c2) = ratio_series(lat, b, a, &sc.with_seed(derive_seed(sc.seed, 0x0b)))?;
    let mean = r1.mean * r2.mean;
    let se = ((r2.mean * r1.std_error).powi(2)
        + (r1.mean * r2.std_error).powi(2)
        + (r1.std_error * r2.std_error).powi(2))
    .sqrt();
    let estimate = McEstimate {
        mean,
        std_error: se,
        n_samples: r1.n_samples + r2.n_samples,
    };
    Ok(SampledOverlap {
        estimate,
        clipped: c1 || c2,
        below_resolution: mean.abs() <= T::lit(3.0) * se,
    })
}

fn check_pair<T: Real>(lat: &Lattice, a: &RbmParams<T>, b: &RbmParams<T>) -> Result<()> {
    a.check_lattice(lat)?;
    b.check_lattice(lat)
}

#[inline]
fn cell_score<T: Real>(a: &[T], b: &[T]) -> T {
    let two = T::lit(2.0);
    let mut plus = T::zero();
    let mut minus = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        plus += (two * (x - y)).cos();
        minus += (two * (-x - y)).cos();
    }
    plus.max(minus)
}

fn network_from_total<T: Real>(total: T, n_spins: usize) -> T {
    let v = T::lit(0.5) + total / T::lit(10.0 * n_spins as f64);
    v.max(T::zero()).min(T::one())
}

/// Gauge-invariant network similarity `S_n` in `[0, 1]`.
pub fn similarity_network<T: Real>(lat: &Lattice, a: &RbmParams<T>, b: &RbmParams<T>) -> Result<T> {
    check_pair(lat, a, b)?;
    let total = (0..lat.n_cells()).fold(T::zero(), |acc, c| acc + cell_score(a.cell(c), b.cell(c)));
    Ok(network_from_total(total, lat.n_spins()))
}

/// Loop moves of the greedy string search: one elementary loop per star and per
/// plaquette plus every straight direct and dual loop.
pub fn string_moves(lat: &Lattice) -> Vec<LoopPath> {
    let mut moves: Vec<LoopPath> = (0..lat.n_cells())
        .map(|c| lat.elementary_loop(c).expect("valid cell"))
        .collect();
    for dir in [Direction::X, Direction::Y] {
        moves.extend(lat.straight_direct_loops(dir));
        moves.extend(lat.straight_dual_loops(dir));
    }
    moves
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StringSearch<T> {
    pub value: T,
    pub kept_moves: usize,
}

/// Greedy stochastic maximization of `S_n(g[a], b)` over products `g` of `pi/2`
/// loop shifts: `n_g` random moves, each kept iff the similarity does not drop.
pub fn similarity_string<T: Real, R: Rng + ?Sized>(
    lat: &Lattice,
    a: &RbmParams<T>,
    b: &RbmParams<T>,
    n_g: usize,
    rng: &mut R,
) -> Result<StringSearch<T>> {
    check_pair(lat, a, b)?;
    let moves = string_moves(lat);
    let mut work = a.clone();
    let mut scores: Vec<T> = (0..lat.n_cells())
        .map(|c| cell_score(work.cell(c), b.cell(c)))
        .collect();
    let mut total = scores.iter().fold(T::zero(), |s, &v| s + v);
    let mut best = total;
    let mut kept = 0;
    let half_pi = T::FRAC_PI_2();
    let mut touched: Vec<usize> = Vec::with_capacity(16);
    let mut trial: Vec<T> = Vec::with_capacity(16);
    for _ in 0..n_g {
        let mv = &moves[rng.random_range(0..moves.len())];
        for &(cell, bond) in &mv.incidences {
            let k = lat.slot_of(cell, bond)?;
            *work.weight_mut(cell, k) += half_pi;
        }
        touched.clear();
        touched.extend(mv.incidences.iter().map(|&(c, _)| c));
        touched.sort_unstable();
        touched.dedup();
        trial.clear();
        trial.extend(touched.iter().map(|&c| cell_score(work.cell(c), b.cell(c))));
        let delta = touched
            .iter()
            .zip(&trial)
            .fold(T::zero(), |d, (&c, &s)| d + s - scores[c]);
        if delta >= T::zero() {
            for (&c, &s) in touched.iter().zip(&trial) {
                scores[c] = s;
            }
            total += delta;
            best = best.max(total);
            kept += 1;
        } else {
            for &(cell, bond) in &mv.incidences {
                let k = lat.slot_of(cell, bond)?;
                *work.weight_mut(cell, k) -= half_pi;
            }
        }
    }
    Ok(StringSearch {
        value: network_from_total(best, lat.n_spins()),
        kept_moves: kept,
    })
}

/// Squared Euclidean distance of the raw parameter vectors.
pub fn similarity_euclidean<T: Real>(a: &RbmParams<T>, b: &RbmParams<T>) -> Result<T> {
    if a.dims() != b.dims() {
        let (ax, ay) = a.dims();
        let (bx, by) = b.dims();
        return Err(Error::LatticeMismatch(ax, ay, bx, by));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y)))
}

/// Symmetric `m x m` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    m: usize,
    values: Vec<T>,
    pub measure: Measure,
    /// Upper-triangle flags of entries taken from the rescaled overlap (mixed measure only).
    pub replaced: Option<Vec<bool>>,
}

fn tri_index(m: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * m - i * (i + 1) / 2 + j
}

impl<T: Real> SimilarityMatrix<T> {
    /// Fills the upper triangle from `f(i, j)`, `i < j`; the diagonal is 1.
    pub fn from_fn(m: usize, measure: Measure, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = vec![T::one(); m * m];
        for i in 0..m {
            for j in i + 1..m {
                let v = f(i, j);
                values[i * m + j] = v;
                values[j * m + i] = v;
            }
        }
        SimilarityMatrix {
            m,
            values,
            measure,
            replaced: None,
        }
    }

    pub fn try_from_fn(
        m: usize,
        measure: Measure,
        mut f: impl FnMut(usize, usize) -> Result<T>,
    ) -> Result<Self> {
        let mut err = None;
        let out = Self::from_fn(m, measure, |i, j| match f(i, j) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                T::zero()
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.m + j]
    }

    /// Row-major dense values.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn off_diagonal(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.m * (self.m.saturating_sub(1)) / 2);
        for i in 0..self.m {
            for j in i + 1..self.m {
                v.push(self.get(i, j));
            }
        }
        v
    }

    pub fn min_max_off_diagonal(&self) -> Option<(T, T)> {
        let off = self.off_diagonal();
        let first = *off.first()?;
        Some(
            off.iter()
                .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        )
    }

    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let mut out = Self::from_fn(idx.len(), self.measure, |i, j| self.get(idx[i], idx[j]));
        if let Some(r) = &self.replaced {
            let mut flags = vec![false; idx.len() * (idx.len() + 1) / 2];
            for i in 0..idx.len() {
                for j in i..idx.len() {
                    flags[tri_index(idx.len(), i, j)] = r[tri_index(self.m, idx[i], idx[j])];
                }
            }
            out.replaced = Some(flags);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.m {
            let row: Vec<String> = (0..self.m).map(|j| format!("{}", self.get(i, j))).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// JSON header at `<stem>.json` and `m(m+1)/2` little-endian f64 upper-triangle
    /// entries (row-major, diagonal included) at `<stem>.bin`.
    pub fn save(&self, stem: &Path, config: serde_json::Value) -> Result<()> {
        let header = MatrixHeader {
            measure: self.measure,
            m: self.m,
            replaced_count: self
                .replaced
                .as_ref()
                .map(|r| r.iter().filter(|&&b| b).count()),
            config,
        };
        persist::write_json(&stem.with_extension("json"), &header)?;
        let mut bytes = Vec::with_capacity(8 * self.m * (self.m + 1) / 2);
        for i in 0..self.m {
            for j in i..self.m {
                bytes.extend_from_slice(&self.get(i, j).as_f64().to_le_bytes());
            }
        }
        persist::write_atomic(&stem.with_extension("bin"), &bytes)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: MatrixHeader = persist::read_json(&stem.with_extension("json"))?;
        let path = stem.with_extension("bin");
        let bytes = persist::read_bytes(&path)?;
        let m = header.m;
        if bytes.len() != 8 * m * (m + 1) / 2 {
            return Err(Error::format(&path, "length does not match header"));
        }
        let tri: Vec<T> = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let mut values = vec![T::zero(); m * m];
        for i in 0..m {
            for j in i..m {
                let v = tri[tri_index(m, i, j)];
                values[i * m + j] = v;
                values[j * m + i] = v;
            }
        }
        Ok(SimilarityMatrix {
            m,
            values,
            measure: header.measure,
            replaced: None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixHeader {
    measure: Measure,
    m: usize,
    replaced_count: Option<usize>,
    config: serde_json::Value,
}

pub fn network_matrix<T: Real>(
    lat: &Lattice,
    states: &[RbmParams<T>],
) -> Result<SimilarityMatrix<T>> {
    SimilarityMatrix::try_from_fn(states.len(), Measure::N, |i, j| {
        similarity_network(lat, &states[i], &states[j])
    })
}

/// `S_str` for every pair `i < j`, searching over `g[states[i]]` with an
/// independent stream per pair.
pub fn string_matrix<T: Real>(
    lat: &Lattice,
    states: &[RbmParams<T>],
    n_g: usize,
    seed: u64,
) -> Result<SimilarityMatrix<T>> {
    let m = states.len();
    SimilarityMatrix::try_from_fn(m, Measure::Str { n_g }, |i, j| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tri_index(m, i, j) as u64));
        Ok(similarity_string(lat, &states[i], &states[j], n_g, &mut rng)?.value)
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `exp(-d^2 / s^2)` with `s` the median pairwise Euclidean distance (or `scale`).
pub fn euclidean_matrix<T: Real>(
    states: &[RbmParams<T>],
    scale: Option<f64>,
) -> Result<SimilarityMatrix<T>> {
    let d2 = SimilarityMatrix::try_from_fn(states.len(), Measure::Eu, |i, j| {
        similarity_euclidean(&states[i], &states[j])
    })?;
    let s = scale.unwrap_or_else(|| {
        median(
            d2.off_diagonal()
                .iter()
                .map(|v| v.as_f64().sqrt())
                .collect(),
        )
    });
    let s2 = if s > 0.0 { s * s } else { 1.0 };
    Ok(SimilarityMatrix::from_fn(
        states.len(),
        Measure::Eu,
        |i, j| T::lit((-d2.get(i, j).as_f64() / s2).exp()),
    ))
}

/// Replaces each unordered pair of `s_n` with probability `f` by the overlap
/// rescaled onto the range of `s_n`: `(S_q - min S_q)/(max S_q - min S_q) * (max S_n - min S_n) + min S_n`,
/// extrema over all off-diagonal pairs.
pub fn similarity_mixed<T: Real, R: Rng + ?Sized>(
    s_n: &SimilarityMatrix<T>,
    s_q: &SimilarityMatrix<T>,
    f: f64,
    rng: &mut R,
) -> Result<SimilarityMatrix<T>> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidConfig(format!(
            "mixing fraction {f} outside [0, 1]"
        )));
    }
    if s_n.len() != s_q.len() {
        return Err(Error::InvalidConfig(
            "mixed measure needs matrices of equal size".into(),
        ));
    }
    let m = s_n.len();
    let rescale: Box<dyn Fn(T) -> T> =
        match (s_n.min_max_off_diagonal(), s_q.min_max_off_diagonal()) {
            (Some((nlo, nhi)), Some((qlo, qhi))) if qhi > qlo => {
                Box::new(move |q| (q - qlo) / (qhi - qlo) * (nhi - nlo) + nlo)
            }
            _ => {
                warn!("overlap range is degenerate; mixing without rescaling");
                Box::new(|q| q)
            }
        };
    let mut flags = vec![false; m * (m + 1) / 2];
    let mut out = SimilarityMatrix::from_fn(m, Measure::Mixed { f }, |i, j| {
        if rng.random::<f64>() < f {
            flags[tri_index(m, i, j)] = true;
            rescale(s_q.get(i, j))
        } else {
            s_n.get(i, j)
        }
    });
    out.replaced = Some(flags);
    Ok(out)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}
