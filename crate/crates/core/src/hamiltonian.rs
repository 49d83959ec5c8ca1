//! Toric code in a longitudinal field,
//!
//! ```text
//! H = -J_P sum_P prod_{i in P} s^z_i - J_S sum_S prod_{i in S} s^x_i - h sum_i s^z_i
//! ```
//!
//! with `s^z` eigenvalues `+-1`, together with its local estimators and a
//! brute-force enumeration oracle for small lattices.

use crate::error::{Error, Result};
use crate::lattice::{Direction, Lattice, LoopPath};
use crate::rbm::{
    accumulate_flip_deltas, cell_angle, is_zero_factor, CellTables, RbmParams, SpinConfig, SLOTS,
};
use crate::scalar::{pairwise_sum, Real};
use serde::{Deserialize, Serialize};

/// Largest lattice (in spins) the enumeration oracle accepts.
pub const MAX_ENUMERATION_SPINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToricParams<T> {
    pub j_p: T,
    pub j_s: T,
    pub h: T,
}

impl<T: Real> Default for ToricParams<T> {
    fn default() -> Self {
        ToricParams {
            j_p: T::one(),
            j_s: T::one(),
            h: T::zero(),
        }
    }
}

impl<T: Real> ToricParams<T> {
    pub fn with_field(h: T) -> Self {
        ToricParams {
            h,
            ..Default::default()
        }
    }
}

/// A spin configuration with cached cell angles and cosines, for O(1) amplitude ratios.
#[derive(Debug, Clone)]
pub struct Walker<T> {
    config: SpinConfig,
    thetas: Vec<T>,
    scratch: Vec<(usize, T)>,
}

impl<T: Real> Walker<T> {
    /// Fails with [`Error::ZeroAmplitude`] if `psi(config) == 0`.
    pub fn new(lat: &Lattice, params: &RbmParams<T>, config: SpinConfig) -> Result<Self> {
        params.check_lattice(lat)?;
        if config.len() != lat.n_spins() {
            return Err(Error::ConfigLength {
                expected: lat.n_spins(),
                got: config.len(),
            });
        }
        let thetas: Vec<T> = (0..lat.n_cells())
            .map(|c| cell_angle(lat, params, c, &config))
            .collect();
        if thetas.iter().any(|t| is_zero_factor(t.cos())) {
            return Err(Error::ZeroAmplitude);
        }
        Ok(Walker {
            config,
            thetas,
            scratch: Vec::with_capacity(32),
        })
    }

    pub fn config(&self) -> &SpinConfig {
        &self.config
    }

    pub fn thetas(&self) -> &[T] {
        &self.thetas
    }

    /// `psi(sigma') / psi(sigma)` for `sigma'` = current config with `bonds` flipped.
    pub fn ratio(&mut self, lat: &Lattice, params: &RbmParams<T>, bonds: &[usize]) -> T {
        let mut affected = std::mem::take(&mut self.scratch);
        accumulate_flip_deltas(lat, params, &self.config, bonds, &mut affected);
        let mut ratio = T::one();
        for &(cell, delta) in &affected {
            let new = (self.thetas[cell] + delta).cos();
            if is_zero_factor(new) {
                ratio = T::zero();
                break;
            }
            ratio *= new / self.thetas[cell].cos();
        }
        self.scratch = affected;
        ratio
    }

    /// Flips `bonds` and updates the cached angles. The caller ensures the new
    /// amplitude is nonzero.
    pub fn apply(&mut self, lat: &Lattice, params: &RbmParams<T>, bonds: &[usize]) {
        let mut affected = std::mem::take(&mut self.scratch);
        accumulate_flip_deltas(lat, params, &self.config, bonds, &mut affected);
        for &(cell, delta) in &affected {
            self.thetas[cell] += delta;
        }
        for &b in bonds {
            self.config.flip(b);
        }
        self.scratch = affected;
    }

    /// Recomputes cached angles from scratch; used to bound drift in long chains.
    pub fn refresh(&mut self, lat: &Lattice, params: &RbmParams<T>) {
        for (c, t) in self.thetas.iter_mut().enumerate() {
            *t = cell_angle(lat, params, c, &self.config);
        }
    }

    /// `d log psi / d Lambda` at the current configuration.
    pub fn log_derivatives_into(&self, lat: &Lattice, out: &mut [T]) {
        for (cell, theta) in self.thetas.iter().enumerate() {
            crate::rbm::write_cell_derivatives(lat, cell, &self.config, -theta.tan(), out);
        }
    }
}

fn plaquette_sum<T: Real>(lat: &Lattice, config: &SpinConfig) -> T {
    let mut n = 0i64;
    for p in lat.plaquettes() {
        let prod: i8 = lat.cell_bonds(p).iter().map(|&b| config.get(b)).product();
        n += prod as i64;
    }
    T::lit(n as f64)
}

/// `E_loc(sigma) = <sigma|H|Psi> / psi(sigma)`.
pub fn local_energy<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    tp: &ToricParams<T>,
    walker: &mut Walker<T>,
) -> T {
    let diag = -tp.j_p * plaquette_sum::<T>(lat, walker.config())
        - tp.h * T::lit(walker.config().magnetization() as f64);
    if tp.j_s == T::zero() {
        return diag;
    }
    let mut off = T::zero();
    for s in lat.stars() {
        off += walker.ratio(lat, params, lat.cell_bonds(s));
    }
    diag - tp.j_s * off
}

/// Local energy at a bare configuration.
pub fn local_energy_at<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    tp: &ToricParams<T>,
    config: &SpinConfig,
) -> Result<T> {
    let mut w = Walker::new(lat, params, config.clone())?;
    Ok(local_energy(lat, params, tp, &mut w))
}

/// Local estimator of the Wilson loop `prod_{i in loop} s^x_i`: `psi(sigma^loop) / psi(sigma)`.
pub fn wilson_loop_value<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    config: &SpinConfig,
    l: &LoopPath,
) -> Result<T> {
    let mut w = Walker::new(lat, params, config.clone())?;
    Ok(w.ratio(lat, params, &l.bonds))
}

/// Observables with local estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable<T> {
    Energy(ToricParams<T>),
    /// `prod s^x` over the loop's bonds.
    Wilson(LoopPath),
    /// `prod s^z` over the loop's bonds (diagonal).
    ZLoop(LoopPath),
    SzTotal,
    Plaquette(usize),
    Star(usize),
    Constant(T),
}

impl<T: Real> Observable<T> {
    pub fn local_value(&self, lat: &Lattice, params: &RbmParams<T>, walker: &mut Walker<T>) -> T {
        match self {
            Observable::Energy(tp) => local_energy(lat, params, tp, walker),
            Observable::Wilson(l) => walker.ratio(lat, params, &l.bonds),
            Observable::ZLoop(l) => {
                let p: i8 = l.bonds.iter().map(|&b| walker.config().get(b)).product();
                T::lit(p as f64)
            }
            Observable::SzTotal => T::lit(walker.config().magnetization() as f64),
            Observable::Plaquette(p) => {
                let prod: i8 = lat
                    .cell_bonds(*p)
                    .iter()
                    .map(|&b| walker.config().get(b))
                    .product();
                T::lit(prod as f64)
            }
            Observable::Star(s) => walker.ratio(lat, params, lat.cell_bonds(*s)),
            Observable::Constant(c) => *c,
        }
    }
}

fn mask(bonds: &[usize]) -> u64 {
    bonds.iter().fold(0u64, |m, &b| m | (1u64 << b))
}

pub(crate) fn check_budget(lat: &Lattice) -> Result<()> {
    if lat.n_spins() > MAX_ENUMERATION_SPINS {
        return Err(Error::EnumerationBudget {
            n_spins: lat.n_spins(),
            max: MAX_ENUMERATION_SPINS,
        });
    }
    Ok(())
}

/// Full amplitude vector over all `2^N` configurations (bit `j` set = spin `j` down).
pub fn amplitude_vector<T: Real>(lat: &Lattice, params: &RbmParams<T>) -> Result<Vec<T>> {
    params.check_lattice(lat)?;
    check_budget(lat)?;
    let tables = CellTables::new(lat, params);
    Ok((0..1u64 << lat.n_spins())
        .map(|bits| tables.amplitude(bits))
        .collect())
}

/// Exactly enumerated (unnormalized) state; the oracle for all Monte Carlo estimators.
pub struct ExactState<T> {
    n_spins: usize,
    amps: Vec<T>,
    norm: T,
}

impl<T: Real> ExactState<T> {
    pub fn new(lat: &Lattice, params: &RbmParams<T>) -> Result<Self> {
        let amps = amplitude_vector(lat, params)?;
        let sq: Vec<T> = amps.iter().map(|&a| a * a).collect();
        let norm = pairwise_sum(&sq);
        if norm <= T::zero() {
            return Err(Error::ZeroNorm);
        }
        Ok(ExactState {
            n_spins: lat.n_spins(),
            amps,
            norm,
        })
    }

    pub fn amplitudes(&self) -> &[T] {
        &self.amps
    }

    /// `sum_sigma |psi(sigma)|^2` of the unnormalized amplitudes.
    pub fn norm_sq(&self) -> T {
        self.norm
    }

    fn diagonal(&self, f: impl Fn(u64) -> T) -> T {
        let terms: Vec<T> = self
            .amps
            .iter()
            .enumerate()
            .map(|(bits, &a)| {
                if a == T::zero() {
                    T::zero()
                } else {
                    a * a * f(bits as u64)
                }
            })
            .collect();
        pairwise_sum(&terms) / self.norm
    }

    fn off_diagonal(&self, m: u64) -> T {
        let terms: Vec<T> = self
            .amps
            .iter()
            .enumerate()
            .map(|(bits, &a)| {
                if a == T::zero() {
                    T::zero()
                } else {
                    a * self.amps[bits ^ m as usize]
                }
            })
            .collect();
        pairwise_sum(&terms) / self.norm
    }

    pub fn expectation(&self, lat: &Lattice, obs: &Observable<T>) -> T {
        debug_assert_eq!(lat.n_spins(), self.n_spins);
        let parity = |bits: u64, m: u64| {
            if (bits & m).count_ones() % 2 == 0 {
                T::one()
            } else {
                -T::one()
            }
        };
        let n = self.n_spins as i64;
        match obs {
            Observable::Energy(tp) => {
                let plaq_masks: Vec<u64> =
                    lat.plaquettes().map(|p| mask(lat.cell_bonds(p))).collect();
                let diag = self.diagonal(|bits| {
                    let ps: i64 = plaq_masks
                        .iter()
                        .map(|&m| {
                            if (bits & m).count_ones() % 2 == 0 {
                                1
                            } else {
                                -1
                            }
                        })
                        .sum();
                    let mz = n - 2 * bits.count_ones() as i64;
                    -tp.j_p * T::lit(ps as f64) - tp.h * T::lit(mz as f64)
                });
                let stars: T = lat
                    .stars()
                    .map(|s| self.off_diagonal(mask(lat.cell_bonds(s))))
                    .fold(T::zero(), |a, b| a + b);
                diag - tp.j_s * stars
            }
            Observable::Wilson(l) => self.off_diagonal(mask(&l.bonds)),
            Observable::ZLoop(l) => {
                let m = mask(&l.bonds);
                self.diagonal(|bits| parity(bits, m))
            }
            Observable::SzTotal => {
                self.diagonal(|bits| T::lit((n - 2 * bits.count_ones() as i64) as f64))
            }
            Observable::Plaquette(p) => {
                let m = mask(lat.cell_bonds(*p));
                self.diagonal(|bits| parity(bits, m))
            }
            Observable::Star(s) => self.off_diagonal(mask(lat.cell_bonds(*s))),
            Observable::Constant(c) => *c,
        }
    }

    /// Normalized squared overlap `|<self|other>|^2`.
    pub fn overlap(&self, other: &ExactState<T>) -> T {
        let terms: Vec<T> = self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(&a, &b)| a * b)
            .collect();
        let dot = pairwise_sum(&terms);
        (dot * dot / (self.norm * other.norm)).min(T::one())
    }

    /// Energy and its gradient `2 sum_sigma p(sigma) (E_loc - E) D(sigma)` by enumeration.
    /// `D` depends on a configuration only through each cell's local pattern, so
    /// the weights are accumulated per (cell, pattern) first.
    pub fn energy_gradient(
        &self,
        lat: &Lattice,
        params: &RbmParams<T>,
        tp: &ToricParams<T>,
    ) -> Result<(T, Vec<T>)> {
        params.check_lattice(lat)?;
        let n = self.n_spins as i64;
        let plaq_masks: Vec<u64> = lat.plaquettes().map(|p| mask(lat.cell_bonds(p))).collect();
        let star_masks: Vec<u64> = lat.stars().map(|s| mask(lat.cell_bonds(s))).collect();
        let mut e_loc = vec![T::zero(); self.amps.len()];
        let mut terms = vec![T::zero(); self.amps.len()];
        for (bits, &a) in self.amps.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            let bits = bits as u64;
            let ps: i64 = plaq_masks
                .iter()
                .map(|&m| {
                    if (bits & m).count_ones() % 2 == 0 {
                        1
                    } else {
                        -1
                    }
                })
                .sum();
            let mz = n - 2 * bits.count_ones() as i64;
            let off = star_masks
                .iter()
                .fold(T::zero(), |acc, &m| acc + self.amps[(bits ^ m) as usize]);
            let e = -tp.j_p * T::lit(ps as f64) - tp.h * T::lit(mz as f64) - tp.j_s * off / a;
            e_loc[bits as usize] = e;
            terms[bits as usize] = a * a * e;
        }
        let energy = pairwise_sum(&terms) / self.norm;
        let tables = CellTables::new(lat, params);
        let mut acc = vec![[T::zero(); 16]; lat.n_cells()];
        for (bits, (&a, &e)) in self.amps.iter().zip(&e_loc).enumerate() {
            if a == T::zero() {
                continue;
            }
            let w = a * a * (e - energy);
            for (cell, slot) in acc.iter_mut().enumerate() {
                slot[tables.pattern(cell, bits as u64)] += w;
            }
        }
        let two_over_norm = T::lit(2.0) / self.norm;
        let mut grad = vec![T::zero(); params.len()];
        for (cell, slot) in acc.iter().enumerate() {
            let p = params.cell(cell);
            let g = &mut grad[SLOTS * cell..SLOTS * (cell + 1)];
            for (idx, &w) in slot.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let spin = |k: usize| {
                    if (idx >> k) & 1 == 1 {
                        -T::one()
                    } else {
                        T::one()
                    }
                };
                let theta = (0..4).fold(p[0], |t, k| t + p[k + 1] * spin(k));
                let d = -theta.tan() * w * two_over_norm;
                g[0] += d;
                for k in 0..4 {
                    g[k + 1] += d * spin(k);
                }
            }
        }
        Ok((energy, grad))
    }
}

/// Exact normalized expectation by full enumeration (`N <= 20`).
pub fn exact_expectation<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    obs: &Observable<T>,
) -> Result<T> {
    Ok(ExactState::new(lat, params)?.expectation(lat, obs))
}

/// Spatially averaged straight Wilson loops `(W1_bar, W2_bar)`: the mean over the
/// `ly` dual loops winding along x and over the `lx` dual loops winding along y.
/// `estimate` supplies `<W>` for one loop (exactly or by sampling).
pub fn averaged_wilson<T: Real, F>(lat: &Lattice, mut estimate: F) -> Result<(T, T)>
where
    F: FnMut(&LoopPath) -> Result<T>,
{
    let mut avg = |dir| -> Result<T> {
        let loops = lat.straight_dual_loops(dir);
        let mut acc = T::zero();
        for l in &loops {
            acc += estimate(l)?;
        }
        Ok(acc / T::from_usize_lossy(loops.len()))
    };
    let w1 = avg(Direction::X)?;
    let w2 = avg(Direction::Y)?;
    Ok((w1, w2))
}

pub fn averaged_wilson_exact<T: Real>(lat: &Lattice, state: &ExactState<T>) -> Result<(T, T)> {
    averaged_wilson(lat, |l| {
        Ok(state.expectation(lat, &Observable::Wilson(l.clone())))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbm::{polarized_params, random_params, sector_params, toric_ground_state_params};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toric_local_energy_all_up() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let e =
            local_energy_at(&lat, &p, &ToricParams::default(), &SpinConfig::all_up(18)).unwrap();
        assert_relative_eq!(e, -18.0, epsilon = 1e-12);
    }

    #[test]
    fn polarized_local_energy() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = polarized_params::<f64>(&lat);
        let e = local_energy_at(
            &lat,
            &p,
            &ToricParams::with_field(1.0),
            &SpinConfig::all_up(18),
        )
        .unwrap();
        assert_relative_eq!(e, -27.0, epsilon = 1e-12);
    }

    #[test]
    fn null_hamiltonian() {
        let lat = Lattice::new(2, 3).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 4, 0.7).unwrap();
        let tp = ToricParams {
            j_p: 0.0,
            j_s: 0.0,
            h: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = SpinConfig::random(12, &mut rng);
        assert_eq!(local_energy_at(&lat, &p, &tp, &c).unwrap(), 0.0);
    }

    #[test]
    fn zero_amplitude_rejected() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let c = SpinConfig::all_up(18).flipped(&[0]);
        assert!(matches!(
            local_energy_at(&lat, &p, &ToricParams::default(), &c),
            Err(Error::ZeroAmplitude)
        ));
    }

    #[test]
    fn wilson_values() {
        let lat = Lattice::new(3, 3).unwrap();
        let up = SpinConfig::all_up(18);
        let toric = toric_ground_state_params::<f64>(&lat);
        let pol = polarized_params::<f64>(&lat);
        let zero = RbmParams::<f64>::zeros(&lat);
        for dir in [Direction::X, Direction::Y] {
            for l in lat.straight_dual_loops(dir) {
                assert_relative_eq!(
                    wilson_loop_value(&lat, &toric, &up, &l).unwrap(),
                    -1.0,
                    epsilon = 1e-12
                );
                assert_eq!(wilson_loop_value(&lat, &pol, &up, &l).unwrap(), 0.0);
                assert_eq!(wilson_loop_value(&lat, &zero, &up, &l).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn walker_tracks_full_recomputation() {
        let lat = Lattice::new(3, 3).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 21, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = Walker::new(&lat, &p, SpinConfig::random(18, &mut rng)).unwrap();
        for _ in 0..200 {
            let b = rng.random_range(0..18);
            let r = w.ratio(&lat, &p, &[b]);
            if r != 0.0 {
                w.apply(&lat, &p, &[b]);
            }
        }
        let fresh = Walker::new(&lat, &p, w.config().clone()).unwrap();
        for (a, b) in w.thetas().iter().zip(fresh.thetas()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_toric_energy_and_wilson() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let s = ExactState::new(&lat, &p).unwrap();
        assert_relative_eq!(
            s.expectation(&lat, &Observable::Energy(ToricParams::default())),
            -18.0,
            epsilon = 1e-10
        );
        assert_relative_eq!(
            s.expectation(&lat, &Observable::SzTotal),
            0.0,
            epsilon = 1e-10
        );
        let (w1, w2) = averaged_wilson_exact(&lat, &s).unwrap();
        assert_relative_eq!(w1, -1.0, epsilon = 1e-10);
        assert_relative_eq!(w2, -1.0, epsilon = 1e-10);
    }

    #[test]
    fn exact_toric_stabilizers_2x2() {
        let lat = Lattice::new(2, 2).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let s = ExactState::new(&lat, &p).unwrap();
        for c in 0..lat.n_cells() {
            let obs = if c < lat.n_plaquettes() {
                Observable::Plaquette(c)
            } else {
                Observable::Star(c)
            };
            assert_relative_eq!(s.expectation(&lat, &obs), 1.0, epsilon = 1e-12);
        }
        let e = s.expectation(&lat, &Observable::Energy(ToricParams::default()));
        assert_relative_eq!(e, -8.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_polarized() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = polarized_params::<f64>(&lat);
        let s = ExactState::new(&lat, &p).unwrap();
        assert_relative_eq!(
            s.expectation(&lat, &Observable::SzTotal),
            18.0,
            epsilon = 1e-12
        );
        let e = s.expectation(&lat, &Observable::Energy(ToricParams::with_field(1.0)));
        assert_relative_eq!(e, -9.0 - 18.0, epsilon = 1e-12);
        for st in lat.stars() {
            assert_eq!(s.expectation(&lat, &Observable::Star(st)), 0.0);
        }
        assert_eq!(averaged_wilson_exact(&lat, &s).unwrap(), (0.0, 0.0));
        let zero = ExactState::new(&lat, &RbmParams::<f64>::zeros(&lat)).unwrap();
        assert_eq!(averaged_wilson_exact(&lat, &zero).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn sector_states_are_orthogonal_ground_states() {
        let lat = Lattice::new(3, 3).unwrap();
        let mut states = Vec::new();
        for (w1, w2) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let p = sector_params::<f64>(&lat, w1, w2);
            let s = ExactState::new(&lat, &p).unwrap();
            assert_relative_eq!(
                s.expectation(&lat, &Observable::Energy(ToricParams::default())),
                -18.0,
                epsilon = 1e-10
            );
            let (a, b) = averaged_wilson_exact(&lat, &s).unwrap();
            assert_relative_eq!(a, w1 as f64, epsilon = 1e-10);
            assert_relative_eq!(b, w2 as f64, epsilon = 1e-10);
            states.push(s);
        }
        for i in 0..4 {
            for j in 0..4 {
                let o = states[i].overlap(&states[j]);
                if i == j {
                    assert_relative_eq!(o, 1.0, epsilon = 1e-12);
                } else {
                    assert!(o < 1e-20, "{i} {j} {o}");
                }
            }
        }
    }

    #[test]
    fn star_flip_preserves_plaquettes() {
        let lat = Lattice::new(3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let c = SpinConfig::random(18, &mut rng);
            let s = lat.stars().nth(rng.random_range(0..9)).unwrap();
            let f = c.flipped(lat.cell_bonds(s));
            assert_eq!(
                plaquette_sum::<f64>(&lat, &c),
                plaquette_sum::<f64>(&lat, &f)
            );
            for dir in [Direction::X, Direction::Y] {
                for l in lat.straight_direct_loops(dir) {
                    // a star meets every direct loop on an even number of bonds
                    let before: i8 = lat
                        .cell_bonds(s)
                        .iter()
                        .filter(|b| l.bonds.contains(b))
                        .count() as i8
                        % 2;
                    assert_eq!(before, 0);
                }
            }
        }
    }

    #[test]
    fn budget_enforced() {
        let lat = Lattice::new(4, 3).unwrap();
        let p = RbmParams::<f64>::zeros(&lat);
        assert!(matches!(
            ExactState::new(&lat, &p),
            Err(Error::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn single_precision_agrees() {
        let lat = Lattice::new(2, 2).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 2, 0.4).unwrap();
        let e64 = exact_expectation(&lat, &p, &Observable::Energy(ToricParams::default())).unwrap();
        let e32 = exact_expectation(
            &lat,
            &p.cast::<f32>(),
            &Observable::Energy(ToricParams::default()),
        )
        .unwrap();
        assert!((e64 - e32 as f64).abs() < 1e-4);
    }
}
