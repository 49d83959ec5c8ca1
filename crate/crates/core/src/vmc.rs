//! Variational Monte Carlo: Metropolis sampling of `|psi|^2`, batch-means
//! estimates, covariance-form energy gradients, Adam optimization and fidelity scans.

use crate::error::{Error, Result};
use crate::hamiltonian::{ExactState, Observable, ToricParams, Walker};
use crate::lattice::{Direction, Lattice, LoopPath};
use crate::rbm::{cell_angle, is_zero_factor, RbmParams, SpinConfig};
use crate::scalar::{derive_seed, pairwise_sum, Real};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const START_RETRIES: usize = 1000;
const BATCHES_PER_CHAIN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Recorded steps per chain, burn-in included.
    pub n_steps: usize,
    pub n_burn: usize,
    pub p_spin_flip: f64,
    /// Metropolis proposals between recorded steps; 0 means one per spin.
    #[serde(default)]
    pub sweep: usize,
    /// Start each chain from a random nonzero-amplitude configuration instead of
    /// all-up. Star and single flips cannot change the winding class of a
    /// zero-amplitude-constrained state, so this spreads chains across classes.
    #[serde(default)]
    pub random_start: bool,
    /// Probability of proposing a flip of a whole straight dual loop, which moves
    /// between winding classes without touching any plaquette.
    #[serde(default)]
    pub p_loop_flip: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_steps: 400,
            n_burn: 100,
            p_spin_flip: 0.3,
            sweep: 0,
            random_start: false,
            p_loop_flip: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::InvalidConfig(
                "sampler needs at least one chain".into(),
            ));
        }
        if self.n_burn >= self.n_steps {
            return Err(Error::InvalidConfig(format!(
                "burn-in {} must be below n_steps {}",
                self.n_burn, self.n_steps
            )));
        }
        if !(self.p_spin_flip > 0.0 && self.p_spin_flip < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p_spin_flip {} outside (0, 1)",
                self.p_spin_flip
            )));
        }
        if !(0.0..1.0).contains(&self.p_loop_flip) {
            return Err(Error::InvalidConfig(format!(
                "p_loop_flip {} outside [0, 1)",
                self.p_loop_flip
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplerConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn samples_per_chain(&self) -> usize {
        self.n_steps - self.n_burn
    }

    fn sweep_len(&self, lat: &Lattice) -> usize {
        if self.sweep == 0 {
            lat.n_spins()
        } else {
            self.sweep
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate<T> {
    pub mean: T,
    pub std_error: T,
    pub n_samples: usize,
}

impl<T: Real> McEstimate<T> {
    /// Mean and standard error of per-chain sample series. The error is the larger
    /// of the batch-means estimate (20 batches per chain) and the spread of the
    /// chain means, so chains trapped in different regions are not mistaken for
    /// independent batches.
    pub fn from_chains(chains: &[Vec<T>]) -> Self {
        let all: Vec<T> = chains.iter().flatten().copied().collect();
        let n = all.len();
        if n == 0 {
            return McEstimate {
                mean: T::zero(),
                std_error: T::zero(),
                n_samples: 0,
            };
        }
        let mean = pairwise_sum(&all) / T::from_usize_lossy(n);
        let mut batch_means = Vec::new();
        let mut chain_means = Vec::new();
        for c in chains.iter().filter(|c| !c.is_empty()) {
            let nb = BATCHES_PER_CHAIN.min(c.len());
            for b in 0..nb {
                let slice = &c[b * c.len() / nb..(b + 1) * c.len() / nb];
                batch_means.push(pairwise_sum(slice) / T::from_usize_lossy(slice.len()));
            }
            chain_means.push(pairwise_sum(c) / T::from_usize_lossy(c.len()));
        }
        let std_error = standard_error(&batch_means, mean).max(standard_error(&chain_means, mean));
        McEstimate {
            mean,
            std_error,
            n_samples: n,
        }
    }

    pub fn exact(value: T) -> Self {
        McEstimate {
            mean: value,
            std_error: T::zero(),
            n_samples: 1,
        }
    }
}

fn standard_error<T: Real>(means: &[T], mean: T) -> T {
    let k = means.len();
    if k < 2 {
        return T::zero();
    }
    let dev: Vec<T> = means.iter().map(|&m| (m - mean) * (m - mean)).collect();
    (pairwise_sum(&dev) / T::from_usize_lossy(k * (k - 1))).sqrt()
}

/// Metropolis acceptance of a proposal with amplitude ratio `ratio` given a
/// uniform draw `u` in `[0, 1)`: accept iff `u < |ratio|^2`.
#[inline]
pub fn metropolis_accept<T: Real>(ratio: T, u: f64) -> bool {
    u < (ratio * ratio).as_f64()
}

fn zero_cells<T: Real>(lat: &Lattice, params: &RbmParams<T>, config: &SpinConfig) -> usize {
    (0..lat.n_cells())
        .filter(|&c| is_zero_factor(cell_angle(lat, params, c, config).cos()))
        .count()
}

/// All-up if possible, else random configurations, else greedy single flips
/// that reduce the number of vanishing cell factors.
pub fn find_start<T: Real, R: Rng + ?Sized>(
    lat: &Lattice,
    params: &RbmParams<T>,
    rng: &mut R,
) -> Result<SpinConfig> {
    let up = SpinConfig::all_up(lat.n_spins());
    if zero_cells(lat, params, &up) == 0 {
        return Ok(up);
    }
    for _ in 0..START_RETRIES {
        let c = SpinConfig::random(lat.n_spins(), rng);
        if zero_cells(lat, params, &c) == 0 {
            return Ok(c);
        }
    }
    let mut c = up;
    let mut zeros = zero_cells(lat, params, &c);
    loop {
        let best = (0..lat.n_spins())
            .map(|b| (zero_cells(lat, params, &c.flipped(&[b])), b))
            .min()
            .filter(|&(z, _)| z < zeros);
        match best {
            Some((0, b)) => return Ok(c.flipped(&[b])),
            Some((z, b)) => {
                c.flip(b);
                zeros = z;
            }
            None => return Err(Error::NoValidStart),
        }
    }
}

fn random_start<T: Real, R: Rng + ?Sized>(
    lat: &Lattice,
    params: &RbmParams<T>,
    rng: &mut R,
) -> Result<SpinConfig> {
    for _ in 0..START_RETRIES {
        let c = SpinConfig::random(lat.n_spins(), rng);
        if zero_cells(lat, params, &c) == 0 {
            return Ok(c);
        }
    }
    find_start(lat, params, rng)
}

/// Runs `sc.n_chains` Metropolis chains and calls `visit(chain, walker)` on every
/// recorded post-burn-in step, in (chain, step) order.
pub fn for_each_sample<T: Real, F>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &mut Walker<T>),
{
    sc.validate()?;
    params.check_lattice(lat)?;
    let sweep = sc.sweep_len(lat);
    let n_stars = lat.n_stars();
    let star0 = lat.n_plaquettes();
    let loops: Vec<LoopPath> = if sc.p_loop_flip > 0.0 {
        [Direction::X, Direction::Y]
            .into_iter()
            .flat_map(|d| lat.straight_dual_loops(d))
            .collect()
    } else {
        Vec::new()
    };
    for chain in 0..sc.n_chains {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, chain as u64));
        let start = if sc.random_start {
            random_start(lat, params, &mut rng)?
        } else {
            find_start(lat, params, &mut rng)?
        };
        let mut walker = Walker::new(lat, params, start)?;
        let mut single = [0usize; 1];
        for step in 0..sc.n_steps {
            for _ in 0..sweep {
                let bonds: &[usize] = if !loops.is_empty() && rng.random::<f64>() < sc.p_loop_flip {
                    &loops[rng.random_range(0..loops.len())].bonds
                } else if rng.random::<f64>() < sc.p_spin_flip {
                    single[0] = rng.random_range(0..lat.n_spins());
                    &single
                } else {
                    lat.cell_bonds(star0 + rng.random_range(0..n_stars))
                };
                let r = walker.ratio(lat, params, bonds);
                if metropolis_accept(r, rng.random::<f64>()) {
                    walker.apply(lat, params, bonds);
                }
            }
            walker.refresh(lat, params);
            if step >= sc.n_burn {
                visit(chain, &mut walker);
            }
        }
    }
    Ok(())
}

/// Post-burn-in configurations, one vector per chain.
pub fn sample_configs<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
) -> Result<Vec<Vec<SpinConfig>>> {
    let mut out = vec![Vec::with_capacity(sc.samples_per_chain()); sc.n_chains];
    for_each_sample(lat, params, sc, |c, w| out[c].push(w.config().clone()))?;
    Ok(out)
}

/// Estimates several observables from one shared sample set.
pub fn estimate_many<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
    observables: &[Observable<T>],
) -> Result<Vec<McEstimate<T>>> {
    let mut series =
        vec![vec![Vec::with_capacity(sc.samples_per_chain()); sc.n_chains]; observables.len()];
    for_each_sample(lat, params, sc, |c, w| {
        for (o, s) in observables.iter().zip(series.iter_mut()) {
            s[c].push(o.local_value(lat, params, w));
        }
    })?;
    Ok(series.iter().map(|s| McEstimate::from_chains(s)).collect())
}

pub fn estimate<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
    obs: &Observable<T>,
) -> Result<McEstimate<T>> {
    Ok(estimate_many(lat, params, sc, std::slice::from_ref(obs))?.remove(0))
}

pub fn estimate_energy<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
    tp: &ToricParams<T>,
) -> Result<McEstimate<T>> {
    estimate(lat, params, sc, &Observable::Energy(*tp))
}

/// Sampled spatially averaged Wilson loops `(W1_bar, W2_bar)`.
pub fn averaged_wilson_sampled<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
) -> Result<(McEstimate<T>, McEstimate<T>)> {
    let mut obs = Vec::new();
    let x = lat.straight_dual_loops(crate::lattice::Direction::X);
    let y = lat.straight_dual_loops(crate::lattice::Direction::Y);
    let nx = x.len();
    let ny = y.len();
    let avg = |loops: Vec<LoopPath>| -> Vec<Observable<T>> {
        loops.into_iter().map(Observable::Wilson).collect()
    };
    obs.extend(avg(x));
    obs.extend(avg(y));
    let mut series = vec![vec![Vec::new(); sc.n_chains]; 2];
    for_each_sample(lat, params, sc, |c, w| {
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for (i, o) in obs.iter().enumerate() {
            let v = o.local_value(lat, params, w);
            if i < nx {
                s1 += v;
            } else {
                s2 += v;
            }
        }
        series[0][c].push(s1 / T::from_usize_lossy(nx));
        series[1][c].push(s2 / T::from_usize_lossy(ny));
    })?;
    Ok((
        McEstimate::from_chains(&series[0]),
        McEstimate::from_chains(&series[1]),
    ))
}

#[derive(Debug, Clone)]
pub struct Gradient<T> {
    pub values: Vec<T>,
    pub std_errors: Vec<T>,
    pub energy: McEstimate<T>,
}

impl<T: Real> Gradient<T> {
    pub fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &g| a + g * g).sqrt()
    }
}

/// `dE/dLambda_i = 2 (<E_loc D_i> - <E_loc><D_i>)` from one sample set.
pub fn energy_gradient<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    sc: &SamplerConfig,
    tp: &ToricParams<T>,
) -> Result<Gradient<T>> {
    let np = params.len();
    let mut energies: Vec<Vec<T>> = vec![Vec::new(); sc.n_chains];
    let mut derivs: Vec<Vec<Vec<T>>> = vec![Vec::new(); sc.n_chains];
    let mut buf = vec![T::zero(); np];
    for_each_sample(lat, params, sc, |c, w| {
        energies[c].push(crate::hamiltonian::local_energy(lat, params, tp, w));
        w.log_derivatives_into(lat, &mut buf);
        derivs[c].push(buf.clone());
    })?;
    let energy = McEstimate::from_chains(&energies);
    let n = T::from_usize_lossy(energy.n_samples);
    let mut values = Vec::with_capacity(np);
    let mut std_errors = Vec::with_capacity(np);
    let two = T::lit(2.0);
    for i in 0..np {
        let d_all: Vec<T> = derivs.iter().flatten().map(|d| d[i]).collect();
        let d_mean = pairwise_sum(&d_all) / n;
        let per_chain: Vec<Vec<T>> = energies
            .iter()
            .zip(&derivs)
            .map(|(es, ds)| {
                es.iter()
                    .zip(ds)
                    .map(|(&e, d)| two * (e - energy.mean) * (d[i] - d_mean))
                    .collect()
            })
            .collect();
        let est = McEstimate::from_chains(&per_chain);
        values.push(est.mean);
        std_errors.push(est.std_error);
    }
    Ok(Gradient {
        values,
        std_errors,
        energy,
    })
}

/// Enumerated counterpart of [`energy_gradient`] (`N <= 20`); standard errors are zero.
pub fn exact_energy_gradient<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    tp: &ToricParams<T>,
) -> Result<Gradient<T>> {
    let (e, values) = ExactState::new(lat, params)?.energy_gradient(lat, params, tp)?;
    let std_errors = vec![T::zero(); values.len()];
    Ok(Gradient {
        values,
        std_errors,
        energy: McEstimate::exact(e),
    })
}

/// Where the optimizer takes its gradients from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    #[default]
    Sampled,
    /// Full enumeration; only for lattices within the enumeration budget.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub n_iterations: usize,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Abort once `|E| > divergence_factor * max(|E_0|, 1)`.
    pub divergence_factor: f64,
    #[serde(default)]
    pub gradient: GradientSource,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_iterations: 500,
            plateau_window: 50,
            plateau_tol: 1e-4,
            divergence_factor: 10.0,
            gradient: GradientSource::Sampled,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0)
            || !in_unit(self.beta1)
            || !in_unit(self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig(
                "optimizer needs learning_rate > 0, betas in (0, 1), epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult<T> {
    pub params: RbmParams<T>,
    pub trace: Vec<McEstimate<T>>,
    pub converged: bool,
}

impl<T: Real> OptimizeResult<T> {
    pub fn final_energy(&self) -> McEstimate<T> {
        *self.trace.last().expect("trace is never empty")
    }
}

fn plateaued<T: Real>(trace: &[McEstimate<T>], window: usize, tol: f64) -> bool {
    if window == 0 || trace.len() < 2 * window {
        return false;
    }
    let mean =
        |s: &[McEstimate<T>]| s.iter().map(|e| e.mean.as_f64()).sum::<f64>() / s.len() as f64;
    let n = trace.len();
    let last = mean(&trace[n - window..]);
    let prev = mean(&trace[n - 2 * window..n - window]);
    (last - prev).abs() <= tol * last.abs().max(1.0)
}

/// Adam descent on the sampled (or enumerated) energy. Iteration `t` samples with seed
/// `derive_seed(sc.seed, t)`; the trace records the energy at each iterate.
pub fn optimize<T: Real>(
    lat: &Lattice,
    init: &RbmParams<T>,
    tp: &ToricParams<T>,
    sc: &SamplerConfig,
    oc: &OptimizerConfig,
) -> Result<OptimizeResult<T>> {
    oc.validate()?;
    let mut params = init.clone();
    let np = params.len();
    let mut m = vec![0.0f64; np];
    let mut v = vec![0.0f64; np];
    let mut trace = Vec::with_capacity(oc.n_iterations + 1);
    let mut initial = None;
    let mut converged = false;
    for t in 0..oc.n_iterations.max(1) {
        let grad = match oc.gradient {
            GradientSource::Sampled => energy_gradient(
                lat,
                &params,
                &sc.with_seed(derive_seed(sc.seed, t as u64)),
                tp,
            )?,
            GradientSource::Exact => exact_energy_gradient(lat, &params, tp)?,
        };
        let e = grad.energy.mean.as_f64();
        let e0 = *initial.get_or_insert(e);
        if !e.is_finite() || e.abs() > oc.divergence_factor * e0.abs().max(1.0) {
            return Err(Error::Diverged {
                iteration: t,
                energy: e,
                initial: e0,
            });
        }
        trace.push(grad.energy);
        if plateaued(&trace, oc.plateau_window, oc.plateau_tol) {
            converged = true;
            debug!("plateau reached at iteration {t}, energy {e}");
            break;
        }
        if t + 1 == oc.n_iterations {
            break;
        }
        let step = (t + 1) as i32;
        let c1 = 1.0 - oc.beta1.powi(step);
        let c2 = 1.0 - oc.beta2.powi(step);
        for (i, g) in grad.values.iter().enumerate() {
            let g = g.as_f64();
            m[i] = oc.beta1 * m[i] + (1.0 - oc.beta1) * g;
            v[i] = oc.beta2 * v[i] + (1.0 - oc.beta2) * g * g;
            let update = oc.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + oc.epsilon);
            params.values_mut()[i] -= T::lit(update);
        }
    }
    Ok(OptimizeResult {
        params,
        trace,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct FidelityPoint<T> {
    pub h: T,
    /// `|<psi(h)|psi(h_next)>|^2`; `None` at the last grid point.
    pub fidelity: Option<T>,
    pub energy: McEstimate<T>,
    pub params: RbmParams<T>,
}

/// Warm-started optimization along an increasing field grid with exact
/// fidelities between consecutive optimized states (`N <= 20`). A repeated
/// field value reuses the previous state.
pub fn fidelity_scan<T: Real>(
    lat: &Lattice,
    h_grid: &[T],
    init: &RbmParams<T>,
    base: &ToricParams<T>,
    sc: &SamplerConfig,
    oc: &OptimizerConfig,
) -> Result<Vec<FidelityPoint<T>>> {
    if h_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig(
            "field grid must be non-decreasing".into(),
        ));
    }
    let mut points: Vec<FidelityPoint<T>> = Vec::with_capacity(h_grid.len());
    let mut states: Vec<ExactState<T>> = Vec::with_capacity(h_grid.len());
    let mut current = init.clone();
    for (i, &h) in h_grid.iter().enumerate() {
        let reuse = i > 0 && h == h_grid[i - 1];
        let (params, energy) = if reuse {
            (points[i - 1].params.clone(), points[i - 1].energy)
        } else {
            let tp = ToricParams { h, ..*base };
            let res = optimize(
                lat,
                &current,
                &tp,
                &sc.with_seed(derive_seed(sc.seed, 1000 + i as u64)),
                oc,
            )?;
            if !res.converged {
                warn!("optimization at h = {h} stopped without reaching a plateau");
            }
            let e = res.final_energy();
            (res.params, e)
        };
        current = params.clone();
        states.push(ExactState::new(lat, &params)?);
        if i > 0 {
            let f = if reuse {
                T::one()
            } else {
                states[i - 1].overlap(&states[i])
            };
            points[i - 1].fidelity = Some(f);
        }
        points.push(FidelityPoint {
            h,
            fidelity: None,
            energy,
            params,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbm::{polarized_params, random_params, toric_ground_state_params};
    use approx::assert_relative_eq;

    fn small() -> SamplerConfig {
        SamplerConfig {
            n_chains: 2,
            n_steps: 200,
            n_burn: 50,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig {
            n_chains: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            n_burn: 400,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            p_spin_flip: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn uniform_state_magnetization() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = RbmParams::<f64>::zeros(&lat);
        let e = estimate(&lat, &p, &small(), &Observable::SzTotal).unwrap();
        assert!(e.mean.abs() < 4.0 * e.std_error.max(1e-3), "{e:?}");
    }

    #[test]
    fn toric_samples_respect_plaquettes() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let chains = sample_configs(&lat, &p, &small()).unwrap();
        for c in chains.iter().flatten() {
            for pl in lat.plaquettes() {
                let prod: i8 = lat.cell_bonds(pl).iter().map(|&b| c.get(b)).product();
                assert_eq!(prod, 1);
            }
        }
    }

    #[test]
    fn polarized_samples_all_up() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = polarized_params::<f64>(&lat);
        let chains = sample_configs(&lat, &p, &small()).unwrap();
        assert!(chains.iter().flatten().all(|c| c.magnetization() == 18));
    }

    #[test]
    fn eigenstate_energy_has_no_variance() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let e = estimate_energy(&lat, &p, &small(), &ToricParams::default()).unwrap();
        assert_relative_eq!(e.mean, -18.0, epsilon = 1e-10);
        assert!(e.std_error < 1e-10);
        let one = estimate(&lat, &p, &small(), &Observable::Constant(1.0)).unwrap();
        assert_eq!((one.mean, one.std_error), (1.0, 0.0));
    }

    #[test]
    fn toric_wilson_sampled() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let (w1, w2) = averaged_wilson_sampled(&lat, &p, &small()).unwrap();
        assert!((w1.mean + 1.0).abs() < 0.01 && (w2.mean + 1.0).abs() < 0.01);
    }

    #[test]
    fn eigenstate_gradient_vanishes() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let g = energy_gradient(&lat, &p, &small(), &ToricParams::default()).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn zero_params_zero_gradient() {
        let lat = Lattice::new(2, 2).unwrap();
        let p = RbmParams::<f64>::zeros(&lat);
        let g = energy_gradient(&lat, &p, &small(), &ToricParams::default()).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_reproducible() {
        let lat = Lattice::new(2, 3).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 8, 0.5).unwrap();
        let a = sample_configs(&lat, &p, &small()).unwrap();
        let b = sample_configs(&lat, &p, &small()).unwrap();
        assert_eq!(a, b);
        let c = sample_configs(&lat, &p, &small().with_seed(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn metropolis_rule() {
        assert!(metropolis_accept(2.0f64, 0.999));
        assert!(!metropolis_accept(0.0f64, 0.0));
        assert!(metropolis_accept(0.5f64, 0.2));
        assert!(!metropolis_accept(0.5f64, 0.3));
        assert!(metropolis_accept(-0.5f64, 0.2));
    }

    #[test]
    fn start_search() {
        let lat = Lattice::new(3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // two plaquettes demand odd parity: satisfiable, but not by all-up
        let mut p = toric_ground_state_params::<f64>(&lat);
        for c in [0, 4] {
            *p.bias_mut(c) = std::f64::consts::FRAC_PI_2;
        }
        let c = find_start(&lat, &p, &mut rng).unwrap();
        assert!(Walker::new(&lat, &p, c).is_ok());
        // all nine odd contradicts prod_P prod_{i in P} s_i = 1
        for c in lat.plaquettes() {
            *p.bias_mut(c) = std::f64::consts::FRAC_PI_2;
        }
        assert!(matches!(
            find_start(&lat, &p, &mut rng),
            Err(Error::NoValidStart)
        ));
    }

    #[test]
    fn batch_means_constant_series() {
        let e = McEstimate::from_chains(&[vec![2.5f64; 40], vec![2.5; 40]]);
        assert_eq!((e.mean, e.std_error, e.n_samples), (2.5, 0.0, 80));
    }

    #[test]
    fn exact_init_stays_at_ground_energy() {
        let lat = Lattice::new(3, 3).unwrap();
        let p = toric_ground_state_params::<f64>(&lat);
        let oc = OptimizerConfig {
            n_iterations: 5,
            ..Default::default()
        };
        let r = optimize(&lat, &p, &ToricParams::default(), &small(), &oc).unwrap();
        for e in &r.trace {
            assert_relative_eq!(e.mean, -18.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_step_fidelity_is_one() {
        let lat = Lattice::new(2, 2).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 3, 0.3).unwrap();
        let oc = OptimizerConfig {
            n_iterations: 3,
            ..Default::default()
        };
        let pts = fidelity_scan(
            &lat,
            &[0.1, 0.1],
            &p,
            &ToricParams::default(),
            &small(),
            &oc,
        )
        .unwrap();
        assert_eq!(pts[0].fidelity, Some(1.0));
        assert_eq!(pts[1].fidelity, None);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let lat = Lattice::new(2, 2).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 11, 0.8).unwrap();
        let tp = ToricParams::with_field(0.4);
        let g = exact_energy_gradient(&lat, &p, &tp).unwrap();
        let energy = |q: &RbmParams<f64>| {
            ExactState::new(&lat, q)
                .unwrap()
                .expectation(&lat, &Observable::Energy(tp))
        };
        assert_relative_eq!(g.energy.mean, energy(&p), epsilon = 1e-12);
        let h = 1e-5;
        for i in 0..p.len() {
            let (mut up, mut down) = (p.clone(), p.clone());
            up.values_mut()[i] += h;
            down.values_mut()[i] -= h;
            let fd = (energy(&up) - energy(&down)) / (2.0 * h);
            assert!(
                (g.values[i] - fd).abs() < 1e-6,
                "component {i}: {} vs {fd}",
                g.values[i]
            );
        }
    }

    #[test]
    fn exact_descent_lowers_energy() {
        let lat = Lattice::new(2, 2).unwrap();
        let p: RbmParams<f64> = random_params(&lat, 5, 0.3).unwrap();
        let oc = OptimizerConfig {
            n_iterations: 100,
            gradient: GradientSource::Exact,
            ..Default::default()
        };
        let r = optimize(&lat, &p, &ToricParams::with_field(0.3), &small(), &oc).unwrap();
        let trace: Vec<f64> = r.trace.iter().map(|e| e.mean).collect();
        assert!(trace.last().unwrap() < &(trace[0] - 0.1));
        assert!(r.trace.iter().all(|e| e.std_error == 0.0));
    }
}
