//! Boltzmann-weighted Markov chains over network parameters at hyper-temperature `T`.
//!
//! Each chain proposes a local change of the weights at one random spin site,
//! estimates the proposal's energy by VMC and accepts with probability
//! `min(1, exp(-(E' - E) / T))`. The incumbent's energy is cached: it is the
//! estimate made when the incumbent was accepted and is never re-sampled.

use crate::error::{Error, Result};
use crate::hamiltonian::ToricParams;
use crate::lattice::Lattice;
use crate::persist;
use crate::rbm::RbmParams;
use crate::scalar::{derive_seed, Real};
use crate::vmc::{estimate_energy, McEstimate, SamplerConfig};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Salt separating sampler streams from proposal streams.
const SAMPLER_STREAM: u64 = 0x5eed_5a3b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub temperature: f64,
    pub k_chains: usize,
    pub n_steps: usize,
    /// Trailing steps kept per chain.
    pub m_keep: usize,
    /// Keep every `thin`-th of the trailing steps.
    #[serde(default = "one")]
    pub thin: usize,
    pub p_m: f64,
    pub xi: f64,
    /// Proposals that fail to produce an energy estimate before the chain aborts.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_retries() -> usize {
    10
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            temperature: 0.1,
            k_chains: 8,
            n_steps: 250,
            m_keep: 250,
            thin: 1,
            p_m: 0.3,
            xi: 0.2,
            max_retries: default_retries(),
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.k_chains == 0 || self.n_steps == 0 || self.thin == 0 {
            return fail("k_chains, n_steps and thin must be positive".into());
        }
        if self.m_keep == 0 || self.m_keep > self.n_steps {
            return fail(format!(
                "m_keep {} must lie in 1..={}",
                self.m_keep, self.n_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.p_m) {
            return fail(format!("p_m {} outside [0, 1]", self.p_m));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return fail(format!("xi must be positive, got {}", self.xi));
        }
        Ok(())
    }

    /// Step indices (0-based, within a chain) whose states are kept.
    pub fn kept_steps(&self) -> impl Iterator<Item = usize> + '_ {
        let first = self.n_steps - self.m_keep;
        (first..self.n_steps).filter(move |s| (s - first) % self.thin == 0)
    }

    pub fn members_per_chain(&self) -> usize {
        self.m_keep.div_ceil(self.thin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalKind {
    SignFlip,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Proposal {
    pub bond: usize,
    pub kind: ProposalKind,
}

/// Picks a random spin site; with probability `p_m` negates the weights at its
/// four incidences, otherwise adds independent `uniform(0, xi)` noise to them.
pub fn propose_params<T: Real, R: Rng + ?Sized>(
    lat: &Lattice,
    params: &RbmParams<T>,
    p_m: f64,
    xi: f64,
    rng: &mut R,
) -> (RbmParams<T>, Proposal) {
    let bond = rng.random_range(0..lat.n_spins());
    let kind = if rng.random::<f64>() < p_m {
        ProposalKind::SignFlip
    } else {
        ProposalKind::Noise
    };
    let mut out = params.clone();
    for &(cell, slot) in lat.bond_cells(bond) {
        let w = out.weight_mut(cell, slot);
        match kind {
            ProposalKind::SignFlip => *w = -*w,
            ProposalKind::Noise => *w += T::lit(rng.random::<f64>() * xi),
        }
    }
    (out, Proposal { bond, kind })
}

/// Boltzmann acceptance with an explicit uniform draw `u` in `[0, 1)`.
pub fn accept_with(e_current: f64, e_proposed: f64, temperature: f64, u: f64) -> bool {
    e_proposed <= e_current || u < (-(e_proposed - e_current) / temperature).exp()
}

pub fn accept_step<R: Rng + ?Sized>(
    e_current: f64,
    e_proposed: f64,
    temperature: f64,
    rng: &mut R,
) -> bool {
    let u = rng.random::<f64>();
    accept_with(e_current, e_proposed, temperature, u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member<T> {
    pub params: RbmParams<T>,
    pub energy: McEstimate<T>,
    pub chain: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub proposals: usize,
    pub accepted: usize,
    /// VMC energy estimates performed (seed plus proposals).
    pub estimates: usize,
    /// Steps that compared against the cached incumbent energy.
    pub cache_hits: usize,
    pub failed_estimates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub lx: usize,
    pub ly: usize,
    pub toric: ToricParams<f64>,
    pub config: EnsembleConfig,
    pub sampler: SamplerConfig,
    pub n_seeds: usize,
    pub stats: Vec<ChainStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub members: Vec<Member<T>>,
    pub meta: EnsembleMeta,
}

fn run_chain<T: Real>(
    lat: &Lattice,
    tp: &ToricParams<T>,
    ec: &EnsembleConfig,
    sc: &SamplerConfig,
    seed: &RbmParams<T>,
    chain: usize,
) -> Result<(Vec<Member<T>>, ChainStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ec.seed, chain as u64));
    let sampler_base = derive_seed(ec.seed ^ SAMPLER_STREAM, chain as u64);
    let mut n_estimates = 0u64;
    let mut estimate = |p: &RbmParams<T>| {
        let s = sc.with_seed(derive_seed(sampler_base, n_estimates));
        n_estimates += 1;
        estimate_energy(lat, p, &s, tp)
    };
    let mut stats = ChainStats::default();
    let mut current = seed.clone();
    let mut energy = estimate(&current).map_err(|e| Error::ChainAborted {
        chain,
        step: 0,
        reason: format!("seed energy: {e}"),
    })?;
    stats.estimates += 1;
    let keep: Vec<usize> = ec.kept_steps().collect();
    let mut members = Vec::with_capacity(keep.len());
    let mut next_keep = keep.iter().peekable();
    for step in 0..ec.n_steps {
        let mut failures = 0;
        let (proposal, e_new) = loop {
            let (p, _) = propose_params(lat, &current, ec.p_m, ec.xi, &mut rng);
            stats.estimates += 1;
            match estimate(&p) {
                Ok(e) if e.mean.as_f64().is_finite() => break (p, e),
                Ok(_) | Err(_) if failures < ec.max_retries => {
                    failures += 1;
                    stats.failed_estimates += 1;
                }
                Ok(e) => {
                    return Err(Error::ChainAborted {
                        chain,
                        step,
                        reason: format!("non-finite energy {:?}", e.mean),
                    });
                }
                Err(e) => {
                    return Err(Error::ChainAborted {
                        chain,
                        step,
                        reason: e.to_string(),
                    })
                }
            }
        };
        stats.proposals += 1;
        stats.cache_hits += 1;
        if accept_step(
            energy.mean.as_f64(),
            e_new.mean.as_f64(),
            ec.temperature,
            &mut rng,
        ) {
            current = proposal;
            energy = e_new;
            stats.accepted += 1;
        }
        if next_keep.peek() == Some(&&step) {
            next_keep.next();
            members.push(Member {
                params: current.clone(),
                energy,
                chain,
                step,
            });
        }
    }
    debug!(
        "chain {chain}: accepted {}/{} proposals, final energy {}",
        stats.accepted, stats.proposals, energy.mean
    );
    Ok((members, stats))
}

/// Runs `ec.k_chains` chains, chain `c` starting from `seeds[c % seeds.len()]`.
/// Members are ordered by (chain, step).
pub fn generate<T: Real>(
    lat: &Lattice,
    tp: &ToricParams<T>,
    ec: &EnsembleConfig,
    sc: &SamplerConfig,
    seeds: &[RbmParams<T>],
) -> Result<Ensemble<T>> {
    ec.validate()?;
    sc.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "ensemble generation needs at least one seed state".into(),
        ));
    }
    for s in seeds {
        s.check_lattice(lat)?;
    }
    let mut members = Vec::with_capacity(ec.k_chains * ec.members_per_chain());
    let mut stats = Vec::with_capacity(ec.k_chains);
    for chain in 0..ec.k_chains {
        let (m, st) = run_chain(lat, tp, ec, sc, &seeds[chain % seeds.len()], chain)?;
        if st.failed_estimates > 0 {
            warn!(
                "chain {chain}: {} proposals needed a retry",
                st.failed_estimates
            );
        }
        members.extend(m);
        stats.push(st);
    }
    let meta = EnsembleMeta {
        lx: lat.lx(),
        ly: lat.ly(),
        toric: ToricParams {
            j_p: tp.j_p.as_f64(),
            j_s: tp.j_s.as_f64(),
            h: tp.h.as_f64(),
        },
        config: ec.clone(),
        sampler: sc.clone(),
        n_seeds: seeds.len(),
        stats,
    };
    Ok(Ensemble { members, meta })
}

const META_FILE: &str = "metadata.json";
const PARAMS_FILE: &str = "members.bin";
const MANIFEST_FILE: &str = "members.csv";

impl<T: Real> Ensemble<T> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::new(self.meta.lx, self.meta.ly)
    }

    pub fn params(&self) -> Vec<RbmParams<T>> {
        self.members.iter().map(|m| m.params.clone()).collect()
    }

    pub fn manifest_csv(&self) -> String {
        let mut s = String::from("member_id,chain_id,step,energy_mean,energy_stderr\n");
        for (i, m) in self.members.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{}",
                m.chain, m.step, m.energy.mean, m.energy.std_error
            );
        }
        s
    }

    /// Writes `metadata.json`, `members.bin` and `members.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let lat = self.lattice()?;
        persist::write_json(&dir.join(META_FILE), &self.meta)?;
        persist::write_params(&dir.join(PARAMS_FILE), &lat, &self.params())?;
        persist::write_atomic(&dir.join(MANIFEST_FILE), self.manifest_csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: EnsembleMeta = persist::read_json(&dir.join(META_FILE))?;
        let (lat, params) = persist::read_params::<T>(&dir.join(PARAMS_FILE))?;
        if (lat.lx(), lat.ly()) != (meta.lx, meta.ly) {
            return Err(Error::LatticeMismatch(lat.lx(), lat.ly(), meta.lx, meta.ly));
        }
        let csv_path = dir.join(MANIFEST_FILE);
        let csv = String::from_utf8(persist::read_bytes(&csv_path)?)
            .map_err(|e| Error::format(&csv_path, e.to_string()))?;
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        if rows.len() != params.len() {
            return Err(Error::format(
                &csv_path,
                "member count differs from parameter file",
            ));
        }
        let mut members = Vec::with_capacity(rows.len());
        for (row, p) in rows.into_iter().zip(params) {
            let f: Vec<&str> = row.split(',').collect();
            let parse_err = || Error::format(&csv_path, format!("malformed row {row:?}"));
            if f.len() != 5 {
                return Err(parse_err());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err());
            let real = |s: &str| s.parse::<f64>().map(T::lit).map_err(|_| parse_err());
            members.push(Member {
                params: p,
                energy: McEstimate {
                    mean: real(f[3])?,
                    std_error: real(f[4])?,
                    n_samples: meta.sampler.n_chains * meta.sampler.samples_per_chain(),
                },
                chain: int(f[1])?,
                step: int(f[2])?,
            });
        }
        Ok(Ensemble { members, meta })
    }
}
