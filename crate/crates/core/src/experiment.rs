//! End-to-end experiment runs: configuration files, staged execution with
//! on-disk caching, and CSV emitters.
//!
//! A run directory holds one artifact set per stage
//! (`seeds -> ensemble -> observables -> similarity -> diffmap`). Each stage
//! records a key derived from the configuration sections it depends on in
//! `stages.json`; a rerun reuses a stage whose key matches and whose files
//! are all present. `manifest.json` lists every emitted file with its SHA-256.

use crate::diffmap::{
    diffusion_map, epsilon_sweep, kmeans_embed, label_agreement, log_grid, ClusterAssignment,
    KMeansConfig, SweepConfig, SweepResult,
};
use crate::ensemble::{generate, Ensemble, EnsembleConfig};
use crate::error::{Error, Result};
use crate::hamiltonian::{averaged_wilson_exact, ExactState, ToricParams, MAX_ENUMERATION_SPINS};
use crate::lattice::Lattice;
use crate::persist::{self, read_json, sha256_file, sha256_hex, write_atomic, write_json};
use crate::rbm::{perturb, sector_params, toric_ground_state_params, RbmParams};
use crate::scalar::derive_seed;
use crate::similarity::{
    euclidean_matrix, network_matrix, overlap_matrix, similarity_mixed, string_matrix, Measure,
    SimilarityMatrix,
};
use crate::vmc::{
    averaged_wilson_sampled, fidelity_scan, optimize, GradientSource, OptimizerConfig,
    SamplerConfig,
};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub const SCHEMA_VERSION: u32 = 1;

/// Sector templates cycled over by the seed initializations.
const SECTOR_TEMPLATES: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];
/// Eigenvalues written per row of the sweep table.
const SPECTRUM_COLUMNS: usize = 20;
/// Eigenvalues reported at the fixed bandwidth.
const FIXED_COLUMNS: usize = 10;
const EMBEDDING_DIMS: usize = 3;

// Stream tags for seeds derived from the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_OPT: u64 = 2;
const STREAM_ENSEMBLE: u64 = 3;
const STREAM_SIMILARITY: u64 = 4;
const STREAM_KMEANS: u64 = 5;
const STREAM_WILSON: u64 = 6;
const STREAM_FIDELITY: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub lx: usize,
    pub ly: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub j_p: f64,
    pub j_s: f64,
    /// Field for single runs.
    pub h: f64,
    /// Field values visited by `run_field_sweep`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub h_grid: Vec<f64>,
}

impl HamiltonianConfig {
    fn toric(&self, h: f64) -> ToricParams<f64> {
        ToricParams {
            j_p: self.j_p,
            j_s: self.j_s,
            h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    /// Optimized initializations; initialization `i` starts near sector
    /// template `i % 4`.
    pub n_inits: usize,
    /// Uniform noise amplitude added to each template.
    pub init_noise: f64,
    /// Field increment of the warm-start ramp towards a finite field; 0 optimizes
    /// directly at the target.
    pub warm_start_step: f64,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl EpsilonGrid {
    pub fn values(&self) -> Vec<f64> {
        log_grid(self.min, self.max, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffmapConfig {
    pub epsilon: EpsilonGrid,
    /// Bandwidth of the fixed-epsilon spectrum table, and of the embedding when
    /// no sector range is detected.
    pub fixed_epsilon: f64,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Number of clusters; 0 uses the detected sector count.
    pub k: usize,
    pub kmeans: KMeansConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelityConfig {
    pub h_step: f64,
    pub h_max: f64,
    /// Scan optimizer; the seed optimizer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
}

impl FidelityConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = (self.h_max / self.h_step).round() as usize;
        (0..=n).map(|i| i as f64 * self.h_step).collect()
    }
}

/// A complete experiment description. Seed fields inside the sampler and
/// ensemble sections are ignored: every stream derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub lattice: LatticeConfig,
    pub hamiltonian: HamiltonianConfig,
    pub seeds: SeedConfig,
    pub ensemble: EnsembleConfig,
    pub ensemble_sampler: SamplerConfig,
    pub measure: Measure,
    pub diffmap: DiffmapConfig,
    pub clusters: ClusterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: "toric-h0-t0.1-n".into(),
            seed: 1,
            output_dir: PathBuf::from("runs/toric-h0-t0.1-n"),
            lattice: LatticeConfig { lx: 3, ly: 3 },
            hamiltonian: HamiltonianConfig {
                j_p: 1.0,
                j_s: 1.0,
                h: 0.0,
                h_grid: Vec::new(),
            },
            seeds: SeedConfig {
                n_inits: 4,
                init_noise: 0.05,
                warm_start_step: 0.1,
                optimizer: OptimizerConfig {
                    learning_rate: 0.005,
                    ..Default::default()
                },
                sampler: SamplerConfig {
                    n_chains: 4,
                    n_steps: 500,
                    n_burn: 50,
                    ..Default::default()
                },
            },
            ensemble: EnsembleConfig {
                k_chains: 8,
                thin: 4,
                ..Default::default()
            },
            ensemble_sampler: SamplerConfig {
                n_chains: 2,
                n_steps: 300,
                n_burn: 50,
                ..Default::default()
            },
            measure: Measure::N,
            diffmap: DiffmapConfig {
                epsilon: EpsilonGrid {
                    min: 1e-3,
                    max: 1.0,
                    points: 30,
                },
                fixed_epsilon: 0.05,
                sweep: SweepConfig::default(),
            },
            clusters: ClusterConfig {
                k: 0,
                kmeans: KMeansConfig::default(),
            },
            fidelity: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml_string()?.as_bytes())
    }

    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::new(self.lattice.lx, self.lattice.ly)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let lat = self.lattice()?;
        let hc = &self.hamiltonian;
        if ![hc.j_p, hc.j_s, hc.h].iter().all(|v| v.is_finite()) || hc.h < 0.0 {
            return fail("couplings must be finite and the field non-negative".into());
        }
        if hc.h_grid.iter().any(|h| !(h.is_finite() && *h >= 0.0))
            || hc.h_grid.windows(2).any(|w| w[1] <= w[0])
        {
            return fail("h_grid must be non-negative and strictly increasing".into());
        }
        let s = &self.seeds;
        if s.n_inits == 0 || !(s.init_noise >= 0.0) || !(s.warm_start_step >= 0.0) {
            return fail(
                "seeds need n_inits > 0 and non-negative init_noise and warm_start_step".into(),
            );
        }
        s.optimizer.validate()?;
        s.sampler.validate()?;
        self.ensemble.validate()?;
        self.ensemble_sampler.validate()?;
        let g = &self.diffmap.epsilon;
        if g.points == 0 {
            return fail("epsilon grid is empty".into());
        }
        if !(g.min > 0.0 && g.max >= g.min && g.max.is_finite()) || (g.points > 1 && g.max == g.min)
        {
            return fail(format!(
                "epsilon grid [{}, {}] must be positive and increasing",
                g.min, g.max
            ));
        }
        if !(self.diffmap.fixed_epsilon > 0.0) {
            return fail("fixed_epsilon must be positive".into());
        }
        match self.measure {
            Measure::Mixed { f } if !(0.0..=1.0).contains(&f) => {
                return fail(format!("mixing fraction {f} outside [0, 1]"))
            }
            Measure::Str { n_g: 0 } => return fail("string measure needs n_g > 0".into()),
            _ => {}
        }
        if matches!(self.measure, Measure::Q | Measure::Mixed { .. })
            && lat.n_spins() > MAX_ENUMERATION_SPINS
        {
            return fail(format!(
                "exact overlaps need at most {MAX_ENUMERATION_SPINS} spins"
            ));
        }
        let exact_seeds = self.seeds.optimizer.gradient == GradientSource::Exact;
        if exact_seeds && lat.n_spins() > MAX_ENUMERATION_SPINS {
            return fail(format!(
                "exact seed gradients need at most {MAX_ENUMERATION_SPINS} spins"
            ));
        }
        if let Some(f) = &self.fidelity {
            if !(f.h_step > 0.0 && f.h_max > 0.0 && f.h_max.is_finite()) {
                return fail("fidelity scan needs positive h_step and h_max".into());
            }
            if lat.n_spins() > MAX_ENUMERATION_SPINS {
                return fail(format!(
                    "fidelity scans need at most {MAX_ENUMERATION_SPINS} spins"
                ));
            }
            if let Some(o) = &f.optimizer {
                o.validate()?;
            }
        }
        Ok(())
    }

    /// Digest of the configuration without its output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// The five reference experiments on the 3x3 torus.
pub fn default_suite() -> Vec<ExperimentConfig> {
    let base = ExperimentConfig::default();
    let named = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.name = name.into();
        c.output_dir = PathBuf::from(format!("runs/{name}"));
        f(&mut c);
        c
    };
    vec![
        named("toric-h0-t0.1-n", &|_| {}),
        named("toric-h0-t0.1-q", &|c| c.measure = Measure::Q),
        named("toric-h0-t1-n", &|c| c.ensemble.temperature = 1.0),
        named("field-sweep-t0.3-q", &|c| {
            c.ensemble.temperature = 0.3;
            c.measure = Measure::Q;
            c.seeds.optimizer.gradient = GradientSource::Exact;
            c.hamiltonian.h_grid = vec![0.475, 0.55, 0.575, 0.6, 0.7];
            c.fidelity = Some(FidelityConfig {
                h_step: 0.025,
                h_max: 1.0,
                optimizer: Some(OptimizerConfig {
                    learning_rate: 0.01,
                    n_iterations: 300,
                    plateau_tol: 1e-6,
                    gradient: GradientSource::Exact,
                    ..Default::default()
                }),
            });
        }),
        named("field-sweep-t0.3-mixed", &|c| {
            c.ensemble.temperature = 0.3;
            c.measure = Measure::Mixed { f: 0.4 };
            c.seeds.optimizer.gradient = GradientSource::Exact;
            c.hamiltonian.h_grid = vec![0.475, 0.55, 0.7];
        }),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Seeds,
    Ensemble,
    Observables,
    Similarity,
    Diffmap,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Seeds,
        Stage::Ensemble,
        Stage::Observables,
        Stage::Similarity,
        Stage::Diffmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Seeds => "seeds",
            Stage::Ensemble => "ensemble",
            Stage::Observables => "observables",
            Stage::Similarity => "similarity",
            Stage::Diffmap => "diffmap",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

/// Which cached stages to recompute. Forcing a stage also recomputes every
/// stage downstream of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Force {
    #[default]
    None,
    All,
    From(Stage),
}

impl Force {
    fn covers(self, stage: Stage) -> bool {
        match self {
            Force::None => false,
            Force::All => true,
            Force::From(s) => stage >= s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Cached,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Stage name, prefixed by the sweep point for field sweeps.
    pub stage: String,
    #[serde(flatten)]
    pub status: StageStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub h: f64,
    pub n_members: usize,
    pub sector_count: usize,
    pub sector_epsilon_range: Option<(f64, f64)>,
    pub embedding_epsilon: f64,
    pub k: usize,
    /// Agreement of the cluster labels with Wilson-sign labels, maximized over
    /// label permutations.
    pub label_agreement: Option<f64>,
    pub fixed_epsilon: f64,
    pub fixed_degeneracy: usize,
    pub fixed_gap: f64,
    pub seed_labels: Vec<(i8, i8)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub h: f64,
    pub dir: String,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMinimum {
    pub h: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub crate_version: String,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
    pub warnings: Vec<String>,
    pub summary: Option<RunSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub field_points: Vec<FieldPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity_minimum: Option<FidelityMinimum>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            stages: Vec::new(),
            artifacts: Vec::new(),
            warnings: Vec::new(),
            summary: None,
            field_points: Vec::new(),
            fidelity_minimum: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    /// Artifact digests keyed by path; equal across reruns with the same config.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }
}

const MANIFEST_FILE: &str = "manifest.json";
const STAGES_FILE: &str = "stages.json";
const CONFIG_FILE: &str = "config.toml";
const SEEDS_BIN: &str = "seeds.bin";
const SEEDS_JSON: &str = "seeds.json";
const ENSEMBLE_DIR: &str = "ensemble";
const WILSON_JSON: &str = "wilson.json";
const SIMILARITY_STEM: &str = "similarity";
const DIFFMAP_JSON: &str = "diffmap.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub h: f64,
    pub init: usize,
    pub template: (i8, i8),
    pub energy: f64,
    pub energy_stderr: f64,
    pub w1_bar: f64,
    pub w2_bar: f64,
    pub converged: bool,
    /// `(mean, std_error)` per optimizer iteration.
    pub trace: Vec<(f64, f64)>,
}

impl SeedRecord {
    pub fn label(&self) -> (i8, i8) {
        (sign(self.w1_bar), sign(self.w2_bar))
    }
}

fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// Optimized seeds at each target field, `records[t * n_inits + i]`.
#[derive(Debug, Clone)]
pub struct SeedSet {
    pub targets: Vec<f64>,
    pub records: Vec<SeedRecord>,
    pub params: Vec<RbmParams<f64>>,
}

impl SeedSet {
    fn at(&self, target: usize) -> (&[SeedRecord], &[RbmParams<f64>]) {
        let n = self.records.len() / self.targets.len();
        (
            &self.records[target * n..(target + 1) * n],
            &self.params[target * n..(target + 1) * n],
        )
    }

    fn save(&self, dir: &Path, lat: &Lattice) -> Result<()> {
        persist::write_params(&dir.join(SEEDS_BIN), lat, &self.params)?;
        write_json(&dir.join(SEEDS_JSON), &(&self.targets, &self.records))
    }

    fn load(dir: &Path) -> Result<Self> {
        let (_, params) = persist::read_params::<f64>(&dir.join(SEEDS_BIN))?;
        let (targets, records): (Vec<f64>, Vec<SeedRecord>) = read_json(&dir.join(SEEDS_JSON))?;
        if records.len() != params.len() || targets.is_empty() || records.len() % targets.len() != 0
        {
            return Err(Error::format(
                dir.join(SEEDS_JSON),
                "seed records do not match the parameter file",
            ));
        }
        Ok(SeedSet {
            targets,
            records,
            params,
        })
    }
}

/// Wilson averages by enumeration when affordable, else by sampling.
fn wilson_pair(lat: &Lattice, p: &RbmParams<f64>, sc: &SamplerConfig) -> Result<(f64, f64)> {
    if lat.n_spins() <= MAX_ENUMERATION_SPINS {
        averaged_wilson_exact(lat, &ExactState::new(lat, p)?)
    } else {
        let (a, b) = averaged_wilson_sampled(lat, p, sc)?;
        Ok((a.mean, b.mean))
    }
}

/// Field values visited on the way to `targets`: ramp points spaced by `step`
/// below the first target, then the targets. Returns the path and the
/// position of each target in it.
fn warm_start_path(targets: &[f64], step: f64) -> (Vec<f64>, Vec<usize>) {
    let mut path = vec![0.0];
    if step > 0.0 {
        let mut h = step;
        while h < targets[0] - 1e-9 {
            path.push(h);
            h += step;
        }
    }
    let mut idx = Vec::with_capacity(targets.len());
    for &t in targets {
        if *path.last().unwrap() != t {
            path.push(t);
        }
        idx.push(path.len() - 1);
    }
    (path, idx)
}

/// Optimizes `n_inits` seeds along the warm-start path through `targets`.
pub fn optimize_seeds(cfg: &ExperimentConfig, lat: &Lattice, targets: &[f64]) -> Result<SeedSet> {
    let sc = &cfg.seeds;
    let (path, at) = warm_start_path(targets, sc.warm_start_step);
    let mut records = vec![None; targets.len() * sc.n_inits];
    let mut params = vec![None; targets.len() * sc.n_inits];
    for init in 0..sc.n_inits {
        let template = SECTOR_TEMPLATES[init % SECTOR_TEMPLATES.len()];
        let mut p = sector_params::<f64>(lat, template.0, template.1);
        perturb(
            &mut p,
            derive_seed(derive_seed(cfg.seed, STREAM_INIT), init as u64),
            sc.init_noise,
        );
        let opt_base = derive_seed(derive_seed(cfg.seed, STREAM_OPT), init as u64);
        for (step, &h) in path.iter().enumerate() {
            let sampler = sc.sampler.with_seed(derive_seed(opt_base, step as u64));
            let res = optimize(lat, &p, &cfg.hamiltonian.toric(h), &sampler, &sc.optimizer)?;
            p = res.params.clone();
            for (t, _) in at.iter().enumerate().filter(|(_, &i)| i == step) {
                let (w1, w2) = wilson_pair(lat, &p, &sampler)?;
                let e = res.final_energy();
                info!(
                    "seed {init} at h = {h}: energy {:.4} W ({w1:.3}, {w2:.3})",
                    e.mean
                );
                records[t * sc.n_inits + init] = Some(SeedRecord {
                    h,
                    init,
                    template,
                    energy: e.mean,
                    energy_stderr: e.std_error,
                    w1_bar: w1,
                    w2_bar: w2,
                    converged: res.converged,
                    trace: res.trace.iter().map(|e| (e.mean, e.std_error)).collect(),
                });
                params[t * sc.n_inits + init] = Some(p.clone());
            }
        }
    }
    Ok(SeedSet {
        targets: targets.to_vec(),
        records: records
            .into_iter()
            .map(|r| r.expect("every target visited"))
            .collect(),
        params: params
            .into_iter()
            .map(|p| p.expect("every target visited"))
            .collect(),
    })
}

/// Diffusion-map stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffmapOutput {
    pub sweep: SweepResult,
    pub embedding_epsilon: f64,
    pub embedding: Vec<Vec<f64>>,
    pub clusters: ClusterAssignment,
    pub fixed_epsilon: f64,
    pub fixed_eigenvalues: Vec<f64>,
    pub fixed_degeneracy: usize,
    pub fixed_gap: f64,
    pub label_agreement: Option<f64>,
}

pub fn wilson_labels(wilson: &[(f64, f64)]) -> Vec<usize> {
    wilson
        .iter()
        .map(|&(a, b)| usize::from(a < 0.0) * 2 + usize::from(b < 0.0))
        .collect()
}

pub fn analyze<T: crate::Real>(
    s: &SimilarityMatrix<T>,
    cfg: &ExperimentConfig,
    wilson: &[(f64, f64)],
    stream: u64,
) -> Result<DiffmapOutput> {
    let dc = &cfg.diffmap;
    let sweep = epsilon_sweep(s, &dc.epsilon.values(), &dc.sweep)?;
    let embedding_epsilon = match sweep.range {
        Some((a, b)) => sweep.points[(a + b) / 2].epsilon,
        None => dc.fixed_epsilon,
    };
    let r = diffusion_map(s, T::lit(embedding_epsilon))?;
    let k = if cfg.clusters.k > 0 {
        cfg.clusters.k
    } else {
        sweep.sector_count
    }
    .min(s.len());
    let clusters = kmeans_embed(
        &r,
        k,
        &cfg.clusters.kmeans,
        derive_seed(derive_seed(cfg.seed, STREAM_KMEANS), stream),
    )?;
    let fixed = diffusion_map(s, T::lit(dc.fixed_epsilon))?;
    let fixed_degeneracy = fixed.degeneracy_count(dc.sweep.near_one_delta);
    let label_agreement =
        (k <= 8).then(|| label_agreement(&clusters.labels, &wilson_labels(wilson)));
    Ok(DiffmapOutput {
        embedding_epsilon,
        embedding: r.embedding(EMBEDDING_DIMS),
        clusters,
        fixed_epsilon: dc.fixed_epsilon,
        fixed_eigenvalues: fixed
            .eigenvalues
            .iter()
            .take(FIXED_COLUMNS)
            .map(|v| v.as_f64())
            .collect(),
        fixed_degeneracy,
        fixed_gap: fixed.gap(dc.sweep.near_one_delta),
        label_agreement,
        sweep,
    })
}

pub fn similarity_for(
    cfg: &ExperimentConfig,
    lat: &Lattice,
    states: &[RbmParams<f64>],
    stream: u64,
) -> Result<SimilarityMatrix<f64>> {
    let seed = derive_seed(derive_seed(cfg.seed, STREAM_SIMILARITY), stream);
    match cfg.measure {
        Measure::N => network_matrix(lat, states),
        Measure::Q => overlap_matrix(lat, states),
        Measure::Eu => euclidean_matrix(states, None),
        Measure::Str { n_g } => string_matrix(lat, states, n_g, seed),
        Measure::Mixed { f } => {
            let s_n = network_matrix(lat, states)?;
            let s_q = overlap_matrix(lat, states)?;
            similarity_mixed(&s_n, &s_q, f, &mut ChaCha8Rng::seed_from_u64(seed))
        }
    }
}

/// Stage bookkeeping for one run directory.
struct StageRunner<'a> {
    dir: PathBuf,
    prefix: String,
    keys: BTreeMap<String, String>,
    force: Force,
    manifest: &'a mut RunManifest,
}

impl<'a> StageRunner<'a> {
    fn open(
        dir: &Path,
        prefix: String,
        force: Force,
        manifest: &'a mut RunManifest,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let keys = read_json(&dir.join(STAGES_FILE)).unwrap_or_default();
        Ok(StageRunner {
            dir: dir.to_path_buf(),
            prefix,
            keys,
            force,
            manifest,
        })
    }

    /// Loads a cached stage when its key matches and its files exist, else
    /// computes and stores it. Failures are recorded before being returned.
    fn run<V>(
        &mut self,
        stage: Stage,
        key: &str,
        files: &[&str],
        load: impl FnOnce(&Path) -> Result<V>,
        compute: impl FnOnce(&Path) -> Result<V>,
    ) -> Result<V> {
        let t = Instant::now();
        let label = format!("{}{}", self.prefix, stage.name());
        let fresh = !self.force.covers(stage)
            && self.keys.get(stage.name()).map(String::as_str) == Some(key)
            && files.iter().all(|f| self.dir.join(f).exists());
        if fresh {
            match load(&self.dir) {
                Ok(v) => {
                    self.record(label, StageStatus::Cached, t);
                    return Ok(v);
                }
                Err(e) => warn!("cached {label} unreadable ({e}); recomputing"),
            }
        }
        // Anything downstream of a recomputed stage is recomputed too.
        if !self.force.covers(stage) {
            self.force = Force::From(stage);
        }
        match compute(&self.dir) {
            Ok(v) => {
                self.keys.insert(stage.name().into(), key.into());
                write_json(&self.dir.join(STAGES_FILE), &self.keys)?;
                self.record(label, StageStatus::Computed, t);
                Ok(v)
            }
            Err(e) => {
                self.keys.remove(stage.name());
                let _ = write_json(&self.dir.join(STAGES_FILE), &self.keys);
                self.record(
                    label.clone(),
                    StageStatus::Failed {
                        error: e.to_string(),
                    },
                    t,
                );
                Err(Error::StageFailed {
                    stage: label,
                    reason: e.to_string(),
                })
            }
        }
    }

    fn record(&mut self, stage: String, status: StageStatus, t: Instant) {
        self.manifest.stages.push(StageRecord {
            stage,
            status,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
}

fn stage_key(parts: &impl Serialize) -> String {
    sha256_hex(
        serde_json::to_string(parts)
            .expect("stage inputs serialize")
            .as_bytes(),
    )
}

/// Ensemble onwards for one field value, given its seeds.
fn run_downstream(
    cfg: &ExperimentConfig,
    lat: &Lattice,
    runner: &mut StageRunner,
    h: f64,
    stream: u64,
    seeds_key: &str,
    seeds: &[RbmParams<f64>],
    seed_labels: Vec<(i8, i8)>,
) -> Result<RunSummary> {
    let ens_key = stage_key(&(
        "ensemble",
        seeds_key,
        h,
        stream,
        &cfg.ensemble,
        &cfg.ensemble_sampler,
    ));
    let ensemble: Ensemble<f64> = runner.run(
        Stage::Ensemble,
        &ens_key,
        &[
            &format!("{ENSEMBLE_DIR}/metadata.json"),
            &format!("{ENSEMBLE_DIR}/members.bin"),
        ],
        |d| Ensemble::load(&d.join(ENSEMBLE_DIR)),
        |d| {
            let ec = EnsembleConfig {
                seed: derive_seed(derive_seed(cfg.seed, STREAM_ENSEMBLE), stream),
                ..cfg.ensemble.clone()
            };
            let e = generate(
                lat,
                &cfg.hamiltonian.toric(h),
                &ec,
                &cfg.ensemble_sampler,
                seeds,
            )?;
            e.save(&d.join(ENSEMBLE_DIR))?;
            Ok(e)
        },
    )?;
    let states = ensemble.params();

    let obs_key = stage_key(&("observables", &ens_key));
    let wilson: Vec<(f64, f64)> = runner.run(
        Stage::Observables,
        &obs_key,
        &[WILSON_JSON],
        |d| read_json(&d.join(WILSON_JSON)),
        |d| {
            let base = derive_seed(derive_seed(cfg.seed, STREAM_WILSON), stream);
            let w = states
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    wilson_pair(
                        lat,
                        p,
                        &cfg.ensemble_sampler.with_seed(derive_seed(base, i as u64)),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            write_json(&d.join(WILSON_JSON), &w)?;
            Ok(w)
        },
    )?;

    let sim_key = stage_key(&("similarity", &ens_key, &cfg.measure, stream));
    let stem = runner.dir.join(SIMILARITY_STEM);
    let s: SimilarityMatrix<f64> = runner.run(
        Stage::Similarity,
        &sim_key,
        &[
            &format!("{SIMILARITY_STEM}.json"),
            &format!("{SIMILARITY_STEM}.bin"),
        ],
        |_| SimilarityMatrix::load(&stem),
        |_| {
            let s = similarity_for(cfg, lat, &states, stream)?;
            s.save(
                &stem,
                serde_json::json!({ "measure": cfg.measure, "key": sim_key }),
            )?;
            Ok(s)
        },
    )?;

    let dm_key = stage_key(&("diffmap", &sim_key, &obs_key, &cfg.diffmap, &cfg.clusters));
    let out: DiffmapOutput = runner.run(
        Stage::Diffmap,
        &dm_key,
        &[DIFFMAP_JSON],
        |d| read_json(&d.join(DIFFMAP_JSON)),
        |d| {
            let out = analyze(&s, cfg, &wilson, stream)?;
            write_json(&d.join(DIFFMAP_JSON), &out)?;
            Ok(out)
        },
    )?;

    emit_tables(&runner.dir)?;
    Ok(RunSummary {
        h,
        n_members: states.len(),
        sector_count: out.sweep.sector_count,
        sector_epsilon_range: out
            .sweep
            .range
            .map(|(a, b)| (out.sweep.points[a].epsilon, out.sweep.points[b].epsilon)),
        embedding_epsilon: out.embedding_epsilon,
        k: out.clusters.k,
        label_agreement: out.label_agreement,
        fixed_epsilon: out.fixed_epsilon,
        fixed_degeneracy: out.fixed_degeneracy,
        fixed_gap: out.fixed_gap,
        seed_labels,
    })
}

fn seed_stage(
    cfg: &ExperimentConfig,
    lat: &Lattice,
    runner: &mut StageRunner,
    targets: &[f64],
) -> Result<(SeedSet, String)> {
    let key = stage_key(&(
        "seeds",
        cfg.seed,
        &cfg.lattice,
        cfg.hamiltonian.j_p,
        cfg.hamiltonian.j_s,
        targets,
        &cfg.seeds,
    ));
    let seeds = runner.run(
        Stage::Seeds,
        &key,
        &[SEEDS_BIN, SEEDS_JSON],
        SeedSet::load,
        |d| {
            let s = optimize_seeds(cfg, lat, targets)?;
            s.save(d, lat)?;
            Ok(s)
        },
    )?;
    Ok((seeds, key))
}

fn check_labels(records: &[SeedRecord], h: f64, warnings: &mut Vec<String>) -> Vec<(i8, i8)> {
    let labels: Vec<(i8, i8)> = records.iter().map(SeedRecord::label).collect();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < SECTOR_TEMPLATES.len() {
        let msg = format!(
            "h = {h}: seeds cover {} of 4 Wilson-sign sectors {distinct:?}",
            distinct.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    labels
}

fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<Lattice> {
    cfg.validate()?;
    let lat = cfg.lattice()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(lat)
}

fn finish(manifest: &mut RunManifest, out: &Path) -> Result<()> {
    manifest.artifacts = collect_artifacts(out)?;
    write_json(&out.join(MANIFEST_FILE), manifest)
}

/// Seeds, ensemble, similarity, diffusion map, clustering and tables for the
/// single field `cfg.hamiltonian.h`, written under `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, force: Force) -> Result<RunManifest> {
    let lat = prepare(cfg, out)?;
    let mut manifest = RunManifest::new(cfg);
    let h = cfg.hamiltonian.h;
    let result = (|| {
        let mut runner = StageRunner::open(out, String::new(), force, &mut manifest)?;
        let (seeds, key) = seed_stage(cfg, &lat, &mut runner, &[h])?;
        let mut warnings = Vec::new();
        let labels = check_labels(&seeds.records, h, &mut warnings);
        let summary = run_downstream(cfg, &lat, &mut runner, h, 0, &key, &seeds.params, labels)?;
        runner.manifest.warnings.extend(warnings);
        Ok(summary)
    })();
    match result {
        Ok(s) => {
            manifest.summary = Some(s);
            finish(&mut manifest, out)?;
            Ok(manifest)
        }
        Err(e) => {
            finish(&mut manifest, out)?;
            Err(e)
        }
    }
}

/// Per-field pipelines over `cfg.hamiltonian.h_grid` with seeds warm-started
/// along the grid, the fixed-epsilon spectrum table, and the optional
/// fidelity scan. A failing field value is recorded and skipped.
pub fn run_field_sweep(cfg: &ExperimentConfig, out: &Path, force: Force) -> Result<RunManifest> {
    let lat = prepare(cfg, out)?;
    let grid = cfg.hamiltonian.h_grid.clone();
    if grid.is_empty() {
        return Err(Error::InvalidConfig(
            "field sweep needs a non-empty h_grid".into(),
        ));
    }
    let mut manifest = RunManifest::new(cfg);
    let seeds = {
        let mut runner = StageRunner::open(out, String::new(), force, &mut manifest)?;
        let r = seed_stage(cfg, &lat, &mut runner, &grid);
        if let Err(e) = &r {
            manifest_fail(&mut manifest, out, e);
        }
        r?
    };
    let (seeds, seeds_key) = seeds;
    let mut rows = Vec::new();
    for (t, &h) in grid.iter().enumerate() {
        let sub = format!("h_{h:.3}");
        let (records, params) = seeds.at(t);
        let mut warnings = Vec::new();
        let labels = check_labels(records, h, &mut warnings);
        manifest.warnings.extend(warnings);
        let res = StageRunner::open(&out.join(&sub), format!("{sub}/"), force, &mut manifest)
            .and_then(|mut r| {
                run_downstream(
                    cfg,
                    &lat,
                    &mut r,
                    h,
                    t as u64 + 1,
                    &seeds_key,
                    params,
                    labels,
                )
            });
        match res {
            Ok(s) => {
                rows.push((h, Some(s.clone())));
                manifest.field_points.push(FieldPoint {
                    h,
                    dir: sub,
                    summary: Some(s),
                    error: None,
                });
            }
            Err(e) => {
                warn!("field point h = {h} failed: {e}");
                rows.push((h, None));
                manifest.field_points.push(FieldPoint {
                    h,
                    dir: sub,
                    summary: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let mut table = String::from("h,sector_count,fixed_epsilon,fixed_degeneracy,fixed_gap");
    for i in 0..FIXED_COLUMNS {
        let _ = write!(table, ",lambda_{i}");
    }
    table.push('\n');
    for (h, (_, s)) in grid.iter().zip(&rows) {
        if let Some(s) = s {
            let dm: DiffmapOutput = read_json(&out.join(format!("h_{h:.3}")).join(DIFFMAP_JSON))?;
            let _ = write!(
                table,
                "{h},{},{},{},{}",
                s.sector_count, s.fixed_epsilon, s.fixed_degeneracy, s.fixed_gap
            );
            for v in &dm.fixed_eigenvalues {
                let _ = write!(table, ",{v}");
            }
            table.push('\n');
        }
    }
    write_atomic(&out.join("field_spectra.csv"), table.as_bytes())?;

    if let Some(fc) = &cfg.fidelity {
        let t0 = Instant::now();
        match fidelity_table(cfg, &lat, fc) {
            Ok((csv, min)) => {
                write_atomic(&out.join("fidelity.csv"), csv.as_bytes())?;
                manifest.fidelity_minimum = min;
                manifest.stages.push(StageRecord {
                    stage: "fidelity".into(),
                    status: StageStatus::Computed,
                    seconds: t0.elapsed().as_secs_f64(),
                });
            }
            Err(e) => manifest.stages.push(StageRecord {
                stage: "fidelity".into(),
                status: StageStatus::Failed {
                    error: e.to_string(),
                },
                seconds: t0.elapsed().as_secs_f64(),
            }),
        }
    }
    finish(&mut manifest, out)?;
    Ok(manifest)
}

fn manifest_fail(manifest: &mut RunManifest, out: &Path, e: &Error) {
    manifest.warnings.push(e.to_string());
    let _ = finish(manifest, out);
}

/// Warm-started scan from the noisy analytic ground state; returns the CSV
/// table and its minimum.
pub fn fidelity_table(
    cfg: &ExperimentConfig,
    lat: &Lattice,
    fc: &FidelityConfig,
) -> Result<(String, Option<FidelityMinimum>)> {
    let mut init = toric_ground_state_params::<f64>(lat);
    perturb(
        &mut init,
        derive_seed(cfg.seed, STREAM_FIDELITY),
        cfg.seeds.init_noise,
    );
    let sampler = cfg
        .seeds
        .sampler
        .with_seed(derive_seed(cfg.seed, STREAM_FIDELITY + 1));
    let points = fidelity_scan(
        lat,
        &fc.grid(),
        &init,
        &cfg.hamiltonian.toric(0.0),
        &sampler,
        fc.optimizer.as_ref().unwrap_or(&cfg.seeds.optimizer),
    )?;
    let mut csv = String::from("h,fidelity,energy,energy_stderr\n");
    let mut min: Option<FidelityMinimum> = None;
    for p in &points {
        let f = p.fidelity.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{f},{},{}", p.h, p.energy.mean, p.energy.std_error);
        if let Some(f) = p.fidelity {
            if min.as_ref().is_none_or(|m| f < m.fidelity) {
                min = Some(FidelityMinimum {
                    h: p.h,
                    fidelity: f,
                });
            }
        }
    }
    Ok((csv, min))
}

/// Regenerates the CSV tables of a run directory from its persisted stage
/// outputs and returns the written paths.
pub fn emit_tables(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    if dir.join(SEEDS_JSON).exists() {
        let seeds = SeedSet::load(dir)?;
        let mut csv = String::from("h,init,iteration,energy,energy_stderr\n");
        for r in &seeds.records {
            for (it, (m, se)) in r.trace.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{it},{m},{se}", r.h, r.init);
            }
        }
        put("energy_traces.csv", csv)?;
        let mut csv = String::from(
            "h,init,w1_template,w2_template,energy,energy_stderr,w1_bar,w2_bar,converged\n",
        );
        for r in &seeds.records {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                r.h,
                r.init,
                r.template.0,
                r.template.1,
                r.energy,
                r.energy_stderr,
                r.w1_bar,
                r.w2_bar,
                r.converged
            );
        }
        put("seeds.csv", csv)?;
    }
    let wilson: Option<Vec<(f64, f64)>> = if dir.join(WILSON_JSON).exists() {
        Some(read_json(&dir.join(WILSON_JSON))?)
    } else {
        None
    };
    if let Some(w) = &wilson {
        let mut csv = String::from("member_id,w1_bar,w2_bar\n");
        for (i, (a, b)) in w.iter().enumerate() {
            let _ = writeln!(csv, "{i},{a},{b}");
        }
        put("wilson.csv", csv)?;
    }
    if dir.join(DIFFMAP_JSON).exists() {
        let dm: DiffmapOutput = read_json(&dir.join(DIFFMAP_JSON))?;
        let mut csv = String::from("epsilon,degeneracy,gap");
        let cols = dm
            .sweep
            .points
            .first()
            .map_or(0, |p| p.eigenvalues.len().min(SPECTRUM_COLUMNS));
        for i in 0..cols {
            let _ = write!(csv, ",lambda_{i}");
        }
        csv.push('\n');
        for p in &dm.sweep.points {
            let _ = write!(csv, "{},{},{}", p.epsilon, p.degeneracy, p.gap);
            for v in p.eigenvalues.iter().take(cols) {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
        put("spectra.csv", csv)?;

        let mut csv = String::from("epsilon,degeneracy,gap");
        for i in 0..dm.fixed_eigenvalues.len() {
            let _ = write!(csv, ",lambda_{i}");
        }
        let _ = write!(
            csv,
            "\n{},{},{}",
            dm.fixed_epsilon, dm.fixed_degeneracy, dm.fixed_gap
        );
        for v in &dm.fixed_eigenvalues {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
        put("fixed_spectrum.csv", csv)?;

        let energies: Vec<f64> = if dir.join(ENSEMBLE_DIR).join("metadata.json").exists() {
            Ensemble::<f64>::load(&dir.join(ENSEMBLE_DIR))?
                .members
                .iter()
                .map(|m| m.energy.mean)
                .collect()
        } else {
            Vec::new()
        };
        let mut csv = String::from("member_id,psi_1,psi_2,psi_3,cluster,w1_bar,w2_bar,energy\n");
        for (i, coords) in dm.embedding.iter().enumerate() {
            let _ = write!(csv, "{i}");
            for d in 0..EMBEDDING_DIMS {
                match coords.get(d) {
                    Some(v) => {
                        let _ = write!(csv, ",{v}");
                    }
                    None => csv.push(','),
                }
            }
            let (w1, w2) = wilson
                .as_ref()
                .and_then(|w| w.get(i).copied())
                .unwrap_or((f64::NAN, f64::NAN));
            let e = energies.get(i).copied().unwrap_or(f64::NAN);
            let _ = writeln!(csv, ",{},{w1},{w2},{e}", dm.clusters.labels[i]);
        }
        put("embedding.csv", csv)?;
    }
    Ok(written)
}

/// Every file under `dir` except the manifest itself, sorted by path.
fn collect_artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<Artifact>) -> Result<()> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE)
                && path.extension().is_none_or(|e| e != "partial")
            {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let bytes = std::fs::metadata(&path)
                    .map_err(|e| Error::io(&path, e))?
                    .len();
                out.push(Artifact {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(&path)?,
                    bytes,
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}
