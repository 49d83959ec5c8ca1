//! Quasi-local RBM wavefunction: one cosine factor per plaquette and star,
//!
//! ```text
//! psi(sigma) = prod_X cos(b_X + sum_{j in X} w_Xj sigma_j)
//! ```
//!
//! Parameters are stored flat, five slots per cell: slot 0 is the bias and
//! slots 1..=4 are the weights of the cell's bonds in [`Lattice::cell_bonds`]
//! order. The flat index of `(cell, slot)` is `5 * cell + slot`.

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LoopPath};
use crate::scalar::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SLOTS: usize = 5;

/// Global phase `exp(i theta)` with `theta` in `{0, pi}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Zero,
    Pi,
}

impl Phase {
    pub fn sign(self) -> i8 {
        match self {
            Phase::Zero => 1,
            Phase::Pi => -1,
        }
    }

    pub fn compose(self, other: Phase) -> Phase {
        if self == other {
            Phase::Zero
        } else {
            Phase::Pi
        }
    }
}

/// A spin configuration in the `s^z` basis, one entry of `+1`/`-1` per bond.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinConfig(Vec<i8>);

impl SpinConfig {
    pub fn all_up(n: usize) -> Self {
        SpinConfig(vec![1; n])
    }

    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(&bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidSpin(bad));
        }
        Ok(SpinConfig(spins))
    }

    /// Bit `j` set means spin `j` points down. Index 0 is the all-up configuration.
    pub fn from_bits(n: usize, bits: u64) -> Self {
        SpinConfig(
            (0..n)
                .map(|j| if (bits >> j) & 1 == 1 { -1 } else { 1 })
                .collect(),
        )
    }

    pub fn to_bits(&self) -> u64 {
        self.0.iter().enumerate().fold(
            0u64,
            |acc, (j, &s)| if s < 0 { acc | (1 << j) } else { acc },
        )
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        SpinConfig(
            (0..n)
                .map(|_| if rng.random::<bool>() { 1 } else { -1 })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, j: usize) -> i8 {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    #[inline]
    pub fn flip(&mut self, j: usize) {
        self.0[j] = -self.0[j];
    }

    pub fn flipped(&self, bonds: &[usize]) -> Self {
        let mut c = self.clone();
        for &b in bonds {
            c.flip(b);
        }
        c
    }

    pub fn magnetization(&self) -> i64 {
        self.0.iter().map(|&s| s as i64).sum()
    }
}

/// Variational parameters of the RBM ansatz (the state `Lambda`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawParams<T>",
    bound(deserialize = "T: Real + Deserialize<'de>")
)]
pub struct RbmParams<T> {
    lx: usize,
    ly: usize,
    values: Vec<T>,
}

#[derive(Deserialize)]
struct RawParams<T> {
    lx: usize,
    ly: usize,
    values: Vec<T>,
}

impl<T: Real> TryFrom<RawParams<T>> for RbmParams<T> {
    type Error = Error;

    fn try_from(raw: RawParams<T>) -> Result<Self> {
        let lat = Lattice::new(raw.lx, raw.ly)?;
        RbmParams::from_values(&lat, raw.values)
    }
}

impl<T: Real> RbmParams<T> {
    pub fn zeros(lat: &Lattice) -> Self {
        RbmParams {
            lx: lat.lx(),
            ly: lat.ly(),
            values: vec![T::zero(); SLOTS * lat.n_cells()],
        }
    }

    pub fn from_values(lat: &Lattice, values: Vec<T>) -> Result<Self> {
        let expected = SLOTS * lat.n_cells();
        if values.len() != expected {
            return Err(Error::ParamLength {
                expected,
                got: values.len(),
            });
        }
        Ok(RbmParams {
            lx: lat.lx(),
            ly: lat.ly(),
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.lx, self.ly)
    }

    pub fn check_lattice(&self, lat: &Lattice) -> Result<()> {
        if (self.lx, self.ly) != (lat.lx(), lat.ly()) {
            return Err(Error::LatticeMismatch(self.lx, self.ly, lat.lx(), lat.ly()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn index(cell: usize, slot: usize) -> usize {
        SLOTS * cell + slot
    }

    /// The five parameters `[b, w_1, w_2, w_3, w_4]` of one cell.
    #[inline]
    pub fn cell(&self, cell: usize) -> &[T] {
        &self.values[SLOTS * cell..SLOTS * (cell + 1)]
    }

    #[inline]
    pub fn bias(&self, cell: usize) -> T {
        self.values[SLOTS * cell]
    }

    /// Weight of the bond in position `k` (0..4) of the cell.
    #[inline]
    pub fn weight(&self, cell: usize, k: usize) -> T {
        self.values[SLOTS * cell + 1 + k]
    }

    #[inline]
    pub fn weight_mut(&mut self, cell: usize, k: usize) -> &mut T {
        &mut self.values[SLOTS * cell + 1 + k]
    }

    #[inline]
    pub fn bias_mut(&mut self, cell: usize) -> &mut T {
        &mut self.values[SLOTS * cell]
    }

    pub fn cast<U: Real>(&self) -> RbmParams<U> {
        RbmParams {
            lx: self.lx,
            ly: self.ly,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

/// Unnormalized amplitude in log-sign form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplitude<T> {
    pub log_abs: T,
    pub sign: i8,
    pub is_zero: bool,
}

impl<T: Real> Amplitude<T> {
    pub fn zero() -> Self {
        Amplitude {
            log_abs: T::neg_infinity(),
            sign: 1,
            is_zero: true,
        }
    }

    pub fn value(&self) -> T {
        if self.is_zero {
            T::zero()
        } else {
            let v = self.log_abs.exp();
            if self.sign < 0 {
                -v
            } else {
                v
            }
        }
    }
}

#[inline]
pub(crate) fn is_zero_factor<T: Real>(c: T) -> bool {
    c.abs() < T::lit(T::ZERO_FACTOR)
}

#[inline]
fn spin<T: Real>(s: i8) -> T {
    if s > 0 {
        T::one()
    } else {
        -T::one()
    }
}

/// `theta_X = b_X + sum_j w_Xj sigma_j` for one cell.
#[inline]
pub fn cell_angle<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    cell: usize,
    config: &SpinConfig,
) -> T {
    let p = params.cell(cell);
    let bonds = lat.cell_bonds(cell);
    let mut theta = p[0];
    for k in 0..4 {
        theta += p[k + 1] * spin::<T>(config.get(bonds[k]));
    }
    theta
}

fn check_config(lat: &Lattice, config: &SpinConfig) -> Result<()> {
    if config.len() != lat.n_spins() {
        return Err(Error::ConfigLength {
            expected: lat.n_spins(),
            got: config.len(),
        });
    }
    Ok(())
}

pub fn log_amplitude<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    config: &SpinConfig,
) -> Result<Amplitude<T>> {
    params.check_lattice(lat)?;
    check_config(lat, config)?;
    let mut log_abs = T::zero();
    let mut sign = 1i8;
    for cell in 0..lat.n_cells() {
        let c = cell_angle(lat, params, cell, config).cos();
        if is_zero_factor(c) {
            return Ok(Amplitude::zero());
        }
        if c < T::zero() {
            sign = -sign;
        }
        log_abs += c.abs().ln();
    }
    Ok(Amplitude {
        log_abs,
        sign,
        is_zero: false,
    })
}

/// `d log psi / d Lambda_i`: `-tan(theta_X)` for biases, `-sigma_j tan(theta_X)` for weights.
pub fn log_derivatives<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    config: &SpinConfig,
) -> Result<Vec<T>> {
    params.check_lattice(lat)?;
    check_config(lat, config)?;
    let mut out = vec![T::zero(); params.len()];
    for cell in 0..lat.n_cells() {
        let theta = cell_angle(lat, params, cell, config);
        if is_zero_factor(theta.cos()) {
            return Err(Error::ZeroAmplitude);
        }
        let t = -theta.tan();
        write_cell_derivatives(lat, cell, config, t, &mut out);
    }
    Ok(out)
}

#[inline]
pub(crate) fn write_cell_derivatives<T: Real>(
    lat: &Lattice,
    cell: usize,
    config: &SpinConfig,
    neg_tan: T,
    out: &mut [T],
) {
    let base = SLOTS * cell;
    out[base] = neg_tan;
    for (k, &b) in lat.cell_bonds(cell).iter().enumerate() {
        out[base + 1 + k] = neg_tan * spin::<T>(config.get(b));
    }
}

/// Ratio `psi(sigma') / psi(sigma)` where `sigma'` flips `bonds`, evaluated from
/// the affected cells only. Returns zero when `sigma'` has zero amplitude; the
/// caller guarantees `psi(sigma) != 0`.
pub fn flip_ratio<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    config: &SpinConfig,
    bonds: &[usize],
) -> T {
    let mut affected: Vec<(usize, T)> = Vec::with_capacity(4 * bonds.len());
    accumulate_flip_deltas(lat, params, config, bonds, &mut affected);
    let mut ratio = T::one();
    for (cell, delta) in affected {
        let theta = cell_angle(lat, params, cell, config);
        let new = (theta + delta).cos();
        if is_zero_factor(new) {
            return T::zero();
        }
        ratio *= new / theta.cos();
    }
    ratio
}

/// Angle shifts `-2 w_Xj sigma_j` summed per cell for flipping `bonds`.
#[inline]
pub(crate) fn accumulate_flip_deltas<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    config: &SpinConfig,
    bonds: &[usize],
    affected: &mut Vec<(usize, T)>,
) {
    affected.clear();
    let two = T::lit(2.0);
    for &b in bonds {
        let s = spin::<T>(config.get(b));
        for &(cell, slot) in lat.bond_cells(b) {
            let d = -two * params.weight(cell, slot) * s;
            match affected.iter_mut().find(|(c, _)| *c == cell) {
                Some(entry) => entry.1 += d,
                None => affected.push((cell, d)),
            }
        }
    }
}

/// The analytic toric-code ground state: `w_P = pi/4`, `w_S = pi/2`, zero biases.
pub fn toric_ground_state_params<T: Real>(lat: &Lattice) -> RbmParams<T> {
    let mut p = RbmParams::zeros(lat);
    for cell in lat.plaquettes() {
        for k in 0..4 {
            *p.weight_mut(cell, k) = T::FRAC_PI_4();
        }
    }
    for cell in lat.stars() {
        for k in 0..4 {
            *p.weight_mut(cell, k) = T::FRAC_PI_2();
        }
    }
    p
}

/// All-up product state: biases `-pi/4`; weight `pi/4` on the northmost bond of
/// each plaquette (`h(x, y+1)`) and the southmost bond of each star (`v(x, y-1)`).
pub fn polarized_params<T: Real>(lat: &Lattice) -> RbmParams<T> {
    let mut p = RbmParams::zeros(lat);
    for cell in 0..lat.n_cells() {
        *p.bias_mut(cell) = -T::FRAC_PI_4();
    }
    for cell in lat.plaquettes() {
        *p.weight_mut(cell, 1) = T::FRAC_PI_4();
    }
    for cell in lat.stars() {
        *p.weight_mut(cell, 3) = T::FRAC_PI_4();
    }
    p
}

/// Multiplies the represented state by `-sigma_j`: shifts the bias and the
/// weight of bond `j` in `cell` by `pi/2`.
fn multiply_by_spin<T: Real>(p: &mut RbmParams<T>, cell: usize, k: usize) {
    *p.bias_mut(cell) += T::FRAC_PI_2();
    *p.weight_mut(cell, k) += T::FRAC_PI_2();
}

/// Wilson-loop eigenvalues `(W1, W2)` of [`toric_ground_state_params`]: `(-1)^lx, (-1)^ly`.
pub fn toric_ground_state_sector(lat: &Lattice) -> (i8, i8) {
    let s = |n: usize| if n % 2 == 0 { 1 } else { -1 };
    (s(lat.lx()), s(lat.ly()))
}

/// Exact ground state in the sector with Wilson eigenvalues `(w1, w2)`.
///
/// Starts from the analytic ground state and multiplies by `s^z` strings along
/// non-contractible direct loops: a row of horizontal bonds flips `W2`, a column
/// of vertical bonds flips `W1`.
pub fn sector_params<T: Real>(lat: &Lattice, w1: i8, w2: i8) -> RbmParams<T> {
    let mut p = toric_ground_state_params(lat);
    let (base1, base2) = toric_ground_state_sector(lat);
    if w2.signum() != base2 {
        for x in 0..lat.lx() as i64 {
            // h(x, 0) is slot 0 of P(x, 0)
            multiply_by_spin(&mut p, lat.plaquette(x, 0), 0);
        }
    }
    if w1.signum() != base1 {
        for y in 0..lat.ly() as i64 {
            // v(0, y) is slot 2 of P(0, y)
            multiply_by_spin(&mut p, lat.plaquette(0, y), 2);
        }
    }
    p
}

/// Analytic ground state plus i.i.d. `uniform(-scale, scale)` noise on every entry.
pub fn random_params<T: Real>(lat: &Lattice, seed: u64, scale: f64) -> Result<RbmParams<T>> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise scale must be finite and non-negative, got {scale}"
        )));
    }
    let mut p = toric_ground_state_params(lat);
    perturb(&mut p, seed, scale);
    Ok(p)
}

/// Adds i.i.d. `uniform(-scale, scale)` noise to every entry.
pub fn perturb<T: Real>(p: &mut RbmParams<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.values_mut() {
        let u: f64 = rng.random::<f64>();
        *v += T::lit((2.0 * u - 1.0) * scale);
    }
}

/// Transformations of the parameters that change the state by a global phase only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GaugeTransform {
    /// Negate the bias and all weights of a cell.
    SignFlip { cell: usize },
    /// Add `pi` to the bias of a cell.
    PiShiftBias { cell: usize },
    /// Add `pi` to the weight of `bond` in `cell`.
    PiShiftWeight { cell: usize, bond: usize },
    /// Add `pi/2` to the weight at every `(cell, bond)` incidence of a closed loop.
    HalfPiLoop(LoopPath),
}

impl GaugeTransform {
    pub fn phase(&self) -> Phase {
        match self {
            GaugeTransform::SignFlip { .. } => Phase::Zero,
            GaugeTransform::PiShiftBias { .. } | GaugeTransform::PiShiftWeight { .. } => Phase::Pi,
            GaugeTransform::HalfPiLoop(l) => {
                // Each cell on the loop contributes (-1)^[sigma_a == sigma_b]; around a
                // closed cycle of k bonds this multiplies to (-1)^k.
                if l.len() % 2 == 0 {
                    Phase::Zero
                } else {
                    Phase::Pi
                }
            }
        }
    }
}

pub fn apply_gauge<T: Real>(
    lat: &Lattice,
    params: &RbmParams<T>,
    g: &GaugeTransform,
) -> Result<(RbmParams<T>, Phase)> {
    params.check_lattice(lat)?;
    let mut out = params.clone();
    match g {
        GaugeTransform::SignFlip { cell } => {
            lat.check_cell(*cell)?;
            for v in &mut out.values[SLOTS * cell..SLOTS * (cell + 1)] {
                *v = -*v;
            }
        }
        GaugeTransform::PiShiftBias { cell } => {
            lat.check_cell(*cell)?;
            *out.bias_mut(*cell) += T::PI();
        }
        GaugeTransform::PiShiftWeight { cell, bond } => {
            let k = lat.slot_of(*cell, *bond)?;
            *out.weight_mut(*cell, k) += T::PI();
        }
        GaugeTransform::HalfPiLoop(l) => {
            for &(cell, bond) in &l.incidences {
                let k = lat.slot_of(cell, bond)?;
                *out.weight_mut(cell, k) += T::FRAC_PI_2();
            }
        }
    }
    Ok((out, g.phase()))
}

/// Per-cell lookup tables of the 16 possible cosine factors, for fast exact
/// enumeration. Configurations are bit strings as in [`SpinConfig::from_bits`].
pub struct CellTables<T> {
    tables: Vec<[T; 16]>,
    bonds: Vec<[usize; 4]>,
}

impl<T: Real> CellTables<T> {
    pub fn new(lat: &Lattice, params: &RbmParams<T>) -> Self {
        let mut tables = Vec::with_capacity(lat.n_cells());
        for cell in 0..lat.n_cells() {
            let p = params.cell(cell);
            let mut t = [T::zero(); 16];
            for (idx, entry) in t.iter_mut().enumerate() {
                let mut theta = p[0];
                for k in 0..4 {
                    let s = if (idx >> k) & 1 == 1 {
                        -T::one()
                    } else {
                        T::one()
                    };
                    theta += p[k + 1] * s;
                }
                let c = theta.cos();
                *entry = if is_zero_factor(c) { T::zero() } else { c };
            }
            tables.push(t);
        }
        CellTables {
            tables,
            bonds: (0..lat.n_cells()).map(|c| *lat.cell_bonds(c)).collect(),
        }
    }

    /// Local pattern of `cell` in `bits`: bit `k` set when its `k`-th bond is down.
    #[inline]
    pub fn pattern(&self, cell: usize, bits: u64) -> usize {
        let b = &self.bonds[cell];
        (((bits >> b[0]) & 1)
            | (((bits >> b[1]) & 1) << 1)
            | (((bits >> b[2]) & 1) << 2)
            | (((bits >> b[3]) & 1) << 3)) as usize
    }

    #[inline]
    pub fn amplitude(&self, bits: u64) -> T {
        let mut a = T::one();
        for (cell, t) in self.tables.iter().enumerate() {
            a *= t[self.pattern(cell, bits)];
        }
        a
    }
}
