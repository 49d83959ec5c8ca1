#![allow(dead_code)]

use nalgebra::DMatrix;
use toric_dm::Lattice;

/// Bit mask of a set of bonds in the `from_bits` convention.
pub fn mask(bonds: &[usize]) -> u64 {
    bonds.iter().fold(0u64, |m, &b| m | (1 << b))
}

fn spin(bits: u64, j: usize) -> f64 {
    if (bits >> j) & 1 == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Diagonal part `-J_p sum_P prod s^z - h sum s^z` at configuration `bits`.
pub fn diagonal(lat: &Lattice, j_p: f64, h: f64, bits: u64) -> f64 {
    let plaq: f64 = lat
        .plaquettes()
        .map(|p| {
            lat.cell_bonds(p)
                .iter()
                .map(|&b| spin(bits, b))
                .product::<f64>()
        })
        .sum();
    let field: f64 = (0..lat.n_spins()).map(|j| spin(bits, j)).sum();
    -j_p * plaq - h * field
}

/// `H psi` without forming the matrix.
pub fn apply_h(lat: &Lattice, j_p: f64, j_s: f64, h: f64, psi: &[f64]) -> Vec<f64> {
    let stars: Vec<u64> = lat.stars().map(|s| mask(lat.cell_bonds(s))).collect();
    (0..psi.len() as u64)
        .map(|bits| {
            let off: f64 = stars.iter().map(|&m| psi[(bits ^ m) as usize]).sum();
            diagonal(lat, j_p, h, bits) * psi[bits as usize] - j_s * off
        })
        .collect()
}

pub fn dense_h(lat: &Lattice, j_p: f64, j_s: f64, h: f64) -> DMatrix<f64> {
    let dim = 1usize << lat.n_spins();
    let stars: Vec<u64> = lat.stars().map(|s| mask(lat.cell_bonds(s))).collect();
    let mut m = DMatrix::zeros(dim, dim);
    for bits in 0..dim as u64 {
        m[(bits as usize, bits as usize)] = diagonal(lat, j_p, h, bits);
        for &s in &stars {
            m[((bits ^ s) as usize, bits as usize)] -= j_s;
        }
    }
    m
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rayleigh(lat: &Lattice, j_p: f64, j_s: f64, h: f64, psi: &[f64]) -> f64 {
    dot(psi, &apply_h(lat, j_p, j_s, h, psi)) / dot(psi, psi)
}

/// `<psi| prod_{b in bonds} s^x |psi> / <psi|psi>`.
pub fn flip_expectation(psi: &[f64], bonds: &[usize]) -> f64 {
    let m = mask(bonds);
    let num: f64 = (0..psi.len() as u64)
        .map(|b| psi[b as usize] * psi[(b ^ m) as usize])
        .sum();
    num / dot(psi, psi)
}
