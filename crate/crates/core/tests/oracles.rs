mod common;

use approx::assert_relative_eq;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toric_dm::diffmap::{build_kernel, diffusion_map};
use toric_dm::ensemble::accept_with;
use toric_dm::hamiltonian::{
    amplitude_vector, averaged_wilson_exact, exact_expectation, ExactState, Observable,
};
use toric_dm::rbm::{polarized_params, random_params, sector_params, toric_ground_state_params};
use toric_dm::similarity::{Measure, SimilarityMatrix};
use toric_dm::vmc::{optimize, OptimizerConfig, SamplerConfig};
use toric_dm::{Direction, Lattice, ToricParams};

#[test]
fn enumerated_energy_matches_independent_hamiltonian() {
    let lat = Lattice::new(2, 2).unwrap();
    for seed in 0..10 {
        let p = random_params::<f64>(&lat, seed, 1.0).unwrap();
        let psi = amplitude_vector(&lat, &p).unwrap();
        let tp = ToricParams {
            j_p: 0.8,
            j_s: 1.3,
            h: 0.37,
        };
        let e = exact_expectation(&lat, &p, &Observable::Energy(tp)).unwrap();
        assert_relative_eq!(
            e,
            common::rayleigh(&lat, 0.8, 1.3, 0.37, &psi),
            max_relative = 1e-10
        );
    }
}

#[test]
fn sector_states_are_eigenvectors_at_zero_field() {
    for (lx, ly) in [(2, 2), (3, 3)] {
        let lat = Lattice::new(lx, ly).unwrap();
        let e0 = -((lat.n_plaquettes() + lat.n_stars()) as f64);
        for (w1, w2) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let psi = amplitude_vector(&lat, &sector_params::<f64>(&lat, w1, w2)).unwrap();
            let hpsi = common::apply_h(&lat, 1.0, 1.0, 0.0, &psi);
            let scale = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in hpsi.iter().zip(&psi) {
                assert!((a - e0 * b).abs() < 1e-9 * scale);
            }
        }
    }
}

#[test]
fn analytic_ground_state_energy_on_3x3() {
    let lat = Lattice::new(3, 3).unwrap();
    let psi = amplitude_vector(&lat, &toric_ground_state_params::<f64>(&lat)).unwrap();
    assert_relative_eq!(
        common::rayleigh(&lat, 1.0, 1.0, 0.0, &psi),
        -18.0,
        epsilon = 1e-9
    );
}

#[test]
fn polarized_state_energy_at_unit_field() {
    let lat = Lattice::new(3, 3).unwrap();
    let psi = amplitude_vector(&lat, &polarized_params::<f64>(&lat)).unwrap();
    assert_relative_eq!(
        common::rayleigh(&lat, 1.0, 1.0, 1.0, &psi),
        -27.0,
        epsilon = 1e-6
    );
}

#[test]
fn wilson_loops_match_dense_flip_operator() {
    let lat = Lattice::new(2, 2).unwrap();
    for seed in 0..5 {
        let p = random_params::<f64>(&lat, 100 + seed, 1.0).unwrap();
        let psi = amplitude_vector(&lat, &p).unwrap();
        let avg = |d| {
            let loops = lat.straight_dual_loops(d);
            loops
                .iter()
                .map(|l| common::flip_expectation(&psi, &l.bonds))
                .sum::<f64>()
                / loops.len() as f64
        };
        let (w1, w2) = averaged_wilson_exact(&lat, &ExactState::new(&lat, &p).unwrap()).unwrap();
        assert_relative_eq!(
            w1 + w2,
            avg(Direction::X) + avg(Direction::Y),
            epsilon = 1e-10
        );
        let mut both = [w1, w2];
        let mut oracle = [avg(Direction::X), avg(Direction::Y)];
        both.sort_by(f64::total_cmp);
        oracle.sort_by(f64::total_cmp);
        assert_relative_eq!(both[0], oracle[0], epsilon = 1e-10);
        assert_relative_eq!(both[1], oracle[1], epsilon = 1e-10);
    }
}

#[test]
fn optimized_energy_respects_variational_bound() {
    let lat = Lattice::new(2, 2).unwrap();
    let h = 0.3;
    let e0 = SymmetricEigen::new(common::dense_h(&lat, 1.0, 1.0, h))
        .eigenvalues
        .min();
    let init = random_params::<f64>(&lat, 7, 0.3).unwrap();
    let sc = SamplerConfig {
        n_chains: 2,
        n_steps: 400,
        n_burn: 50,
        seed: 3,
        ..Default::default()
    };
    let oc = OptimizerConfig {
        n_iterations: 150,
        ..Default::default()
    };
    let res = optimize(&lat, &init, &ToricParams::with_field(h), &sc, &oc).unwrap();
    let exact = exact_expectation(
        &lat,
        &res.params,
        &Observable::Energy(ToricParams::with_field(h)),
    )
    .unwrap();
    assert!(exact >= e0 - 1e-9, "{exact} below ground energy {e0}");
    let fin = res.final_energy();
    assert!(fin.mean >= e0 - 3.0 * fin.std_error - 1e-9);
    let start =
        exact_expectation(&lat, &init, &Observable::Energy(ToricParams::with_field(h))).unwrap();
    assert!(exact < start);
}

#[test]
fn boltzmann_acceptance_frequency() {
    let t = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| accept_with(-17.0, -17.0 + t, t, rng.random()))
        .count();
    assert!((hits as f64 / n as f64 - (-1.0f64).exp()).abs() < 0.005);
    assert!((0..1000).all(|_| accept_with(-17.0, -18.0, t, rng.random())));
}

#[test]
fn kernel_entry_from_similarity() {
    let s = SimilarityMatrix::from_fn(2, Measure::N, |i, j| if i == j { 1.0 } else { 0.9 });
    let k = build_kernel(&s, 0.01).unwrap();
    assert_relative_eq!(k[(0, 1)], (-10.0f64).exp(), max_relative = 1e-12);
    assert_relative_eq!(k[(0, 0)], 1.0);
}

#[test]
fn diffusion_spectrum_matches_general_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let m = 6;
        let mut raw = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in i + 1..m {
                let v: f64 = rng.random();
                raw[(i, j)] = v;
                raw[(j, i)] = v;
            }
        }
        let s =
            SimilarityMatrix::from_fn(m, Measure::N, |i, j| if i == j { 1.0 } else { raw[(i, j)] });
        let eps = 0.3;
        let k = DMatrix::from_fn(m, m, |i, j| (-(1.0 - s.get(i, j)) / eps).exp());
        let p = DMatrix::from_fn(m, m, |i, j| k[(i, j)] / k.row(i).sum());
        let mut oracle: Vec<f64> = p.complex_eigenvalues().iter().map(|c| c.re).collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        let r = diffusion_map(&s, eps).unwrap();
        for (a, b) in r.eigenvalues.iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, epsilon = 1e-10);
        }
    }
}
