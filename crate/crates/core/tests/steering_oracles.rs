mod common;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use pgcs_brm::linalg::rel_frobenius;
use pgcs_brm::steering::{
    propagate_closed_loop, solve_coupled_riccati, solve_mean_bvp, steer, BoundaryMoments,
    LqDrivingTerms, ShootingOptions,
};
use pgcs_brm::TimeGrid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn scalar_integrator(grid: &TimeGrid, noise: f64) -> LqDrivingTerms {
    let one = DMatrix::from_element(1, 1, 1.0);
    LqDrivingTerms::constant(
        grid,
        &DMatrix::zeros(1, 1),
        &DVector::zeros(1),
        &one,
        &DMatrix::zeros(1, 1),
        &DVector::zeros(1),
        noise,
    )
    .unwrap()
}

/// Minimum-energy input of one double-integrator axis from the controllability Gramian.
fn gramian_control(t: f64, horizon: f64, p0: f64, v0: f64, pt: f64, vt: f64) -> f64 {
    let g = Matrix2::new(
        horizon.powi(3) / 3.0,
        horizon.powi(2) / 2.0,
        horizon.powi(2) / 2.0,
        horizon,
    );
    let miss = Vector2::new(pt - p0 - v0 * horizon, vt - v0);
    let w = g.try_inverse().unwrap() * miss;
    (horizon - t) * w[0] + w[1]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    // Π̇ = Π² for ẋ = u + √ε w, so Π = Π₀/φ with φ = 1 − Π₀t and
    // Σ(T) = φ(T)²Σ₀ + εTφ(T).
    #[test]
    fn scalar_shooting_matches_closed_form(
        s0 in 0.01f64..2.0,
        st in 0.01f64..2.0,
        noise in 0.0f64..0.5,
        horizon in 0.5f64..3.0,
    ) {
        let grid = TimeGrid::new(horizon, 200).unwrap();
        let terms = scalar_integrator(&grid, noise);
        let sol = solve_coupled_riccati(
            &terms,
            &DMatrix::from_element(1, 1, s0),
            &DMatrix::from_element(1, 1, st),
            &grid,
        ).unwrap();
        let et = noise * horizon;
        let phi = (-et + (et * et + 4.0 * s0 * st).sqrt()) / (2.0 * s0);
        let pi0 = (1.0 - phi) / horizon;
        let got = sol.riccati[0][(0, 0)];
        prop_assert!((got - pi0).abs() <= 1e-6 * (1.0 + pi0.abs()), "Π₀ {} vs {}", got, pi0);
        prop_assert!((sol.covariance.last().unwrap()[(0, 0)] - st).abs() <= 1e-9 * st.max(1.0));
    }

    #[test]
    fn mean_control_is_minimum_energy(
        p0 in prop::array::uniform2(-5.0f64..5.0),
        v0 in prop::array::uniform2(-1.0f64..1.0),
        pt in prop::array::uniform2(-5.0f64..5.0),
        vt in prop::array::uniform2(-1.0f64..1.0),
        horizon in 0.5f64..4.0,
    ) {
        let grid = TimeGrid::new(horizon, 30).unwrap();
        let terms = di_terms(&grid, 2, 0.0, 0.01);
        let m0 = DVector::from_vec(vec![p0[0], p0[1], v0[0], v0[1]]);
        let mt = DVector::from_vec(vec![pt[0], pt[1], vt[0], vt[1]]);
        let sol = solve_mean_bvp(&terms, &m0, &mt, &grid).unwrap();
        for (j, u) in sol.control.iter().enumerate() {
            let t = grid.sample_time(j);
            for k in 0..2 {
                let expected = gramian_control(t, horizon, p0[k], v0[k], pt[k], vt[k]);
                prop_assert!((u[k] - expected).abs() <= 1e-8 * (1.0 + expected.abs()), "u[{}] at {}: {} vs {}", k, t, u[k], expected);
            }
        }
        prop_assert!((sol.mean.last().unwrap() - &mt).norm() <= 1e-9 * (1.0 + mt.norm()));
    }

    #[test]
    fn steered_policy_hits_both_moments(seed in 0u64..1000, steps in 20usize..60, q in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::new(2.0, steps).unwrap();
        let terms = di_terms(&grid, 2, q, 0.02);
        let m0 = gaussian_vec(&mut rng, 4);
        let mt = gaussian_vec(&mut rng, 4) * 3.0;
        let s0 = random_spd(&mut rng, 4, 0.3, 0.02);
        let st = random_spd(&mut rng, 4, 0.3, 0.02);
        let bm = BoundaryMoments::new(m0.clone(), s0.clone(), mt.clone(), st.clone()).unwrap();
        let sol = steer(&terms, &bm, &grid, &ShootingOptions::default()).unwrap();
        let (mean, cov) = propagate_closed_loop(&terms, &sol.policy, &m0, &s0, &grid).unwrap();
        prop_assert!(rel_frobenius(cov.last().unwrap(), &st) <= 1e-6);
        prop_assert!((mean.last().unwrap() - &mt).norm() <= 1e-8 * (1.0 + mt.norm()));
        // K = −BᵀΠ with a symmetric Π at every sample
        let (_, b) = double_integrator(2);
        for (k, p) in sol.policy.gain.iter().zip(&sol.policy.riccati) {
            prop_assert!((p - p.transpose()).norm() <= 1e-12 * (1.0 + p.norm()));
            prop_assert!((k + b.transpose() * p).norm() <= 1e-12 * (1.0 + k.norm()));
        }
    }
}

#[test]
fn covariance_can_shrink_below_start_without_noise() {
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let terms = scalar_integrator(&grid, 0.0);
    let sol = solve_coupled_riccati(
        &terms,
        &DMatrix::from_element(1, 1, 1.0),
        &DMatrix::from_element(1, 1, 0.01),
        &grid,
    )
    .unwrap();
    // φ(T) = √(Σ_T/Σ₀) = 0.1, so Π₀ = 0.9; Π reaches 9 at T, hence the RK4-level tolerance
    assert!(
        (sol.riccati[0][(0, 0)] - 0.9).abs() < 1e-5,
        "{}",
        sol.riccati[0][(0, 0)]
    );
    assert!(sol
        .covariance
        .windows(2)
        .all(|w| w[1][(0, 0)] < w[0][(0, 0)]));
}
