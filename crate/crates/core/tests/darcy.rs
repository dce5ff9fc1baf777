mod common;

use common::standard_normals;
use drkrnet_core::darcy::{
    add_noise, assemble_system, boundary_outflow, log_likelihood, observe, solve_darcy,
    solve_darcy_dirichlet, ObservationOperator,
};
use drkrnet_core::random::rng_from_seed;
use drkrnet_core::{Grid, Tensor};
use proptest::prelude::*;

/// A smooth random log-permeability defined on the continuum, so the same
/// field can be sampled on different grids.
fn smooth_field(seed: u64) -> impl Fn(f64, f64) -> f64 {
    let c = standard_normals(seed, 9);
    move |s1, s2| {
        let mut v = 1.0;
        for p in 0..3 {
            for q in 0..3 {
                let k = (p * p + q * q) as f64;
                let amp = 0.4 / (1.0 + k);
                v += amp
                    * c[p * 3 + q]
                    * (std::f64::consts::PI * p as f64 * s1).cos()
                    * (std::f64::consts::PI * q as f64 * s2).cos();
            }
        }
        v
    }
}

fn on_grid(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(vec![grid.height, grid.width], grid.tabulate(f)).unwrap()
}

#[test]
fn quadratic_solution_is_exact_on_rectangular_grids() {
    for (h, w) in [(16, 16), (7, 11), (33, 9)] {
        let grid = Grid::new(h, w).unwrap();
        let u = solve_darcy(&Tensor::zeros(&[h, w]), &grid, |_, _| 3.0).unwrap();
        let want = grid.tabulate(|s1, _| 1.5 * s1 * (1.0 - s1));
        assert!(common::max_abs_diff(u.values.data(), &want) < 1e-10);
    }
}

#[test]
fn grid_refinement_changes_sensor_values_by_less_than_two_percent() {
    let op = ObservationOperator::lattice(8, 0.0625, 0.125).unwrap();
    let (coarse, fine) = (Grid::square(16).unwrap(), Grid::square(32).unwrap());
    for seed in 0..3 {
        let f = smooth_field(seed);
        let a = observe(
            &solve_darcy(&on_grid(&coarse, &f), &coarse, |_, _| 3.0).unwrap(),
            &op,
        )
        .unwrap();
        let b = observe(
            &solve_darcy(&on_grid(&fine, &f), &fine, |_, _| 3.0).unwrap(),
            &op,
        )
        .unwrap();
        let worst = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs() / y.abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "seed {seed}: {worst}");
    }
}

#[test]
fn zero_source_conserves_flux() {
    let grid = Grid::new(12, 10).unwrap();
    for seed in 0..3 {
        let y = on_grid(&grid, smooth_field(seed));
        let u = solve_darcy_dirichlet(&y, &grid, |_, _| 0.0, 1.0, -0.5).unwrap();
        let net = boundary_outflow(&y, &u).unwrap();
        assert!(net.abs() < 1e-10, "{net}");
    }
}

#[test]
fn system_is_symmetric_and_solved_to_tolerance() {
    let grid = Grid::new(9, 8).unwrap();
    let y = on_grid(&grid, smooth_field(4));
    let sys = assemble_system(&y, &grid, |_, _| 3.0, 0.0, 0.0).unwrap();
    let a = sys.to_dense();
    let n = (a.len() as f64).sqrt() as usize;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            assert!((a[i * n + j] - a[j * n + i]).abs() <= 1e-12 * scale);
        }
    }
    let x = sys.solve().unwrap();
    assert!(sys.relative_residual(&x) < 1e-10);
}

#[test]
fn higher_permeability_lowers_peak_pressure() {
    let grid = Grid::square(12).unwrap();
    for seed in 0..3 {
        let f = smooth_field(10 + seed);
        let y = on_grid(&grid, &f);
        let lifted = on_grid(&grid, |a, b| f(a, b) + 0.3);
        let peak = |y: &Tensor| {
            solve_darcy(y, &grid, |_, _| 3.0)
                .unwrap()
                .values
                .data()
                .iter()
                .copied()
                .fold(f64::MIN, f64::max)
        };
        assert!(peak(&lifted) < peak(&y));
    }
}

#[test]
fn noise_standard_deviation_matches_model() {
    let op = ObservationOperator::lattice(3, 0.25, 0.25).unwrap();
    let clean = vec![2.0, -1.0, 0.5, 0.01, 1.5, 3.0, -2.0, 0.2, 1.0];
    let reps = 10_000;
    let mut rng = rng_from_seed(5);
    let mut acc = vec![0.0; clean.len()];
    let mut sigma = Vec::new();
    for _ in 0..reps {
        let obs = add_noise(&op, &clean, 0.05, &mut rng).unwrap();
        for (i, (v, c)) in obs.values.iter().zip(&clean).enumerate() {
            acc[i] += (v - c) * (v - c);
        }
        sigma = obs.noise.per_sensor_std.clone();
    }
    for (i, s) in sigma.iter().enumerate() {
        let sd = (acc[i] / reps as f64).sqrt();
        assert!((sd - s).abs() < 0.03 * s, "sensor {i}: {sd} vs {s}");
    }
    // the floor applies to the near-zero reading
    let floor = 0.05 * clean.iter().map(|c: &f64| c.abs()).sum::<f64>() / 9.0 * 0.1;
    assert!((sigma[3] - floor).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bilinear_fields_are_interpolated_exactly(
        a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0,
        s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0,
    ) {
        let grid = Grid::new(7, 9).unwrap();
        let f = |x: f64, y: f64| a + b * x + c * y + d * x * y;
        let op = ObservationOperator::new(vec![(s1, s2)]).unwrap();
        let v = op.apply(&on_grid(&grid, f), &grid).unwrap()[0];
        prop_assert!((v - f(s1, s2)).abs() < 1e-12);
    }

    #[test]
    fn doubling_sigma_costs_m_log_two(
        clean in prop::collection::vec(0.1f64..3.0, 4),
        seed in any::<u64>(),
    ) {
        let op = ObservationOperator::lattice(2, 0.25, 0.5).unwrap();
        let obs = add_noise(&op, &clean, 0.05, &mut rng_from_seed(seed)).unwrap();
        let mut wide = obs.clone();
        wide.noise.per_sensor_std.iter_mut().for_each(|s| *s *= 2.0);
        let base = log_likelihood(&obs, &obs.values).unwrap();
        let lower = log_likelihood(&wide, &obs.values).unwrap();
        prop_assert!((base - lower - 4.0 * 2f64.ln()).abs() < 1e-12);
    }
}
