mod common;

use common::{gradient_check, standard_normals};
use drkrnet_core::grf::{generate_prior_dataset, PriorDataConfig};
use drkrnet_core::surrogate::{
    physics_loss, physics_loss_for_fields, physics_loss_with_gradients, spatial_gradient,
    train_surrogate, InputFeature, OutputBasis, PhysicsLossConfig, SurrogateConfig,
    SurrogateParams,
};
use drkrnet_core::training::TrainConfig;
use drkrnet_core::{Grid, ParamStore, Tensor};
use proptest::prelude::*;

fn fields(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let v = standard_normals(seed + i as u64, h * w);
            Tensor::new(vec![h, w], v.iter().map(|x| 1.0 + 0.5 * x).collect()).unwrap()
        })
        .collect()
}

fn params(basis: OutputBasis, input: InputFeature, seed: u64) -> SurrogateParams {
    let config = SurrogateConfig {
        height: 5,
        width: 6,
        hidden: vec![12],
        basis,
        input,
    };
    let mut p = SurrogateParams::init(config, seed).unwrap();
    let names: Vec<String> = p.store.names().map(str::to_string).collect();
    for (k, n) in names.iter().enumerate() {
        if n.ends_with(".b") {
            let t = p.store.get_mut(n).unwrap();
            let v = standard_normals(seed + 7 * k as u64, t.len());
            *t = Tensor::vector(v.iter().map(|x| 0.1 * x).collect()).unwrap();
        }
    }
    p
}

#[test]
fn physics_loss_gradients_match_differences() {
    let ys = fields(3, 5, 6, 1);
    let batch: Vec<&Tensor> = ys.iter().collect();
    for basis in [OutputBasis::Pixel, OutputBasis::Cosine] {
        for input in [
            InputFeature::LogPermeability,
            InputFeature::InversePermeability,
        ] {
            for flux_on_boundary in [false, true] {
                let p = params(basis, input, 4);
                let cfg = PhysicsLossConfig {
                    flux_on_boundary,
                    ..Default::default()
                };
                let (_, _, g) = physics_loss_with_gradients(&batch, &p, &cfg).unwrap();
                let err = gradient_check(
                    &p.store,
                    &g,
                    |s: &ParamStore| {
                        let q = SurrogateParams {
                            store: s.clone(),
                            ..p.clone()
                        };
                        physics_loss(&batch, &q, &cfg).unwrap().0
                    },
                    1e-5,
                    10,
                    5,
                );
                assert!(err < 1e-5, "{basis:?} {input:?} {flux_on_boundary}: {err}");
            }
        }
    }
}

#[test]
fn sobel_gradient_recovers_plane_slopes() {
    let grid = Grid::new(7, 9).unwrap();
    let f = Tensor::new(vec![7, 9], grid.tabulate(|s1, s2| s1 + 2.0 * s2 - 0.3)).unwrap();
    let (g1, g2) = spatial_gradient(&f, &grid).unwrap();
    for r in 1..6 {
        for c in 1..8 {
            assert!((g1.data()[r * 9 + c] - 1.0).abs() < 1e-12);
            assert!((g2.data()[r * 9 + c] - 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn desk_training_reduces_loss_tenfold() {
    let grid = Grid::square(16).unwrap();
    let data = generate_prior_dataset(
        &grid,
        &PriorDataConfig {
            variance: 0.5,
            mean: 1.0,
            length_scales: vec![0.2, 0.25, 0.3],
            per_scale: 200,
            energy_fraction: 0.95,
            base_seed: 7,
        },
    )
    .unwrap();
    let ys: Vec<&Tensor> = data.iter().map(|s| &s.values).collect();
    let train = TrainConfig {
        epochs: 50,
        batch_size: 10,
        learning_rate: 1e-3,
        seed: 1,
    };
    let loss = PhysicsLossConfig {
        flux_on_boundary: true,
        ..Default::default()
    };
    let (_, curve) = train_surrogate(&ys, SurrogateConfig::dense(16, 16), &train, &loss).unwrap();
    let (first, last) = (curve.initial().unwrap(), curve.last().unwrap());
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let ys = fields(5, 5, 6, 20);
    let batch: Vec<&Tensor> = ys.iter().collect();
    let train = TrainConfig {
        epochs: 3,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 9,
    };
    let c = params(OutputBasis::Cosine, InputFeature::InversePermeability, 0).config;
    let run = || train_surrogate(&batch, c.clone(), &train, &PhysicsLossConfig::default()).unwrap();
    let ((a, ca), (b, cb)) = (run(), run());
    assert_eq!(a.store.to_bytes(), b.store.to_bytes());
    assert_eq!(ca, cb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn breakdown_is_additive(
        seed in any::<u64>(),
        beta in 0.1f64..1000.0,
        source in -5.0f64..5.0,
        flux_on_boundary in any::<bool>(),
    ) {
        let grid = Grid::new(5, 6).unwrap();
        let set = |k: u64| fields(2, 5, 6, seed.wrapping_add(k));
        let (y, u, t1, t2) = (set(0), set(10), set(20), set(30));
        fn r(v: &[Tensor]) -> Vec<&Tensor> {
            v.iter().collect()
        }
        let cfg = PhysicsLossConfig { beta, source, flux_on_boundary };
        let (total, bd) = physics_loss_for_fields(&r(&y), &r(&u), &r(&t1), &r(&t2), &grid, &cfg).unwrap();
        prop_assert_eq!(total, bd.total);
        prop_assert_eq!(
            bd.total,
            bd.interior_flux_div + bd.flux_consistency + beta * (bd.dirichlet + bd.neumann)
        );
        prop_assert_eq!(bd.beta, beta);
    }
}
