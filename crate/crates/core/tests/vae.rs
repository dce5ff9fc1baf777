mod common;

use common::{gaussian_kl, gradient_check, standard_normals};
use drkrnet_core::autodiff::evaluate_with_gradients;
use drkrnet_core::grf::{generate_prior_dataset, PriorDataConfig};
use drkrnet_core::random::rng_from_seed;
use drkrnet_core::training::TrainConfig;
use drkrnet_core::vae::{
    decode_on_tape, elbo_with_gradients, elbo_with_noise, encode, encode_on_tape, reparameterize,
    sample_prior, train_vae, VaeConfig, VaeParams,
};
use drkrnet_core::{Grid, ParamStore, Tensor};

fn tiny() -> VaeParams {
    let config = VaeConfig {
        latent_dim: 3,
        height: 4,
        width: 5,
        encoder_hidden: vec![9],
        decoder_hidden: vec![7],
    };
    let mut p = VaeParams::init(config, 2).unwrap();
    // larger output layers so the log-variance terms matter
    for store in [&mut p.encoder, &mut p.decoder] {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for (k, n) in names.iter().enumerate() {
            let t = store.get_mut(n).unwrap();
            let noise = standard_normals(40 + k as u64, t.len());
            let data: Vec<f64> = t
                .data()
                .iter()
                .zip(&noise)
                .map(|(v, z)| 5.0 * v + 0.05 * z)
                .collect();
            *t = Tensor::new(t.shape().to_vec(), data).unwrap();
        }
    }
    p
}

fn fields(n: usize, seed: u64) -> Vec<Tensor> {
    (0..n)
        .map(|i| Tensor::new(vec![4, 5], standard_normals(seed + i as u64, 20)).unwrap())
        .collect()
}

/// Encoder whose outputs are the constants `mu` and `logvar` for any input.
fn planted_encoder(p: &mut VaeParams, mu: &[f64], logvar: &[f64]) {
    let net = p.config.encoder();
    let last = net.n_layers() - 1;
    let w = p.encoder.get_mut(&net.weight_name(last)).unwrap();
    *w = Tensor::zeros(w.shape());
    let b = p.encoder.get_mut(&net.bias_name(last)).unwrap();
    *b = Tensor::vector([mu, logvar].concat()).unwrap();
}

#[test]
fn elbo_gradients_match_differences() {
    let p = tiny();
    let ys = fields(3, 1);
    let batch: Vec<&Tensor> = ys.iter().collect();
    let noise = Tensor::matrix(3, 3, standard_normals(9, 9)).unwrap();
    let (_, _, ge, gd) = elbo_with_gradients(&batch, &p, &noise).unwrap();
    let enc_err = gradient_check(
        &p.encoder,
        &ge,
        |e: &ParamStore| {
            let q = VaeParams {
                encoder: e.clone(),
                ..p.clone()
            };
            elbo_with_noise(&batch, &q, &noise).unwrap().0
        },
        1e-5,
        10,
        1,
    );
    let dec_err = gradient_check(
        &p.decoder,
        &gd,
        |d: &ParamStore| {
            let q = VaeParams {
                decoder: d.clone(),
                ..p.clone()
            };
            elbo_with_noise(&batch, &q, &noise).unwrap().0
        },
        1e-5,
        10,
        2,
    );
    assert!(enc_err < 1e-5 && dec_err < 1e-5, "{enc_err} {dec_err}");
}

#[test]
fn encoder_and_decoder_output_gradients_match_differences() {
    let p = tiny();
    let y = Tensor::matrix(2, 20, standard_normals(3, 40)).unwrap();
    let c = p.config.clone();
    let enc_prog =
        |t: &mut drkrnet_core::autodiff::Tape, b: &drkrnet_core::autodiff::Bindings, x| {
            let (mu, _) = encode_on_tape(t, &c, b, x)?;
            t.sum(mu)
        };
    let (_, g) = evaluate_with_gradients(&p.encoder, &y, enc_prog).unwrap();
    let err = gradient_check(
        &p.encoder,
        &g,
        |e: &ParamStore| evaluate_with_gradients(e, &y, enc_prog).unwrap().0,
        1e-5,
        10,
        3,
    );
    assert!(err < 1e-5, "{err}");

    let x = Tensor::matrix(2, 3, standard_normals(4, 6)).unwrap();
    let dec_prog =
        |t: &mut drkrnet_core::autodiff::Tape, b: &drkrnet_core::autodiff::Bindings, x| {
            let (mu, lv) = decode_on_tape(t, &c, b, x)?;
            let s = t.add(mu, lv)?;
            let s = t.square(s)?;
            t.sum(s)
        };
    let (_, g) = evaluate_with_gradients(&p.decoder, &x, dec_prog).unwrap();
    let err = gradient_check(
        &p.decoder,
        &g,
        |d: &ParamStore| evaluate_with_gradients(d, &x, dec_prog).unwrap().0,
        1e-5,
        10,
        4,
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn sampled_kl_matches_closed_form() {
    let mut p = tiny();
    let mu = [2.0, -2.5, 1.5];
    let logvar = [0.1, -0.2, 0.0];
    planted_encoder(&mut p, &mu, &logvar);
    let y = &fields(1, 5)[0];
    let (m, l) = encode(y, &p).unwrap();
    assert_eq!(m.data(), mu);
    let n = 10_000;
    let batch = vec![y; n];
    let noise = Tensor::matrix(n, 3, standard_normals(6, 3 * n)).unwrap();
    let (_, bd) = elbo_with_noise(&batch, &p, &noise).unwrap();
    let sampled = -(bd.prior_term + bd.entropy_term);
    let exact = gaussian_kl(m.data(), l.data());
    assert!(
        (sampled - exact).abs() < 0.02 * exact,
        "{sampled} vs {exact}"
    );
}

#[test]
fn standard_encoder_gives_zero_mean_sampled_kl() {
    let mut p = tiny();
    planted_encoder(&mut p, &[0.0; 3], &[0.0; 3]);
    let y = &fields(1, 8)[0];
    let n = 10_000;
    let noise = standard_normals(12, 3 * n);
    // per-draw log q - log p, which is identically zero here
    let draws: Vec<f64> = (0..n)
        .map(|i| {
            let e = Tensor::matrix(1, 3, noise[3 * i..3 * i + 3].to_vec()).unwrap();
            let (_, bd) = elbo_with_noise(&[y], &p, &e).unwrap();
            -(bd.prior_term + bd.entropy_term)
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!(
        mean.abs() <= 3.0 * sd / (n as f64).sqrt() + 1e-12,
        "{mean} {sd}"
    );
}

#[test]
fn reparameterized_covariance_is_diagonal_exp_logvar() {
    let mu = [0.3, -0.7];
    let logvar = [0.4, -1.2];
    let n = 10_000;
    let eps = standard_normals(21, 2 * n);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            reparameterize(&mu, &logvar, &eps[2 * i..2 * i + 2])
                .unwrap()
                .x
        })
        .collect();
    let mean: Vec<f64> = (0..2)
        .map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n as f64)
        .collect();
    let cov = |a: usize, b: usize| {
        xs.iter()
            .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
            .sum::<f64>()
            / (n - 1) as f64
    };
    for k in 0..2 {
        let want = logvar[k].exp();
        assert!((cov(k, k) - want).abs() < 0.05 * want);
    }
    let off = cov(0, 1) / (cov(0, 0) * cov(1, 1)).sqrt();
    assert!(off.abs() < 0.05, "{off}");
}

#[test]
fn desk_training_lowers_loss_and_recovers_prior_mean() {
    let grid = Grid::square(16).unwrap();
    let data = generate_prior_dataset(
        &grid,
        &PriorDataConfig {
            variance: 0.5,
            mean: 1.0,
            length_scales: vec![0.25],
            per_scale: 600,
            energy_fraction: 0.95,
            base_seed: 9,
        },
    )
    .unwrap();
    let ys: Vec<&Tensor> = data.iter().map(|s| &s.values).collect();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 50,
        learning_rate: 1e-3,
        seed: 3,
    };
    let (params, curve) = train_vae(&ys, VaeConfig::dense(16, 16, 8), &cfg).unwrap();
    assert!(curve.last().unwrap() < curve.initial().unwrap());

    let draws = sample_prior(&params, 2000, &mut rng_from_seed(4)).unwrap();
    let n = grid.n_nodes();
    let mut mean = vec![0.0; n];
    for f in &draws {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v / draws.len() as f64;
        }
    }
    let rms = (mean.iter().map(|m| (m - 1.0).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(rms < 0.15, "{rms}");
}

#[test]
fn training_is_deterministic() {
    let ys = fields(6, 30);
    let batch: Vec<&Tensor> = ys.iter().collect();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-2,
        seed: 8,
    };
    let c = tiny().config;
    let (a, ca) = train_vae(&batch, c.clone(), &cfg).unwrap();
    let (b, cb) = train_vae(&batch, c, &cfg).unwrap();
    assert_eq!(a.combined().to_bytes(), b.combined().to_bytes());
    assert_eq!(ca, cb);
}
