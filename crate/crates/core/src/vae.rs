//! Variational autoencoder prior over log-permeability images.
//!
//! Encoder and decoder are Gaussian with diagonal covariance; each network
//! emits a mean block followed by a log-variance block. The ELBO uses the
//! single-draw estimator `log p(y|x) - (log q(x|y) - log p(x))` with `x`
//! reparameterized from standard normal noise.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::darcy::HALF_LN_2PI;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::optim::{adam_step, AdamState};
use crate::random::{rng_from_seed, standard_normals};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{fixed_batches, TrainConfig, TrainingCurve};

/// Log-variance outputs are clamped to `[-LOGVAR_BOUND, LOGVAR_BOUND]`.
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl VaeConfig {
    /// Fully connected bodies `HW -> 256 -> 128 -> 2d` and `d -> 128 -> 256 -> 2HW`.
    pub fn dense(height: usize, width: usize, latent_dim: usize) -> Self {
        Self {
            latent_dim,
            height,
            width,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn encoder(&self) -> Mlp {
        let mut sizes = vec![self.n_pixels()];
        sizes.extend(&self.encoder_hidden);
        sizes.push(2 * self.latent_dim);
        Mlp::new("enc.", sizes, Activation::Relu)
    }

    pub fn decoder(&self) -> Mlp {
        let mut sizes = vec![self.latent_dim];
        sizes.extend(&self.decoder_hidden);
        sizes.push(2 * self.n_pixels());
        Mlp::new("dec.", sizes, Activation::Relu)
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.height < 3 || self.width < 3 {
            return Err(Error::invalid(format!(
                "VAE needs a positive latent dimension and at least a 3x3 image, got d={} on {}x{}",
                self.latent_dim, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Encoder (φ) and decoder (θ) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
}

impl VaeParams {
    pub fn init(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut encoder = ParamStore::new(seed);
        config.encoder().init(&mut encoder, &mut rng, 0.1)?;
        let mut decoder = ParamStore::new(seed);
        config.decoder().init(&mut decoder, &mut rng, 0.1)?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// [`VaeParams::init`] with the decoder's mean-head bias set to the
    /// pixelwise mean of `dataset`, so the field level does not have to be
    /// carried by the latent code.
    pub fn init_for_data(config: VaeConfig, seed: u64, dataset: &[&Tensor]) -> Result<Self> {
        let mut p = Self::init(config, seed)?;
        let n = p.config.n_pixels();
        let net = p.config.decoder();
        let name = net.bias_name(net.n_layers() - 1);
        let mut bias = p.decoder.get(&name).expect("decoder bias").data().to_vec();
        for y in dataset {
            if y.len() != n {
                return Err(Error::shape(
                    "vae init",
                    format!("field {:?} for {n} pixels", y.shape()),
                ));
            }
            for (b, v) in bias.iter_mut().zip(y.data()) {
                *b += v / dataset.len() as f64;
            }
        }
        *p.decoder.get_mut(&name).expect("decoder bias") = Tensor::vector(bias)?;
        Ok(p)
    }

    /// Encoder and decoder entries in one store.
    pub fn combined(&self) -> ParamStore {
        let mut all = self.encoder.clone();
        all.extend_prefixed("", &self.decoder)
            .expect("encoder and decoder names are disjoint");
        all
    }

    fn split(config: VaeConfig, all: ParamStore, seed: u64) -> Result<Self> {
        let mut encoder = ParamStore::new(seed);
        let mut decoder = ParamStore::new(seed);
        for (k, v) in all.iter() {
            if k.starts_with("enc.") {
                encoder.insert(k, v.clone())?;
            } else if k.starts_with("dec.") {
                decoder.insert(k, v.clone())?;
            } else {
                return Err(Error::Format(format!("unexpected VAE parameter `{k}`")));
            }
        }
        let p = Self {
            config,
            encoder,
            decoder,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        for (net, store) in [
            (self.config.encoder(), &self.encoder),
            (self.config.decoder(), &self.decoder),
        ] {
            for l in 0..net.n_layers() {
                let w = store
                    .get(&net.weight_name(l))
                    .ok_or_else(|| Error::Format(format!("missing `{}`", net.weight_name(l))))?;
                if w.shape() != [net.sizes[l], net.sizes[l + 1]] {
                    return Err(Error::Format(format!(
                        "`{}` has shape {:?}",
                        net.weight_name(l),
                        w.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, meta: &VaeCheckpointMeta) -> Result<()> {
        self.combined().save(&dir.join("vae.krfl"))?;
        std::fs::write(
            dir.join("vae.json"),
            serde_json::to_string_pretty(meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, VaeCheckpointMeta)> {
        let meta: VaeCheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("vae.json"))?)?;
        let all = ParamStore::load(&dir.join("vae.krfl"))?;
        let config = VaeConfig {
            latent_dim: meta.d,
            height: meta.h,
            width: meta.w,
            encoder_hidden: meta.encoder_hidden.clone(),
            decoder_hidden: meta.decoder_hidden.clone(),
        };
        Ok((Self::split(config, all, meta.seed)?, meta))
    }
}

/// JSON sidecar stored next to `vae.krfl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeCheckpointMeta {
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
    #[serde(default)]
    pub config_hash: String,
}

/// Encoder pass on a batch `[n, HW]`; returns `(mean [n,d], logvar [n,d])`.
pub fn encode_on_tape(
    tape: &mut Tape,
    config: &VaeConfig,
    enc: &Bindings,
    y: Var,
) -> Result<(Var, Var)> {
    let out = config.encoder().forward(tape, enc, y)?;
    let d = config.latent_dim;
    let mu = tape.slice_cols(out, 0, d)?;
    let lv = tape.slice_cols(out, d, 2 * d)?;
    let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)?;
    Ok((mu, lv))
}

/// Decoder pass on a batch `[n, d]`; returns `(mean [n,HW], logvar [n,HW])`.
pub fn decode_on_tape(
    tape: &mut Tape,
    config: &VaeConfig,
    dec: &Bindings,
    x: Var,
) -> Result<(Var, Var)> {
    let out = config.decoder().forward(tape, dec, x)?;
    let n = config.n_pixels();
    let mu = tape.slice_cols(out, 0, n)?;
    let lv = tape.slice_cols(out, n, 2 * n)?;
    let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND)?;
    Ok((mu, lv))
}

/// `x = mean + exp(logvar / 2) * noise` on the tape.
pub fn reparameterize_on_tape(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let spread = tape.mul(sd, noise)?;
    tape.add(mu, spread)
}

/// Row-wise `log N(x; 0, I)` for `x: [n, d]`, giving `[n]`.
pub fn standard_normal_log_density(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.value(x).dims2()?.1;
    let sq = tape.square(x)?;
    let s = tape.sum_cols(sq)?;
    let s = tape.scale(s, -0.5)?;
    tape.offset(s, -(d as f64) * HALF_LN_2PI)
}

/// Row-wise `log N(target; mean, diag(exp(logvar)))`, giving `[n]`.
pub fn diagonal_gaussian_log_density(
    tape: &mut Tape,
    target: Var,
    mean: Var,
    logvar: Var,
) -> Result<Var> {
    let m = tape.value(mean).dims2()?.1;
    let diff = tape.sub(target, mean)?;
    let sq = tape.square(diff)?;
    let neg = tape.scale(logvar, -1.0)?;
    let prec = tape.exp(neg)?;
    let quad = tape.mul(sq, prec)?;
    let terms = tape.add(quad, logvar)?;
    let s = tape.sum_cols(terms)?;
    let s = tape.scale(s, -0.5)?;
    tape.offset(s, -(m as f64) * HALF_LN_2PI)
}

fn flatten_batch(batch: &[&Tensor], n_pixels: usize) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::invalid("ELBO needs a non-empty batch"));
    }
    let mut data = Vec::with_capacity(batch.len() * n_pixels);
    for y in batch {
        if y.len() != n_pixels {
            return Err(Error::shape(
                "vae batch",
                format!(
                    "field {:?} has {} values, expected {n_pixels}",
                    y.shape(),
                    y.len()
                ),
            ));
        }
        data.extend_from_slice(y.data());
    }
    Tensor::new(vec![batch.len(), n_pixels], data)
}

fn encode_batch(params: &VaeParams, y: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let enc = Bindings::frozen(&mut tape, &params.encoder);
    let yv = tape.constant(y.clone());
    let (mu, lv) = encode_on_tape(&mut tape, &params.config, &enc, yv)?;
    Ok((tape.value(mu).clone(), tape.value(lv).clone()))
}

/// Decoder mean and log-variance for a batch of latents `[n, d]`, each `[n, HW]`.
pub fn decode_batch(params: &VaeParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let dec = Bindings::frozen(&mut tape, &params.decoder);
    let xv = tape.constant(x.clone());
    let (mu, lv) = decode_on_tape(&mut tape, &params.config, &dec, xv)?;
    Ok((tape.value(mu).clone(), tape.value(lv).clone()))
}

/// Encoder mean and log-variance, each of shape `[d]`.
pub fn encode(y: &Tensor, params: &VaeParams) -> Result<(Tensor, Tensor)> {
    let n = params.config.n_pixels();
    let batch = flatten_batch(&[y], n)?;
    let (mu, lv) = encode_batch(params, &batch)?;
    let d = params.config.latent_dim;
    Ok((mu.reshape(vec![d])?, lv.reshape(vec![d])?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub x: Vec<f64>,
}

/// `x = mean + exp(logvar / 2) * noise`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Result<LatentSample> {
    if mu.len() != logvar.len() || mu.len() != noise.len() {
        return Err(Error::shape(
            "reparameterize",
            format!("{} / {} / {}", mu.len(), logvar.len(), noise.len()),
        ));
    }
    let x = mu
        .iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect::<Vec<f64>>();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("reparameterized latent is not finite"));
    }
    Ok(LatentSample { x })
}

/// Decoder mean and log-variance as `H x W` images.
pub fn decode(x: &LatentSample, params: &VaeParams) -> Result<(Tensor, Tensor)> {
    let c = &params.config;
    if x.x.len() != c.latent_dim {
        return Err(Error::shape(
            "decode",
            format!("latent of length {} for d={}", x.x.len(), c.latent_dim),
        ));
    }
    let (mu, lv) = decode_batch(params, &Tensor::matrix(1, c.latent_dim, x.x.clone())?)?;
    Ok((
        mu.reshape(vec![c.height, c.width])?,
        lv.reshape(vec![c.height, c.width])?,
    ))
}

/// Batch means of the three ELBO pieces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// `log p(y|x)`
    pub reconstruction_term: f64,
    /// `log p(x)`
    pub prior_term: f64,
    /// `-log q(x|y)`
    pub entropy_term: f64,
    pub total: f64,
}

struct ElboGraph {
    loss: Var,
    recon: Var,
    prior: Var,
    entropy: Var,
}

fn elbo_graph(
    tape: &mut Tape,
    config: &VaeConfig,
    enc: &Bindings,
    dec: &Bindings,
    y: Var,
    noise: Var,
) -> Result<ElboGraph> {
    let (mu_en, lv_en) = encode_on_tape(tape, config, enc, y)?;
    let x = reparameterize_on_tape(tape, mu_en, lv_en, noise)?;
    let (mu_de, lv_de) = decode_on_tape(tape, config, dec, x)?;

    let recon_rows = diagonal_gaussian_log_density(tape, y, mu_de, lv_de)?;
    let prior_rows = standard_normal_log_density(tape, x)?;
    // log q(x|y) at x = mean + sd * noise reduces to the noise density
    // shifted by the log-determinant of the diagonal scaling
    let d = config.latent_dim as f64;
    let eps_sq = tape.square(noise)?;
    let ent_terms = tape.add(eps_sq, lv_en)?;
    let ent_rows = tape.sum_cols(ent_terms)?;
    let ent_rows = tape.scale(ent_rows, 0.5)?;
    let ent_rows = tape.offset(ent_rows, d * HALF_LN_2PI)?;

    let recon = tape.mean(recon_rows)?;
    let prior = tape.mean(prior_rows)?;
    let entropy = tape.mean(ent_rows)?;
    let elbo = tape.add(recon, prior)?;
    let elbo = tape.add(elbo, entropy)?;
    let loss = tape.scale(elbo, -1.0)?;
    Ok(ElboGraph {
        loss,
        recon,
        prior,
        entropy,
    })
}

/// Loss `-mean ELBO`, its breakdown, and gradients for encoder and decoder,
/// using the given standard normal noise `[n, d]`.
pub fn elbo_with_gradients(
    batch: &[&Tensor],
    params: &VaeParams,
    noise: &Tensor,
) -> Result<(f64, ElboBreakdown, ParamStore, ParamStore)> {
    let c = &params.config;
    let y = flatten_batch(batch, c.n_pixels())?;
    if noise.shape() != [batch.len(), c.latent_dim] {
        return Err(Error::shape(
            "elbo",
            format!(
                "noise {:?} for batch {} and d={}",
                noise.shape(),
                batch.len(),
                c.latent_dim
            ),
        ));
    }
    let mut tape = Tape::new();
    let enc = Bindings::trainable(&mut tape, &params.encoder);
    let dec = Bindings::trainable(&mut tape, &params.decoder);
    let yv = tape.constant(y);
    let nv = tape.constant(noise.clone());
    let g = elbo_graph(&mut tape, c, &enc, &dec, yv, nv)?;
    let bd = breakdown(&tape, &g)?;
    let grads = tape.backward(g.loss)?;
    let ge = enc.collect(&tape, &grads, &params.encoder)?;
    let gd = dec.collect(&tape, &grads, &params.decoder)?;
    Ok((-bd.total, bd, ge, gd))
}

fn breakdown(tape: &Tape, g: &ElboGraph) -> Result<ElboBreakdown> {
    let reconstruction_term = tape.value(g.recon).item()?;
    let prior_term = tape.value(g.prior).item()?;
    let entropy_term = tape.value(g.entropy).item()?;
    Ok(ElboBreakdown {
        reconstruction_term,
        prior_term,
        entropy_term,
        total: reconstruction_term + prior_term + entropy_term,
    })
}

/// Loss and breakdown for explicit noise, without gradients.
pub fn elbo_with_noise(
    batch: &[&Tensor],
    params: &VaeParams,
    noise: &Tensor,
) -> Result<(f64, ElboBreakdown)> {
    let c = &params.config;
    let y = flatten_batch(batch, c.n_pixels())?;
    let mut tape = Tape::new();
    let enc = Bindings::frozen(&mut tape, &params.encoder);
    let dec = Bindings::frozen(&mut tape, &params.decoder);
    let yv = tape.constant(y);
    let nv = tape.constant(noise.clone());
    let g = elbo_graph(&mut tape, c, &enc, &dec, yv, nv)?;
    let bd = breakdown(&tape, &g)?;
    Ok((-bd.total, bd))
}

/// Single-draw ELBO estimate with noise drawn from `rng`.
pub fn elbo_batch<R: Rng>(
    batch: &[&Tensor],
    params: &VaeParams,
    rng: &mut R,
) -> Result<(f64, ElboBreakdown)> {
    let d = params.config.latent_dim;
    let noise = Tensor::matrix(batch.len(), d, standard_normals(rng, batch.len() * d))?;
    elbo_with_noise(batch, params, &noise)
}

/// Mini-batch Adam on `-ELBO` from [`VaeParams::init_for_data`]. Batches are
/// fixed after one seeded shuffle; noise is redrawn at every step. Returns
/// last-epoch parameters.
pub fn train_vae(
    dataset: &[&Tensor],
    vae: VaeConfig,
    cfg: &TrainConfig,
) -> Result<(VaeParams, TrainingCurve)> {
    if dataset.is_empty() {
        return Err(Error::invalid("VAE training needs a non-empty dataset"));
    }
    let mut params = VaeParams::init_for_data(vae, cfg.seed, dataset)?;
    let batches = fixed_batches(dataset.len(), cfg.batch_size, cfg.seed ^ 0x5eed);
    let mut noise_rng = rng_from_seed(cfg.seed.wrapping_add(1));
    let d = params.config.latent_dim;
    let mut st_enc = AdamState::new(cfg.learning_rate);
    let mut st_dec = AdamState::new(cfg.learning_rate);
    let mut curve = TrainingCurve::default();
    if cfg.epochs == 0 {
        return Ok((params, curve));
    }

    // loss of the initial parameters, with its own noise stream
    let mut eval_rng = rng_from_seed(cfg.seed.wrapping_add(2));
    let mut init_loss = 0.0;
    for b in &batches {
        let ys: Vec<&Tensor> = b.iter().map(|&i| dataset[i]).collect();
        init_loss += elbo_batch(&ys, &params, &mut eval_rng)?.0 * b.len() as f64;
    }
    curve.epoch_losses.push(init_loss / dataset.len() as f64);

    for epoch in 1..=cfg.epochs {
        let mut acc = 0.0;
        for (bi, b) in batches.iter().enumerate() {
            let ys: Vec<&Tensor> = b.iter().map(|&i| dataset[i]).collect();
            let noise = Tensor::matrix(b.len(), d, standard_normals(&mut noise_rng, b.len() * d))?;
            let step = elbo_with_gradients(&ys, &params, &noise);
            let (loss, _, ge, gd) = match step {
                Ok(v) if v.0.is_finite() => v,
                _ => {
                    return Err(Error::Diverged {
                        stage: "vae",
                        epoch,
                        batch: bi,
                        last_finite: Box::new(params.combined()),
                    })
                }
            };
            adam_step(&mut params.encoder, &ge, &mut st_enc)?;
            adam_step(&mut params.decoder, &gd, &mut st_dec)?;
            acc += loss * b.len() as f64;
        }
        curve.epoch_losses.push(acc / dataset.len() as f64);
    }
    Ok((params, curve))
}

/// `n` decoder means at `x ~ N(0, I)`, each `H x W`.
pub fn sample_prior<R: Rng>(params: &VaeParams, n: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = &params.config;
    let x = Tensor::matrix(n, c.latent_dim, standard_normals(rng, n * c.latent_dim))?;
    let (mu, _) = decode_batch(params, &x)?;
    Ok((0..n)
        .map(|i| Tensor::from_parts(vec![c.height, c.width], mu.row(i).to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeParams {
        VaeParams::init(
            VaeConfig {
                latent_dim: 2,
                height: 3,
                width: 3,
                encoder_hidden: vec![5],
                decoder_hidden: vec![4],
            },
            3,
        )
        .unwrap()
    }

    fn field(seed: usize) -> Tensor {
        Tensor::new(
            vec![3, 3],
            (0..9)
                .map(|p| ((p * 7 + seed) % 5) as f64 * 0.3 - 0.4)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let p = tiny();
        let y = field(1);
        let (mu, lv) = encode(&y, &p).unwrap();
        assert_eq!(mu.shape(), &[2]);
        assert_eq!(lv.shape(), &[2]);
        assert_eq!((mu.clone(), lv.clone()), encode(&y, &p).unwrap());
        let x = LatentSample { x: vec![0.3, -0.2] };
        let (m, l) = decode(&x, &p).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        assert_eq!(l.shape(), &[3, 3]);
        assert_eq!((m, l), decode(&x, &p).unwrap());
    }

    #[test]
    fn reparameterize_cases() {
        assert_eq!(
            reparameterize(&[1.0, 2.0], &[0.3, -1.0], &[0.0, 0.0])
                .unwrap()
                .x,
            vec![1.0, 2.0]
        );
        assert_eq!(
            reparameterize(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 0.0])
                .unwrap()
                .x,
            vec![2.0, 2.0]
        );
        assert!(reparameterize(&[1.0], &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn logvar_outputs_respect_clamp() {
        let mut p = tiny();
        for (_, t) in p.decoder.iter_mut() {
            for v in t.data_mut() {
                *v *= 500.0;
            }
        }
        let (_, lv) = decode(&LatentSample { x: vec![3.0, -3.0] }, &p).unwrap();
        assert!(lv.data().iter().all(|v| v.abs() <= LOGVAR_BOUND));
    }

    #[test]
    fn planted_networks_give_closed_form_elbo() {
        let mut p = tiny();
        let y = field(2);
        for (_, t) in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        // decoder output bias: mean block = y, log-variance block = 0
        let last = p.config.decoder().bias_name(1);
        p.decoder.get_mut(&last).unwrap().data_mut()[..9].copy_from_slice(y.data());
        let (loss, bd) = elbo_with_noise(&[&y], &p, &Tensor::zeros(&[1, 2])).unwrap();
        assert!((bd.reconstruction_term + 9.0 * HALF_LN_2PI).abs() < 1e-12);
        assert!((bd.prior_term + bd.entropy_term).abs() < 1e-12);
        assert_eq!(
            bd.total,
            bd.reconstruction_term + bd.prior_term + bd.entropy_term
        );
        assert_eq!(loss, -bd.total);
    }

    #[test]
    fn duplicated_batch_equals_single() {
        let p = tiny();
        let y = field(4);
        let e = Tensor::matrix(1, 2, vec![0.4, -1.1]).unwrap();
        let e2 = Tensor::matrix(2, 2, vec![0.4, -1.1, 0.4, -1.1]).unwrap();
        let (a, _) = elbo_with_noise(&[&y], &p, &e).unwrap();
        let (b, _) = elbo_with_noise(&[&y, &y], &p, &e2).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let y = field(0);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 3,
        };
        let (p, curve) = train_vae(&[&y], tiny().config, &cfg).unwrap();
        assert_eq!(
            p,
            VaeParams::init_for_data(tiny().config, 3, &[&y]).unwrap()
        );
        assert!(curve.epoch_losses.is_empty());
        assert!(train_vae(&[], tiny().config, &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny();
        let meta = VaeCheckpointMeta {
            d: 2,
            h: 3,
            w: 3,
            encoder_hidden: vec![5],
            decoder_hidden: vec![4],
            epochs: 0,
            seed: 3,
            final_loss: 0.0,
            config_hash: String::new(),
        };
        p.save(dir.path(), &meta).unwrap();
        let (back, m) = VaeParams::load(dir.path()).unwrap();
        assert_eq!(back.combined().to_bytes(), p.combined().to_bytes());
        assert_eq!(m, meta);
    }

    #[test]
    fn sample_prior_counts() {
        let p = tiny();
        assert!(sample_prior(&p, 0, &mut rng_from_seed(1))
            .unwrap()
            .is_empty());
        let a = sample_prior(&p, 3, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, sample_prior(&p, 3, &mut rng_from_seed(1)).unwrap());
        assert_eq!(a[0].shape(), &[3, 3]);
    }
}
