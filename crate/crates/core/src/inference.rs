//! Latent-space posterior approximation: reverse-KL training of the flow,
//! posterior moments, the pCN-MCMC baseline, and the relative error metric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::darcy::{ObservationSet, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::flow::{inverse_on_tape, krnet_inverse_batch, FlowConfig, FlowParams};
use crate::optim::{adam_step, AdamState};
use crate::random::{derive_seed, rng_from_seed, standard_normals, StreamRng};
use crate::surrogate::{pressure_on_tape, relative_l2, SurrogateParams};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{fixed_batches, TrainingCurve};
use crate::vae::{decode_batch, decode_on_tape, standard_normal_log_density, VaeParams};

/// How the field `y` is produced from a latent `x` inside the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSampling {
    /// `y = μ_de(x)`.
    #[default]
    Mean,
    /// `y = μ_de(x) + σ_de(x) ⊙ ζ` with one fresh `ζ ~ N(0, I)` per latent.
    Sampled,
}

/// Frozen components shared by the flow loss and the MCMC likelihood.
pub struct InverseProblem<'a> {
    pub decoder: &'a VaeParams,
    pub surrogate: &'a SurrogateParams,
    pub observations: &'a ObservationSet,
    obs_matrix: Tensor,
    neg_data: Tensor,
    inv_sigma: Tensor,
    log_norm: f64,
}

impl<'a> InverseProblem<'a> {
    pub fn new(
        decoder: &'a VaeParams,
        surrogate: &'a SurrogateParams,
        observations: &'a ObservationSet,
    ) -> Result<Self> {
        let dc = &decoder.config;
        let sc = &surrogate.config;
        if (dc.height, dc.width) != (sc.height, sc.width) {
            return Err(Error::invalid(format!(
                "decoder produces {}x{} fields but the surrogate expects {}x{}",
                dc.height, dc.width, sc.height, sc.width
            )));
        }
        let grid = sc.grid()?;
        let m = observations.len();
        let sig = &observations.noise.per_sensor_std;
        Ok(Self {
            decoder,
            surrogate,
            observations,
            obs_matrix: observations.operator.matrix(&grid),
            neg_data: Tensor::vector(observations.values.iter().map(|v| -v).collect())?,
            inv_sigma: Tensor::vector(sig.iter().map(|s| 1.0 / s).collect())?,
            log_norm: -sig.iter().map(|s| s.ln()).sum::<f64>() - m as f64 * HALF_LN_2PI,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.config.latent_dim
    }

    /// Row-wise `log π(D_obs | y)` for predicted fields `y: [n, HW]`.
    fn log_likelihood_on_tape(&self, tape: &mut Tape, sur: &Bindings, y: Var) -> Result<Var> {
        let u = pressure_on_tape(tape, &self.surrogate.config, sur, y)?;
        let h = tape.constant(self.obs_matrix.clone());
        let pred = tape.matmul(u, h)?;
        let neg = tape.constant(self.neg_data.clone());
        let inv = tape.constant(self.inv_sigma.clone());
        let r = tape.add_row(pred, neg)?;
        let r = tape.mul_row(r, inv)?;
        let r = tape.square(r)?;
        let s = tape.sum_cols(r)?;
        let s = tape.scale(s, -0.5)?;
        tape.offset(s, self.log_norm)
    }

    /// `log π(D_obs | μ_de(x))` for each row of `x: [n, d]`.
    pub fn latent_log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let dec = Bindings::frozen(&mut tape, &self.decoder.decoder);
        let sur = Bindings::frozen(&mut tape, &self.surrogate.store);
        let xv = tape.constant(x.clone());
        let (mu, _) = decode_on_tape(&mut tape, &self.decoder.config, &dec, xv)?;
        let ll = self.log_likelihood_on_tape(&mut tape, &sur, mu)?;
        Ok(tape.value(ll).data().to_vec())
    }
}

/// Batch means of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrnetLossBreakdown {
    /// mean `log q(x_i)`
    pub flow_entropy_term: f64,
    /// `-mean log π(D_obs | y_i)`
    pub neg_log_likelihood_term: f64,
    /// `-mean log N(x_i; 0, I)`
    pub neg_log_prior_term: f64,
    pub total: f64,
}

struct LossGraph {
    total: Var,
    entropy: Var,
    nll: Var,
    nlp: Var,
}

fn loss_graph(
    tape: &mut Tape,
    flow_config: &FlowConfig,
    flow: &Bindings,
    problem: &InverseProblem,
    z: &Tensor,
    zeta: Option<&Tensor>,
) -> Result<LossGraph> {
    let dec = Bindings::frozen(tape, &problem.decoder.decoder);
    let sur = Bindings::frozen(tape, &problem.surrogate.store);
    let zv = tape.constant(z.clone());
    let (x, logdet) = inverse_on_tape(tape, flow_config, flow, zv)?;
    let log_base = standard_normal_log_density(tape, zv)?;
    let log_q = tape.add(log_base, logdet)?;
    let log_prior = standard_normal_log_density(tape, x)?;

    let (mu, lv) = decode_on_tape(tape, &problem.decoder.config, &dec, x)?;
    let y = match zeta {
        None => mu,
        Some(noise) => {
            let nv = tape.constant(noise.clone());
            crate::vae::reparameterize_on_tape(tape, mu, lv, nv)?
        }
    };
    let ll = problem.log_likelihood_on_tape(tape, &sur, y)?;

    let entropy = tape.mean(log_q)?;
    let nll = tape.mean(ll)?;
    let nll = tape.scale(nll, -1.0)?;
    let nlp = tape.mean(log_prior)?;
    let nlp = tape.scale(nlp, -1.0)?;
    let total = tape.add(entropy, nll)?;
    let total = tape.add(total, nlp)?;
    Ok(LossGraph {
        total,
        entropy,
        nll,
        nlp,
    })
}

fn breakdown(tape: &Tape, g: &LossGraph) -> Result<KrnetLossBreakdown> {
    let flow_entropy_term = tape.value(g.entropy).item()?;
    let neg_log_likelihood_term = tape.value(g.nll).item()?;
    let neg_log_prior_term = tape.value(g.nlp).item()?;
    Ok(KrnetLossBreakdown {
        flow_entropy_term,
        neg_log_likelihood_term,
        neg_log_prior_term,
        total: flow_entropy_term + neg_log_likelihood_term + neg_log_prior_term,
    })
}

fn check_batch(
    z: &Tensor,
    zeta: Option<&Tensor>,
    flow: &FlowParams,
    problem: &InverseProblem,
) -> Result<()> {
    let (n, d) = z.dims2()?;
    if d != flow.config.dim || d != problem.latent_dim() {
        return Err(Error::shape(
            "drknet_loss",
            format!(
                "latent batch width {d}, flow dimension {}, decoder dimension {}",
                flow.config.dim,
                problem.latent_dim()
            ),
        ));
    }
    if let Some(e) = zeta {
        let hw = problem.decoder.config.n_pixels();
        if e.shape() != [n, hw] {
            return Err(Error::shape(
                "drknet_loss",
                format!("decoder noise {:?}, expected [{n}, {hw}]", e.shape()),
            ));
        }
    }
    Ok(())
}

/// Reverse-KL loss `mean log q(x) - mean log π(D|y) - mean log p(x)` with
/// `x = f⁻¹(z)`. `zeta` selects the sampled decoder mode.
pub fn drknet_loss(
    z: &Tensor,
    flow: &FlowParams,
    problem: &InverseProblem,
    zeta: Option<&Tensor>,
) -> Result<(f64, KrnetLossBreakdown)> {
    check_batch(z, zeta, flow, problem)?;
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &flow.store);
    let g = loss_graph(&mut tape, &flow.config, &b, problem, z, zeta)?;
    let bd = breakdown(&tape, &g)?;
    Ok((bd.total, bd))
}

/// Loss, breakdown, and gradients with respect to the flow parameters only.
pub fn drknet_loss_with_gradients(
    z: &Tensor,
    flow: &FlowParams,
    problem: &InverseProblem,
    zeta: Option<&Tensor>,
) -> Result<(f64, KrnetLossBreakdown, ParamStore)> {
    check_batch(z, zeta, flow, problem)?;
    let mut tape = Tape::new();
    let b = Bindings::trainable(&mut tape, &flow.store);
    let g = loss_graph(&mut tape, &flow.config, &b, problem, z, zeta)?;
    let bd = breakdown(&tape, &g)?;
    let grads = tape.backward(g.total)?;
    Ok((bd.total, bd, b.collect(&tape, &grads, &flow.store)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Size `I` of the fixed base-sample set.
    pub n_train: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub sampling: DecoderSampling,
}

/// Draws a fixed set `Z` of `I` base samples, then runs mini-batch Adam on
/// the flow parameters. Returns last-epoch parameters.
pub fn train_drknet(
    flow_config: FlowConfig,
    problem: &InverseProblem,
    cfg: &InferenceConfig,
) -> Result<(FlowParams, TrainingCurve)> {
    let mut flow = FlowParams::init(flow_config, derive_seed(cfg.seed, 1))?;
    let mut curve = TrainingCurve::default();
    if cfg.epochs == 0 {
        return Ok((flow, curve));
    }
    if cfg.n_train == 0 {
        return Err(Error::invalid(
            "flow training needs a positive sample count",
        ));
    }
    let d = flow.config.dim;
    let hw = problem.decoder.config.n_pixels();
    let z_all = standard_normals(
        &mut rng_from_seed(derive_seed(cfg.seed, 0)),
        cfg.n_train * d,
    );
    let batches = fixed_batches(cfg.n_train, cfg.batch_size, derive_seed(cfg.seed, 2));
    let mut zeta_rng = rng_from_seed(derive_seed(cfg.seed, 3));
    let take = |b: &[usize]| -> Result<Tensor> {
        let mut v = Vec::with_capacity(b.len() * d);
        for &i in b {
            v.extend_from_slice(&z_all[i * d..(i + 1) * d]);
        }
        Tensor::matrix(b.len(), d, v)
    };
    let mut draw_zeta = |n: usize| -> Result<Option<Tensor>> {
        match cfg.sampling {
            DecoderSampling::Mean => Ok(None),
            DecoderSampling::Sampled => Ok(Some(Tensor::matrix(
                n,
                hw,
                standard_normals(&mut zeta_rng, n * hw),
            )?)),
        }
    };

    let mut init = 0.0;
    for b in &batches {
        let zeta = draw_zeta(b.len())?;
        init += drknet_loss(&take(b)?, &flow, problem, zeta.as_ref())?.0 * b.len() as f64;
    }
    curve.epoch_losses.push(init / cfg.n_train as f64);

    let mut state = AdamState::new(cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        let mut acc = 0.0;
        for (bi, b) in batches.iter().enumerate() {
            let zeta = draw_zeta(b.len())?;
            let (loss, _, grads) =
                match drknet_loss_with_gradients(&take(b)?, &flow, problem, zeta.as_ref()) {
                    Ok(v) if v.0.is_finite() => v,
                    _ => {
                        return Err(Error::Diverged {
                            stage: "krnet",
                            epoch,
                            batch: bi,
                            last_finite: Box::new(flow.store.clone()),
                        })
                    }
                };
            adam_step(&mut flow.store, &grads, &mut state)?;
            acc += loss * b.len() as f64;
        }
        curve.epoch_losses.push(acc / cfg.n_train as f64);
    }
    Ok((flow, curve))
}

/// Posterior field moments from latent samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments {
    /// Mean of `μ_de(x⁽ⁱ⁾)`.
    pub mean_field: Tensor,
    /// Mean of `σ_de²(x⁽ⁱ⁾)`.
    pub variance_field: Tensor,
    /// `variance_field` plus the sample variance of `μ_de(x⁽ⁱ⁾)`. Reported as
    /// a diagnostic only.
    pub total_variance_field: Tensor,
    pub n_samples: usize,
}

/// Moments from decoder outputs at the latent rows of `x: [N, d]`.
pub fn moments_from_latents(decoder: &VaeParams, x: &Tensor) -> Result<PosteriorMoments> {
    let (n, _) = x.dims2()?;
    if n == 0 {
        return Err(Error::invalid("posterior moments need at least one sample"));
    }
    let c = &decoder.config;
    let hw = c.n_pixels();
    let (mu, lv) = decode_batch(decoder, x)?;
    let mut mean = vec![0.0; hw];
    let mut var = vec![0.0; hw];
    for i in 0..n {
        for (p, (m, l)) in mu.row(i).iter().zip(lv.row(i)).enumerate() {
            mean[p] += m;
            var[p] += l.exp();
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    var.iter_mut().for_each(|v| *v /= n as f64);
    let mut spread = vec![0.0; hw];
    for i in 0..n {
        for (p, m) in mu.row(i).iter().enumerate() {
            spread[p] += (m - mean[p]) * (m - mean[p]);
        }
    }
    let total: Vec<f64> = var
        .iter()
        .zip(&spread)
        .map(|(v, s)| v + s / n as f64)
        .collect();
    let shape = vec![c.height, c.width];
    Ok(PosteriorMoments {
        mean_field: Tensor::new(shape.clone(), mean)?,
        variance_field: Tensor::new(shape.clone(), var)?,
        total_variance_field: Tensor::new(shape, total)?,
        n_samples: n,
    })
}

/// Pushes `N_s` base draws through the inverse flow and averages the decoder
/// outputs.
pub fn posterior_moments<R: Rng>(
    flow: &FlowParams,
    decoder: &VaeParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<PosteriorMoments> {
    let d = flow.config.dim;
    if n_samples == 0 {
        return Err(Error::invalid("posterior moments need at least one sample"));
    }
    let z = Tensor::matrix(n_samples, d, standard_normals(rng, n_samples * d))?;
    let x = krnet_inverse_batch(&z, flow)?;
    moments_from_latents(decoder, &x)
}

/// Mean decoder field under the latent prior `N(0, I)`.
pub fn prior_mean_field<R: Rng>(
    decoder: &VaeParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let d = decoder.config.latent_dim;
    let x = Tensor::matrix(n_samples, d, standard_normals(rng, n_samples * d))?;
    Ok(moments_from_latents(decoder, &x)?.mean_field)
}

/// `‖mean - exact‖₂ / ‖exact‖₂`.
pub fn relative_error(mean_field: &Tensor, exact_field: &Tensor) -> Result<f64> {
    if mean_field.shape() != exact_field.shape() {
        return Err(Error::shape(
            "relative_error",
            format!("{:?} vs {:?}", mean_field.shape(), exact_field.shape()),
        ));
    }
    relative_l2(mean_field, exact_field)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    /// Retained states, oldest first.
    pub states: Vec<Vec<f64>>,
    pub log_likelihoods: Vec<f64>,
    /// Accepted proposals over the whole run.
    pub accepted_count: usize,
    pub n_steps: usize,
    pub step_size: f64,
    /// State after the final step, for continuing the chain.
    pub last_state: Vec<f64>,
}

impl McmcChain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            self.accepted_count as f64 / self.n_steps as f64
        }
    }

    /// Retained states as an `[n, d]` matrix.
    pub fn states_matrix(&self) -> Result<Tensor> {
        let d = self.states.first().map_or(0, Vec::len);
        Tensor::matrix(self.states.len(), d, self.states.concat())
    }
}

/// Preconditioned Crank-Nicolson sampler with a `N(0, I)` reference measure.
/// The chain starts from a prior draw, proposes
/// `x' = sqrt(1 - β²) x + β ξ`, and keeps the last `keep` states.
pub fn pcn_mcmc<F>(
    log_like: F,
    d: usize,
    steps: usize,
    beta: f64,
    seed: u64,
    keep: usize,
) -> Result<McmcChain>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if d == 0 {
        return Err(Error::invalid("pCN needs a positive dimension"));
    }
    let mut rng = rng_from_seed(seed);
    let start = standard_normals(&mut rng, d);
    run_pcn(log_like, start, steps, beta, &mut rng, keep)
}

/// Like [`pcn_mcmc`] but starting from `start`.
pub fn pcn_mcmc_from<F>(
    log_like: F,
    start: &[f64],
    steps: usize,
    beta: f64,
    seed: u64,
    keep: usize,
) -> Result<McmcChain>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if start.is_empty() {
        return Err(Error::invalid("pCN needs a positive dimension"));
    }
    run_pcn(
        log_like,
        start.to_vec(),
        steps,
        beta,
        &mut rng_from_seed(seed),
        keep,
    )
}

fn run_pcn<F>(
    mut log_like: F,
    mut x: Vec<f64>,
    steps: usize,
    beta: f64,
    rng: &mut StreamRng,
    keep: usize,
) -> Result<McmcChain>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!(
            "pCN step size must lie in (0, 1], got {beta}"
        )));
    }
    if keep > steps {
        return Err(Error::invalid(format!(
            "cannot keep {keep} states from {steps} steps"
        )));
    }
    let d = x.len();
    let mut ll = log_like(&x)?;
    if !ll.is_finite() {
        return Err(Error::Numerical(format!("initial log-likelihood is {ll}")));
    }
    let c = (1.0 - beta * beta).sqrt();
    let mut accepted = 0;
    let mut states = Vec::with_capacity(keep);
    let mut lls = Vec::with_capacity(keep);
    for step in 0..steps {
        let xi = standard_normals(rng, d);
        let prop: Vec<f64> = x.iter().zip(&xi).map(|(a, e)| c * a + beta * e).collect();
        let ll_prop = log_like(&prop)?;
        let u: f64 = rng.random();
        if ll_prop.is_finite() && u.ln() < ll_prop - ll {
            x = prop;
            ll = ll_prop;
            accepted += 1;
        }
        if step >= steps - keep {
            states.push(x.clone());
            lls.push(ll);
        }
    }
    Ok(McmcChain {
        states,
        log_likelihoods: lls,
        accepted_count: accepted,
        n_steps: steps,
        step_size: beta,
        last_state: x,
    })
}

/// Target acceptance band for step tuning.
pub const PCN_TARGET: (f64, f64) = (0.20, 0.35);

/// Outcome of [`tune_pcn_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct PcnTuning {
    pub step_size: f64,
    /// `(step size, acceptance rate)` of every pilot, in order.
    pub pilots: Vec<(f64, f64)>,
    /// Where the last pilot ended; a warm start for the production chain.
    pub state: Vec<f64>,
}

/// Doubles or halves `beta` on pilot chains until the acceptance rate falls
/// in `PCN_TARGET`, bisecting in log space once the band is bracketed. Each
/// pilot continues from where the previous one stopped, so later pilots
/// measure acceptance near the posterior rather than during burn-in. After
/// `max_rounds` the pilot closest to the band centre wins.
pub fn tune_pcn_step<F>(
    mut log_like: F,
    d: usize,
    initial: f64,
    pilot_steps: usize,
    seed: u64,
    max_rounds: usize,
) -> Result<PcnTuning>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if d == 0 {
        return Err(Error::invalid("pCN needs a positive dimension"));
    }
    let mut beta = initial.clamp(f64::MIN_POSITIVE, 1.0);
    let mut pilots: Vec<(f64, f64)> = Vec::new();
    let mut state = standard_normals(&mut rng_from_seed(seed), d);
    let centre = 0.5 * (PCN_TARGET.0 + PCN_TARGET.1);
    for round in 0..max_rounds.max(1) {
        let chain = pcn_mcmc_from(
            &mut log_like,
            &state,
            pilot_steps,
            beta,
            derive_seed(seed, round as u64 + 1),
            0,
        )?;
        state = chain.last_state.clone();
        let rate = chain.acceptance_rate();
        pilots.push((beta, rate));
        if (PCN_TARGET.0..=PCN_TARGET.1).contains(&rate) {
            return Ok(PcnTuning {
                step_size: beta,
                pilots,
                state,
            });
        }
        let above = pilots
            .iter()
            .filter(|p| p.1 > PCN_TARGET.1)
            .map(|p| p.0)
            .fold(0.0, f64::max);
        let below = pilots
            .iter()
            .filter(|p| p.1 < PCN_TARGET.0)
            .map(|p| p.0)
            .fold(f64::INFINITY, f64::min);
        let next = if above > 0.0 && below.is_finite() && above < below {
            (above * below).sqrt()
        } else if rate > PCN_TARGET.1 {
            (beta * 2.0).min(1.0)
        } else {
            beta * 0.5
        };
        if next == beta || pilots.iter().any(|&(b, _)| b == next) {
            break;
        }
        beta = next;
    }
    let best = pilots
        .iter()
        .min_by(|a, b| (a.1 - centre).abs().total_cmp(&(b.1 - centre).abs()))
        .expect("at least one pilot");
    Ok(PcnTuning {
        step_size: best.0,
        pilots,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_likelihood_accepts_everything() {
        let chain = pcn_mcmc(|_| Ok(0.0), 3, 200, 0.3, 1, 50).unwrap();
        assert_eq!(chain.accepted_count, 200);
        assert_eq!(chain.acceptance_rate(), 1.0);
        assert_eq!(chain.states.len(), 50);
        assert_eq!(chain, pcn_mcmc(|_| Ok(0.0), 3, 200, 0.3, 1, 50).unwrap());
    }

    #[test]
    fn unit_step_draws_independent_proposals() {
        // with β = 1 the proposal ignores the current state, so the retained
        // states are exactly the proposal stream
        let chain = pcn_mcmc(|_| Ok(0.0), 2, 4, 1.0, 9, 4).unwrap();
        let mut rng = rng_from_seed(9);
        let _x0 = standard_normals(&mut rng, 2);
        for s in &chain.states {
            let xi = standard_normals(&mut rng, 2);
            let _u: f64 = rng.random();
            assert_eq!(s, &xi);
        }
    }

    #[test]
    fn pcn_argument_validation() {
        assert!(pcn_mcmc(|_| Ok(0.0), 1, 10, 0.0, 1, 1).is_err());
        assert!(pcn_mcmc(|_| Ok(0.0), 1, 10, 1.5, 1, 1).is_err());
        assert!(pcn_mcmc(|_| Ok(0.0), 1, 10, 0.5, 1, 11).is_err());
        assert!(pcn_mcmc(|_| Ok(f64::NAN), 1, 10, 0.5, 1, 1).is_err());
    }

    #[test]
    fn tuning_lands_in_band() {
        let ll = |x: &[f64]| Ok(-0.5 * x.iter().map(|v| (v - 1.0) * (v - 1.0) / 0.01).sum::<f64>());
        let t = tune_pcn_step(ll, 4, 1.0, 500, 3, 20).unwrap();
        let last = t.pilots.last().unwrap();
        assert_eq!(last.0, t.step_size);
        assert!(
            (PCN_TARGET.0..=PCN_TARGET.1).contains(&last.1),
            "{:?}",
            t.pilots
        );
        // warm start: the pilots have already moved the state near x = 1
        assert!(
            t.state.iter().all(|v| (v - 1.0).abs() < 0.5),
            "{:?}",
            t.state
        );
    }

    #[test]
    fn relative_error_identities() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(relative_error(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_error(&Tensor::zeros(&[2, 2]), &t).unwrap(), 1.0);
        assert!((relative_error(&t.map(|v| 2.0 * v), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_error(&Tensor::zeros(&[4]), &t).is_err());
    }
}
