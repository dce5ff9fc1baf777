//! KRnet: affine coupling layers with a progressive deactivation schedule.
//!
//! The latent vector is split into `K` equal groups. Stage `t` (of `K - 1`)
//! applies `L` coupling layers to the first `d - t*g` coordinates and then
//! freezes the last active group, which passes through every later layer
//! unchanged.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::darcy::HALF_LN_2PI;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::random::rng_from_seed;
use crate::tensor::{ParamStore, Tensor};
use crate::vae::standard_normal_log_density;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    #[serde(rename = "d")]
    pub dim: usize,
    #[serde(rename = "K")]
    pub n_groups: usize,
    #[serde(rename = "L", default = "default_layers")]
    pub layers_per_stage: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_depth")]
    pub hidden_depth: usize,
    #[serde(default = "default_bound")]
    pub scale_bound: f64,
}

fn default_layers() -> usize {
    8
}
fn default_width() -> usize {
    48
}
fn default_depth() -> usize {
    2
}
fn default_bound() -> f64 {
    2.0
}

impl FlowConfig {
    /// Default widths with `L = 8`.
    pub fn new(dim: usize, n_groups: usize) -> Result<Self> {
        let c = Self {
            dim,
            n_groups,
            layers_per_stage: default_layers(),
            hidden_width: default_width(),
            hidden_depth: default_depth(),
            scale_bound: default_bound(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 2 || self.dim == 0 || self.dim % self.n_groups != 0 {
            return Err(Error::invalid(format!(
                "flow needs K >= 2 equal groups, got d={} and K={}",
                self.dim, self.n_groups
            )));
        }
        if self.layers_per_stage == 0 || self.hidden_width == 0 {
            return Err(Error::invalid(
                "flow needs L >= 1 and a positive hidden width",
            ));
        }
        if !(self.scale_bound > 0.0 && self.scale_bound.is_finite()) {
            return Err(Error::invalid(format!(
                "scale bound must be positive, got {}",
                self.scale_bound
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.dim / self.n_groups
    }

    /// Active coordinate count of each stage.
    pub fn stage_schedule(&self) -> Vec<usize> {
        (0..self.n_groups - 1)
            .map(|t| self.dim - t * self.group_size())
            .collect()
    }

    /// All coupling layers in application order.
    pub fn layers(&self) -> Vec<CouplingLayer> {
        let mut out = Vec::new();
        for (stage, &active) in self.stage_schedule().iter().enumerate() {
            for layer in 0..self.layers_per_stage {
                let parity = layer % 2;
                let kept: Vec<usize> = (0..active).filter(|i| i % 2 == parity).collect();
                let transformed: Vec<usize> = (0..active).filter(|i| i % 2 != parity).collect();
                let mut sizes = vec![kept.len()];
                sizes.extend(std::iter::repeat_n(self.hidden_width, self.hidden_depth));
                sizes.push(2 * transformed.len());
                out.push(CouplingLayer {
                    stage,
                    active,
                    net: Mlp::new(format!("s{stage}.l{layer}."), sizes, Activation::Relu),
                    kept,
                    transformed,
                    scale_bound: self.scale_bound,
                });
            }
        }
        out
    }

    /// Symbolic dependency mask: `mask[i][j]` is true when `z_i` can depend
    /// on `x_j`.
    pub fn dependency_mask(&self) -> Vec<Vec<bool>> {
        let d = self.dim;
        let mut deps: Vec<Vec<bool>> = (0..d).map(|i| (0..d).map(|j| i == j).collect()).collect();
        for layer in self.layers() {
            let mut from_kept = vec![false; d];
            for &k in &layer.kept {
                for j in 0..d {
                    from_kept[j] |= deps[k][j];
                }
            }
            for &t in &layer.transformed {
                for j in 0..d {
                    deps[t][j] |= from_kept[j];
                }
            }
        }
        deps
    }
}

/// One affine coupling layer acting on the first `active` coordinates.
/// `kept` and `transformed` index into that active block.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub stage: usize,
    pub active: usize,
    pub kept: Vec<usize>,
    pub transformed: Vec<usize>,
    pub net: Mlp,
    pub scale_bound: f64,
}

impl CouplingLayer {
    /// `(s, t)` for a batch of kept blocks, each `[n, transformed.len()]`,
    /// and the per-row sum of `s`.
    fn scale_shift(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        kept: Var,
    ) -> Result<(Var, Var, Var)> {
        let m = self.transformed.len();
        let out = self.net.forward(tape, params, kept)?;
        let raw = tape.slice_cols(out, 0, m)?;
        let shift = tape.slice_cols(out, m, 2 * m)?;
        let s = tape.tanh(raw)?;
        let s = tape.scale(s, self.scale_bound)?;
        let logdet = tape.sum_cols(s)?;
        Ok((s, shift, logdet))
    }

    /// Forward pass on `h: [n, width]` where only the first `active` columns
    /// take part. Returns the output and per-row logdet.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        h: Var,
    ) -> Result<(Var, Var)> {
        let width = tape.value(h).dims2()?.1;
        let kept = tape.gather_cols(h, &self.kept)?;
        let xt = tape.gather_cols(h, &self.transformed)?;
        let (s, shift, logdet) = self.scale_shift(tape, params, kept)?;
        let es = tape.exp(s)?;
        let zt = tape.mul(xt, es)?;
        let zt = tape.add(zt, shift)?;
        Ok((self.reassemble(tape, kept, zt, h, width)?, logdet))
    }

    /// Exact inverse. Also returns the forward logdet at the recovered point.
    pub fn inverse_on_tape(
        &self,
        tape: &mut Tape,
        params: &Bindings,
        h: Var,
    ) -> Result<(Var, Var)> {
        let width = tape.value(h).dims2()?.1;
        let kept = tape.gather_cols(h, &self.kept)?;
        let zt = tape.gather_cols(h, &self.transformed)?;
        let (s, shift, logdet) = self.scale_shift(tape, params, kept)?;
        let neg = tape.scale(s, -1.0)?;
        let ens = tape.exp(neg)?;
        let xt = tape.sub(zt, shift)?;
        let xt = tape.mul(xt, ens)?;
        Ok((self.reassemble(tape, kept, xt, h, width)?, logdet))
    }

    fn reassemble(
        &self,
        tape: &mut Tape,
        kept: Var,
        moved: Var,
        h: Var,
        width: usize,
    ) -> Result<Var> {
        let mut parts = vec![(kept, self.kept.clone()), (moved, self.transformed.clone())];
        if self.active < width {
            let rest: Vec<usize> = (self.active..width).collect();
            let frozen = tape.gather_cols(h, &rest)?;
            parts.push((frozen, rest));
        }
        tape.scatter_cols(&parts, width)
    }
}

/// Coupling-network parameters (α) for every layer in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub config: FlowConfig,
    pub store: ParamStore,
}

impl FlowParams {
    /// Random hidden layers with zero output layers, so the flow starts as
    /// the identity.
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        Self::init_with_gain(config, seed, 0.0)
    }

    /// Like [`FlowParams::init`] but with the output layers scaled by `gain`
    /// instead of zeroed. Used to build non-trivial flows for testing.
    pub fn init_with_gain(config: FlowConfig, seed: u64, gain: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new(seed);
        for layer in config.layers() {
            layer.net.init(&mut store, &mut rng, gain)?;
        }
        Ok(Self { config, store })
    }

    /// Parameters of all zeros: the identity map.
    pub fn zeros(config: FlowConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        p.store = p.store.zeros_like();
        Ok(p)
    }

    /// Active-coordinate counts per stage.
    pub fn stage_schedule(&self) -> Vec<usize> {
        self.config.stage_schedule()
    }

    pub fn save(&self, dir: &Path, meta: &FlowCheckpointMeta) -> Result<()> {
        self.store.save(&dir.join("flow.krfl"))?;
        std::fs::write(
            dir.join("flow.json"),
            serde_json::to_string_pretty(meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, FlowCheckpointMeta)> {
        let meta: FlowCheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("flow.json"))?)?;
        let mut store = ParamStore::load(&dir.join("flow.krfl"))?;
        store.rng_seed = meta.seed;
        let expected = Self::init(meta.config.clone(), meta.seed)?;
        for (k, v) in expected.store.iter() {
            match store.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "flow checkpoint lacks `{k}` with shape {:?}",
                        v.shape()
                    )))
                }
            }
        }
        if store.len() != expected.store.len() {
            return Err(Error::Format(
                "flow checkpoint has unexpected entries".into(),
            ));
        }
        Ok((
            Self {
                config: meta.config.clone(),
                store,
            },
            meta,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckpointMeta {
    #[serde(flatten)]
    pub config: FlowConfig,
    pub seed: u64,
}

/// Forward map on a batch `[n, d]`: `(z, logdet [n])`.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &FlowConfig,
    params: &Bindings,
    x: Var,
) -> Result<(Var, Var)> {
    check_width(tape, config, x)?;
    let mut h = x;
    let mut total: Option<Var> = None;
    for layer in config.layers() {
        let (next, ld) = layer.forward_on_tape(tape, params, h)?;
        h = next;
        total = Some(match total {
            None => ld,
            Some(t) => tape.add(t, ld)?,
        });
    }
    Ok((h, total.expect("at least one layer")))
}

/// Inverse map on a batch `[n, d]`: `(x, logdet of the forward map at x)`.
pub fn inverse_on_tape(
    tape: &mut Tape,
    config: &FlowConfig,
    params: &Bindings,
    z: Var,
) -> Result<(Var, Var)> {
    check_width(tape, config, z)?;
    let mut h = z;
    let mut total: Option<Var> = None;
    for layer in config.layers().iter().rev() {
        let (next, ld) = layer.inverse_on_tape(tape, params, h)?;
        h = next;
        total = Some(match total {
            None => ld,
            Some(t) => tape.add(t, ld)?,
        });
    }
    Ok((h, total.expect("at least one layer")))
}

/// `log q(x)` for a batch via the forward map, `[n]`.
pub fn log_density_on_tape(
    tape: &mut Tape,
    config: &FlowConfig,
    params: &Bindings,
    x: Var,
) -> Result<Var> {
    let (z, logdet) = forward_on_tape(tape, config, params, x)?;
    let base = standard_normal_log_density(tape, z)?;
    tape.add(base, logdet)
}

fn check_width(tape: &Tape, config: &FlowConfig, v: Var) -> Result<()> {
    let (_, w) = tape.value(v).dims2()?;
    if w != config.dim {
        return Err(Error::shape(
            "krnet",
            format!("input width {w} for a flow of dimension {}", config.dim),
        ));
    }
    Ok(())
}

fn as_batch(x: &[f64], d: usize) -> Result<Tensor> {
    if x.len() != d {
        return Err(Error::shape(
            "krnet",
            format!("vector of length {} for dimension {d}", x.len()),
        ));
    }
    Tensor::matrix(1, d, x.to_vec())
}

/// Batched forward map: `z [n, d]` and per-row logdet.
pub fn krnet_forward_batch(x: &Tensor, params: &FlowParams) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &params.store);
    let xv = tape.constant(x.clone());
    let (z, ld) = forward_on_tape(&mut tape, &params.config, &b, xv)?;
    Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
}

/// Batched inverse map.
pub fn krnet_inverse_batch(z: &Tensor, params: &FlowParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &params.store);
    let zv = tape.constant(z.clone());
    let (x, _) = inverse_on_tape(&mut tape, &params.config, &b, zv)?;
    Ok(tape.value(x).clone())
}

pub fn krnet_forward(x: &[f64], params: &FlowParams) -> Result<(Vec<f64>, f64)> {
    let (z, ld) = krnet_forward_batch(&as_batch(x, params.config.dim)?, params)?;
    Ok((z.into_data(), ld[0]))
}

pub fn krnet_inverse(z: &[f64], params: &FlowParams) -> Result<Vec<f64>> {
    Ok(krnet_inverse_batch(&as_batch(z, params.config.dim)?, params)?.into_data())
}

/// Forward map with the logdet of every layer, in application order.
pub fn krnet_forward_layers(x: &[f64], params: &FlowParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &params.store);
    let mut h = tape.constant(as_batch(x, params.config.dim)?);
    let mut lds = Vec::new();
    for layer in params.config.layers() {
        let (next, ld) = layer.forward_on_tape(&mut tape, &b, h)?;
        h = next;
        lds.push(tape.value(ld).data()[0]);
    }
    Ok((tape.value(h).data().to_vec(), lds))
}

/// Applies a single coupling layer to an active block.
pub fn coupling_forward(
    x_active: &[f64],
    params: &ParamStore,
    layer: &CouplingLayer,
) -> Result<(Vec<f64>, f64)> {
    coupling_apply(x_active, params, layer, true)
}

pub fn coupling_inverse(
    z_active: &[f64],
    params: &ParamStore,
    layer: &CouplingLayer,
) -> Result<Vec<f64>> {
    Ok(coupling_apply(z_active, params, layer, false)?.0)
}

fn coupling_apply(
    v: &[f64],
    params: &ParamStore,
    layer: &CouplingLayer,
    forward: bool,
) -> Result<(Vec<f64>, f64)> {
    if v.len() != layer.active {
        return Err(Error::shape(
            "coupling",
            format!(
                "block of length {} for {} active coordinates",
                v.len(),
                layer.active
            ),
        ));
    }
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, params);
    let h = tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
    let (out, ld) = if forward {
        layer.forward_on_tape(&mut tape, &b, h)?
    } else {
        layer.inverse_on_tape(&mut tape, &b, h)?
    };
    Ok((tape.value(out).data().to_vec(), tape.value(ld).data()[0]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDensity {
    pub value: f64,
}

/// `log N(f(x); 0, I) + log|det ∇f(x)|`.
pub fn log_density(x: &[f64], params: &FlowParams) -> Result<LogDensity> {
    Ok(LogDensity {
        value: log_density_batch(&as_batch(x, params.config.dim)?, params)?[0],
    })
}

pub fn log_density_batch(x: &Tensor, params: &FlowParams) -> Result<Vec<f64>> {
    let (z, ld) = krnet_forward_batch(x, params)?;
    let d = params.config.dim;
    Ok((0..ld.len())
        .map(|i| {
            let q: f64 = z.row(i).iter().map(|v| v * v).sum();
            -0.5 * q - d as f64 * HALF_LN_2PI + ld[i]
        })
        .collect())
}
