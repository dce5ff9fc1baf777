//! Physics-constrained surrogate for the Darcy forward map.
//!
//! A dense network maps a log-permeability image `y` to pressure `u` and
//! flux `(τ1, τ2)`. Training uses no solved pressures: the loss penalizes the
//! discrete residuals of `div τ = h` and `τ = -exp(y) grad u`, with Sobel
//! stencils for every derivative, plus β-weighted boundary penalties.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tape, Var};
use crate::conv::{SOBEL_X, SOBEL_Y};
use crate::darcy::solve_darcy;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Activation, Mlp};
use crate::optim::{adam_step, AdamState};
use crate::random::rng_from_seed;
use crate::tensor::{ParamStore, Tensor};
use crate::training::{fixed_batches, TrainConfig, TrainingCurve};

pub const DEFAULT_BETA: f64 = 100.0;
pub const DEFAULT_SOURCE: f64 = 3.0;
/// `|y|` limit before `exp(-y)`. Far outside any prior sample, but keeps
/// inference finite when a flow proposes extreme latents.
pub const INPUT_CLAMP: f64 = 20.0;

/// How the last dense layer's outputs become images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputBasis {
    /// One output per pixel.
    Pixel,
    /// Outputs are coefficients of cosine modes, damped by frequency
    /// (`(1+λ)^-1` for `u`, `(1+λ)^-1/2` for the fluxes). The map is linear and
    /// invertible, so it spans the same images as `Pixel`, but gradient
    /// steps no longer stall on the smooth modes of the pressure.
    #[default]
    Cosine,
}

/// What the first dense layer sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeature {
    /// `y` itself.
    LogPermeability,
    /// `exp(-y)`. Pressure responds close to linearly to inverse
    /// permeability, which a ReLU network picks up much faster than `exp`.
    #[default]
    InversePermeability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub height: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub basis: OutputBasis,
    #[serde(default)]
    pub input: InputFeature,
}

impl SurrogateConfig {
    /// `HW -> 512 -> 512 -> 3HW` on `exp(-y)` with cosine outputs.
    pub fn dense(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            hidden: vec![512, 512],
            basis: OutputBasis::Cosine,
            input: InputFeature::InversePermeability,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.height, self.width)
    }

    pub fn network(&self) -> Mlp {
        let n = self.height * self.width;
        let mut sizes = vec![n];
        sizes.extend(&self.hidden);
        sizes.push(3 * n);
        Mlp::new("sur.", sizes, Activation::Relu)
    }
}

/// Network parameters (Θ).
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateParams {
    pub config: SurrogateConfig,
    pub store: ParamStore,
}

impl SurrogateParams {
    pub fn init(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.grid()?;
        let mut store = ParamStore::new(seed);
        config
            .network()
            .init(&mut store, &mut rng_from_seed(seed), 0.1)?;
        Ok(Self { config, store })
    }

    pub fn save(&self, dir: &Path, meta: &SurrogateCheckpointMeta) -> Result<()> {
        self.store.save(&dir.join("surrogate.krfl"))?;
        std::fs::write(
            dir.join("surrogate.json"),
            serde_json::to_string_pretty(meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, SurrogateCheckpointMeta)> {
        let meta: SurrogateCheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("surrogate.json"))?)?;
        let mut store = ParamStore::load(&dir.join("surrogate.krfl"))?;
        store.rng_seed = meta.seed;
        let config = SurrogateConfig {
            height: meta.h,
            width: meta.w,
            hidden: meta.hidden.clone(),
            basis: meta.basis,
            input: meta.input,
        };
        let net = config.network();
        for l in 0..net.n_layers() {
            let ok = store
                .get(&net.weight_name(l))
                .is_some_and(|w| w.shape() == [net.sizes[l], net.sizes[l + 1]]);
            if !ok {
                return Err(Error::Format(format!(
                    "surrogate checkpoint lacks a valid `{}`",
                    net.weight_name(l)
                )));
            }
        }
        Ok((Self { config, store }, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCheckpointMeta {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub basis: OutputBasis,
    #[serde(default)]
    pub input: InputFeature,
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
    #[serde(default)]
    pub config_hash: String,
}

/// Network outputs on the tape, each `[n, HW]`.
pub struct SurrogateOutputs {
    pub u: Var,
    pub tau1: Var,
    pub tau2: Var,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    config: &SurrogateConfig,
    params: &Bindings,
    y: Var,
) -> Result<SurrogateOutputs> {
    let n = config.height * config.width;
    let y = match config.input {
        InputFeature::LogPermeability => y,
        InputFeature::InversePermeability => {
            let neg = tape.clamp(y, -INPUT_CLAMP, INPUT_CLAMP)?;
            let neg = tape.scale(neg, -1.0)?;
            tape.exp(neg)?
        }
    };
    let out = config.network().forward(tape, params, y)?;
    let mut u = tape.slice_cols(out, 0, n)?;
    let mut tau1 = tape.slice_cols(out, n, 2 * n)?;
    let mut tau2 = tape.slice_cols(out, 2 * n, 3 * n)?;
    if config.basis == OutputBasis::Cosine {
        let b = tape.constant(cosine_basis(config.height, config.width, 1.0));
        u = tape.matmul(u, b)?;
        let b = tape.constant(cosine_basis(config.height, config.width, 0.5));
        tau1 = tape.matmul(tau1, b)?;
        tau2 = tape.matmul(tau2, b)?;
    }
    Ok(SurrogateOutputs { u, tau1, tau2 })
}

/// `[HW, HW]` matrix whose row `(q, p)` is the cosine mode
/// `cos(π p s1) cos(π q s2)` on the grid nodes, weighted by
/// `(1 + π²(p² + q²))^-power`.
pub fn cosine_basis(height: usize, width: usize, power: f64) -> Tensor {
    let n = height * width;
    let mut data = vec![0.0; n * n];
    let pi = std::f64::consts::PI;
    for q in 0..height {
        for p in 0..width {
            let norm =
                if p > 0 { 2f64.sqrt() } else { 1.0 } * if q > 0 { 2f64.sqrt() } else { 1.0 };
            let weight = norm * (1.0 + pi * pi * (p * p + q * q) as f64).powf(-power);
            let row = &mut data[(q * width + p) * n..(q * width + p + 1) * n];
            for i in 0..height {
                let cy = (pi * q as f64 * i as f64 / (height - 1) as f64).cos();
                for j in 0..width {
                    row[i * width + j] =
                        weight * cy * (pi * p as f64 * j as f64 / (width - 1) as f64).cos();
                }
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

/// Pressure prediction only, `[n, HW]`.
pub fn pressure_on_tape(
    tape: &mut Tape,
    config: &SurrogateConfig,
    params: &Bindings,
    y: Var,
) -> Result<Var> {
    Ok(forward_on_tape(tape, config, params, y)?.u)
}

fn check_field(y: &Tensor, config: &SurrogateConfig) -> Result<()> {
    if y.len() != config.height * config.width {
        return Err(Error::shape(
            "surrogate",
            format!(
                "field {:?} for a {}x{} surrogate",
                y.shape(),
                config.height,
                config.width
            ),
        ));
    }
    if !y.is_finite() {
        return Err(Error::invalid("surrogate input contains non-finite values"));
    }
    Ok(())
}

fn stack_fields(fields: &[&Tensor], config: &SurrogateConfig) -> Result<Tensor> {
    if fields.is_empty() {
        return Err(Error::invalid("surrogate needs a non-empty batch"));
    }
    let n = config.height * config.width;
    let mut data = Vec::with_capacity(fields.len() * n);
    for y in fields {
        check_field(y, config)?;
        data.extend_from_slice(y.data());
    }
    Tensor::matrix(fields.len(), n, data)
}

/// `(u, τ1, τ2)` as `H x W` images.
pub fn surrogate_forward(y: &Tensor, params: &SurrogateParams) -> Result<(Tensor, Tensor, Tensor)> {
    let c = &params.config;
    let batch = stack_fields(&[y], c)?;
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &params.store);
    let yv = tape.constant(batch);
    let o = forward_on_tape(&mut tape, c, &b, yv)?;
    let img = |v: Var| Tensor::from_parts(vec![c.height, c.width], tape.value(v).data().to_vec());
    Ok((img(o.u), img(o.tau1), img(o.tau2)))
}

/// Predicted pressures for a batch of fields.
pub fn predict_pressure(fields: &[&Tensor], params: &SurrogateParams) -> Result<Vec<Tensor>> {
    let c = &params.config;
    let batch = stack_fields(fields, c)?;
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &params.store);
    let yv = tape.constant(batch);
    let u = pressure_on_tape(&mut tape, c, &b, yv)?;
    let t = tape.value(u);
    Ok((0..fields.len())
        .map(|i| Tensor::from_parts(vec![c.height, c.width], t.row(i).to_vec()))
        .collect())
}

/// Sobel-x and Sobel-y kernels scaled so linear ramps give exact slopes.
fn derivative_kernels(grid: &Grid) -> ([f64; 9], [f64; 9]) {
    let kx = SOBEL_X.map(|k| k / (8.0 * grid.dx()));
    let ky = SOBEL_Y.map(|k| k / (8.0 * grid.dy()));
    (kx, ky)
}

/// `(∂f/∂s1, ∂f/∂s2)` of an `H x W` image by scaled Sobel stencils with
/// replicate padding. Exact in the interior for fields linear in `s`.
pub fn spatial_gradient(field: &Tensor, grid: &Grid) -> Result<(Tensor, Tensor)> {
    let (h, w) = field.dims2()?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::shape(
            "spatial_gradient",
            format!("{h}x{w} field on a {}x{} grid", grid.height, grid.width),
        ));
    }
    let (kx, ky) = derivative_kernels(grid);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    crate::autodiff::conv3x3_forward(field.data(), &kx, h, w, &mut gx);
    crate::autodiff::conv3x3_forward(field.data(), &ky, h, w, &mut gy);
    Ok((
        Tensor::from_parts(vec![h, w], gx),
        Tensor::from_parts(vec![h, w], gy),
    ))
}

/// Batch means of the residual terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBreakdown {
    pub interior_flux_div: f64,
    pub flux_consistency: f64,
    pub dirichlet: f64,
    pub neumann: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsLossConfig {
    pub beta: f64,
    pub source: f64,
    /// Also penalize `τ + exp(y) grad u` on the boundary ring. Without it the
    /// ring fluxes only enter through the divergence stencils of their
    /// neighbours and are otherwise unconstrained.
    #[serde(default)]
    pub flux_on_boundary: bool,
}

impl Default for PhysicsLossConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            source: DEFAULT_SOURCE,
            flux_on_boundary: false,
        }
    }
}

struct Regions {
    interior: Vec<usize>,
    dirichlet: Vec<usize>,
    neumann: Vec<usize>,
}

impl Regions {
    fn new(grid: &Grid) -> Self {
        let (h, w) = (grid.height, grid.width);
        let interior = (1..h - 1)
            .flat_map(|i| (1..w - 1).map(move |j| i * w + j))
            .collect();
        let dirichlet = (0..h).flat_map(|i| [i * w, i * w + w - 1]).collect();
        let neumann = (1..w - 1).flat_map(|j| [j, (h - 1) * w + j]).collect();
        Self {
            interior,
            dirichlet,
            neumann,
        }
    }
}

struct LossGraph {
    total: Var,
    div: Var,
    flux: Var,
    dir: Var,
    neu: Var,
}

/// Per-sample residuals are summed over their region; the interior sums are
/// divided by `HW`, the boundary sums by the number of boundary nodes.
fn loss_graph(
    tape: &mut Tape,
    outputs: &SurrogateOutputs,
    y: &Tensor,
    grid: &Grid,
    cfg: &PhysicsLossConfig,
) -> Result<LossGraph> {
    let (h, w) = (grid.height, grid.width);
    let regions = Regions::new(grid);
    let (kx, ky) = derivative_kernels(grid);
    let k = tape.constant(y.map(f64::exp));

    let du1 = tape.conv3x3(outputs.u, kx, h, w)?;
    let du2 = tape.conv3x3(outputs.u, ky, h, w)?;
    let dt1 = tape.conv3x3(outputs.tau1, kx, h, w)?;
    let dt2 = tape.conv3x3(outputs.tau2, ky, h, w)?;

    let div = tape.add(dt1, dt2)?;
    let div = tape.offset(div, -cfg.source)?;
    let div = tape.gather_cols(div, &regions.interior)?;
    let div = tape.square(div)?;
    let div = tape.sum_cols(div)?;
    let div = tape.scale(div, 1.0 / (h * w) as f64)?;

    let q1 = tape.mul(k, du1)?;
    let q2 = tape.mul(k, du2)?;
    let r1 = tape.add(outputs.tau1, q1)?;
    let r2 = tape.add(outputs.tau2, q2)?;
    let (r1, r2) = if cfg.flux_on_boundary {
        (r1, r2)
    } else {
        (
            tape.gather_cols(r1, &regions.interior)?,
            tape.gather_cols(r2, &regions.interior)?,
        )
    };
    let r1 = tape.square(r1)?;
    let r2 = tape.square(r2)?;
    let flux = tape.add(r1, r2)?;
    let flux = tape.sum_cols(flux)?;
    let flux = tape.scale(flux, 1.0 / (h * w) as f64)?;

    let ub = tape.gather_cols(outputs.u, &regions.dirichlet)?;
    let ub = tape.square(ub)?;
    let dir = tape.sum_cols(ub)?;
    let dir = tape.scale(dir, 1.0 / regions.dirichlet.len() as f64)?;

    let nb = tape.gather_cols(q2, &regions.neumann)?;
    let nb = tape.square(nb)?;
    let neu = tape.sum_cols(nb)?;
    let neu = tape.scale(neu, 1.0 / regions.neumann.len() as f64)?;

    let div = tape.mean(div)?;
    let flux = tape.mean(flux)?;
    let dir = tape.mean(dir)?;
    let neu = tape.mean(neu)?;
    let boundary = tape.add(dir, neu)?;
    let boundary = tape.scale(boundary, cfg.beta)?;
    let total = tape.add(div, flux)?;
    let total = tape.add(total, boundary)?;
    Ok(LossGraph {
        total,
        div,
        flux,
        dir,
        neu,
    })
}

fn breakdown(tape: &Tape, g: &LossGraph, beta: f64) -> Result<ResidualBreakdown> {
    let interior_flux_div = tape.value(g.div).item()?;
    let flux_consistency = tape.value(g.flux).item()?;
    let dirichlet = tape.value(g.dir).item()?;
    let neumann = tape.value(g.neu).item()?;
    Ok(ResidualBreakdown {
        interior_flux_div,
        flux_consistency,
        dirichlet,
        neumann,
        beta,
        total: interior_flux_div + flux_consistency + beta * (dirichlet + neumann),
    })
}

/// Residual loss for explicit `(u, τ1, τ2)` images, bypassing the network.
pub fn physics_loss_for_fields(
    y: &[&Tensor],
    u: &[&Tensor],
    tau1: &[&Tensor],
    tau2: &[&Tensor],
    grid: &Grid,
    cfg: &PhysicsLossConfig,
) -> Result<(f64, ResidualBreakdown)> {
    let c = SurrogateConfig {
        height: grid.height,
        width: grid.width,
        hidden: vec![],
        basis: OutputBasis::Pixel,
        input: InputFeature::LogPermeability,
    };
    let mut tape = Tape::new();
    let outputs = SurrogateOutputs {
        u: tape.constant(stack_fields(u, &c)?),
        tau1: tape.constant(stack_fields(tau1, &c)?),
        tau2: tape.constant(stack_fields(tau2, &c)?),
    };
    let ys = stack_fields(y, &c)?;
    if ys.dims2()?.0 != tape.value(outputs.u).dims2()?.0 {
        return Err(Error::shape(
            "physics_loss",
            "field and output batches differ in size",
        ));
    }
    let g = loss_graph(&mut tape, &outputs, &ys, grid, cfg)?;
    let bd = breakdown(&tape, &g, cfg.beta)?;
    Ok((bd.total, bd))
}

/// Mean residual loss over a batch for the network outputs.
pub fn physics_loss(
    batch: &[&Tensor],
    params: &SurrogateParams,
    cfg: &PhysicsLossConfig,
) -> Result<(f64, ResidualBreakdown)> {
    let c = &params.config;
    let ys = stack_fields(batch, c)?;
    let mut tape = Tape::new();
    let b = Bindings::frozen(&mut tape, &params.store);
    let yv = tape.constant(ys.clone());
    let o = forward_on_tape(&mut tape, c, &b, yv)?;
    let g = loss_graph(&mut tape, &o, &ys, &c.grid()?, cfg)?;
    let bd = breakdown(&tape, &g, cfg.beta)?;
    Ok((bd.total, bd))
}

/// Loss, breakdown, and parameter gradients.
pub fn physics_loss_with_gradients(
    batch: &[&Tensor],
    params: &SurrogateParams,
    cfg: &PhysicsLossConfig,
) -> Result<(f64, ResidualBreakdown, ParamStore)> {
    let c = &params.config;
    let ys = stack_fields(batch, c)?;
    let mut tape = Tape::new();
    let b = Bindings::trainable(&mut tape, &params.store);
    let yv = tape.constant(ys.clone());
    let o = forward_on_tape(&mut tape, c, &b, yv)?;
    let g = loss_graph(&mut tape, &o, &ys, &c.grid()?, cfg)?;
    let bd = breakdown(&tape, &g, cfg.beta)?;
    let grads = tape.backward(g.total)?;
    Ok((bd.total, bd, b.collect(&tape, &grads, &params.store)?))
}

/// Mini-batch Adam on the residual loss; returns final-epoch parameters.
pub fn train_surrogate(
    dataset: &[&Tensor],
    config: SurrogateConfig,
    train: &TrainConfig,
    loss: &PhysicsLossConfig,
) -> Result<(SurrogateParams, TrainingCurve)> {
    if dataset.is_empty() {
        return Err(Error::invalid(
            "surrogate training needs a non-empty dataset",
        ));
    }
    let mut params = SurrogateParams::init(config, train.seed)?;
    let mut curve = TrainingCurve::default();
    if train.epochs == 0 {
        return Ok((params, curve));
    }
    let batches = fixed_batches(dataset.len(), train.batch_size, train.seed ^ 0x5eed);
    let mut state = AdamState::new(train.learning_rate);

    let mut init = 0.0;
    for b in &batches {
        let ys: Vec<&Tensor> = b.iter().map(|&i| dataset[i]).collect();
        init += physics_loss(&ys, &params, loss)?.0 * b.len() as f64;
    }
    curve.epoch_losses.push(init / dataset.len() as f64);

    for epoch in 1..=train.epochs {
        let mut acc = 0.0;
        for (bi, b) in batches.iter().enumerate() {
            let ys: Vec<&Tensor> = b.iter().map(|&i| dataset[i]).collect();
            let (l, _, grads) = match physics_loss_with_gradients(&ys, &params, loss) {
                Ok(v) if v.0.is_finite() => v,
                _ => {
                    return Err(Error::Diverged {
                        stage: "surrogate",
                        epoch,
                        batch: bi,
                        last_finite: Box::new(params.store.clone()),
                    })
                }
            };
            adam_step(&mut params.store, &grads, &mut state)?;
            acc += l * b.len() as f64;
        }
        curve.epoch_losses.push(acc / dataset.len() as f64);
    }
    Ok((params, curve))
}

/// `‖a - b‖₂ / ‖b‖₂` over flattened fields.
pub fn relative_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "relative error",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let den = b.norm();
    if den == 0.0 {
        return Err(Error::invalid("relative error against a zero reference"));
    }
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Mean of `‖û - u_FD‖₂ / ‖u_FD‖₂` over `fields`, with the finite-volume
/// solution under source `source` as reference.
pub fn surrogate_relative_error(
    params: &SurrogateParams,
    fields: &[&Tensor],
    source: f64,
) -> Result<f64> {
    let grid = params.config.grid()?;
    let predicted = predict_pressure(fields, params)?;
    let mut acc = 0.0;
    for (y, u_hat) in fields.iter().zip(&predicted) {
        let y2 = Tensor::from_parts(vec![grid.height, grid.width], y.data().to_vec());
        let reference = solve_darcy(&y2, &grid, |_, _| source)?;
        acc += relative_l2(u_hat, &reference.values)?;
    }
    Ok(acc / fields.len() as f64)
}
