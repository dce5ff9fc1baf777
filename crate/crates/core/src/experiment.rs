//! Config-driven pipeline stages. Every stage reads and writes a shared run
//! directory:
//!
//! ```text
//! <out>/data/            prior.bin, test.bin, manifest.csv, truth.*, observations.csv, data.json
//! <out>/vae/             vae.krfl, vae.json, loss.csv, summary.json
//! <out>/surrogate/       surrogate.krfl, surrogate.json, loss.csv, summary.json
//! <out>/infer-krnet/     flow.krfl, flow.json, loss.csv, mean.*, variance.*, summary.json
//! <out>/infer-mcmc/      chain.csv, tuning.csv, mean.*, variance.*, summary.json
//! ```
//!
//! Each stage also writes `timing.json` with its wall time; everything else
//! is a deterministic function of the config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::darcy::{add_noise, observe, solve_darcy, ObservationOperator, ObservationSet};
use crate::error::{Error, Result};
use crate::flow::{FlowCheckpointMeta, FlowConfig};
use crate::grf::{
    assemble_covariance_matrix, generate_prior_dataset, read_dataset, sample_field, truncated_kle,
    write_dataset, write_manifest, CovarianceSpec, FieldSample, PriorDataConfig,
};
use crate::grid::Grid;
use crate::inference::{
    moments_from_latents, pcn_mcmc_from, posterior_moments, prior_mean_field, relative_error,
    train_drknet, tune_pcn_step, DecoderSampling, InferenceConfig, InverseProblem,
    PosteriorMoments,
};
use crate::io::{read_field_csv, read_json, write_field_csv, write_json, write_pgm};
use crate::random::{derive_seed, rng_from_seed};
use crate::surrogate::{
    surrogate_relative_error, train_surrogate, InputFeature, OutputBasis, PhysicsLossConfig,
    SurrogateCheckpointMeta, SurrogateConfig, SurrogateParams,
};
use crate::tensor::Tensor;
use crate::training::TrainConfig;
use crate::vae::{train_vae, VaeCheckpointMeta, VaeConfig, VaeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub variance: f64,
    pub mean: f64,
    pub length_scales: Vec<f64>,
    pub per_scale: usize,
    pub energy_fraction: f64,
    /// Held-out fields per scale for surrogate evaluation.
    pub test_per_scale: usize,
    pub seed: u64,
    pub truth_length_scale: f64,
    pub truth_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub per_axis: usize,
    pub start: f64,
    pub step: f64,
    pub noise_level: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSection {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    pub hidden: Vec<usize>,
    pub output_basis: OutputBasis,
    pub input_feature: InputFeature,
    pub flux_on_boundary: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub source: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(rename = "K")]
    pub n_groups: usize,
    #[serde(rename = "L")]
    pub layers_per_stage: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub scale_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub n_train: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_samples: usize,
    pub sampling: DecoderSampling,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    pub steps: usize,
    pub keep: usize,
    pub initial_step: f64,
    pub pilot_steps: usize,
    pub max_tuning_rounds: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub data: DataSection,
    pub observations: ObservationSection,
    pub vae: VaeSection,
    pub surrogate: SurrogateSection,
    pub flow: FlowSection,
    pub inference: InferenceSection,
    pub mcmc: McmcSection,
}

impl ExperimentConfig {
    /// 16x16 desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            grid: GridSection {
                height: 16,
                width: 16,
            },
            data: DataSection {
                variance: 0.5,
                mean: 1.0,
                length_scales: vec![0.2, 0.25, 0.3],
                per_scale: 200,
                energy_fraction: 0.95,
                test_per_scale: 10,
                seed: 11,
                truth_length_scale: 0.25,
                truth_seed: 12,
            },
            observations: ObservationSection {
                per_axis: 8,
                start: 0.0625,
                step: 0.125,
                noise_level: 0.05,
                seed: 13,
            },
            vae: VaeSection {
                latent_dim: 8,
                encoder_hidden: vec![256, 128],
                decoder_hidden: vec![128, 256],
                epochs: 50,
                batch_size: 50,
                learning_rate: 1e-3,
                seed: 21,
            },
            surrogate: SurrogateSection {
                hidden: vec![512, 512],
                output_basis: OutputBasis::Cosine,
                input_feature: InputFeature::InversePermeability,
                flux_on_boundary: true,
                epochs: 100,
                batch_size: 10,
                learning_rate: 1e-3,
                beta: 100.0,
                source: 3.0,
                seed: 31,
            },
            flow: FlowSection {
                n_groups: 4,
                layers_per_stage: 8,
                hidden_width: 48,
                hidden_depth: 2,
                scale_bound: 2.0,
            },
            inference: InferenceSection {
                n_train: 2000,
                epochs: 5,
                batch_size: 100,
                learning_rate: 0.01,
                n_samples: 2000,
                sampling: DecoderSampling::Mean,
                seed: 41,
            },
            mcmc: McmcSection {
                steps: 10000,
                keep: 2000,
                initial_step: 0.5,
                pilot_steps: 500,
                max_tuning_rounds: 12,
                seed: 51,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, in hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Replaces every stage seed with one derived from `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.data.seed = derive_seed(seed, 0);
        self.data.truth_seed = derive_seed(seed, 1);
        self.observations.seed = derive_seed(seed, 2);
        self.vae.seed = derive_seed(seed, 3);
        self.surrogate.seed = derive_seed(seed, 4);
        self.inference.seed = derive_seed(seed, 5);
        self.mcmc.seed = derive_seed(seed, 6);
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.height, self.grid.width)
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            dim: self.vae.latent_dim,
            n_groups: self.flow.n_groups,
            layers_per_stage: self.flow.layers_per_stage,
            hidden_width: self.flow.hidden_width,
            hidden_depth: self.flow.hidden_depth,
            scale_bound: self.flow.scale_bound,
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            latent_dim: self.vae.latent_dim,
            height: self.grid.height,
            width: self.grid.width,
            encoder_hidden: self.vae.encoder_hidden.clone(),
            decoder_hidden: self.vae.decoder_hidden.clone(),
        }
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            height: self.grid.height,
            width: self.grid.width,
            hidden: self.surrogate.hidden.clone(),
            basis: self.surrogate.output_basis,
            input: self.surrogate.input_feature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.flow_config().validate()?;
        let d = &self.data;
        if d.length_scales.is_empty() || d.per_scale == 0 || d.test_per_scale == 0 {
            return Err(Error::invalid(
                "data needs length scales and positive per-scale counts",
            ));
        }
        if !(d.energy_fraction > 0.0 && d.energy_fraction <= 1.0)
            || !(d.variance > 0.0)
            || !(d.truth_length_scale > 0.0)
        {
            return Err(Error::invalid(
                "data variance, energy fraction and truth length scale must be positive",
            ));
        }
        let o = &self.observations;
        if o.per_axis == 0 || !(o.noise_level > 0.0) {
            return Err(Error::invalid(
                "observations need at least one sensor and a positive noise level",
            ));
        }
        let last = o.start + o.step * (o.per_axis - 1) as f64;
        if !(0.0..=1.0).contains(&o.start) || !(0.0..=1.0).contains(&last) {
            return Err(Error::invalid(format!(
                "sensor lattice spans [{}, {last}], outside the unit square",
                o.start
            )));
        }
        let positive = [
            ("vae.batch_size", self.vae.batch_size),
            ("surrogate.batch_size", self.surrogate.batch_size),
            ("inference.batch_size", self.inference.batch_size),
            ("inference.n_train", self.inference.n_train),
            ("inference.n_samples", self.inference.n_samples),
            ("mcmc.keep", self.mcmc.keep),
            ("mcmc.pilot_steps", self.mcmc.pilot_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{k} must be positive")));
        }
        for (k, v) in [
            ("vae.learning_rate", self.vae.learning_rate),
            ("surrogate.learning_rate", self.surrogate.learning_rate),
            ("inference.learning_rate", self.inference.learning_rate),
            ("surrogate.beta", self.surrogate.beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{k} must be positive, got {v}")));
            }
        }
        if self.mcmc.keep > self.mcmc.steps {
            return Err(Error::invalid("mcmc.keep exceeds mcmc.steps"));
        }
        if !(self.mcmc.initial_step > 0.0 && self.mcmc.initial_step <= 1.0) {
            return Err(Error::invalid("mcmc.initial_step must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Stage subdirectory names.
pub const DATA_DIR: &str = "data";
pub const VAE_DIR: &str = "vae";
pub const SURROGATE_DIR: &str = "surrogate";
pub const KRNET_DIR: &str = "infer-krnet";
pub const MCMC_DIR: &str = "infer-mcmc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub config_hash: String,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub n_samples: usize,
    pub n_test: usize,
    pub n_sensors: usize,
    pub truth_length_scale: f64,
    pub truth_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub stage: String,
    pub config_hash: String,
    pub epochs: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relative_error: Option<f64>,
}

/// Result of one inference method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub method: String,
    pub d: usize,
    pub config_hash: String,
    pub relative_error: f64,
    pub prior_mean_relative_error: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub initial_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acceptance_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time: f64,
}

fn stage_dir(out: &Path, name: &str) -> Result<PathBuf> {
    let dir = out.join(name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{what} not found at {}",
            path.display()
        )))
    }
}

fn check_hash(found: &str, cfg: &ExperimentConfig, what: &str) -> Result<()> {
    let want = cfg.hash();
    if found != want {
        return Err(Error::Dependency(format!(
            "{what} was produced with config {found}, current config is {want}; rerun the earlier stages"
        )));
    }
    Ok(())
}

fn write_timing(dir: &Path, start: Instant) -> Result<()> {
    write_json(
        &dir.join("timing.json"),
        &Timing {
            wall_time: start.elapsed().as_secs_f64(),
        },
    )
}

fn export_field(dir: &Path, name: &str, field: &Tensor) -> Result<()> {
    write_field_csv(&dir.join(format!("{name}.csv")), field)?;
    write_pgm(&dir.join(format!("{name}.pgm")), field)
}

/// Generates the prior dataset, held-out test fields, the truth field, its
/// pressure, and noisy observations.
pub fn cmd_generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<DataSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let dir = stage_dir(out, DATA_DIR)?;
    let grid = cfg.grid()?;
    let d = &cfg.data;
    let prior_cfg = PriorDataConfig {
        variance: d.variance,
        mean: d.mean,
        length_scales: d.length_scales.clone(),
        per_scale: d.per_scale,
        energy_fraction: d.energy_fraction,
        base_seed: d.seed,
    };
    let prior = generate_prior_dataset(&grid, &prior_cfg)?;
    let test_cfg = PriorDataConfig {
        per_scale: d.test_per_scale,
        base_seed: derive_seed(d.seed, 1 << 40),
        ..prior_cfg
    };
    let test = generate_prior_dataset(&grid, &test_cfg)?;
    write_dataset(&dir.join("prior.bin"), &grid, &prior)?;
    write_manifest(&dir.join("manifest.csv"), &prior)?;
    write_dataset(&dir.join("test.bin"), &grid, &test)?;

    let spec = CovarianceSpec::isotropic(d.variance, d.truth_length_scale, d.mean)?;
    let basis = truncated_kle(&assemble_covariance_matrix(&grid, &spec), d.energy_fraction)?;
    let truth = sample_field(&basis, &spec, &grid, d.truth_seed)?;
    let pressure = solve_darcy(&truth.values, &grid, |_, _| cfg.surrogate.source)?;
    let o = &cfg.observations;
    let op = ObservationOperator::lattice(o.per_axis, o.start, o.step)?;
    let clean = observe(&pressure, &op)?;
    let obs = add_noise(&op, &clean, o.noise_level, &mut rng_from_seed(o.seed))?;

    export_field(&dir, "truth", &truth.values)?;
    export_field(&dir, "truth_pressure", &pressure.values)?;
    obs.write_csv(&dir.join("observations.csv"))?;

    let summary = DataSummary {
        config_hash: cfg.hash(),
        h: grid.height,
        w: grid.width,
        n_samples: prior.len(),
        n_test: test.len(),
        n_sensors: obs.len(),
        truth_length_scale: d.truth_length_scale,
        truth_seed: d.truth_seed,
    };
    write_json(&dir.join("data.json"), &summary)?;
    write_timing(&dir, start)?;
    Ok(summary)
}

fn load_data_summary(cfg: &ExperimentConfig, out: &Path) -> Result<DataSummary> {
    let path = out.join(DATA_DIR).join("data.json");
    require(&path, "generated data (run generate-data first)")?;
    let s: DataSummary = read_json(&path)?;
    check_hash(&s.config_hash, cfg, "generated data")?;
    Ok(s)
}

fn load_fields(path: &Path) -> Result<Vec<FieldSample>> {
    require(path, "dataset")?;
    Ok(read_dataset(path)?.1)
}

pub fn cmd_train_vae(cfg: &ExperimentConfig, out: &Path) -> Result<TrainingSummary> {
    let start = Instant::now();
    cfg.validate()?;
    load_data_summary(cfg, out)?;
    let data = load_fields(&out.join(DATA_DIR).join("prior.bin"))?;
    let fields: Vec<&Tensor> = data.iter().map(|s| &s.values).collect();
    let v = &cfg.vae;
    let train = TrainConfig {
        epochs: v.epochs,
        batch_size: v.batch_size,
        learning_rate: v.learning_rate,
        seed: v.seed,
    };
    let (params, curve) = train_vae(&fields, cfg.vae_config(), &train)?;
    let dir = stage_dir(out, VAE_DIR)?;
    let meta = VaeCheckpointMeta {
        d: v.latent_dim,
        h: cfg.grid.height,
        w: cfg.grid.width,
        encoder_hidden: v.encoder_hidden.clone(),
        decoder_hidden: v.decoder_hidden.clone(),
        epochs: v.epochs,
        seed: v.seed,
        final_loss: curve.last().unwrap_or(f64::NAN),
        config_hash: cfg.hash(),
    };
    params.save(&dir, &meta)?;
    curve.write_csv(&dir.join("loss.csv"))?;
    let summary = TrainingSummary {
        stage: "vae".into(),
        config_hash: cfg.hash(),
        epochs: v.epochs,
        initial_loss: curve.initial(),
        final_loss: curve.last(),
        relative_error: None,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_timing(&dir, start)?;
    Ok(summary)
}

pub fn cmd_train_surrogate(cfg: &ExperimentConfig, out: &Path) -> Result<TrainingSummary> {
    let start = Instant::now();
    cfg.validate()?;
    load_data_summary(cfg, out)?;
    let data = load_fields(&out.join(DATA_DIR).join("prior.bin"))?;
    let test = load_fields(&out.join(DATA_DIR).join("test.bin"))?;
    let fields: Vec<&Tensor> = data.iter().map(|s| &s.values).collect();
    let s = &cfg.surrogate;
    let train = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        seed: s.seed,
    };
    let loss = PhysicsLossConfig {
        beta: s.beta,
        source: s.source,
        flux_on_boundary: s.flux_on_boundary,
    };
    let (params, curve) = train_surrogate(&fields, cfg.surrogate_config(), &train, &loss)?;
    let test_fields: Vec<&Tensor> = test.iter().map(|t| &t.values).collect();
    let err = surrogate_relative_error(&params, &test_fields, s.source)?;
    let dir = stage_dir(out, SURROGATE_DIR)?;
    let meta = SurrogateCheckpointMeta {
        h: cfg.grid.height,
        w: cfg.grid.width,
        hidden: s.hidden.clone(),
        basis: s.output_basis,
        input: s.input_feature,
        beta: s.beta,
        epochs: s.epochs,
        seed: s.seed,
        final_loss: curve.last().unwrap_or(f64::NAN),
        config_hash: cfg.hash(),
    };
    params.save(&dir, &meta)?;
    curve.write_csv(&dir.join("loss.csv"))?;
    let summary = TrainingSummary {
        stage: "surrogate".into(),
        config_hash: cfg.hash(),
        epochs: s.epochs,
        initial_loss: curve.initial(),
        final_loss: curve.last(),
        relative_error: Some(err),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_timing(&dir, start)?;
    Ok(summary)
}

struct Inputs {
    decoder: VaeParams,
    surrogate: SurrogateParams,
    observations: ObservationSet,
    truth: Tensor,
}

fn load_inputs(cfg: &ExperimentConfig, out: &Path) -> Result<Inputs> {
    load_data_summary(cfg, out)?;
    let vae_dir = out.join(VAE_DIR);
    require(
        &vae_dir.join("vae.json"),
        "VAE decoder checkpoint (run train-vae first)",
    )?;
    let (decoder, vmeta) = VaeParams::load(&vae_dir)?;
    check_hash(&vmeta.config_hash, cfg, "VAE checkpoint")?;
    let sur_dir = out.join(SURROGATE_DIR);
    require(
        &sur_dir.join("surrogate.json"),
        "surrogate checkpoint (run train-surrogate first)",
    )?;
    let (surrogate, smeta) = SurrogateParams::load(&sur_dir)?;
    check_hash(&smeta.config_hash, cfg, "surrogate checkpoint")?;
    let data = out.join(DATA_DIR);
    let observations =
        ObservationSet::read_csv(&data.join("observations.csv"), cfg.observations.noise_level)?;
    let truth = read_field_csv(&data.join("truth.csv"))?;
    Ok(Inputs {
        decoder,
        surrogate,
        observations,
        truth,
    })
}

fn export_moments(dir: &Path, m: &PosteriorMoments) -> Result<()> {
    export_field(dir, "mean", &m.mean_field)?;
    export_field(dir, "variance", &m.variance_field)?;
    write_field_csv(&dir.join("total_variance.csv"), &m.total_variance_field)
}

fn prior_error(cfg: &ExperimentConfig, decoder: &VaeParams, truth: &Tensor) -> Result<f64> {
    let prior = prior_mean_field(
        decoder,
        cfg.inference.n_samples,
        &mut rng_from_seed(derive_seed(cfg.inference.seed, 7)),
    )?;
    relative_error(&prior, truth)
}

pub fn cmd_infer_krnet(cfg: &ExperimentConfig, out: &Path) -> Result<InferenceSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let inp = load_inputs(cfg, out)?;
    let problem = InverseProblem::new(&inp.decoder, &inp.surrogate, &inp.observations)?;
    let i = &cfg.inference;
    let icfg = InferenceConfig {
        n_train: i.n_train,
        epochs: i.epochs,
        batch_size: i.batch_size,
        learning_rate: i.learning_rate,
        seed: i.seed,
        sampling: i.sampling,
    };
    let (flow, curve) = train_drknet(cfg.flow_config(), &problem, &icfg)?;
    let moments = posterior_moments(
        &flow,
        &inp.decoder,
        i.n_samples,
        &mut rng_from_seed(derive_seed(i.seed, 8)),
    )?;
    let dir = stage_dir(out, KRNET_DIR)?;
    flow.save(
        &dir,
        &FlowCheckpointMeta {
            config: flow.config.clone(),
            seed: i.seed,
        },
    )?;
    curve.write_csv(&dir.join("loss.csv"))?;
    export_moments(&dir, &moments)?;
    let summary = InferenceSummary {
        method: "dr-krnet".into(),
        d: cfg.vae.latent_dim,
        config_hash: cfg.hash(),
        relative_error: relative_error(&moments.mean_field, &inp.truth)?,
        prior_mean_relative_error: prior_error(cfg, &inp.decoder, &inp.truth)?,
        n_samples: moments.n_samples,
        initial_loss: curve.initial(),
        final_loss: curve.last(),
        acceptance_rate: None,
        step_size: None,
        n_steps: None,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_timing(&dir, start)?;
    Ok(summary)
}

pub fn cmd_infer_mcmc(cfg: &ExperimentConfig, out: &Path) -> Result<InferenceSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let inp = load_inputs(cfg, out)?;
    let problem = InverseProblem::new(&inp.decoder, &inp.surrogate, &inp.observations)?;
    let d = cfg.vae.latent_dim;
    let log_like = |x: &[f64]| -> Result<f64> {
        Ok(problem.latent_log_likelihood(&Tensor::matrix(1, d, x.to_vec())?)?[0])
    };
    let m = &cfg.mcmc;
    let tuning = tune_pcn_step(
        log_like,
        d,
        m.initial_step,
        m.pilot_steps,
        derive_seed(m.seed, 1),
        m.max_tuning_rounds,
    )?;
    let beta = tuning.step_size;
    let chain = pcn_mcmc_from(log_like, &tuning.state, m.steps, beta, m.seed, m.keep)?;
    let moments = moments_from_latents(&inp.decoder, &chain.states_matrix()?)?;
    let dir = stage_dir(out, MCMC_DIR)?;
    write_chain(
        &dir.join("chain.csv"),
        &chain.states,
        &chain.log_likelihoods,
    )?;
    export_moments(&dir, &moments)?;
    let mut pilots = String::from("step_size,acceptance_rate\n");
    for (b, r) in &tuning.pilots {
        let _ = writeln!(pilots, "{b:?},{r:?}");
    }
    std::fs::write(dir.join("tuning.csv"), pilots)?;
    let summary = InferenceSummary {
        method: "pcn-mcmc".into(),
        d,
        config_hash: cfg.hash(),
        relative_error: relative_error(&moments.mean_field, &inp.truth)?,
        prior_mean_relative_error: prior_error(cfg, &inp.decoder, &inp.truth)?,
        n_samples: moments.n_samples,
        initial_loss: None,
        final_loss: None,
        acceptance_rate: Some(chain.acceptance_rate()),
        step_size: Some(beta),
        n_steps: Some(chain.n_steps),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_timing(&dir, start)?;
    Ok(summary)
}

fn write_chain(path: &Path, states: &[Vec<f64>], lls: &[f64]) -> Result<()> {
    let d = states.first().map_or(0, Vec::len);
    let mut text = (0..d)
        .map(|k| format!("x{k}"))
        .collect::<Vec<_>>()
        .join(",");
    text.push_str(",log_likelihood\n");
    for (s, l) in states.iter().zip(lls) {
        for v in s {
            let _ = write!(text, "{v:?},");
        }
        let _ = writeln!(text, "{l:?}");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub d: usize,
    pub relative_error: f64,
    pub wall_time: Option<f64>,
    pub acceptance_rate: Option<f64>,
}

/// Collects every inference summary under `run_dirs` into
/// `<out>/comparison.csv`, sorted by `(method, d)`.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for run in run_dirs {
        for stage in [KRNET_DIR, MCMC_DIR] {
            let dir = run.join(stage);
            let path = dir.join("summary.json");
            if !path.exists() {
                continue;
            }
            let s: InferenceSummary = read_json(&path)?;
            let timing: Option<Timing> = read_json(&dir.join("timing.json")).ok();
            rows.push(ReportRow {
                method: s.method,
                d: s.d,
                relative_error: s.relative_error,
                wall_time: timing.map(|t| t.wall_time),
                acceptance_rate: s.acceptance_rate,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Dependency(
            "no completed inference runs found".into(),
        ));
    }
    rows.sort_by(|a, b| (&a.method, a.d).cmp(&(&b.method, b.d)));
    std::fs::create_dir_all(out)?;
    let mut text = String::from("method,d,relative_error,wall_time,acceptance_rate\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{:?},{},{}",
            r.method,
            r.d,
            r.relative_error,
            opt(r.wall_time),
            opt(r.acceptance_rate)
        );
    }
    std::fs::write(out.join("comparison.csv"), text)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips() {
        let c = ExperimentConfig::desk();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::desk()
            .to_toml()
            .replace("[vae]\n", "[vae]\nlatnet_dim = 3\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("latnet_dim"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::desk();
        c.flow.n_groups = 3;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.mcmc.keep = c.mcmc.steps + 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_override_changes_every_seed_and_hash() {
        let mut c = ExperimentConfig::desk();
        let h = c.hash();
        c.override_seeds(5);
        assert_ne!(c.hash(), h);
        let seeds = [
            c.data.seed,
            c.data.truth_seed,
            c.observations.seed,
            c.vae.seed,
            c.surrogate.seed,
            c.inference.seed,
            c.mcmc.seed,
        ];
        let mut uniq = seeds.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
    }

    #[test]
    fn report_needs_a_run() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            cmd_report(&[dir.path().to_path_buf()], dir.path()),
            Err(Error::Dependency(_))
        ));
    }
}
