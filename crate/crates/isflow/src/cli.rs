//! Config-driven experiment orchestration.
//!
//! Every experiment is described by one JSON document; unknown keys are
//! rejected so a typo in a sweep fails loudly. The pipeline runs
//! sample -> weight -> train -> estimate and leaves every intermediate
//! artifact on disk, so any stage can be re-run standalone from the files of
//! the previous one. A (config, seed) pair fully determines the run.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elliptic::{
    kl_eigenpairs, CoarseConfig, DiscretizationConfig, EllipticProblem, FineConfig, NormKind,
};
use crate::estimators::{
    fidelity_report, is_estimate, mc_estimate, toy_ellipse_data, toy_rotation_data, EllipseToy,
    EstimatorReport, FidelityReport, FineExceedance,
};
use crate::flow_core::{
    build_model, randomize_output_layers, FlowConfig, FlowModel, PartitionKind, PartitionScheme,
};
use crate::train::{train, AdamParams, Objective, TrainConfig, TrainHistory};
use crate::weighting::{
    accept, eps_max_neg, fit_weights, read_dataset_files, read_samples_csv, truncate_negative,
    write_dataset_files, write_samples_csv, RawSample, WeightedDataset,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub flow: FlowSection,
    pub weighting: WeightingSection,
    pub train: TrainSection,
    pub estimate: EstimateSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    ToyRotation,
    ToyEllipse {
        #[serde(default = "defaults::alpha")]
        alpha: f64,
        #[serde(default = "defaults::angle")]
        angle: f64,
        #[serde(default = "defaults::ellipse_threshold")]
        threshold: f64,
    },
    Elliptic {
        l_c: f64,
        /// Number of KL modes (the random dimension).
        truncation: usize,
        threshold: f64,
        coarse_elements: usize,
        #[serde(default)]
        norm: NormKind,
        /// Override for the acceptance band; defaults to the observed
        /// maximum coarse-model error among below-threshold samples.
        #[serde(default)]
        eps_max_override: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub depth: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub partition: PartitionKind,
    #[serde(default = "defaults::s_max")]
    pub s_max: f64,
    #[serde(default)]
    pub fix_scale: bool,
    /// Standard deviation of the optional random re-initialization of the
    /// MLP output layers (0 keeps the identity initialization).
    #[serde(default)]
    pub init_noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingSection {
    pub theta: f64,
    #[serde(default = "defaults::one")]
    pub truncation_q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_batches: usize,
    #[serde(default = "defaults::strat_bins")]
    pub strat_bins: usize,
    #[serde(default)]
    pub beta: f64,
    pub seed: u64,
    #[serde(default = "defaults::adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_epsilon")]
    pub adam_epsilon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub n_train_rom: usize,
    pub n_sigma_w: usize,
    pub n_mc: usize,
}

mod defaults {
    pub fn alpha() -> f64 {
        2.0
    }
    pub fn angle() -> f64 {
        std::f64::consts::FRAC_PI_4
    }
    pub fn ellipse_threshold() -> f64 {
        3.0
    }
    pub fn s_max() -> f64 {
        2.0
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn strat_bins() -> usize {
        4
    }
    pub fn adam_beta1() -> f64 {
        0.9
    }
    pub fn adam_beta2() -> f64 {
        0.999
    }
    pub fn adam_epsilon() -> f64 {
        1e-8
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.flow.depth < 1 || self.flow.hidden1 < 1 || self.flow.hidden2 < 1 {
            return bad("flow depth and hidden widths must be positive".into());
        }
        if !(self.flow.s_max > 0.0) {
            return bad("flow.s_max must be positive".into());
        }
        if !(self.weighting.theta > 0.0 && self.weighting.theta <= 1.0) {
            return bad(format!(
                "weighting.theta must lie in (0, 1], got {}",
                self.weighting.theta
            ));
        }
        if !(self.weighting.truncation_q > 0.0 && self.weighting.truncation_q <= 1.0) {
            return bad("weighting.truncation_q must lie in (0, 1]".into());
        }
        if !(self.train.learning_rate >= 0.0) {
            return bad("train.learning_rate must be nonnegative".into());
        }
        if self.train.n_batches < 1 || self.train.strat_bins < 1 {
            return bad("train.n_batches and train.strat_bins must be positive".into());
        }
        if !(self.train.beta >= 0.0) {
            return bad("train.beta must be nonnegative".into());
        }
        if self.estimate.n_train_rom < 1 || self.estimate.n_sigma_w < 2 || self.estimate.n_mc < 2 {
            return bad("estimate sample counts must be positive (>= 2 for estimators)".into());
        }
        if let ProblemConfig::Elliptic {
            l_c,
            truncation,
            coarse_elements,
            eps_max_override,
            ..
        } = &self.problem
        {
            if !(*l_c > 0.0) {
                return bad("elliptic.l_c must be positive".into());
            }
            if *truncation < 2 {
                return bad("elliptic.truncation must be >= 2 (the flow needs two blocks)".into());
            }
            if *coarse_elements < 1 {
                return bad("elliptic.coarse_elements must be >= 1".into());
            }
            if let Some(eps) = eps_max_override {
                if !(*eps >= 0.0) {
                    return bad("elliptic.eps_max_override must be nonnegative".into());
                }
            }
        }
        Ok(())
    }

    pub fn problem_dimension(&self) -> usize {
        match &self.problem {
            ProblemConfig::ToyRotation | ProblemConfig::ToyEllipse { .. } => 2,
            ProblemConfig::Elliptic { truncation, .. } => *truncation,
        }
    }

    fn partition(&self, dimension: usize) -> Result<PartitionScheme, CliError> {
        let scheme = match &self.flow.partition {
            PartitionKind::FirstHalf => PartitionScheme::first_half(dimension),
            PartitionKind::OddEven => PartitionScheme::odd_even(dimension),
            PartitionKind::Permutation { indices } => {
                PartitionScheme::permutation(indices.clone(), indices.len() / 2)
            }
        };
        scheme.map_err(|e| CliError::Config(e.to_string()))
    }

    fn flow_config(&self, dimension: usize) -> Result<FlowConfig, CliError> {
        Ok(FlowConfig {
            dimension,
            depth: self.flow.depth,
            hidden1: self.flow.hidden1,
            hidden2: self.flow.hidden2,
            partition: self.partition(dimension)?,
            s_max: self.flow.s_max,
            fix_scale: self.flow.fix_scale,
        })
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            n_batches: self.train.n_batches,
            strat_bins: self.train.strat_bins,
            adam: AdamParams {
                beta1: self.train.adam_beta1,
                beta2: self.train.adam_beta2,
                epsilon: self.train.adam_epsilon,
            },
            seed: stage_seed(self.train.seed, salts::TRAIN),
        }
    }

    fn objective(&self) -> Objective {
        Objective {
            beta: self.train.beta,
        }
    }

    fn elliptic_problem(&self) -> Result<EllipticProblem, CliError> {
        let ProblemConfig::Elliptic {
            l_c,
            truncation,
            threshold,
            coarse_elements,
            norm,
            ..
        } = &self.problem
        else {
            return Err(CliError::Config(
                "this command needs an elliptic problem; use `toy` for the toy problems".into(),
            ));
        };
        let expansion = kl_eigenpairs(*l_c, *truncation).map_err(stage("kl"))?;
        let disc = DiscretizationConfig {
            coarse: CoarseConfig {
                elements: *coarse_elements,
            },
            fine: FineConfig {
                elements: 64,
                gll_points: 8,
            },
        };
        EllipticProblem::new(expansion, *threshold, &disc, *norm).map_err(stage("kl"))
    }

    /// Built-in config reproducing the rotation convergence experiment.
    pub fn default_rotation(seed: u64) -> Self {
        ExperimentConfig {
            problem: ProblemConfig::ToyRotation,
            flow: FlowSection {
                depth: 2,
                hidden1: 64,
                hidden2: 32,
                partition: PartitionKind::FirstHalf,
                s_max: 2.0,
                fix_scale: true,
                init_noise: 0.5,
            },
            weighting: WeightingSection {
                theta: 1.0,
                truncation_q: 1.0,
            },
            train: TrainSection {
                learning_rate: 2e-3,
                epochs: 200,
                n_batches: 23,
                strat_bins: 4,
                beta: 0.0,
                seed,
                adam_beta1: defaults::adam_beta1(),
                adam_beta2: defaults::adam_beta2(),
                adam_epsilon: defaults::adam_epsilon(),
            },
            estimate: EstimateSection {
                n_train_rom: 10_000,
                n_sigma_w: 10_000,
                n_mc: 10_000,
            },
        }
    }

    /// Built-in config for the conditional ellipse-exterior density.
    pub fn default_ellipse(seed: u64) -> Self {
        ExperimentConfig {
            problem: ProblemConfig::ToyEllipse {
                alpha: defaults::alpha(),
                angle: defaults::angle(),
                threshold: defaults::ellipse_threshold(),
            },
            flow: FlowSection {
                depth: 8,
                hidden1: 64,
                hidden2: 32,
                partition: PartitionKind::FirstHalf,
                s_max: 2.0,
                fix_scale: false,
                init_noise: 0.0,
            },
            weighting: WeightingSection {
                theta: 1.0,
                truncation_q: 1.0,
            },
            train: TrainSection {
                learning_rate: 2e-3,
                epochs: 400,
                n_batches: 10,
                strat_bins: 4,
                beta: 0.0,
                seed,
                adam_beta1: defaults::adam_beta1(),
                adam_beta2: defaults::adam_beta2(),
                adam_epsilon: defaults::adam_epsilon(),
            },
            estimate: EstimateSection {
                n_train_rom: 5_000,
                n_sigma_w: 100_000,
                n_mc: 100_000,
            },
        }
    }
}

mod salts {
    pub const ROM: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const MC: u64 = 3;
    pub const IS: u64 = 4;
    pub const TOY_DATA: u64 = 5;
    pub const TOY_SAMPLE: u64 = 6;
}

fn stage_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn stage_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(seed, salt))
}

// ---------------------------------------------------------------------------
// Artifacts and the pipeline report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub dataset_csv: PathBuf,
    pub weighted_csv: PathBuf,
    pub weights_meta_json: PathBuf,
    pub model_json: PathBuf,
    pub history_csv: PathBuf,
    pub report_json: PathBuf,
}

impl RunArtifacts {
    fn in_dir(dir: &Path) -> Self {
        RunArtifacts {
            dataset_csv: dir.join("dataset.csv"),
            weighted_csv: dir.join("weighted.csv"),
            weights_meta_json: dir.join("weights.json"),
            model_json: dir.join("model.json"),
            history_csv: dir.join("history.csv"),
            report_json: dir.join("report.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mc: EstimatorReport,
    pub is: EstimatorReport,
    pub n_is_over_n_mc: f64,
    pub fidelity: FidelityReport,
    pub is_failed: bool,
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_kl(l_c: f64, modes: usize, out: &Path) -> Result<(), CliError> {
    let expansion = kl_eigenpairs(l_c, modes).map_err(stage("kl"))?;
    let file = std::fs::File::create(out).map_err(stage("kl"))?;
    expansion.write_spectrum_csv(file).map_err(stage("kl"))?;
    Ok(())
}

pub fn cmd_sample_rom(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let problem = config.elliptic_problem()?;
    let mut rng = stage_rng(config.train.seed, salts::ROM);
    let samples = problem
        .sample_rom(config.estimate.n_train_rom, &mut rng, true)
        .map_err(stage("sample-rom"))?;
    let file = std::fs::File::create(out).map_err(stage("sample-rom"))?;
    write_samples_csv(file, &samples, None).map_err(stage("sample-rom"))?;
    Ok(())
}

fn weight_stage(
    config: &ExperimentConfig,
    raw: &[RawSample],
) -> Result<(WeightedDataset, f64), CliError> {
    let eps = match &config.problem {
        ProblemConfig::Elliptic {
            eps_max_override: Some(eps),
            ..
        } => *eps,
        _ => eps_max_neg(raw),
    };
    let accepted = accept(raw, eps);
    let kept =
        truncate_negative(accepted, config.weighting.truncation_q).map_err(stage("fit-weights"))?;
    let dataset = fit_weights(&kept, config.weighting.theta).map_err(stage("fit-weights"))?;
    Ok((dataset, eps))
}

pub fn cmd_fit_weights(
    config: &ExperimentConfig,
    data: &Path,
    out_csv: &Path,
    out_meta: &Path,
) -> Result<(), CliError> {
    let file = std::fs::File::open(data).map_err(stage("fit-weights"))?;
    let (raw, _) = read_samples_csv(file).map_err(stage("fit-weights"))?;
    let (dataset, _) = weight_stage(config, &raw)?;
    write_dataset_files(&dataset, out_csv, out_meta).map_err(stage("fit-weights"))?;
    Ok(())
}

fn build_flow_for(
    config: &ExperimentConfig,
    dimension: usize,
    init_data: Option<&Array2<f64>>,
) -> Result<FlowModel, CliError> {
    let flow_config = config.flow_config(dimension)?;
    let mut rng = stage_rng(config.train.seed, salts::TRAIN);
    let mut model = build_model(&flow_config, init_data, &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if config.flow.init_noise > 0.0 {
        randomize_output_layers(&mut model, config.flow.init_noise, &mut rng);
    }
    Ok(model)
}

fn train_stage(
    config: &ExperimentConfig,
    dataset: &WeightedDataset,
    model_out: &Path,
    history_out: &Path,
) -> Result<FlowModel, CliError> {
    let inputs = dataset.input_matrix();
    let model = build_flow_for(config, dataset.dimension(), Some(&inputs))?;
    let (trained, history) = train(model, dataset, &config.objective(), &config.train_config())
        .map_err(stage("train"))?;
    trained.write_json(model_out).map_err(stage("train"))?;
    write_history(&history, history_out)?;
    Ok(trained)
}

fn write_history(history: &TrainHistory, path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(stage("train"))?;
    history.write_csv(file).map_err(stage("train"))?;
    Ok(())
}

pub fn cmd_train(
    config: &ExperimentConfig,
    data_csv: &Path,
    meta_json: &Path,
    model_out: &Path,
    history_out: &Path,
) -> Result<(), CliError> {
    let dataset = read_dataset_files(data_csv, meta_json).map_err(stage("train"))?;
    train_stage(config, &dataset, model_out, history_out)?;
    Ok(())
}

fn estimate_stage(
    config: &ExperimentConfig,
    problem: &EllipticProblem,
    model: &FlowModel,
    raw: &[RawSample],
    eps: f64,
) -> Result<PipelineReport, CliError> {
    let event = FineExceedance(problem);
    let mut mc_rng = stage_rng(config.train.seed, salts::MC);
    let mc = mc_estimate(&event, config.estimate.n_mc, &mut mc_rng).map_err(stage("estimate"))?;
    let mut is_rng = stage_rng(config.train.seed, salts::IS);
    let is = is_estimate(&event, model, config.estimate.n_sigma_w, &mut is_rng)
        .map_err(stage("estimate"))?
        .with_ratio(mc.std_dev)
        .map_err(stage("estimate"))?;
    let fidelity = fidelity_report(raw, eps).map_err(stage("fidelity"))?;
    let is_failed = is.exclusion_failed();
    let ratio = is.ratio.expect("ratio attached above");
    Ok(PipelineReport {
        mc,
        is,
        n_is_over_n_mc: ratio,
        fidelity,
        is_failed,
    })
}

pub fn cmd_estimate(
    config: &ExperimentConfig,
    model_path: &Path,
    data_csv: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let problem = config.elliptic_problem()?;
    let model = FlowModel::read_json(model_path).map_err(stage("estimate"))?;
    let file = std::fs::File::open(data_csv).map_err(stage("estimate"))?;
    let (raw, _) = read_samples_csv(file).map_err(stage("estimate"))?;
    let eps = match &config.problem {
        ProblemConfig::Elliptic {
            eps_max_override: Some(eps),
            ..
        } => *eps,
        _ => eps_max_neg(&raw),
    };
    let report = estimate_stage(config, &problem, &model, &raw, eps)?;
    write_json(out, &report, "estimate")?;
    Ok(())
}

pub fn cmd_fidelity(
    config: &ExperimentConfig,
    data_csv: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let file = std::fs::File::open(data_csv).map_err(stage("fidelity"))?;
    let (raw, _) = read_samples_csv(file).map_err(stage("fidelity"))?;
    let eps = match &config.problem {
        ProblemConfig::Elliptic {
            eps_max_override: Some(eps),
            ..
        } => *eps,
        _ => eps_max_neg(&raw),
    };
    let report = fidelity_report(&raw, eps).map_err(stage("fidelity"))?;
    write_json(out, &report, "fidelity")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, name: &'static str) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(stage(name))?;
    std::fs::write(path, text).map_err(stage(name))?;
    Ok(())
}

/// Full elliptic run: sample the reduced-order model, weight, train, and
/// estimate. Artifacts land in `outdir`; a failure aborts with the stage name
/// and leaves the artifacts written so far in place.
pub fn cmd_pipeline(config: &ExperimentConfig, outdir: &Path) -> Result<RunArtifacts, CliError> {
    std::fs::create_dir_all(outdir).map_err(stage("sample-rom"))?;
    let artifacts = RunArtifacts::in_dir(outdir);

    let problem = config.elliptic_problem()?;
    let mut rom_rng = stage_rng(config.train.seed, salts::ROM);
    let raw = problem
        .sample_rom(config.estimate.n_train_rom, &mut rom_rng, true)
        .map_err(stage("sample-rom"))?;
    let file = std::fs::File::create(&artifacts.dataset_csv).map_err(stage("sample-rom"))?;
    write_samples_csv(file, &raw, None).map_err(stage("sample-rom"))?;

    let (dataset, eps) = weight_stage(config, &raw)?;
    write_dataset_files(
        &dataset,
        &artifacts.weighted_csv,
        &artifacts.weights_meta_json,
    )
    .map_err(stage("fit-weights"))?;

    let trained = train_stage(
        config,
        &dataset,
        &artifacts.model_json,
        &artifacts.history_csv,
    )?;

    let report = estimate_stage(config, &problem, &trained, &raw, eps)?;
    write_json(&artifacts.report_json, &report, "estimate")?;

    write_json(&outdir.join("artifacts.json"), &artifacts, "estimate")?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// Toy experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Rotation,
    Ellipse,
}

impl std::str::FromStr for ToyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rotation" => Ok(ToyKind::Rotation),
            "ellipse" => Ok(ToyKind::Ellipse),
            other => Err(format!(
                "unknown toy '{other}' (expected rotation or ellipse)"
            )),
        }
    }
}

fn write_scatter_csv(path: &Path, data: &Array2<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path).map_err(stage("toy"))?);
    w.write_record(["y_1", "y_2"]).map_err(stage("toy"))?;
    for row in data.rows() {
        w.write_record(&[format!("{}", row[0]), format!("{}", row[1])])
            .map_err(stage("toy"))?;
    }
    w.flush().map_err(stage("toy"))?;
    Ok(())
}

/// Rotation toy: train on rotated Gaussian pairs and record the convergence
/// history. Returns the final cross entropy.
pub fn run_toy_rotation(config: &ExperimentConfig, outdir: &Path) -> Result<f64, CliError> {
    std::fs::create_dir_all(outdir).map_err(stage("toy"))?;
    let mut data_rng = stage_rng(config.train.seed, salts::TOY_DATA);
    let data = toy_rotation_data(config.estimate.n_train_rom, &mut data_rng);
    write_scatter_csv(&outdir.join("data.csv"), &data)?;

    let dataset = WeightedDataset::uniform(&data);
    let model = build_flow_for(config, 2, Some(&data))?;
    let (trained, history) = train(model, &dataset, &config.objective(), &config.train_config())
        .map_err(stage("toy"))?;
    trained
        .write_json(&outdir.join("model.json"))
        .map_err(stage("toy"))?;
    write_history(&history, &outdir.join("history.csv"))?;
    Ok(history
        .records
        .last()
        .map(|r| r.cross_entropy)
        .unwrap_or(f64::NAN))
}

#[derive(Debug, Serialize)]
pub struct EllipseToyReport {
    pub depth: usize,
    pub mc: EstimatorReport,
    pub is: EstimatorReport,
    pub n_is_over_n_mc: f64,
}

/// Ellipse toy over a depth sweep: train one model per depth, write its
/// sample scatter, and check the importance-sampling estimate against plain
/// Monte Carlo.
pub fn run_toy_ellipse(
    config: &ExperimentConfig,
    outdir: &Path,
    depths: &[usize],
) -> Result<Vec<EllipseToyReport>, CliError> {
    std::fs::create_dir_all(outdir).map_err(stage("toy"))?;
    let ProblemConfig::ToyEllipse {
        alpha,
        angle,
        threshold,
    } = config.problem
    else {
        return Err(CliError::Config(
            "run_toy_ellipse needs a toy_ellipse problem".into(),
        ));
    };
    let toy = EllipseToy {
        alpha,
        angle,
        threshold,
    };

    let mut data_rng = stage_rng(config.train.seed, salts::TOY_DATA);
    let data =
        toy_ellipse_data(config.estimate.n_train_rom, &mut data_rng, &toy).map_err(stage("toy"))?;
    write_scatter_csv(&outdir.join("data.csv"), &data)?;
    let dataset = WeightedDataset::uniform(&data);

    let mut reports = Vec::new();
    for &depth in depths {
        let mut cfg = config.clone();
        cfg.flow.depth = depth;
        let model = build_flow_for(&cfg, 2, Some(&data))?;
        let (trained, history) =
            train(model, &dataset, &cfg.objective(), &cfg.train_config()).map_err(stage("toy"))?;
        write_history(&history, &outdir.join(format!("history_L{depth}.csv")))?;
        trained
            .write_json(&outdir.join(format!("model_L{depth}.json")))
            .map_err(stage("toy"))?;

        let mut sample_rng = stage_rng(cfg.train.seed, salts::TOY_SAMPLE);
        let samples = trained
            .sample(10_000, &mut sample_rng)
            .map_err(stage("toy"))?;
        write_scatter_csv(&outdir.join(format!("samples_L{depth}.csv")), &samples)?;

        let mut mc_rng = stage_rng(cfg.train.seed, salts::MC);
        let mc = mc_estimate(&toy, cfg.estimate.n_mc, &mut mc_rng).map_err(stage("toy"))?;
        let mut is_rng = stage_rng(cfg.train.seed, salts::IS);
        let is = is_estimate(&toy, &trained, cfg.estimate.n_sigma_w, &mut is_rng)
            .map_err(stage("toy"))?
            .with_ratio(mc.std_dev)
            .map_err(stage("toy"))?;
        let ratio = is.ratio.expect("ratio attached above");
        let report = EllipseToyReport {
            depth,
            mc,
            is,
            n_is_over_n_mc: ratio,
        };
        write_json(
            &outdir.join(format!("report_L{depth}.json")),
            &report,
            "toy",
        )?;
        reports.push(report);
    }
    Ok(reports)
}
