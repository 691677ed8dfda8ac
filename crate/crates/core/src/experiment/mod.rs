//! Experiment orchestration behind the `ensrob` binary.

mod config;
mod model_io;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    build_report, generalization_gap, write_records_csv, ExperimentRecord, ExperimentReport,
};
use crate::bounds::{
    corollary1_risk_bound, dropout_bound, lemma1_bound, theorem1_bound, theorem2_bound,
    BoundInputs, DropoutForm,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::BoundedLoss;
use crate::robustness::{
    deviation_profile, empirical_ensemble_robustness, PerturbationSpec, RobustnessEstimate,
};
use crate::train::{train_ensemble, Hypothesis, TrainConfig};

pub use config::{
    parse_config, parse_config_str, DataSource, DatasetSpec, ExperimentConfig, TrainSpec,
    DEFAULT_DELTA, DEFAULT_ENSEMBLE_SIZE,
};
pub use model_io::{
    decode_model, encode_model, load_hypothesis, save_hypothesis, ModelSidecar, MODEL_MAGIC,
    MODEL_VERSION,
};

/// Everything measured for one training configuration.
#[derive(Debug, Clone)]
pub struct ConfigOutcome {
    pub config: TrainConfig,
    pub ensemble: Vec<Hypothesis>,
    pub record: ExperimentRecord,
    pub profile: Vec<(f64, RobustnessEstimate)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub radius: f64,
    pub epsilon_bar_emp: f64,
    pub variance_alpha: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigProfile {
    pub config_index: usize,
    pub algorithm: String,
    pub points: Vec<ProfilePoint>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub report: ExperimentReport,
    pub norm: String,
    pub profiles: Vec<ConfigProfile>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outcomes: Vec<ConfigOutcome>,
    pub report: ExperimentReport,
    pub records_path: PathBuf,
    pub report_path: PathBuf,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn evaluate_config(
    index: usize,
    plan: &TrainSpec,
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    measure_on: &Dataset,
) -> Result<ConfigOutcome> {
    let bound = BoundedLoss::new(cfg.loss_bound)?;
    let config = plan.to_train_config(train.dim(), train.class_count(), cfg.loss_bound, cfg.seed);
    config.validate().map_err(Error::in_stage("config"))?;

    let ensemble = train_ensemble(&config, train, cfg.ensemble_size, cfg.seed)
        .map_err(Error::in_stage("train"))?;

    let spec = PerturbationSpec {
        norm: cfg.norm,
        radius: cfg.radius,
        clamp_to_unit_box: cfg.clamp_to_unit_box,
    };
    let estimate = empirical_ensemble_robustness(&ensemble, measure_on, spec, bound)
        .map_err(Error::in_stage("measure"))?;
    let profile = deviation_profile(&ensemble, measure_on, &cfg.profile_radii, cfg.norm, bound)
        .map_err(Error::in_stage("profile"))?;

    let gaps = ensemble
        .iter()
        .map(|h| generalization_gap(&h.model, train, test, bound))
        .collect::<Result<Vec<_>>>()
        .map_err(Error::in_stage("evaluate"))?;

    let mut inputs = BoundInputs::new(
        train.len() as u64,
        cfg.loss_bound,
        cfg.delta,
        estimate.epsilon_bar_emp,
    );
    inputs.k = cfg.partition_k;
    inputs.alpha = estimate.variance_alpha;
    let bounds_stage = Error::in_stage("bounds");

    let record = ExperimentRecord {
        config_index: index,
        config_hash: config.config_hash(),
        algorithm: config.algorithm.to_string(),
        hidden: plan.hidden_label(),
        lr: config.lr,
        epochs: config.epochs,
        batch_size: config.batch_size,
        dropout_rate: config.dropout_rate,
        adv_radius: config.adv_radius,
        norm: cfg.norm.to_string(),
        radius: cfg.radius,
        t: estimate.t,
        n_train: train.len(),
        n_test: test.len(),
        epsilon_bar_emp: estimate.epsilon_bar_emp,
        variance_alpha: estimate.variance_alpha,
        robustness_t1: estimate.per_run_max[0],
        train_error: mean(gaps.iter().map(|g| g.train_error)),
        test_error: mean(gaps.iter().map(|g| g.test_error)),
        error_gap: mean(gaps.iter().map(|g| g.error_gap)),
        train_loss: mean(gaps.iter().map(|g| g.train_loss)),
        test_loss: mean(gaps.iter().map(|g| g.test_loss)),
        loss_gap: mean(gaps.iter().map(|g| g.loss_gap)),
        theorem1: theorem1_bound(&inputs).map_err(&bounds_stage)?,
        theorem2: theorem2_bound(&inputs).map_err(&bounds_stage)?,
        lemma1: lemma1_bound(&inputs).map_err(&bounds_stage)?,
    };
    Ok(ConfigOutcome {
        config,
        ensemble,
        record,
        profile,
    })
}

/// Default worker count: one per configuration, capped by the machine.
pub fn default_parallelism(configs: usize) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, usize::from);
    configs.clamp(1, cores)
}

/// Train, measure and evaluate every configuration without touching disk.
/// Results do not depend on `parallelism`.
pub fn run_experiment(cfg: &ExperimentConfig, parallelism: usize) -> Result<Vec<ConfigOutcome>> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load().map_err(Error::in_stage("dataset"))?;
    let measure_on = match cfg.sample_cap {
        Some(cap) => train.truncated(cap)?,
        None => train.clone(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        cfg.plans
            .par_iter()
            .enumerate()
            .map(|(i, plan)| {
                evaluate_config(i, plan, cfg, &train, &test, &measure_on).map_err(|e| {
                    Error::Stage {
                        stage: "configuration",
                        source: Box::new(Error::Member {
                            member: i,
                            source: Box::new(e),
                        }),
                    }
                })
            })
            .collect()
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Run an experiment and write `records.csv`, `profile.csv`, `report.json`
/// and `models/` under the configured output directory.
pub fn cmd_run(cfg: &ExperimentConfig, parallelism: Option<usize>) -> Result<RunOutput> {
    let workers = parallelism
        .or(cfg.parallelism)
        .unwrap_or_else(|| default_parallelism(cfg.plans.len()));
    let outcomes = run_experiment(cfg, workers)?;

    let out = &cfg.output_dir;
    let write = Error::in_stage("write");
    std::fs::create_dir_all(out).map_err(|e| write(Error::io(out, e)))?;

    let records: Vec<ExperimentRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let records_path = out.join("records.csv");
    let mut csv_bytes = Vec::new();
    write_records_csv(&records, &mut csv_bytes).map_err(&write)?;
    write_file(&records_path, &csv_bytes).map_err(&write)?;

    let mut profile_csv = String::from("config_index,radius,epsilon_bar_emp,variance_alpha\n");
    for o in &outcomes {
        for (r, e) in &o.profile {
            profile_csv.push_str(&format!(
                "{},{},{},{}\n",
                o.record.config_index, r, e.epsilon_bar_emp, e.variance_alpha
            ));
        }
    }
    write_file(&out.join("profile.csv"), profile_csv.as_bytes()).map_err(&write)?;

    let models = out.join("models");
    for o in &outcomes {
        for (t, h) in o.ensemble.iter().enumerate() {
            let stem = format!("cfg{:03}_m{t:02}", o.record.config_index);
            save_hypothesis(&models, &stem, h, &o.config).map_err(&write)?;
        }
    }

    let report = build_report(&records);
    let run_report = RunReport {
        report: report.clone(),
        norm: cfg.norm.to_string(),
        profiles: outcomes
            .iter()
            .map(|o| ConfigProfile {
                config_index: o.record.config_index,
                algorithm: o.record.algorithm.clone(),
                points: o
                    .profile
                    .iter()
                    .map(|(r, e)| ProfilePoint {
                        radius: *r,
                        epsilon_bar_emp: e.epsilon_bar_emp,
                        variance_alpha: e.variance_alpha,
                    })
                    .collect(),
            })
            .collect(),
    };
    let report_path = out.join("report.json");
    let json = serde_json::to_string_pretty(&run_report).expect("report serializes");
    write_file(&report_path, json.as_bytes()).map_err(&write)?;

    Ok(RunOutput {
        outcomes,
        report,
        records_path,
        report_path,
    })
}

/// Load serialized hypotheses and measure their ensemble robustness on
/// `data`. All models must share one architecture.
pub fn cmd_measure(
    model_paths: &[PathBuf],
    data: &Dataset,
    spec: PerturbationSpec,
    bound: BoundedLoss,
) -> Result<RobustnessEstimate> {
    if model_paths.is_empty() {
        return Err(Error::Config("no model files given".into()));
    }
    let ensemble = model_paths
        .iter()
        .map(|p| load_hypothesis(p))
        .collect::<Result<Vec<_>>>()?;
    let arch = ensemble[0].model.layer_dims();
    if let Some((i, h)) = ensemble
        .iter()
        .enumerate()
        .find(|(_, h)| h.model.layer_dims() != arch)
    {
        return Err(Error::Protocol(format!(
            "{} has architecture {:?}, expected {:?}",
            model_paths[i].display(),
            h.model.layer_dims(),
            arch
        )));
    }
    empirical_ensemble_robustness(&ensemble, data, spec, bound)
}

/// Flags of the `bounds` subcommand. Optional inputs switch the bounds that
/// need them on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsRequest {
    pub n: u64,
    pub m: f64,
    pub delta: f64,
    pub epsilon_bar: f64,
    pub alpha: Option<f64>,
    pub k: Option<u64>,
    pub beta: Option<f64>,
    pub layers: Option<u64>,
    pub form: DropoutForm,
    pub adv_mean: Option<f64>,
}

/// `(name, value)` for every bound computable from the request.
pub fn bounds_table(req: &BoundsRequest) -> Result<Vec<(&'static str, f64)>> {
    let mut inputs = BoundInputs::new(req.n, req.m, req.delta, req.epsilon_bar);
    inputs.k = req.k.unwrap_or(1);
    inputs.alpha = req.alpha.unwrap_or(0.0);
    inputs.beta = req.beta.unwrap_or(0.0);
    inputs.layers = req.layers.unwrap_or(1);
    inputs.validate()?;

    let mut rows = vec![("theorem1", theorem1_bound(&inputs)?)];
    if let Some(adv) = req.adv_mean {
        rows.push(("corollary1", corollary1_risk_bound(adv, &inputs)?));
    }
    if req.k.is_some() {
        if req.alpha.is_some() {
            rows.push(("theorem2", theorem2_bound(&inputs)?));
        }
        rows.push(("lemma1", lemma1_bound(&inputs)?));
        if req.layers.is_some() {
            if req.form == DropoutForm::Proof && req.beta.is_none() {
                return Err(Error::Config(
                    "--beta is required for the proof form".into(),
                ));
            }
            let name = match req.form {
                DropoutForm::Stated => "dropout_stated",
                DropoutForm::Proof => "dropout_proof",
            };
            rows.push((name, dropout_bound(&inputs, req.form)?));
        }
    }
    Ok(rows)
}

pub fn format_bounds(rows: &[(&str, f64)]) -> String {
    rows.iter()
        .map(|(name, v)| format!("{name}\t{v:.9}\n"))
        .collect()
}
