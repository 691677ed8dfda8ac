//! TOML experiment configuration. Layout and defaults are documented in the
//! repository README; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{self, BlobSpec, Dataset};
use crate::error::{Error, Result};
use crate::robustness::Norm;
use crate::train::{Algorithm, BbbConfig, TrainConfig};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;
pub const DEFAULT_DELTA: f64 = 0.1;

fn default_loss_bound() -> f64 {
    100f64.ln()
}

/// Training hyperparameters without the input/output dimensions, which
/// come from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub algorithm: Algorithm,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_scale: f64,
    pub dropout_rate: f64,
    pub dropout_layers: Vec<usize>,
    pub adv_radius: f64,
    pub clamp_adversarial: bool,
    pub priority_exponent: f64,
    pub bbb: BbbConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let base = TrainConfig::new(Algorithm::Sgd, Vec::new());
        TrainSpec {
            algorithm: base.algorithm,
            hidden: vec![32],
            lr: base.lr,
            lr_decay: base.lr_decay,
            momentum: base.momentum,
            weight_decay: base.weight_decay,
            batch_size: base.batch_size,
            epochs: base.epochs,
            init_scale: base.init_scale,
            dropout_rate: base.dropout_rate,
            dropout_layers: base.dropout_layers,
            adv_radius: base.adv_radius,
            clamp_adversarial: base.clamp_adversarial,
            priority_exponent: base.priority_exponent,
            bbb: base.bbb,
        }
    }
}

impl TrainSpec {
    pub fn to_train_config(
        &self,
        input_dim: usize,
        classes: usize,
        loss_bound: f64,
        seed: u64,
    ) -> TrainConfig {
        let mut layer_dims = Vec::with_capacity(self.hidden.len() + 2);
        layer_dims.push(input_dim);
        layer_dims.extend(&self.hidden);
        layer_dims.push(classes);
        TrainConfig {
            algorithm: self.algorithm,
            layer_dims,
            lr: self.lr,
            lr_decay: self.lr_decay,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            init_scale: self.init_scale,
            dropout_rate: self.dropout_rate,
            dropout_layers: self.dropout_layers.clone(),
            adv_radius: self.adv_radius,
            clamp_adversarial: self.clamp_adversarial,
            priority_exponent: self.priority_exponent,
            bbb: self.bbb,
            loss_bound,
            seed,
        }
    }

    pub fn hidden_label(&self) -> String {
        self.hidden
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x")
    }
}

/// A partial [`TrainSpec`]; set fields override the base.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFields {
    algorithm: Option<Algorithm>,
    hidden: Option<Vec<usize>>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    init_scale: Option<f64>,
    dropout_rate: Option<f64>,
    dropout_layers: Option<Vec<usize>>,
    adv_radius: Option<f64>,
    clamp_adversarial: Option<bool>,
    priority_exponent: Option<f64>,
    bbb: Option<BbbConfig>,
}

impl TrainFields {
    fn apply(&self, base: &TrainSpec) -> TrainSpec {
        let mut s = base.clone();
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { s.$f = v.clone(); })*};
        }
        set!(
            algorithm,
            hidden,
            lr,
            lr_decay,
            momentum,
            weight_decay,
            batch_size,
            epochs,
            init_scale,
            dropout_rate,
            dropout_layers,
            adv_radius,
            clamp_adversarial,
            priority_exponent,
            bbb
        );
        s
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFields {
    #[serde(default)]
    algorithms: Vec<Algorithm>,
    #[serde(default)]
    hidden: Vec<Vec<usize>>,
    #[serde(default)]
    lr: Vec<f64>,
    #[serde(default)]
    adv_radius: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SourceKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFields {
    source: SourceKind,
    n: Option<usize>,
    dim: Option<usize>,
    classes: Option<usize>,
    separation: Option<f64>,
    noise: Option<f64>,
    seed: Option<u64>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    max_samples: Option<usize>,
    train_fraction: Option<f64>,
    split_seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    dataset: DatasetFields,
    #[serde(default)]
    train: TrainFields,
    #[serde(default)]
    configs: Vec<TrainFields>,
    sweep: Option<SweepFields>,
    ensemble_size: Option<usize>,
    delta: Option<f64>,
    loss_bound: Option<f64>,
    partition_k: Option<u64>,
    norm: Option<Norm>,
    radius: Option<f64>,
    profile_radii: Option<Vec<f64>>,
    sample_cap: Option<usize>,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    parallelism: Option<usize>,
    clamp_to_unit_box: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(BlobSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Separate test pair; when absent the training pair is split.
        test: Option<(PathBuf, PathBuf)>,
        max_samples: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl DatasetSpec {
    /// `(train, test)` with a shared class count.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.source {
            DataSource::Synthetic(spec) => data::split(
                &data::synthetic_blobs(*spec)?,
                self.train_fraction,
                self.split_seed,
            ),
            DataSource::Idx {
                images,
                labels,
                test,
                max_samples,
            } => {
                let cap = |ds: Dataset| match max_samples {
                    Some(m) => ds.truncated(*m),
                    None => Ok(ds),
                };
                let full = cap(data::load_idx(images, labels)?)?;
                let (train, test) = match test {
                    Some((ti, tl)) => (full, cap(data::load_idx(ti, tl)?)?),
                    None => data::split(&full, self.train_fraction, self.split_seed)?,
                };
                let classes = train.class_count().max(test.class_count());
                Ok((
                    train.with_class_count(classes)?,
                    test.with_class_count(classes)?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub plans: Vec<TrainSpec>,
    /// Ensemble size `T`.
    pub ensemble_size: usize,
    pub delta: f64,
    pub loss_bound: f64,
    pub partition_k: u64,
    pub norm: Norm,
    pub radius: f64,
    pub profile_radii: Vec<f64>,
    pub sample_cap: Option<usize>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub parallelism: Option<usize>,
    pub clamp_to_unit_box: bool,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn require<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing key dataset.{key}")))
}

fn build_dataset(d: DatasetFields, base: &Path) -> Result<DatasetSpec> {
    let source = match d.source {
        SourceKind::Synthetic => DataSource::Synthetic(BlobSpec {
            n: require(d.n, "n")?,
            dim: require(d.dim, "dim")?,
            classes: require(d.classes, "classes")?,
            separation: d.separation.unwrap_or(0.5),
            noise: d.noise.unwrap_or(0.1),
            seed: d.seed.unwrap_or(0),
        }),
        SourceKind::Idx => {
            let test = match (d.test_images, d.test_labels) {
                (Some(i), Some(l)) => Some((resolve(base, i), resolve(base, l))),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "dataset.test_images and dataset.test_labels go together".into(),
                    ))
                }
            };
            DataSource::Idx {
                images: resolve(base, require(d.images, "images")?),
                labels: resolve(base, require(d.labels, "labels")?),
                test,
                max_samples: d.max_samples,
            }
        }
    };
    Ok(DatasetSpec {
        source,
        train_fraction: d.train_fraction.unwrap_or(0.8),
        split_seed: d.split_seed.unwrap_or(0),
    })
}

fn expand_sweep(base: &TrainSpec, sweep: &SweepFields) -> Vec<TrainSpec> {
    let algorithms = if sweep.algorithms.is_empty() {
        vec![base.algorithm]
    } else {
        sweep.algorithms.clone()
    };
    let hidden = if sweep.hidden.is_empty() {
        vec![base.hidden.clone()]
    } else {
        sweep.hidden.clone()
    };
    let lrs = if sweep.lr.is_empty() {
        vec![base.lr]
    } else {
        sweep.lr.clone()
    };
    let radii = if sweep.adv_radius.is_empty() {
        vec![base.adv_radius]
    } else {
        sweep.adv_radius.clone()
    };
    let mut out = Vec::new();
    for &algorithm in &algorithms {
        for h in &hidden {
            for &lr in &lrs {
                for &adv_radius in &radii {
                    out.push(TrainSpec {
                        algorithm,
                        hidden: h.clone(),
                        lr,
                        adv_radius,
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

/// Parse configuration text; relative paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Syntax {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let file: ExperimentFile = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;

    let base = file.train.apply(&TrainSpec::default());
    let mut plans: Vec<TrainSpec> = file.configs.iter().map(|c| c.apply(&base)).collect();
    if let Some(sweep) = &file.sweep {
        plans.extend(expand_sweep(&base, sweep));
    }
    if plans.is_empty() {
        plans.push(base);
    }

    let cfg = ExperimentConfig {
        dataset: build_dataset(file.dataset, base_dir)?,
        plans,
        ensemble_size: file.ensemble_size.unwrap_or(DEFAULT_ENSEMBLE_SIZE),
        delta: file.delta.unwrap_or(DEFAULT_DELTA),
        loss_bound: file.loss_bound.unwrap_or_else(default_loss_bound),
        partition_k: file.partition_k.unwrap_or(1),
        norm: file.norm.unwrap_or(Norm::Linf),
        radius: file.radius.unwrap_or(0.1),
        profile_radii: file
            .profile_radii
            .unwrap_or_else(|| vec![0.0, 0.1, 0.3, 0.5]),
        sample_cap: file.sample_cap,
        output_dir: resolve(base_dir, file.output_dir.unwrap_or_else(|| "out".into())),
        seed: file.seed.unwrap_or(0),
        parallelism: file.parallelism,
        clamp_to_unit_box: file.clamp_to_unit_box.unwrap_or(false),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.loss_bound.is_finite() && self.loss_bound > 0.0) {
            return Err(Error::Config("loss_bound must be positive".into()));
        }
        if self.partition_k == 0 {
            return Err(Error::Config("partition_k must be at least 1".into()));
        }
        if !(self.radius.is_finite() && self.radius >= 0.0) {
            return Err(Error::Config("radius must be non-negative".into()));
        }
        if self
            .profile_radii
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0))
            || self.profile_radii.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Config(
                "profile_radii must be ascending and non-negative".into(),
            ));
        }
        if self.parallelism == Some(0) {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.sample_cap == Some(0) {
            return Err(Error::Config("sample_cap must be at least 1".into()));
        }
        if self.plans.iter().any(|p| p.hidden.contains(&0)) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
source = "synthetic"
n = 40
dim = 2
classes = 2

[train]
algorithm = "sgd"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(c.ensemble_size, 5);
        assert_eq!(c.delta, 0.1);
        assert_eq!(c.loss_bound, 100f64.ln());
        assert_eq!(c.plans.len(), 1);
        assert_eq!(c.plans[0].algorithm, Algorithm::Sgd);
        assert_eq!(c.output_dir, Path::new("/tmp/out"));
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}lerning_rate = 0.1\n");
        let err = parse_config_str(&text, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let text = "[dataset]\nsource = \"synthetic\"\nn = = 3\n";
        match parse_config_str(text, Path::new(".")) {
            Err(Error::Syntax { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_is_a_product() {
        let text = format!(
            "{MINIMAL}\n[sweep]\nalgorithms = [\"sgd\", \"adversarial_linf\"]\nadv_radius = [0.1, 0.3, 0.5]\n"
        );
        let c = parse_config_str(&text, Path::new(".")).unwrap();
        assert_eq!(c.plans.len(), 6);
    }

    #[test]
    fn explicit_configs_override_the_base() {
        let text = format!(
            "{MINIMAL}epochs = 3\n\n[[configs]]\nalgorithm = \"sgd_dropout\"\ndropout_rate = 0.3\n\n[[configs]]\nhidden = [8, 8]\n"
        );
        // `epochs` after [train] belongs to that table.
        let c = parse_config_str(&text, Path::new(".")).unwrap();
        assert_eq!(c.plans.len(), 2);
        assert_eq!(c.plans[0].epochs, 3);
        assert_eq!(c.plans[0].dropout_rate, 0.3);
        assert_eq!(c.plans[1].algorithm, Algorithm::Sgd);
        assert_eq!(c.plans[1].hidden, vec![8, 8]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let text = MINIMAL.replace("[train]", "delta = 1.5\n[train]");
        assert!(matches!(
            parse_config_str(&text, Path::new(".")),
            Err(Error::Config(_))
        ));
        let text = MINIMAL.replace("n = 40\n", "");
        assert!(matches!(
            parse_config_str(&text, Path::new(".")),
            Err(Error::Config(_))
        ));
    }
}
