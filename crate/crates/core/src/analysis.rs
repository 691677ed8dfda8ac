//! Generalization gaps, correlation estimators and the per-configuration
//! records they are aggregated from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, bounded_cross_entropy, forward, BoundedLoss, MlpModel};

fn check_dims(model: &MlpModel, data: &Dataset) -> Result<()> {
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "dataset dimension {} does not match model input {}",
            data.dim(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Misclassification rate and mean bounded loss of `model` on `data`.
pub fn evaluate(model: &MlpModel, data: &Dataset, bound: BoundedLoss) -> Result<(f64, f64)> {
    check_dims(model, data)?;
    let mut wrong = 0usize;
    let mut loss = 0.0;
    for (x, y) in data.iter() {
        let logits = forward(model, x, None)?;
        if argmax(&logits) != y {
            wrong += 1;
        }
        loss += bounded_cross_entropy(&logits, y, bound)?;
    }
    let n = data.len() as f64;
    Ok((wrong as f64 / n, loss / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub train_error: f64,
    pub test_error: f64,
    /// `test_error − train_error`.
    pub error_gap: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    /// `test_loss − train_loss`.
    pub loss_gap: f64,
}

pub fn generalization_gap(
    model: &MlpModel,
    train: &Dataset,
    test: &Dataset,
    bound: BoundedLoss,
) -> Result<Gap> {
    let (train_error, train_loss) = evaluate(model, train, bound)?;
    let (test_error, test_loss) = evaluate(model, test, bound)?;
    Ok(Gap {
        train_error,
        test_error,
        error_gap: test_error - train_error,
        train_loss,
        test_loss,
        loss_gap: test_loss - train_loss,
    })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "{} x values, {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two points".into(),
        ));
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of the rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One measured configuration. Error and loss figures are means over the
/// ensemble members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_index: usize,
    pub config_hash: String,
    pub algorithm: String,
    /// Hidden widths joined by `x`.
    pub hidden: String,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub adv_radius: f64,
    pub norm: String,
    pub radius: f64,
    pub t: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub epsilon_bar_emp: f64,
    pub variance_alpha: f64,
    /// Deviation of the first member alone.
    pub robustness_t1: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub error_gap: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub loss_gap: f64,
    pub theorem1: f64,
    pub theorem2: f64,
    pub lemma1: f64,
}

/// Column order of `records.csv`.
pub const RECORD_COLUMNS: [&str; 26] = [
    "config_index",
    "config_hash",
    "algorithm",
    "hidden",
    "lr",
    "epochs",
    "batch_size",
    "dropout_rate",
    "adv_radius",
    "norm",
    "radius",
    "t",
    "n_train",
    "n_test",
    "epsilon_bar_emp",
    "variance_alpha",
    "robustness_t1",
    "train_error",
    "test_error",
    "error_gap",
    "train_loss",
    "test_loss",
    "loss_gap",
    "theorem1",
    "theorem2",
    "lemma1",
];

pub fn write_records_csv<W: std::io::Write>(records: &[ExperimentRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Format(format!("writing records: {e}"));
    if records.is_empty() {
        w.write_record(RECORD_COLUMNS).map_err(to_err)?;
    }
    for r in records {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::Format(format!("writing records: {e}")))?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r
        .headers()
        .map_err(|e| Error::Format(format!("reading records: {e}")))?;
    if !header.iter().eq(RECORD_COLUMNS) {
        return Err(Error::Format(format!(
            "unexpected records header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("reading records: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl Correlations {
    fn of(xs: &[f64], ys: &[f64]) -> Self {
        Correlations {
            pearson: pearson(xs, ys).ok(),
            spearman: spearman(xs, ys).ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSet {
    /// ε̄_emp against the error gap.
    pub ensemble: Correlations,
    /// First-member robustness against the error gap.
    pub single_run: Correlations,
    /// ε̄_emp against the loss gap.
    pub ensemble_loss_gap: Correlations,
}

impl CorrelationSet {
    fn of(records: &[&ExperimentRecord]) -> Self {
        let col =
            |f: fn(&ExperimentRecord) -> f64| records.iter().map(|r| f(r)).collect::<Vec<_>>();
        let eps = col(|r| r.epsilon_bar_emp);
        let t1 = col(|r| r.robustness_t1);
        let gap = col(|r| r.error_gap);
        let loss_gap = col(|r| r.loss_gap);
        CorrelationSet {
            ensemble: Correlations::of(&eps, &gap),
            single_run: Correlations::of(&t1, &gap),
            ensemble_loss_gap: Correlations::of(&eps, &loss_gap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub config_index: usize,
    pub algorithm: String,
    pub epsilon_bar_emp: f64,
    pub robustness_t1: f64,
    pub error_gap: f64,
    pub loss_gap: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub count: usize,
    pub correlations: CorrelationSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub record_count: usize,
    pub points: Vec<ScatterPoint>,
    pub correlations: CorrelationSet,
    pub per_algorithm: BTreeMap<String, GroupReport>,
}

/// Correlations that cannot be computed (fewer than two points, constant
/// columns) are reported as `null`.
pub fn build_report(records: &[ExperimentRecord]) -> ExperimentReport {
    let points = records
        .iter()
        .map(|r| ScatterPoint {
            config_index: r.config_index,
            algorithm: r.algorithm.clone(),
            epsilon_bar_emp: r.epsilon_bar_emp,
            robustness_t1: r.robustness_t1,
            error_gap: r.error_gap,
            loss_gap: r.loss_gap,
            test_error: r.test_error,
        })
        .collect();
    let mut groups: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.algorithm.clone()).or_default().push(r);
    }
    let per_algorithm = groups
        .into_iter()
        .map(|(alg, rs)| {
            (
                alg,
                GroupReport {
                    count: rs.len(),
                    correlations: CorrelationSet::of(&rs),
                },
            )
        })
        .collect();
    let all: Vec<&ExperimentRecord> = records.iter().collect();
    ExperimentReport {
        record_count: records.len(),
        points,
        correlations: CorrelationSet::of(&all),
        per_algorithm,
    }
}
