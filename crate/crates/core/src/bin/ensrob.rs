use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ensrob::bounds::DropoutForm;
use ensrob::data::{self, BlobSpec, Dataset};
use ensrob::experiment::{
    bounds_table, cmd_measure, cmd_run, format_bounds, parse_config, BoundsRequest,
};
use ensrob::nn::BoundedLoss;
use ensrob::robustness::{Norm, PerturbationSpec};
use ensrob::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ensrob",
    version,
    about = "Ensemble robustness experiments for small MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train ensembles for every configuration and write records, report and models.
    Run(RunArgs),
    /// Same as `run`; meant for configs with a `[sweep]` grid.
    Sweep(RunArgs),
    /// Evaluate the generalization bounds.
    Bounds(BoundsArgs),
    /// Measure the ensemble robustness of serialized models.
    Measure(MeasureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Worker threads; never changes the results.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Training-set size n.
    #[arg(long)]
    n: u64,
    /// Loss bound M.
    #[arg(long, default_value_t = 100f64.ln())]
    m: f64,
    /// Confidence parameter δ.
    #[arg(long)]
    delta: f64,
    /// Ensemble robustness ε̄.
    #[arg(long = "epsilon-bar")]
    epsilon_bar: f64,
    /// Robustness variance α (enables theorem2).
    #[arg(long)]
    alpha: Option<f64>,
    /// Partition cardinality K, a modeling choice rather than a measurement
    /// (enables lemma1, theorem2 and the dropout bound).
    #[arg(long)]
    k: Option<u64>,
    /// Dropout sensitivity β (proof form only).
    #[arg(long)]
    beta: Option<f64>,
    /// Dropout-randomized layer count L (enables the dropout bound).
    #[arg(long)]
    layers: Option<u64>,
    /// Dropout bound middle term: `stated` or `proof`.
    #[arg(long, default_value = "stated")]
    form: String,
    /// Mean adversarial training loss (enables corollary1).
    #[arg(long = "adv-mean")]
    adv_mean: Option<f64>,
}

#[derive(Args)]
struct MeasureArgs {
    /// Model files written by `run` (models/*.bin).
    #[arg(required = true)]
    models: Vec<PathBuf>,
    /// Measure on the training split of this experiment config's dataset.
    #[arg(long, conflicts_with_all = ["images", "blob_n"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Synthetic blobs: sample count.
    #[arg(long, requires_all = ["blob_dim", "blob_classes"])]
    blob_n: Option<usize>,
    #[arg(long)]
    blob_dim: Option<usize>,
    #[arg(long)]
    blob_classes: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    blob_separation: f64,
    #[arg(long, default_value_t = 0.1)]
    blob_noise: f64,
    #[arg(long, default_value_t = 0)]
    blob_seed: u64,
    /// Split the given data and measure on the training part.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value = "linf")]
    norm: String,
    #[arg(long)]
    radius: f64,
    #[arg(long = "loss-bound", default_value_t = 100f64.ln())]
    loss_bound: f64,
    #[arg(long)]
    sample_cap: Option<usize>,
    /// Clamp perturbed samples back into the unit box.
    #[arg(long)]
    clamp: bool,
    /// Also write per-model maxima as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let output = cmd_run(&cfg, args.parallelism)?;
    let c = &output.report.correlations;
    println!(
        "{} configurations, T = {}",
        output.outcomes.len(),
        cfg.ensemble_size
    );
    for o in &output.outcomes {
        let r = &o.record;
        println!(
            "  [{:>3}] {:<20} hidden={:<8} eps_bar={:.6} alpha={:.3e} gap={:+.4}",
            r.config_index, r.algorithm, r.hidden, r.epsilon_bar_emp, r.variance_alpha, r.error_gap
        );
    }
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "ensemble robustness vs error gap: pearson {} spearman {}",
        show(c.ensemble.pearson),
        show(c.ensemble.spearman)
    );
    println!(
        "wrote {} and {}",
        output.records_path.display(),
        output.report_path.display()
    );
    Ok(())
}

fn bounds(args: BoundsArgs) -> Result<()> {
    let form: DropoutForm = args.form.parse()?;
    let rows = bounds_table(&BoundsRequest {
        n: args.n,
        m: args.m,
        delta: args.delta,
        epsilon_bar: args.epsilon_bar,
        alpha: args.alpha,
        k: args.k,
        beta: args.beta,
        layers: args.layers,
        form,
        adv_mean: args.adv_mean,
    })?;
    print!("{}", format_bounds(&rows));
    Ok(())
}

fn measure_data(args: &MeasureArgs) -> Result<Dataset> {
    let data = if let Some(path) = &args.config {
        return parse_config(path)?.dataset.load().map(|(train, _)| train);
    } else if let (Some(i), Some(l)) = (&args.images, &args.labels) {
        data::load_idx(i, l)?
    } else if let (Some(n), Some(dim), Some(classes)) =
        (args.blob_n, args.blob_dim, args.blob_classes)
    {
        data::synthetic_blobs(BlobSpec {
            n,
            dim,
            classes,
            separation: args.blob_separation,
            noise: args.blob_noise,
            seed: args.blob_seed,
        })?
    } else {
        return Err(Error::Config(
            "give --config, --images/--labels or --blob-n/--blob-dim/--blob-classes".into(),
        ));
    };
    match args.train_fraction {
        Some(f) => data::split(&data, f, args.split_seed).map(|(train, _)| train),
        None => Ok(data),
    }
}

fn measure(args: MeasureArgs) -> Result<()> {
    let mut data = measure_data(&args)?;
    if let Some(cap) = args.sample_cap {
        data = data.truncated(cap)?;
    }
    let norm: Norm = args.norm.parse()?;
    let mut spec = PerturbationSpec::new(norm, args.radius)?;
    spec.clamp_to_unit_box = args.clamp;
    let bound = BoundedLoss::new(args.loss_bound)?;
    let est = cmd_measure(&args.models, &data, spec, bound)?;

    println!("T\t{}", est.t);
    println!("epsilon_bar_emp\t{:.9}", est.epsilon_bar_emp);
    println!("variance_alpha\t{:.9}", est.variance_alpha);
    for (path, v) in args.models.iter().zip(&est.per_run_max) {
        println!("max_deviation\t{:.9}\t{}", v, path.display());
    }
    if let Some(csv_path) = &args.csv {
        let mut text = String::from("member,model,max_deviation\n");
        for (t, (path, v)) in args.models.iter().zip(&est.per_run_max).enumerate() {
            text.push_str(&format!("{t},{},{v}\n", path.display()));
        }
        std::fs::write(csv_path, text).map_err(|e| Error::Io {
            path: csv_path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) | Command::Sweep(a) => run(a),
        Command::Bounds(a) => bounds(a),
        Command::Measure(a) => measure(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ensrob: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
