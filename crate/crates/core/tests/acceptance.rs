//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! The MNIST smoke criterion looks for the four standard IDX files in
//! `$ENSROB_MNIST_DIR` and is reported as SKIPPED when they are absent.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ensrob::analysis::{evaluate, pearson, spearman};
use ensrob::bounds::{
    dropout_bound, lemma1_bound, theorem1_bound, theorem2_bound, BoundInputs, DropoutForm,
};
use ensrob::data::{load_idx, synthetic_blobs, BlobSpec};
use ensrob::experiment::{cmd_run, parse_config_str, run_experiment};
use ensrob::nn::{
    backward, bounded_cross_entropy, forward, init_mlp, sample_dropout_mask, BoundedLoss, MlpModel,
    Params,
};
use ensrob::robustness::{
    brute_force_deviation_oracle, empirical_ensemble_robustness, per_hypothesis_max_deviation,
    sample_deviation, solve_linearized, Norm, PerturbationSpec,
};
use ensrob::train::{train, train_ensemble, Algorithm, TrainConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within_time(outcome: Outcome, elapsed: Duration, limit: Duration) -> Outcome {
    match outcome {
        Outcome::Pass(d) if elapsed > limit => {
            Outcome::Fail(format!("{d}; took {elapsed:.1?}, limit {limit:?}"))
        }
        other => other,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn pre_activations(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let p = model.params();
    let dims = model.layer_dims();
    let mut a = x.to_vec();
    let mut all = Vec::new();
    for l in 0..model.num_layers() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let z: Vec<f64> = (0..fan_out)
            .map(|j| {
                p.biases[l][j]
                    + (0..fan_in)
                        .map(|i| p.weights[l][j * fan_in + i] * a[i])
                        .sum::<f64>()
            })
            .collect();
        if l + 1 < model.num_layers() {
            all.extend_from_slice(&z);
        }
        a = z.iter().map(|v| v.max(0.0)).collect();
    }
    all
}

fn loss_of(model: &MlpModel, x: &[f64], label: usize, bound: BoundedLoss) -> f64 {
    bounded_cross_entropy(&forward(model, x, None).unwrap(), label, bound).unwrap()
}

fn c1_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bound = BoundedLoss::new(50.0).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    let mut redraws = 0;
    while pairs < 50 {
        let layers = rng.random_range(1..=3usize);
        let dims: Vec<usize> = (0..=layers)
            .map(|_| rng.random_range(1..=16usize))
            .collect();
        let mut dims = dims;
        dims[layers] = dims[layers].max(2);
        let model = init_mlp(&dims, rng.random(), 1.0).unwrap();
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random::<f64>()).collect();
        let label = rng.random_range(0..dims[layers]);
        if pre_activations(&model, &x).iter().any(|z| z.abs() < 1e-3) {
            redraws += 1;
            continue;
        }
        let g = backward(&model, &x, label, bound, None).unwrap();

        let n = model.params().len();
        for k in 0..n {
            let bumped = |delta: f64| {
                let mut p: Params = model.params().clone();
                *p.iter_mut().nth(k).unwrap() += delta;
                let m = MlpModel::from_params(dims.clone(), p).unwrap();
                loss_of(&m, &x, label, bound)
            };
            let numeric = (bumped(h) - bumped(-h)) / (2.0 * h);
            let analytic = *g.params.iter().nth(k).unwrap();
            worst = worst.max(rel_err(analytic, numeric));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let numeric = (loss_of(&model, &xp, label, bound) - loss_of(&model, &xm, label, bound))
                / (2.0 * h);
            worst = worst.max(rel_err(g.input[i], numeric));
        }
        pairs += 1;
    }
    verdict(
        worst <= 1e-5,
        format!("50 pairs ({redraws} redrawn near ReLU kinks), worst relative error {worst:.2e}"),
    )
}

/// Whether some first-layer unit can change sign within the box of
/// half-width `r` around `x`; the box contains every ball used here.
fn hidden_kink_in_ball(model: &MlpModel, x: &[f64], r: f64) -> bool {
    let p = model.params();
    let d = x.len();
    (0..model.layer_dims()[1]).any(|j| {
        let w = &p.weights[0][j * d..(j + 1) * d];
        let z = p.biases[0][j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        z.abs() <= r * w.iter().map(|v| v.abs()).sum::<f64>()
    })
}

fn c2_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_dual: f64 = 0.0;
    for norm in [Norm::L1, Norm::L2, Norm::Linf] {
        for _ in 0..100 {
            let d = rng.random_range(1..=8usize);
            let g: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r = rng.random_range(0.01..1.0);
            let delta = solve_linearized(&g, norm, r).unwrap();
            let achieved: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
            let target = r * norm.dual().of(&g);
            worst_dual =
                worst_dual.max((achieved - target).abs() / target.abs().max(f64::MIN_POSITIVE));
        }
    }

    let bound = BoundedLoss::new(50.0).unwrap();
    let mut worst_ratio: f64 = 0.0;
    let (mut violations, mut with_kink) = (0, 0);
    for k in 0..20u64 {
        let d = 1 + (k % 3) as usize;
        let model = init_mlp(&[d, 6, 3], 100 + k, 1.0).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let label = rng.random_range(0..3usize);
        let norm = [Norm::L1, Norm::L2, Norm::Linf][k as usize % 3];
        let spec = PerturbationSpec::new(norm, 0.1).unwrap();
        let solver = sample_deviation(&model, &x, label, spec, bound).unwrap();
        let oracle = brute_force_deviation_oracle(&model, &x, label, spec, 21, bound).unwrap();
        let ratio = match (oracle, solver) {
            (o, s) if s > 0.0 => o / s,
            (o, _) if o > 0.0 => f64::INFINITY,
            _ => 1.0,
        };
        worst_ratio = worst_ratio.max(ratio);
        if ratio > 1.25 {
            violations += 1;
            with_kink += usize::from(hidden_kink_in_ball(&model, &x, 0.1));
        }
    }

    let mut worst_linear: f64 = 0.0;
    for k in 0..20u64 {
        let d = 1 + (k % 3) as usize;
        let model = init_mlp(&[d, 2], 200 + k, 1.0).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let label = rng.random_range(0..2usize);
        for norm in [Norm::L1, Norm::L2, Norm::Linf] {
            let spec = PerturbationSpec::new(norm, 0.1).unwrap();
            let solver = sample_deviation(&model, &x, label, spec, bound).unwrap();
            let oracle = brute_force_deviation_oracle(&model, &x, label, spec, 21, bound).unwrap();
            worst_linear = worst_linear.max((oracle - solver).abs());
        }
    }

    verdict(
        worst_dual <= 1e-12 && worst_ratio <= 1.25 && worst_linear <= 1e-9,
        format!(
            "dual-norm rel err {worst_dual:.1e}; oracle/solver worst {worst_ratio:.4}, \
             {violations}/20 above 1.25 ({with_kink} with a ReLU kink inside the ball); \
             linear-model gap {worst_linear:.1e}"
        ),
    )
}

fn c3_bounds() -> Outcome {
    let t1 = theorem1_bound(&BoundInputs::new(100, 1.0, 0.1, 0.0)).unwrap();
    let mut t2_in = BoundInputs::new(1000, 1.0, 0.05, 0.1);
    t2_in.alpha = 0.05;
    t2_in.k = 4;
    let t2 = theorem2_bound(&t2_in).unwrap();
    let mut l1_in = BoundInputs::new(1000, 1.0, 0.1, 0.1);
    l1_in.k = 4;
    let l1 = lemma1_bound(&l1_in).unwrap();
    let mut d_in = BoundInputs::new(800, 1.0, 0.2, 0.05);
    d_in.k = 2;
    d_in.layers = 8;
    let db = dropout_bound(&d_in, DropoutForm::Stated).unwrap();
    let ok = format!("{t1:.9}") == "0.447213595"
        && (t2 - 0.365523).abs() <= 1e-5
        && (l1 - 0.200749).abs() <= 1e-5
        && (db - 0.780350).abs() <= 1e-5;
    verdict(
        ok,
        format!("theorem1 {t1:.9}, theorem2 {t2:.6}, lemma1 {l1:.6}, dropout {db:.6}"),
    )
}

fn c4_adversarial() -> Outcome {
    let data = synthetic_blobs(BlobSpec {
        n: 2000,
        dim: 20,
        classes: 4,
        separation: 0.5,
        noise: 0.15,
        seed: 0,
    })
    .unwrap();
    let spec = PerturbationSpec::new(Norm::Linf, 0.1).unwrap();
    let bound = BoundedLoss::default();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for rep in 0..5u64 {
        let eps = |alg| {
            let config = TrainConfig::new(alg, vec![20, 32, 4]);
            let ensemble = train_ensemble(&config, &data, 5, 1000 * rep).unwrap();
            empirical_ensemble_robustness(&ensemble, &data, spec, bound)
                .unwrap()
                .epsilon_bar_emp
        };
        let (sgd, adv) = (eps(Algorithm::Sgd), eps(Algorithm::AdversarialLinf));
        wins += usize::from(adv < sgd);
        pairs.push(format!("{adv:.3}<{sgd:.3}"));
    }
    verdict(
        wins >= 4,
        format!("adversarial below sgd in {wins}/5 ({})", pairs.join(" ")),
    )
}

const SWEEP: &str = r#"
ensemble_size = 5
norm = "linf"
radius = 0.1
profile_radii = [0.1]

[dataset]
source = "synthetic"
n = 1000
dim = 5
classes = 4
separation = 0.2
noise = 0.2
seed = 0
train_fraction = 0.2

[train]
epochs = 400
batch_size = 20
lr = 0.05
adv_radius = 0.1

[sweep]
algorithms = ["sgd", "sgd_dropout", "adversarial_linf", "prioritized"]
hidden = [[16], [64], [256]]
"#;

fn c5_correlation() -> Outcome {
    let cfg = parse_config_str(SWEEP, Path::new(".")).unwrap();
    let workers = std::thread::available_parallelism().map_or(1, usize::from);
    let outcomes = run_experiment(&cfg, workers).unwrap();
    let eps: Vec<f64> = outcomes.iter().map(|o| o.record.epsilon_bar_emp).collect();
    let single: Vec<f64> = outcomes.iter().map(|o| o.record.robustness_t1).collect();
    let gap: Vec<f64> = outcomes.iter().map(|o| o.record.error_gap).collect();
    let rho = spearman(&eps, &gap).unwrap();
    let p_ens = pearson(&eps, &gap).unwrap();
    let p_one = pearson(&single, &gap).unwrap();
    verdict(
        outcomes.len() == 12 && rho >= 0.5 && p_ens >= p_one - 0.05,
        format!(
            "{} configs, spearman {rho:.3}, pearson T=5 {p_ens:.3} vs T=1 {p_one:.3}",
            outcomes.len()
        ),
    )
}

fn c6_single_member() -> Outcome {
    let data = synthetic_blobs(BlobSpec {
        n: 200,
        dim: 4,
        classes: 3,
        separation: 0.3,
        noise: 0.1,
        seed: 6,
    })
    .unwrap();
    let mut config = TrainConfig::new(Algorithm::SgdDropout, vec![4, 16, 3]);
    config.epochs = 3;
    let ensemble = train_ensemble(&config, &data, 1, 6).unwrap();
    let bound = BoundedLoss::default();
    let mut ok = true;
    for norm in [Norm::L1, Norm::L2, Norm::Linf] {
        let spec = PerturbationSpec::new(norm, 0.2).unwrap();
        let est = empirical_ensemble_robustness(&ensemble, &data, spec, bound).unwrap();
        let single = per_hypothesis_max_deviation(&ensemble[0], &data, spec, bound).unwrap();
        ok &= est.t == 1 && est.epsilon_bar_emp == single && est.variance_alpha == 0.0;
    }
    verdict(
        ok,
        "T=1 estimate equals the member maximum exactly, variance 0".into(),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn c7_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
ensemble_size = 3
profile_radii = [0.0, 0.1]

[dataset]
source = "synthetic"
n = 240
dim = 6
classes = 3
noise = 0.15
seed = 7

[train]
epochs = 4
batch_size = 16

[sweep]
algorithms = ["sgd", "sgd_dropout", "prioritized", "adversarial_l2", "bayes_by_backprop"]
hidden = [[8]]
"#;
    let mut cfg = parse_config_str(text, dir.path()).unwrap();
    let mut files = Vec::new();
    for (run, workers) in [(0, 1), (1, 1), (2, 4), (3, 4)] {
        cfg.output_dir = dir.path().join(format!("run{run}"));
        let out = cmd_run(&cfg, Some(workers)).unwrap();
        files.push(read(&out.records_path));
    }
    let ok = files.windows(2).all(|w| w[0] == w[1]);
    verdict(
        ok,
        "records.csv byte-identical across reruns at parallelism 1 and 4".into(),
    )
}

fn mnist_files(dir: &Path) -> Option<[PathBuf; 4]> {
    let names = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    let paths = names.map(|n| dir.join(n));
    paths.iter().all(|p| p.exists()).then_some(paths)
}

fn c8_mnist() -> Outcome {
    let Some(dir) = std::env::var_os("ENSROB_MNIST_DIR") else {
        return Outcome::Skipped("ENSROB_MNIST_DIR not set".into());
    };
    let Some([ti, tl, vi, vl]) = mnist_files(Path::new(&dir)) else {
        return Outcome::Skipped(format!(
            "IDX files not found in {}",
            Path::new(&dir).display()
        ));
    };
    let start = Instant::now();
    let train_set = load_idx(&ti, &tl).unwrap();
    let test_set = load_idx(&vi, &vl).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let bound = BoundedLoss::default();
    let (test_error, eps) = pool.install(|| {
        let mut config = TrainConfig::new(Algorithm::Sgd, vec![784, 128, 10]);
        config.epochs = 5;
        let h = train(&config, &train_set).unwrap();
        let (test_error, _) = evaluate(&h.model, &test_set, bound).unwrap();
        let spec = PerturbationSpec::new(Norm::Linf, 0.1).unwrap();
        let est = empirical_ensemble_robustness(std::slice::from_ref(&h), &test_set, spec, bound)
            .unwrap();
        (test_error, est.epsilon_bar_emp)
    });
    let elapsed = start.elapsed();
    verdict(
        test_error <= 0.05 && eps > 0.0 && eps < bound.max() && elapsed <= Duration::from_secs(600),
        format!("test error {test_error:.4}, epsilon_bar {eps:.4}, {elapsed:.1?} on one thread"),
    )
}

fn c9_dropout_expectation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [8usize, 16, 4];
    let mut params = Params::zeros(&dims);
    for v in params.iter_mut() {
        *v = rng.random_range(0.05..1.0);
    }
    let model = MlpModel::from_params(dims.to_vec(), params).unwrap();
    let x: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
    let exact = forward(&model, &x, None).unwrap();
    let draws = 10_000;
    let mut mean = vec![0.0; exact.len()];
    for k in 0..draws {
        let mask = sample_dropout_mask(0.5, &[16], k).unwrap();
        for (m, z) in mean
            .iter_mut()
            .zip(forward(&model, &x, Some(&mask)).unwrap())
        {
            *m += z / draws as f64;
        }
    }
    let worst = mean
        .iter()
        .zip(&exact)
        .map(|(m, e)| (m - e).abs() / e.abs())
        .fold(0.0, f64::max);
    verdict(
        worst <= 0.01,
        format!("worst relative deviation {worst:.2e} over {draws} masks"),
    )
}

fn c10_statistics() -> Outcome {
    let p = pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let xs = [0.3, -1.0, 2.5, 7.0, 0.0, 4.4];
    let increasing: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
    let decreasing: Vec<f64> = xs.iter().map(|x| -x * x * x).collect();
    let s_up = spearman(&xs, &increasing).unwrap();
    let s_down = spearman(&xs, &decreasing).unwrap();
    verdict(
        (p - 0.5).abs() <= 1e-12 && s_up == 1.0 && s_down == -1.0,
        format!("pearson {p}, spearman {s_up} / {s_down}"),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, Check, u64); 10] = [
        ("1 gradient correctness", c1_gradients, 10),
        ("2 perturbation solver optimality", c2_solver, 30),
        ("3 bound evaluators", c3_bounds, 1),
        (
            "4 adversarial training lowers robustness",
            c4_adversarial,
            300,
        ),
        (
            "5 robustness tracks generalization gap",
            c5_correlation,
            900,
        ),
        ("6 single-member identity", c6_single_member, 60),
        ("7 determinism", c7_determinism, 120),
        ("8 MNIST smoke", c8_mnist, 600),
        ("9 dropout expectation", c9_dropout_expectation, 60),
        ("10 correlation statistics", c10_statistics, 1),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome =
            std::panic::catch_unwind(check).unwrap_or_else(|_| Outcome::Fail("panicked".into()));
        let elapsed = start.elapsed();
        match within_time(outcome, elapsed, Duration::from_secs(limit)) {
            Outcome::Pass(d) => println!("criterion {name}: PASS ({d}) [{elapsed:.1?}]"),
            Outcome::Skipped(d) => println!("criterion {name}: SKIPPED ({d})"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d}) [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
