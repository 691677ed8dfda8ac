use proptest::prelude::*;

use ensrob::analysis::{pearson, spearman};
use ensrob::bounds::{lemma1_bound, theorem1_bound, theorem2_bound, BoundInputs};
use ensrob::data::{encode_idx, load_idx, minibatches, split_indices, Dataset};
use ensrob::nn::{
    backward, bounded_cross_entropy, forward, init_mlp, BoundedLoss, MlpModel, Params,
};
use ensrob::robustness::{
    brute_force_deviation_oracle, model_max_deviation, sample_deviation, solve_linearized, Norm,
    PerturbationSpec,
};

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L1), Just(Norm::L2), Just(Norm::Linf)]
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=3).prop_flat_map(|layers| proptest::collection::vec(2usize..=8, layers + 1))
}

fn loss(model: &MlpModel, x: &[f64], label: usize, bound: BoundedLoss) -> f64 {
    bounded_cross_entropy(&forward(model, x, None).unwrap(), label, bound).unwrap()
}

fn near_kink(model: &MlpModel, x: &[f64]) -> bool {
    let p = model.params();
    let dims = model.layer_dims();
    let mut a = x.to_vec();
    for l in 0..model.num_layers() - 1 {
        let (fi, fo) = (dims[l], dims[l + 1]);
        let z: Vec<f64> = (0..fo)
            .map(|j| {
                p.biases[l][j]
                    + (0..fi)
                        .map(|i| p.weights[l][j * fi + i] * a[i])
                        .sum::<f64>()
            })
            .collect();
        if z.iter().any(|v| v.abs() < 1e-3) {
            return true;
        }
        a = z.iter().map(|v| v.max(0.0)).collect();
    }
    false
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_stays_within_bound(
        logits in proptest::collection::vec(-200.0f64..200.0, 2..6),
        label_seed in any::<usize>(),
        m in 0.1f64..20.0,
    ) {
        let label = label_seed % logits.len();
        let l = bounded_cross_entropy(&logits, label, BoundedLoss::new(m).unwrap()).unwrap();
        prop_assert!((0.0..=m).contains(&l));
    }

    #[test]
    fn gradients_match_central_differences(
        dims in dims_strategy(),
        seed in any::<u64>(),
        xs in proptest::collection::vec(0.0f64..1.0, 8),
        label_seed in any::<usize>(),
    ) {
        let model = init_mlp(&dims, seed, 1.0).unwrap();
        let x = &xs[..dims[0]];
        prop_assume!(!near_kink(&model, x));
        let label = label_seed % dims[dims.len() - 1];
        let bound = BoundedLoss::new(50.0).unwrap();
        let g = backward(&model, x, label, bound, None).unwrap();
        let h = 1e-5;
        for k in 0..model.params().len() {
            let at = |d: f64| {
                let mut p: Params = model.params().clone();
                *p.iter_mut().nth(k).unwrap() += d;
                loss(&MlpModel::from_params(dims.clone(), p).unwrap(), x, label, bound)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic = *g.params.iter().nth(k).unwrap();
            prop_assert!((analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()).max(1e-3));
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[i] += h;
            xm[i] -= h;
            let numeric = (loss(&model, &xp, label, bound) - loss(&model, &xm, label, bound)) / (2.0 * h);
            prop_assert!((g.input[i] - numeric).abs() <= 1e-5 * g.input[i].abs().max(numeric.abs()).max(1e-3));
        }
    }

    #[test]
    fn solver_attains_the_dual_norm(
        g in proptest::collection::vec(-5.0f64..5.0, 1..9),
        r in 1e-3f64..3.0,
        norm in norm_strategy(),
    ) {
        let delta = solve_linearized(&g, norm, r).unwrap();
        prop_assert!(norm.of(&delta) <= r * (1.0 + 1e-12));
        let achieved: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
        let target = r * norm.dual().of(&g);
        prop_assert!((achieved - target).abs() <= 1e-12 * target.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn linf_solution_scales_with_radius(
        g in proptest::collection::vec(-5.0f64..5.0, 1..9),
        r in 1e-3f64..1.0,
        c in 0.1f64..10.0,
    ) {
        let a = solve_linearized(&g, Norm::Linf, r).unwrap();
        let b = solve_linearized(&g, Norm::Linf, c * r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((c * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn oracle_never_falls_below_the_solver(
        d in 1usize..=3,
        seed in any::<u64>(),
        xs in proptest::collection::vec(0.0f64..1.0, 3),
        norm in norm_strategy(),
        r in 0.01f64..0.3,
    ) {
        let model = init_mlp(&[d, 5, 3], seed, 1.0).unwrap();
        let bound = BoundedLoss::default();
        let spec = PerturbationSpec::new(norm, r).unwrap();
        let x = &xs[..d];
        let solver = sample_deviation(&model, x, 1, spec, bound).unwrap();
        let oracle = brute_force_deviation_oracle(&model, x, 1, spec, 11, bound).unwrap();
        prop_assert!(oracle >= solver - 1e-12);
    }

    /// Without an activation change inside the ball the loss is a smooth
    /// function of the input there and the linearized step is near-optimal.
    #[test]
    fn solver_is_near_optimal_without_kinks(
        d in 1usize..=3,
        seed in any::<u64>(),
        xs in proptest::collection::vec(0.0f64..1.0, 3),
        norm in norm_strategy(),
    ) {
        let r = 0.1;
        let model = init_mlp(&[d, 6, 3], seed, 1.0).unwrap();
        let x = &xs[..d];
        let p = model.params();
        let kink = (0..6).any(|j| {
            let w = &p.weights[0][j * d..(j + 1) * d];
            let z = p.biases[0][j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            z.abs() <= r * w.iter().map(|v| v.abs()).sum::<f64>()
        });
        prop_assume!(!kink);
        let bound = BoundedLoss::new(50.0).unwrap();
        let spec = PerturbationSpec::new(norm, r).unwrap();
        let solver = sample_deviation(&model, x, 0, spec, bound).unwrap();
        let oracle = brute_force_deviation_oracle(&model, x, 0, spec, 21, bound).unwrap();
        prop_assert!(oracle <= 1.25 * solver + 1e-12, "oracle {} solver {}", oracle, solver);
    }

    #[test]
    fn model_deviation_lies_in_zero_to_m(
        seed in any::<u64>(),
        r in 0.0f64..2.0,
        norm in norm_strategy(),
        m in 0.5f64..5.0,
    ) {
        let model = init_mlp(&[3, 8, 4], seed, 3.0).unwrap();
        let features: Vec<f64> = (0..30).map(|i| ((i * 37 + seed as usize % 11) % 100) as f64 / 100.0).collect();
        let data = Dataset::new("grid", 3, features, (0..10).map(|i| i % 4).collect(), 4).unwrap();
        let spec = PerturbationSpec::new(norm, r).unwrap();
        let v = model_max_deviation(&model, &data, spec, BoundedLoss::new(m).unwrap()).unwrap();
        prop_assert!((0.0..=m).contains(&v));
    }

    #[test]
    fn idx_round_trip_quantizes_to_a_byte(
        rows in 1usize..5,
        cols in 1usize..5,
        pixels in proptest::collection::vec(0.0f64..=1.0, 1..200),
        labels in proptest::collection::vec(0usize..10, 1..9),
    ) {
        let dim = rows * cols;
        let n = (pixels.len() / dim).min(labels.len());
        prop_assume!(n > 0);
        let ds = Dataset::new("p", dim, pixels[..n * dim].to_vec(), labels[..n].to_vec(), 10).unwrap();
        let (img, lbl) = encode_idx(&ds, rows, cols).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.features().iter().zip(ds.features()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn split_partitions_the_indices(n in 2usize..300, f in 0.05f64..0.95, seed in any::<u64>()) {
        let n_train = (n as f64 * f).round() as usize;
        prop_assume!(n_train > 0 && n_train < n);
        let (train, test) = split_indices(n, f, seed).unwrap();
        prop_assert_eq!(train.len(), n_train);
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn minibatches_cover_each_index_once(n in 1usize..300, batch in 1usize..64, seed in any::<u64>()) {
        let batches = minibatches(n, batch, seed).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn pearson_is_affine_invariant(
        pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let Ok(base) = pearson(&xs, &ys) else { return Ok(()) };
        let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        prop_assert!((pearson(&moved, &ys).unwrap() - base).abs() <= 1e-9);
    }

    #[test]
    fn spearman_is_monotone_invariant(
        pairs in proptest::collection::vec((-5.0f64..5.0, -100.0f64..100.0), 3..30),
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let Ok(base) = spearman(&xs, &ys) else { return Ok(()) };
        let moved: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        prop_assert!((spearman(&moved, &ys).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn bounds_are_finite_non_negative_and_monotone(
        n in 1u64..1_000_000,
        m in 0.01f64..10.0,
        delta in 0.001f64..0.999,
        eps in 0.0f64..5.0,
        k in 1u64..1000,
        alpha in 0.0f64..2.0,
    ) {
        let mut b = BoundInputs::new(n, m, delta, eps);
        b.k = k;
        b.alpha = alpha;
        for v in [theorem1_bound(&b).unwrap(), theorem2_bound(&b).unwrap(), lemma1_bound(&b).unwrap()] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        let mut more = b;
        more.alpha = alpha + 0.5;
        more.k = k + 1;
        prop_assert!(theorem2_bound(&more).unwrap() >= theorem2_bound(&b).unwrap());
    }
}
