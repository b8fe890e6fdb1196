//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use convodyn::corpus::{preprocess, NpsClass};
use convodyn::dynamics::{continuous_curve, ewma, linear_trend, second_derivative_mean};
use convodyn::eval::{auc, ks, macro_f1_and_specificity, scorecard_monotonicity};
use convodyn::experiment::{train_and_evaluate, Seeds, TrainConfig};
use convodyn::explain::{base_value, explain_matrix, shap_summary, shap_values};
use convodyn::features::{assemble_matrix, ExperimentKind, FeatureConfig};
use convodyn::model::{
    fit_gbt, load_model, logloss, save_model, Direction, HyperParams, Tree, TreeEnsemble, TreeNode,
};
use convodyn::sentiment::{PrecomputedScores, ScorerBackend, SentimentScore};
use convodyn::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }
}

/// `already` is time spent on shared work before `run`.
fn report(name: &str, limit: Option<Duration>, already: Duration, run: impl FnOnce(&mut Outcome)) -> bool {
    let start = Instant::now();
    let mut out = Outcome::new();
    run(&mut out);
    let elapsed = start.elapsed() + already;
    if let Some(limit) = limit {
        out.check(elapsed <= limit, format!("runtime {:.2}s within {}s", elapsed.as_secs_f64(), limit.as_secs()));
    }
    let ok = out.failures.is_empty();
    let detail = if ok { out.notes.join("; ") } else { out.failures.join("; ") };
    println!(
        "{} {name} [{:.2}s] {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn score(star: u8, prob: f64) -> SentimentScore {
    SentimentScore {
        star,
        prob,
        continuous: f64::from(star) + prob,
    }
}

fn dynamics_suite(o: &mut Outcome) {
    let cont = |s: &[SentimentScore]| continuous_curve(s).unwrap().values;
    let hand = cont(&[score(3, 0.82)]) == vec![3.82]
        && cont(&[score(0, 0.5), score(4, 0.5)]) == vec![0.5, 4.5]
        && cont(&[score(2, 1.0), score(2, 1.0)]) == vec![3.0, 3.0];
    o.check(hand, "continuous curve examples");
    let e = ewma(&[0.0, 3.0], 2.0 / 3.0).unwrap();
    let ewma_ok = e[0] == 0.0
        && close(e[1], 2.0, 1e-15)
        && ewma(&[3.0, 3.0, 3.0], 2.0 / 3.0).unwrap() == vec![3.0, 3.0, 3.0]
        && ewma(&[1.0, 4.0, 2.5], 1.0).unwrap() == vec![1.0, 4.0, 2.5];
    o.check(ewma_ok, "EWMA examples");

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=20);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        worst = worst.max((linear_trend(&v).slope - grid_slope(&v)).abs());
    }
    o.check(worst < 1e-6, format!("OLS vs grid oracle on 100 series, max |diff| {worst:.2e}"));

    let mut identities = true;
    for _ in 0..1000 {
        let n = rng.random_range(3..=30);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let line: Vec<f64> = (0..n).map(|i| a + b * i as f64).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let c = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let base = second_derivative_mean(&v).mean;
        identities &= second_derivative_mean(&line).mean.abs() < 1e-9
            && close(second_derivative_mean(&neg).mean, -base, 1e-12)
            && close(second_derivative_mean(&shifted).mean, base, 1e-9);
    }
    o.check(identities, "concavity identities on 1000 series");
}

fn metric_suite(o: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut exact = true;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        // coarse grid so ties are frequent
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..20u8)) / 20.0).collect();
        exact &= auc(&scores, &labels).unwrap() == brute_auc(&scores, &labels);
    }
    o.check(exact, "AUC equals pair counting on 100 sets");
    let k = ks(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap();
    o.check(close(k, 0.5, 1e-12), format!("KS hand example {k}"));
    let perfect = macro_f1_and_specificity(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
    let all_pos = macro_f1_and_specificity(&[0.9, 0.9, 0.9, 0.9], &[1, 1, 0, 0], 0.5).unwrap();
    let wrong = macro_f1_and_specificity(&[0.1, 0.9], &[1, 0], 0.5).unwrap();
    o.check(
        perfect == (1.0, 1.0) && close(all_pos.0, 1.0 / 3.0, 1e-12) && all_pos.1 == 0.0 && wrong == (0.0, 0.0),
        "macro F1 / specificity examples",
    );
}

fn learner_suite(o: &mut Outcome) {
    let mut agree = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..50 {
        let n = rng.random_range(4..=50);
        let m = rng.random_range(1..=3);
        let matrix = random_matrix(1000 + case, n, m, 0.15);
        let params = HyperParams {
            n_trees: 1,
            max_depth: 1,
            learning_rate: 1.0,
            min_child_weight: [0.0, 0.5, 1.0][case as usize % 3],
            subsample_ratio: 1.0,
            colsample_ratio: 1.0,
            l2_lambda: [0.0, 1.0][case as usize % 2],
            gamma_min_gain: 0.0,
        };
        let model = fit_gbt(&matrix, &params, 0).unwrap();
        let p = sigmoid(model.base_score);
        let grad: Vec<f64> = matrix.rows.iter().map(|r| p - f64::from(r.label)).collect();
        let hess = vec![p * (1.0 - p); n];
        let x: Vec<Vec<Option<f64>>> = matrix.rows.iter().map(|r| r.values.clone()).collect();
        let oracle = exhaustive_root_gain(&x, &grad, &hess, params.min_child_weight, params.l2_lambda, 0.0);
        let tree = &model.trees[0];
        let ok = match (oracle, &tree.nodes[0]) {
            (None, TreeNode::Leaf { .. }) => true,
            (Some((best, _)), TreeNode::Split { .. }) => {
                // the learner's partition must reach the oracle optimum
                let (mut gl, mut hl) = (0.0, 0.0);
                for (i, row) in x.iter().enumerate() {
                    if tree.leaf_index(row) == 1 {
                        gl += grad[i];
                        hl += hess[i];
                    }
                }
                let g: f64 = grad.iter().sum();
                let h: f64 = hess.iter().sum();
                let lam = params.l2_lambda;
                let s = |g: f64, h: f64| g * g / (h + lam);
                let gain = 0.5 * (s(gl, hl) + s(g - gl, h - hl) - s(g, h));
                close(gain, best, 1e-9 * best.abs().max(1.0))
            }
            _ => false,
        };
        agree += usize::from(ok);
    }
    o.check(agree == 50, format!("depth-1 split matches exhaustive oracle {agree}/50"));

    let matrix = random_matrix(404, 300, 5, 0.1);
    let params = HyperParams {
        n_trees: 100,
        max_depth: 3,
        learning_rate: 0.3,
        ..HyperParams::default()
    };
    let model = fit_gbt(&matrix, &params, 1).unwrap();
    let losses: Vec<f64> = (0..=100).map(|k| logloss(&model.truncated(k), &matrix).unwrap()).collect();
    let monotone = losses.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    o.check(
        monotone,
        format!("logloss non-increasing over 100 rounds ({:.4} -> {:.4})", losses[0], losses[100]),
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let identical = (0..1000).all(|_| {
        let x = random_input(&mut rng, 5, 0.2);
        model.predict_proba(&x).unwrap().to_bits() == loaded.predict_proba(&x).unwrap().to_bits()
    });
    o.check(identical, "save/load bit-identical on 1000 inputs");
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn shap_suite(o: &mut Outcome) {
    let matrix = random_matrix(505, 400, 6, 0.15);
    let model = fit_gbt(
        &matrix,
        &HyperParams {
            n_trees: 60,
            max_depth: 5,
            subsample_ratio: 0.8,
            colsample_ratio: 0.8,
            ..HyperParams::default()
        },
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = random_input(&mut rng, 6, 0.2);
        let (base, phi) = shap_values(&model, &x).unwrap();
        let margin = model.predict_margin(&x).unwrap();
        worst = worst.max((base + phi.iter().sum::<f64>() - margin).abs());
    }
    o.check(worst < 1e-6, format!("local accuracy on 1000 inputs, max err {worst:.2e}"));

    let mut brute_ok = true;
    let mut brute_worst: f64 = 0.0;
    for case in 0..200 {
        let m = 1 + case % 3;
        let n_trees = 1 + case % 2;
        let trees: Vec<Tree> = (0..n_trees).map(|_| random_tree(&mut rng, m, 2)).collect();
        let ens = TreeEnsemble {
            trees: trees.clone(),
            learning_rate: 0.7,
            base_score: -0.3,
            schema: (0..m).map(|i| format!("x{i}")).collect(),
        };
        let x = random_input(&mut rng, m, 0.25);
        let (_, phi) = shap_values(&ens, &x).unwrap();
        let expect = brute_shapley(&trees, 0.7, &x);
        for (a, b) in phi.iter().zip(&expect) {
            brute_worst = brute_worst.max((a - b).abs());
            brute_ok &= close(*a, *b, 1e-12);
        }
    }
    o.check(brute_ok, format!("brute-force Shapley on 200 small ensembles, max diff {brute_worst:.1e}"));

    // feature 1 never split on
    let dummy_tree = Tree {
        nodes: vec![
            TreeNode::Split {
                feature: 0,
                threshold: 0.0,
                default: Direction::Right,
                left: 1,
                right: 2,
                cover: 3.0,
            },
            TreeNode::Leaf { leaf: -1.0, cover: 1.0 },
            TreeNode::Split {
                feature: 2,
                threshold: 0.5,
                default: Direction::Left,
                left: 3,
                right: 4,
                cover: 2.0,
            },
            TreeNode::Leaf { leaf: 0.5, cover: 1.0 },
            TreeNode::Leaf { leaf: 2.0, cover: 1.0 },
        ],
    };
    let ens = TreeEnsemble {
        trees: vec![dummy_tree],
        learning_rate: 1.0,
        base_score: 0.0,
        schema: vec!["a".into(), "b".into(), "c".into()],
    };
    let dummy_zero = (0..200).all(|_| {
        let x = random_input(&mut rng, 3, 0.2);
        shap_values(&ens, &x).unwrap().1[1] == 0.0
    });
    let empty = TreeEnsemble {
        trees: vec![],
        learning_rate: 0.1,
        base_score: 0.4,
        schema: vec!["a".into()],
    };
    let empty_ok = shap_values(&empty, &[Some(1.0)]).unwrap() == (0.4, vec![0.0]) && base_value(&empty) == 0.4;
    o.check(dummy_zero && empty_ok, "dummy feature gets exactly 0; empty ensemble gives prior");
}

struct EndToEnd {
    b: (f64, f64),
    blw: (f64, f64),
    np_rows: usize,
    non_passive: usize,
    correlations: Vec<(String, f64)>,
    monotonicity: convodyn::eval::Monotonicity,
    partition: bool,
}

fn end_to_end() -> EndToEnd {
    let (corpus, scores) = generate(&SynthConfig {
        n_users: 2000,
        signal_strength: 0.8,
        seed: 2024,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = preprocess(corpus);
    let backend = ScorerBackend::Precomputed(PrecomputedScores::from_records(scores));
    let cfg = FeatureConfig::default();
    let seeds = Seeds::all(7);
    let train_cfg = TrainConfig::default();

    let run = |kind| {
        let matrix = assemble_matrix(&corpus, kind, &backend, &cfg).unwrap();
        let (outcome, report, bins) = train_and_evaluate(&matrix, &train_cfg, &seeds).unwrap();
        (matrix, outcome, report, bins)
    };
    let (_, _, rb, _) = run(ExperimentKind::Baseline);
    let (_, out_lw, rlw, bins_lw) = run(ExperimentKind::BaselineLinewise);
    let (np, _, _, _) = run(ExperimentKind::BaselineLinewiseNoPassive);

    let attributions = explain_matrix(&out_lw.model, &out_lw.test).unwrap();
    let summary = shap_summary(&out_lw.test, &attributions).unwrap();
    let correlations = ["lw_slope", "lw_last_sentiment", "lw_n_messages"]
        .iter()
        .map(|name| {
            let s = summary.iter().find(|s| s.feature == *name).unwrap();
            (name.to_string(), s.value_shap_correlation)
        })
        .collect();
    let total: usize = bins_lw.iter().map(|b| b.total()).sum();
    EndToEnd {
        b: (rb.auc, rb.ks),
        blw: (rlw.auc, rlw.ks),
        np_rows: np.len(),
        non_passive: corpus
            .users
            .iter()
            .filter(|u| u.label.map(|l| l.klass) != Some(NpsClass::Passive))
            .count(),
        correlations,
        monotonicity: scorecard_monotonicity(&bins_lw, 30),
        partition: total == rlw.n_test && total == out_lw.test.len(),
    }
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report("dynamics oracle suite", Some(Duration::from_secs(5)), Duration::ZERO, dynamics_suite);
    all &= report("metric oracle suite", Some(Duration::from_secs(5)), Duration::ZERO, metric_suite);
    all &= report("learner suite", Some(Duration::from_secs(60)), Duration::ZERO, learner_suite);
    all &= report("TreeSHAP suite", Some(Duration::from_secs(30)), Duration::ZERO, shap_suite);

    let start = Instant::now();
    let e2e = end_to_end();
    let e2e_time = start.elapsed();
    all &= report("end-to-end synthetic comparison", Some(Duration::from_secs(600)), e2e_time, |o| {
        o.check(
            e2e.blw.0 - e2e.b.0 >= 0.05,
            format!("AUC B {:.4} -> B_LW {:.4} (gain {:.4})", e2e.b.0, e2e.blw.0, e2e.blw.0 - e2e.b.0),
        );
        o.check(e2e.blw.1 > e2e.b.1, format!("KS B {:.4} -> B_LW {:.4}", e2e.b.1, e2e.blw.1));
        o.check(
            e2e.np_rows == e2e.non_passive,
            format!("B_LW_NP rows {} = non-passive users {}", e2e.np_rows, e2e.non_passive),
        );
        for (name, corr) in &e2e.correlations {
            let want_positive = name != "lw_n_messages";
            o.check(
                if want_positive { *corr > 0.0 } else { *corr < 0.0 },
                format!("{name} SHAP alignment {corr:+.3}"),
            );
        }
    });
    all &= report("scorecard", None, Duration::ZERO, |o| {
        o.check(e2e.partition, "bins partition the test set");
        let fr: Vec<String> = e2e
            .monotonicity
            .fractions
            .iter()
            .map(|(lo, f, n)| format!("{lo:.1}:{f:.2}(n={n})"))
            .collect();
        o.check(
            e2e.monotonicity.monotone,
            format!("non-promoter share non-increasing over bins with >=30 rows [{}]", fr.join(" ")),
        );
    });

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
