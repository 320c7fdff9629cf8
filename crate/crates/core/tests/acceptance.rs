//! Acceptance suite. Each test prints one `[acceptance]` line with its
//! verdict and the measured numbers, then asserts.

mod common;

use std::collections::HashMap;
use std::fs;
use std::io::Write;

use appsession::classifier::{fit, fit_with, objective, smooth_gradient, smooth_objective, FitOptions};
use appsession::cli::{cmd_ablate, cmd_synth, RunConfig};
use appsession::clustering::{kmeans_fit, KMeansConfig};
use appsession::embedding::{cosine, train_cbow, EmbeddingConfig};
use appsession::evaluation::{auroc, evaluate_variants, EvalSetup, EvaluationReport, FitScope, HyperGrid};
use appsession::features::{RescaleMode, Rescaler, Variant};
use appsession::ingest::{LockEventKind, Subject, Label};
use appsession::introspect::{fit_full_pipeline, session_contributions};
use appsession::pipeline::{feature_matrices, fit_artifacts, prepare_cohort, PipelineConfig, PreparedSubject};
use appsession::seed::rng_from;
use appsession::sessionizer::sessionize;
use appsession::synthgen::{generate, scenario, GeneratorConfig, InventoryApp, Scenario, Template};
use common::{auroc_pairs, brute_force_sessions, exhaustive_two_means, lock, open};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Writes to the process stdout directly so the line shows up even when the
/// test harness captures output.
fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "[acceptance] {id:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn run_scenario(sc: Scenario, seed: u64, variants: &[Variant]) -> Vec<EvaluationReport> {
    let synth = generate(&scenario(sc, seed)).unwrap();
    let subjects = prepare_cohort(&synth.cohort).unwrap();
    let grid = HyperGrid::default();
    let config = PipelineConfig::default();
    let setup = EvalSetup {
        category_map: synth.cohort.category_map.as_ref(),
        grid: &grid,
        config: &config,
        fit_scope: FitScope::PerFold,
        seed,
    };
    evaluate_variants(&subjects, variants, &setup)
        .unwrap()
        .into_iter()
        .map(|(r, _)| r)
        .collect()
}

#[test]
fn planted_cooccurrence_cohort() {
    let mut full = Vec::new();
    let mut b5 = Vec::new();
    for seed in SEEDS {
        let reports = run_scenario(Scenario::E1StrongCooccurrence, seed, &[Variant::Full, Variant::B5]);
        assert_eq!(reports[0].per_subject.len(), 60);
        full.push(reports[0].auroc);
        b5.push(reports[1].auroc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, b) = (mean(&full), mean(&b5));
    verdict(
        1,
        "planted co-occurrence cohort: full >= 0.85 and full - B5 >= 0.15",
        f >= 0.85 && f - b >= 0.15,
        format!("mean full {f:.3}, mean B5 {b:.3}, per seed full {full:.3?} B5 {b5:.3?}"),
    );
}

#[test]
fn null_cohort() {
    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); Variant::ALL.len()];
    for seed in SEEDS {
        for (i, r) in run_scenario(Scenario::E2Null, seed, &Variant::ALL).iter().enumerate() {
            per_variant[i].push(r.auroc);
        }
    }
    let inside = |a: &f64| (0.35..=0.65).contains(a);
    let pass = per_variant.iter().all(|v| v.iter().filter(|a| inside(a)).count() >= 4);
    let detail = Variant::ALL
        .iter()
        .zip(&per_variant)
        .map(|(v, a)| format!("{v} {a:.3?}"))
        .collect::<Vec<_>>()
        .join("; ");
    let joint = (0..SEEDS.len())
        .filter(|&s| per_variant.iter().all(|v| inside(&v[s])))
        .count();
    let detail = format!("{detail}; seeds with all variants inside: {joint}/5");
    verdict(2, "null cohort: every variant in [0.35, 0.65] on >= 4/5 seeds", pass, detail);
}

#[test]
fn marginal_only_cohort() {
    let r = &run_scenario(Scenario::E3MarginalOnly, 0, &[Variant::B5])[0];
    verdict(
        3,
        "marginal-only cohort: B5 >= 0.80",
        r.auroc >= 0.80,
        format!("B5 {:.3}", r.auroc),
    );
}

fn random_problem(rng: &mut impl Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    y[0] = true;
    y[1] = false;
    (x, y)
}

#[test]
fn classifier_correctness() {
    let mut rng = rng_from(41);
    let mut worst_rel = 0.0f64;
    let mut monotone = true;
    let mut zero_ok = true;
    for _ in 0..100 {
        let (x, y) = random_problem(&mut rng, 20, 7);
        let c = 10f64.powf(rng.random_range(-1.0..1.0));
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-1.0..1.0);
        let (gw, gb) = smooth_gradient(&x, &y, c, &w, b);
        let h = 1e-5;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            worst_rel = worst_rel.max(rel);
        };
        for j in 0..7 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            check(gw[j], smooth_objective(&x, &y, c, &wp, b), smooth_objective(&x, &y, c, &wm, b));
        }
        check(gb, smooth_objective(&x, &y, c, &w, b + h), smooth_objective(&x, &y, c, &w, b - h));

        let opts = FitOptions {
            record_trace: true,
            ..FitOptions::default()
        };
        let f = fit_with(&x, &y, c, None, &opts).unwrap();
        monotone &= f.trace.windows(2).all(|p| p[1] <= p[0]);
        monotone &= (objective(&x, &y, c, &f.weights, f.intercept) - f.objective).abs() <= 1e-9 * f.objective.abs();

        let tiny = fit(&x, &y, 1e-9).unwrap();
        let p = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        zero_ok &= tiny.weights.iter().all(|&v| v == 0.0) && (tiny.intercept - (p / (1.0 - p)).ln()).abs() <= 1e-3;
    }
    verdict(
        4,
        "classifier: gradient vs finite differences, monotone objective, C = 1e-9 zeroes weights",
        worst_rel <= 1e-5 && monotone && zero_ok,
        format!("worst relative gradient error {worst_rel:.2e}, monotone {monotone}, zero weights {zero_ok}"),
    );
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = rng_from(5);
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // Small integer scores force plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..15) as f64).collect();
        let a = auroc(&scores, &labels).unwrap();
        worst = worst.max((a - auroc_pairs(&scores, &labels)).abs());
        let transformed: Vec<f64> = scores.iter().map(|s| s * s * s + 5.0 * s + 1.0).collect();
        invariant &= auroc(&transformed, &labels).unwrap() == a;
        let continuous: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        worst = worst.max((auroc(&continuous, &labels).unwrap() - auroc_pairs(&continuous, &labels)).abs());
    }
    verdict(
        5,
        "AUROC equals O(n^2) pair counting; monotone transforms leave it unchanged",
        worst <= 1e-12 && invariant,
        format!("max abs difference {worst:.1e}, invariant {invariant}"),
    );
}

#[test]
fn kmeans_matches_exhaustive_partition() {
    let mut rng = rng_from(9);
    let mut optimal = 0;
    let mut monotone = true;
    for i in 0..100u64 {
        let n = rng.random_range(3..=8);
        let d = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let model = kmeans_fit(
            &points,
            &KMeansConfig {
                k: 2,
                seed: i,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        let best = exhaustive_two_means(&points);
        if (model.inertia - best).abs() <= 1e-9 * best.max(1.0) {
            optimal += 1;
        }
        monotone &= model
            .traces
            .iter()
            .all(|t| t.windows(2).all(|p| p[1] <= p[0] + 1e-12 * p[0].abs()));
    }
    verdict(
        6,
        "k-means best-of-10 matches exhaustive optimum on >= 90/100; Lloyd inertia monotone",
        optimal >= 90 && monotone,
        format!("{optimal}/100 optimal, monotone {monotone}"),
    );
}

#[test]
fn sessionizer_matches_brute_force() {
    let mut rng = rng_from(77);
    let apps = ["A", "B", "C", "D"];
    let mut mismatches = 0;
    for i in 0..1000 {
        let mut s = Subject::new(format!("u{i}"), Label::Healthy);
        for _ in 0..rng.random_range(0..12) {
            let kind = if rng.random_bool(0.5) {
                LockEventKind::Unlock
            } else {
                LockEventKind::Lock
            };
            s.lock_events.push(lock(kind, rng.random_range(0..100)));
        }
        for _ in 0..rng.random_range(0..20) {
            s.app_events.push(open(apps[rng.random_range(0..apps.len())], rng.random_range(0..100)));
        }
        s.sort_streams();
        let got: Vec<(i64, i64, Vec<String>)> = sessionize(&s)
            .into_iter()
            .map(|x| (x.start_ts, x.end_ts, x.apps))
            .collect();
        if got != brute_force_sessions(&s) {
            mismatches += 1;
        }
    }
    verdict(
        7,
        "sessionizer equals brute-force window membership on 1000 streams",
        mismatches == 0,
        format!("{mismatches} mismatches"),
    );
}

#[test]
fn rescaler_unit_means() {
    let synth = generate(&GeneratorConfig {
        n_healthy: 8,
        n_symptomatic: 6,
        days: 14.0,
        ..scenario(Scenario::E1StrongCooccurrence, 3)
    })
    .unwrap();
    let subjects = prepare_cohort(&synth.cohort).unwrap();
    let train: Vec<&PreparedSubject> = subjects.iter().skip(1).collect();
    let config = PipelineConfig::default();
    let artifacts = fit_artifacts(&train, synth.cohort.category_map.as_ref(), &Variant::ALL, &[2, 10], &config, 1).unwrap();
    let mut matrices: Vec<Vec<Vec<f64>>> = Vec::new();
    for v in Variant::ALL {
        let ks: &[usize] = if v.uses_clustering() { &[2, 10] } else { &[] };
        matrices.extend(feature_matrices(&train, v, ks, &artifacts).unwrap().into_iter().map(|(_, m)| m));
    }
    let mut rng = rng_from(8);
    for _ in 0..50 {
        let d = rng.random_range(1..8);
        let zero = rng.random_range(0..d);
        matrices.push(
            (0..rng.random_range(2..20))
                .map(|_| (0..d).map(|j| if j == zero { 0.0 } else { rng.random_range(0.0..50.0) }).collect())
                .collect(),
        );
    }
    let mut worst = 0.0f64;
    let mut zeros_untouched = true;
    for m in &matrices {
        let r = Rescaler::fit_rows(m, RescaleMode::PerColumn).unwrap();
        let scaled: Vec<Vec<f64>> = m.iter().map(|row| r.apply_row(row).unwrap()).collect();
        for j in 0..m[0].len() {
            let raw_sum: f64 = m.iter().map(|row| row[j]).sum();
            let mean = scaled.iter().map(|row| row[j]).sum::<f64>() / m.len() as f64;
            if raw_sum == 0.0 {
                zeros_untouched &= scaled.iter().zip(m).all(|(s, raw)| s[j] == raw[j]);
            } else {
                worst = worst.max((mean - 1.0).abs());
            }
        }
    }
    verdict(
        8,
        "rescaler: training column means 1 +- 1e-12, zero columns untouched",
        worst <= 1e-12 && zeros_untouched,
        format!("{} matrices, max |mean - 1| {worst:.1e}, zero columns untouched {zeros_untouched}", matrices.len()),
    );
}

#[test]
fn session_contributions_decompose_scores() {
    let synth = generate(&scenario(Scenario::E1StrongCooccurrence, 0)).unwrap();
    let subjects = prepare_cohort(&synth.cohort).unwrap();
    let grid = HyperGrid::default();
    let config = PipelineConfig::default();
    let setup = EvalSetup {
        category_map: synth.cohort.category_map.as_ref(),
        grid: &grid,
        config: &config,
        fit_scope: FitScope::PerFold,
        seed: 0,
    };
    let fitted = fit_full_pipeline(&subjects, Variant::Full, &setup, None).unwrap();
    let view = fitted.view().unwrap();
    let mut worst = 0.0f64;
    for s in &subjects {
        let total: f64 = session_contributions(&view, s).unwrap().iter().map(|c| c.contribution).sum();
        worst = worst.max((total - view.score_without_intercept(s).unwrap()).abs());
    }
    verdict(
        9,
        "session contributions sum to w.x for every subject",
        worst <= 1e-9,
        format!("K {}, C {}, {} nonzero weights, max deviation {worst:.1e}", fitted.k, fitted.c, fitted.fit.nonzero_weights()),
    );
}

#[test]
fn ablation_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let mut config = RunConfig {
        seed: 11,
        ..Default::default()
    };
    config.synth.generator = Some(GeneratorConfig {
        n_healthy: 10,
        n_symptomatic: 8,
        days: 21.0,
        ..scenario(Scenario::E1StrongCooccurrence, 11)
    });
    config.paths.out = root.path().join("cohort");
    cmd_synth(&config).unwrap();
    config.paths.events = Some(root.path().join("cohort/events.jsonl"));
    config.paths.labels = Some(root.path().join("cohort/labels.csv"));
    config.paths.category_map = Some(root.path().join("cohort/categories.csv"));
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        config.paths.out = root.path().join(run);
        let dir = cmd_ablate(&config).unwrap();
        outputs.push([
            fs::read(dir.join("ablation.csv")).unwrap(),
            fs::read(dir.join("ablation.json")).unwrap(),
        ]);
    }
    let rows = String::from_utf8(outputs[0][0].clone()).unwrap().lines().count() - 1;
    verdict(
        10,
        "two ablation runs with the same config and seed are byte-identical",
        outputs[0] == outputs[1] && rows == 8,
        format!("identical {}, {rows} table rows", outputs[0] == outputs[1]),
    );
}

/// Five-app templates over a 200-app inventory. With a vocabulary of only a
/// few dozen apps every app is drawn as a negative so often that, once
/// training converges, apps sharing sessions are pushed apart; a realistic
/// inventory size keeps that effect small.
#[test]
fn embedding_separates_templates() {
    let inventory: Vec<InventoryApp> = (0..200)
        .map(|i| InventoryApp {
            app: format!("app{i:03}"),
            weight: 1.0 / ((i + 1) as f64).powf(1.1),
            category: "other".into(),
        })
        .collect();
    let groups: Vec<Vec<String>> = inventory
        .chunks(5)
        .map(|c| c.iter().map(|a| a.app.clone()).collect())
        .collect();
    let templates: Vec<Template> = groups
        .iter()
        .enumerate()
        .map(|(i, apps)| Template {
            name: format!("t{i}"),
            apps: apps.clone(),
            extra_mean: 0.0,
            weight: 1.0,
        })
        .collect();
    let group_of: HashMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, apps)| apps.iter().map(move |a| (a.as_str(), g)))
        .collect();
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let synth = generate(&GeneratorConfig {
            n_healthy: 20,
            n_symptomatic: 20,
            days: 28.0,
            sessions_per_day: 6.0,
            app_inventory: inventory.clone(),
            healthy_templates: templates.clone(),
            symptomatic_templates: templates.clone(),
            shared_fraction: 0.3,
            cooccurrence_signal: 0.0,
            ..scenario(Scenario::E2Null, seed)
        })
        .unwrap();
        let subjects = prepare_cohort(&synth.cohort).unwrap();
        let corpora: Vec<&[String]> = subjects.iter().map(|s| s.corpus.as_slice()).collect();
        let model = train_cbow(
            &corpora,
            &EmbeddingConfig {
                seed,
                ..EmbeddingConfig::default()
            },
        )
        .unwrap();
        let apps = model.vocab.apps();
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for i in 0..apps.len() {
            for j in i + 1..apps.len() {
                let c = cosine(model.row(i), model.row(j));
                if group_of[apps[i].as_str()] == group_of[apps[j].as_str()] {
                    within.push(c);
                } else {
                    across.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        gaps.push(mean(&within) - mean(&across));
    }
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    verdict(
        11,
        "embedding: within-template cosine exceeds cross-template by >= 0.1",
        gap >= 0.1,
        format!("mean gap {gap:.3}, per seed {gaps:.3?}"),
    );
}
