use std::collections::BTreeMap;
use std::fs;

use appsession::evaluation::{outer_loo, EvalSetup, FitScope, HyperGrid};
use appsession::features::Variant;
use appsession::ingest::{load_cohort, Label};
use appsession::pipeline::{prepare_cohort, PipelineConfig};
use appsession::seed::rng_from;
use appsession::sessionizer::sessionize_with_diagnostics;
use appsession::synthgen::{generate, scenario, write_synth, GeneratorConfig, Scenario, SynthCohort};
use rand::seq::IndexedRandom;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Chi-square homogeneity test of one uniformly drawn app per session
/// (healthy vs symptomatic), so every observation is an independent draw.
/// Sparse apps are pooled into one cell. Returns the p-value.
fn marginal_chi_square(synth: &SynthCohort, seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let mut table: BTreeMap<String, [f64; 2]> = BTreeMap::new();
    for subject in prepare_cohort(&synth.cohort).unwrap() {
        let class = subject.is_positive() as usize;
        for session in &subject.sessions {
            let app = session.apps.choose(&mut rng).unwrap();
            table.entry(app.clone()).or_default()[class] += 1.0;
        }
    }
    let totals = [0, 1].map(|c| table.values().map(|r| r[c]).sum::<f64>());
    let n = totals[0] + totals[1];
    let mut cells: Vec<[f64; 2]> = Vec::new();
    let mut pooled = [0.0; 2];
    for row in table.values() {
        let min_expected = (row[0] + row[1]) * totals[0].min(totals[1]) / n;
        if min_expected < 5.0 {
            pooled[0] += row[0];
            pooled[1] += row[1];
        } else {
            cells.push(*row);
        }
    }
    if pooled[0] + pooled[1] > 0.0 {
        cells.push(pooled);
    }
    let mut stat = 0.0;
    for row in &cells {
        for c in 0..2 {
            let expected = (row[0] + row[1]) * totals[c] / n;
            stat += (row[c] - expected).powi(2) / expected;
        }
    }
    let df = (cells.len() - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

#[test]
fn null_cohort_marginals_pass_chi_square() {
    let p: Vec<f64> = (0..10)
        .map(|seed| marginal_chi_square(&generate(&scenario(Scenario::E2Null, seed)).unwrap(), 1000 + seed))
        .collect();
    let accepted = p.iter().filter(|&&p| p >= 0.01).count();
    assert!(accepted >= 9, "p-values {p:?}");
}

#[test]
fn marginal_only_cohort_fails_chi_square() {
    let p = marginal_chi_square(&generate(&scenario(Scenario::E3MarginalOnly, 0)).unwrap(), 7);
    assert!(p < 1e-6, "p = {p}");
}

#[test]
fn matched_marginals_with_full_signal() {
    let config = GeneratorConfig {
        cooccurrence_signal: 1.0,
        ..scenario(Scenario::E1StrongCooccurrence, 3)
    };
    let synth = generate(&config).unwrap();
    let subjects = prepare_cohort(&synth.cohort).unwrap();
    let mut opens: [BTreeMap<&str, f64>; 2] = Default::default();
    let mut together = [0.0; 2];
    let mut sessions = [0.0; 2];
    for s in &subjects {
        let c = s.is_positive() as usize;
        for session in &s.sessions {
            sessions[c] += 1.0;
            if session.apps.iter().any(|a| a == "Messages") && session.apps.iter().any(|a| a == "Mail") {
                together[c] += 1.0;
            }
            for app in &session.apps {
                *opens[c].entry(app.as_str()).or_default() += 1.0;
            }
        }
    }
    let totals = [0, 1].map(|c| opens[c].values().sum::<f64>());
    for (app, &h) in &opens[0] {
        let s = opens[1].get(app).copied().unwrap_or(0.0);
        let (fh, fs) = (h / totals[0], s / totals[1]);
        assert!((fh - fs).abs() < 0.01, "{app}: healthy {fh:.4}, symptomatic {fs:.4}");
    }
    // Messages and Mail share a healthy template; symptomatic sessions pair
    // them only through background extras.
    let (rh, rs) = (together[0] / sessions[0], together[1] / sessions[1]);
    assert!(rh > 4.0 * rs, "Messages+Mail rate healthy {rh:.3}, symptomatic {rs:.3}");
}

#[test]
fn files_round_trip_through_ingest() {
    let config = GeneratorConfig {
        n_healthy: 6,
        n_symptomatic: 4,
        days: 14.0,
        ..scenario(Scenario::E1StrongCooccurrence, 9)
    };
    let synth = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_synth(&synth, dir.path()).unwrap();
    let loaded = load_cohort(&paths.events, &paths.labels, Some(&paths.category_map)).unwrap();
    assert_eq!(loaded.subjects.len(), 10);
    for ((subject, original), truth) in loaded.subjects.iter().zip(&synth.cohort.subjects).zip(&synth.truth.subjects) {
        assert_eq!(subject.app_events, original.app_events);
        assert_eq!(subject.lock_events, original.lock_events);
        let (sessions, diag) = sessionize_with_diagnostics(subject);
        assert_eq!(sessions.len(), truth.sessions);
        assert_eq!(diag.dropped_opens, 0);
        for pair in sessions.windows(2) {
            assert!(pair[0].end_ts < pair[1].start_ts);
        }
    }
    assert_eq!(loaded.category_map, synth.cohort.category_map);
}

#[test]
fn generation_is_byte_deterministic() {
    let config = GeneratorConfig {
        n_healthy: 5,
        n_symptomatic: 5,
        days: 10.0,
        ..scenario(Scenario::E3MarginalOnly, 4)
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_synth(&generate(&config).unwrap(), d.path()).unwrap();
    }
    for name in ["events.jsonl", "labels.csv", "categories.csv", "truth.json"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    let base = generate(&config).unwrap();
    let other = generate(&GeneratorConfig { seed: 5, ..config }).unwrap();
    assert_ne!(other.cohort.subjects[0].app_events, base.cohort.subjects[0].app_events);
}

#[test]
fn infeasible_packing_suggests_lower_rate() {
    let config = GeneratorConfig {
        n_healthy: 1,
        n_symptomatic: 1,
        days: 1.0,
        sessions_per_day: 5000.0,
        ..scenario(Scenario::E2Null, 0)
    };
    let err = generate(&config).unwrap_err().to_string();
    assert!(err.contains("lower sessions_per_day"), "{err}");
}

#[test]
fn single_class_cohort_generates_but_does_not_evaluate() {
    let config = GeneratorConfig {
        n_healthy: 0,
        n_symptomatic: 6,
        days: 7.0,
        ..scenario(Scenario::E1StrongCooccurrence, 0)
    };
    let synth = generate(&config).unwrap();
    assert!(synth.cohort.subjects.iter().all(|s| s.label == Label::Symptomatic));
    let subjects = prepare_cohort(&synth.cohort).unwrap();
    let grid = HyperGrid::default();
    let pipeline = PipelineConfig::default();
    let setup = EvalSetup {
        category_map: None,
        grid: &grid,
        config: &pipeline,
        fit_scope: FitScope::PerFold,
        seed: 0,
    };
    assert!(outer_loo(&subjects, Variant::B5, &setup).is_err());
}
