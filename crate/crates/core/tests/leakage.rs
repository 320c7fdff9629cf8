//! Fold artifacts must not depend on the held-out subject's events.

use appsession::evaluation::{evaluate_variants, EvalSetup, FitScope, FoldModel, HyperGrid};
use appsession::features::Variant;
use appsession::pipeline::{prepare_cohort, PipelineConfig};
use appsession::synthgen::{generate, scenario, GeneratorConfig, Scenario};

fn artifact_bytes(model: &FoldModel) -> Vec<Vec<u8>> {
    let a = &model.artifacts;
    let mut out = vec![
        a.embedding.as_ref().unwrap().to_bytes().unwrap(),
        a.permuted.as_ref().unwrap().to_bytes().unwrap(),
        format!("{:?} {:?}", a.vocab.apps(), a.vocab.counts()).into_bytes(),
    ];
    for types in [&a.session_types, &a.permuted_types, &a.event_types] {
        assert!(!types.is_empty());
        out.extend(types.values().map(|t| t.to_bytes().unwrap()));
    }
    out.push(format!("{:?}", model.rescaler).into_bytes());
    out.push(format!("{:?} {:?} {:?}", model.selection.k, model.selection.c, model.fit.weights).into_bytes());
    out
}

#[test]
fn deleting_held_out_events_leaves_fold_artifacts_identical() {
    let config = GeneratorConfig {
        n_healthy: 7,
        n_symptomatic: 5,
        days: 14.0,
        ..scenario(Scenario::E1StrongCooccurrence, 21)
    };
    let synth = generate(&config).unwrap();
    let grid = HyperGrid {
        ks: vec![2, 4],
        cs: vec![0.1, 1.0],
    };
    let pipeline = PipelineConfig::default();
    let setup = EvalSetup {
        category_map: synth.cohort.category_map.as_ref(),
        grid: &grid,
        config: &pipeline,
        fit_scope: FitScope::PerFold,
        seed: 21,
    };
    let variants = [Variant::Full, Variant::B1, Variant::B2];
    let original = evaluate_variants(&prepare_cohort(&synth.cohort).unwrap(), &variants, &setup).unwrap();

    for held in [0, 9] {
        let mut cohort = synth.cohort.clone();
        let subject = &mut cohort.subjects[held];
        subject.lock_events.clear();
        subject.app_events.clear();
        let stripped = evaluate_variants(&prepare_cohort(&cohort).unwrap(), &variants, &setup).unwrap();
        assert!(prepare_cohort(&cohort).unwrap()[held].sessions.is_empty());
        for (vi, v) in variants.iter().enumerate() {
            let a = artifact_bytes(&original[vi].1[held]);
            let b = artifact_bytes(&stripped[vi].1[held]);
            assert!(a == b, "fold {held} variant {v}: artifacts changed");
        }
        // Any other fold trains on the stripped subject and must differ.
        let other = (held + 1) % cohort.subjects.len();
        assert!(artifact_bytes(&original[0].1[other]) != artifact_bytes(&stripped[0].1[other]));
    }
}
