//! Nested leave-one-out evaluation, AUROC and the ablation table.
//!
//! For every held-out subject the unsupervised artifacts are fit on the
//! remaining subjects (or once on the whole cohort with
//! [`FitScope::Global`]), `(K, C)` is chosen by an inner leave-one-out loop
//! maximizing pooled inner AUROC, and the classifier refit on all training
//! subjects scores the held-out subject.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{fit, fit_with, FitOptions, FitResult};
use crate::error::{Error, Result};
use crate::features::{Rescaler, Variant};
use crate::ingest::{CategoryMap, Label};
use crate::pipeline::{feature_matrices, fit_artifacts, FoldArtifacts, InnerArtifacts, PipelineConfig, PreparedSubject};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub ks: Vec<usize>,
    pub cs: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            ks: vec![2, 5, 10, 20, 40],
            cs: [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0]
                .iter()
                .map(|e: &f64| 10f64.powf(*e))
                .collect(),
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.cs.is_empty() {
            return Err(Error::Config("grid must have at least one K and one C".into()));
        }
        if self.ks.contains(&0) {
            return Err(Error::Config("grid K values must be >= 1".into()));
        }
        if self.cs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Config("grid C values must be positive and finite".into()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) || self.cs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid values must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitScope {
    #[default]
    PerFold,
    Global,
}

impl std::str::FromStr for FitScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_fold" => Ok(FitScope::PerFold),
            "global" => Ok(FitScope::Global),
            other => Err(Error::Config(format!("unknown fit scope `{other}`"))),
        }
    }
}

/// Mann-Whitney AUROC via average ranks; tied pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "evaluation::auroc",
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Evaluation("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps average ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u128;
        for &idx in &order[i..=j] {
            if labels[idx] {
                twice_rank_sum += twice_avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve points, one per distinct score from high to low, preceded by
/// the origin at threshold +inf.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    auroc(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let negatives = labels.len() as f64 - positives;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp / negatives,
            tpr: tp / positives,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub label: Label,
    pub probability: f64,
    #[serde(rename = "K")]
    pub chosen_k: Option<usize>,
    #[serde(rename = "C")]
    pub chosen_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub fit_scope: FitScope,
    pub inner_artifacts: InnerArtifacts,
    pub seed: u64,
    pub grid: HyperGrid,
    pub auroc: f64,
    pub per_subject: Vec<SubjectPrediction>,
}

impl EvaluationReport {
    pub fn recompute_auroc(&self) -> Result<f64> {
        let (scores, labels): (Vec<f64>, Vec<bool>) = self
            .per_subject
            .iter()
            .map(|p| (p.probability, p.label.is_positive()))
            .unzip();
        auroc(&scores, &labels)
    }

    pub fn roc_curve(&self) -> Result<Vec<RocPoint>> {
        let (scores, labels): (Vec<f64>, Vec<bool>) = self
            .per_subject
            .iter()
            .map(|p| (p.probability, p.label.is_positive()))
            .unzip();
        roc_curve(&scores, &labels)
    }
}

/// Chosen hyperparameters and the inner AUROC they achieved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub k: Option<usize>,
    pub c: f64,
    pub inner_auroc: f64,
}

/// Everything needed to score the held-out subject of one outer fold.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub held_out: usize,
    pub variant: Variant,
    pub selection: Selection,
    pub artifacts: Arc<FoldArtifacts>,
    pub rescaler: Rescaler,
    pub fit: FitResult,
    pub probability: f64,
}

/// Shared inputs of an evaluation run.
#[derive(Debug, Clone, Copy)]
pub struct EvalSetup<'a> {
    pub category_map: Option<&'a CategoryMap>,
    pub grid: &'a HyperGrid,
    pub config: &'a PipelineConfig,
    pub fit_scope: FitScope,
    pub seed: u64,
}

fn grid_ks(variant: Variant, grid: &HyperGrid) -> Vec<usize> {
    if variant.uses_clustering() {
        grid.ks.clone()
    } else {
        Vec::new()
    }
}

fn prior(labels: &[bool]) -> f64 {
    labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64
}

fn single_class(labels: &[bool]) -> bool {
    labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)
}

fn path_options() -> FitOptions {
    FitOptions::default()
}

/// Solution path over `cs` on all rows of `matrix`, with weights mapped back
/// to unscaled feature space so other rescalings can reuse them.
fn anchor_path(matrix: &[Vec<f64>], labels: &[bool], cs: &[f64], config: &PipelineConfig) -> Result<Vec<(Vec<f64>, f64)>> {
    let rescaler = Rescaler::fit_rows(matrix, config.rescaler)?;
    let x: Vec<Vec<f64>> = matrix.iter().map(|r| rescaler.apply_row(r)).collect::<Result<_>>()?;
    let mut warm: Option<FitResult> = None;
    let mut out = Vec::with_capacity(cs.len());
    for &c in cs {
        let f = fit_with(&x, labels, c, warm.as_ref().map(|w| (w.weights.as_slice(), w.intercept)), &path_options())?;
        let raw: Vec<f64> = f.weights.iter().enumerate().map(|(j, w)| w / rescaler.factor(j)).collect();
        out.push((raw, f.intercept));
        warm = Some(f);
    }
    Ok(out)
}

/// Held-out probabilities of row `held` for every C, training on all other
/// rows of `matrix`. Each fit starts from the matching `anchors` entry when
/// given, else from the previous C's optimum (C ascending). `None` when the
/// training rows hold a single class.
fn leave_one_out_path(
    matrix: &[Vec<f64>],
    labels: &[bool],
    held: usize,
    cs: &[f64],
    config: &PipelineConfig,
    anchors: Option<&[(Vec<f64>, f64)]>,
) -> Result<Option<Vec<f64>>> {
    let train_idx: Vec<usize> = (0..matrix.len()).filter(|&i| i != held).collect();
    let y: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    if single_class(&y) {
        return Ok(None);
    }
    let raw: Vec<&[f64]> = train_idx.iter().map(|&i| matrix[i].as_slice()).collect();
    let rescaler = Rescaler::fit_rows(&raw, config.rescaler)?;
    let x: Vec<Vec<f64>> = raw.iter().map(|r| rescaler.apply_row(r)).collect::<Result<_>>()?;
    let test = rescaler.apply_row(&matrix[held])?;
    let mut warm: Option<(Vec<f64>, f64)> = None;
    let mut probs = Vec::with_capacity(cs.len());
    for (ci, &c) in cs.iter().enumerate() {
        let init = match anchors {
            Some(a) => Some((
                a[ci].0.iter().enumerate().map(|(j, w)| w * rescaler.factor(j)).collect(),
                a[ci].1,
            )),
            None => warm.take(),
        };
        let f = fit_with(&x, &y, c, init.as_ref().map(|(w, b)| (w.as_slice(), *b)), &path_options())?;
        probs.push(f.predict_proba(&test)?);
        warm = Some((f.weights, f.intercept));
    }
    Ok(Some(probs))
}

/// Picks `(K, C)` by leave-one-out over `train`, maximizing pooled inner
/// AUROC; ties go to the smaller K, then the smaller C.
///
/// `shared` supplies artifacts fit on the whole of `train` (used for every
/// inner fold); without it, artifacts are refit per inner fold from
/// `inner_seed`.
pub fn select_hyperparameters(
    train: &[&PreparedSubject],
    variant: Variant,
    setup: &EvalSetup<'_>,
    shared: Option<&FoldArtifacts>,
    inner_seed: u64,
) -> Result<Selection> {
    if train.len() < 3 {
        return Err(Error::Evaluation("inner selection needs at least 3 training subjects".into()));
    }
    let labels: Vec<bool> = train.iter().map(|s| s.is_positive()).collect();
    if single_class(&labels) {
        return Err(Error::Evaluation("inner selection needs both classes".into()));
    }
    let ks = grid_ks(variant, setup.grid);
    let cs = &setup.grid.cs;
    let k_slots: Vec<Option<usize>> = if ks.is_empty() {
        vec![None]
    } else {
        ks.iter().map(|&k| Some(k)).collect()
    };

    // predictions[k_slot][c][subject]
    let mut predictions = vec![vec![vec![0.0; train.len()]; cs.len()]; k_slots.len()];
    let mut degenerate = 0usize;
    let record = |predictions: &mut Vec<Vec<Vec<f64>>>, slot: usize, held: usize, probs: Option<Vec<f64>>| {
        let probs = probs.unwrap_or_else(|| {
            let others: Vec<bool> = labels
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != held)
                .map(|(_, &l)| l)
                .collect();
            vec![prior(&others); cs.len()]
        });
        for (ci, p) in probs.into_iter().enumerate() {
            predictions[slot][ci][held] = p;
        }
    };

    match shared {
        Some(artifacts) => {
            let matrices = feature_matrices(train, variant, &ks, artifacts)?;
            for (slot, (_, matrix)) in matrices.iter().enumerate() {
                let anchors = anchor_path(matrix, &labels, cs, setup.config)?;
                for held in 0..train.len() {
                    let probs = leave_one_out_path(matrix, &labels, held, cs, setup.config, Some(&anchors))?;
                    if probs.is_none() && slot == 0 {
                        degenerate += 1;
                    }
                    record(&mut predictions, slot, held, probs);
                }
            }
        }
        None => {
            for held in 0..train.len() {
                let inner_train: Vec<&PreparedSubject> = train
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != held)
                    .map(|(_, s)| *s)
                    .collect();
                let seed = derive_seed(inner_seed, &["inner", &train[held].subject_id]);
                let artifacts = fit_artifacts(&inner_train, setup.category_map, &[variant], &ks, setup.config, seed)?;
                let matrices = feature_matrices(train, variant, &ks, &artifacts)?;
                for (slot, (_, matrix)) in matrices.iter().enumerate() {
                    let probs = leave_one_out_path(matrix, &labels, held, cs, setup.config, None)?;
                    if probs.is_none() && slot == 0 {
                        degenerate += 1;
                    }
                    record(&mut predictions, slot, held, probs);
                }
            }
        }
    }
    if degenerate == train.len() {
        return Err(Error::Evaluation("every inner fold had a single-class training set".into()));
    }

    let mut best: Option<Selection> = None;
    for (slot, k) in k_slots.iter().enumerate() {
        for (ci, &c) in cs.iter().enumerate() {
            let score = auroc(&predictions[slot][ci], &labels)?;
            if best.is_none_or(|b| score > b.inner_auroc) {
                best = Some(Selection {
                    k: *k,
                    c,
                    inner_auroc: score,
                });
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Hyperparameter selection by leave-one-out over `subjects`, fitting the
/// outer artifacts on all of them.
pub fn inner_select(subjects: &[&PreparedSubject], variant: Variant, setup: &EvalSetup<'_>) -> Result<Selection> {
    let seed = derive_seed(setup.seed, &["select"]);
    let shared = if setup.config.inner_artifacts == InnerArtifacts::OuterFold || setup.fit_scope == FitScope::Global {
        Some(fit_artifacts(
            subjects,
            setup.category_map,
            &[variant],
            &grid_ks(variant, setup.grid),
            setup.config,
            seed,
        )?)
    } else {
        None
    };
    select_hyperparameters(subjects, variant, setup, shared.as_ref(), seed)
}

/// Runs the nested leave-one-out protocol for several variants at once,
/// sharing fold artifacts between them. Returns one report per variant (in
/// the order given) plus the per-fold models.
pub fn evaluate_variants(
    subjects: &[PreparedSubject],
    variants: &[Variant],
    setup: &EvalSetup<'_>,
) -> Result<Vec<(EvaluationReport, Vec<FoldModel>)>> {
    setup.grid.validate()?;
    setup.config.embedding.validate()?;
    if subjects.len() < 4 {
        return Err(Error::Evaluation("leave-one-out needs at least 4 subjects".into()));
    }
    let labels: Vec<bool> = subjects.iter().map(|s| s.is_positive()).collect();
    if single_class(&labels) {
        return Err(Error::Evaluation("cohort contains a single class".into()));
    }
    let ks = setup.grid.ks.clone();

    let global = match setup.fit_scope {
        FitScope::Global => {
            let all: Vec<&PreparedSubject> = subjects.iter().collect();
            let seed = derive_seed(setup.seed, &["global"]);
            Some(Arc::new(fit_artifacts(&all, setup.category_map, variants, &ks, setup.config, seed)?))
        }
        FitScope::PerFold => None,
    };

    let folds: Vec<Vec<FoldModel>> = (0..subjects.len())
        .into_par_iter()
        .map(|held| {
            let fold_seed = derive_seed(setup.seed, &["fold", &subjects[held].subject_id]);
            let train: Vec<&PreparedSubject> = subjects
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != held)
                .map(|(_, s)| s)
                .collect();
            let artifacts = match &global {
                Some(a) => Arc::clone(a),
                None => Arc::new(fit_artifacts(&train, setup.category_map, variants, &ks, setup.config, fold_seed)?),
            };
            let share_inner = setup.fit_scope == FitScope::Global
                || setup.config.inner_artifacts == InnerArtifacts::OuterFold;
            let train_labels: Vec<bool> = train.iter().map(|s| s.is_positive()).collect();
            let mut everyone: Vec<&PreparedSubject> = train.clone();
            everyone.push(&subjects[held]);

            variants
                .iter()
                .map(|&variant| {
                    let variant_ks = grid_ks(variant, setup.grid);
                    let selection = if single_class(&train_labels) {
                        Selection {
                            k: variant_ks.first().copied(),
                            c: setup.grid.cs[0],
                            inner_auroc: f64::NAN,
                        }
                    } else {
                        select_hyperparameters(
                            &train,
                            variant,
                            setup,
                            share_inner.then_some(artifacts.as_ref()),
                            fold_seed,
                        )?
                    };
                    let chosen_ks: Vec<usize> = selection.k.into_iter().collect();
                    let (_, matrix) = feature_matrices(&everyone, variant, &chosen_ks, &artifacts)?
                        .into_iter()
                        .next()
                        .expect("one matrix per requested K");
                    let (test_row, train_rows) = matrix.split_last().expect("held-out row");
                    let rescaler = Rescaler::fit_rows(train_rows, setup.config.rescaler)?;
                    let x: Vec<Vec<f64>> = train_rows
                        .iter()
                        .map(|r| rescaler.apply_row(r))
                        .collect::<Result<_>>()?;
                    let test = rescaler.apply_row(test_row)?;
                    let (fit_result, probability) = if single_class(&train_labels) {
                        let p = prior(&train_labels);
                        let f = FitResult {
                            weights: vec![0.0; test.len()],
                            intercept: if p == 1.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                            c: selection.c,
                            objective: 0.0,
                            n_iter: 0,
                            converged: true,
                            trace: Vec::new(),
                        };
                        (f, p)
                    } else {
                        let f = fit(&x, &train_labels, selection.c)?;
                        let p = f.predict_proba(&test)?;
                        (f, p)
                    };
                    Ok(FoldModel {
                        held_out: held,
                        variant,
                        selection,
                        artifacts: Arc::clone(&artifacts),
                        rescaler,
                        fit: fit_result,
                        probability,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    variants
        .iter()
        .enumerate()
        .map(|(vi, &variant)| {
            let models: Vec<FoldModel> = folds.iter().map(|f| f[vi].clone()).collect();
            let per_subject: Vec<SubjectPrediction> = models
                .iter()
                .map(|m| SubjectPrediction {
                    subject_id: subjects[m.held_out].subject_id.clone(),
                    label: subjects[m.held_out].label,
                    probability: m.probability,
                    chosen_k: m.selection.k,
                    chosen_c: m.selection.c,
                })
                .collect();
            let scores: Vec<f64> = per_subject.iter().map(|p| p.probability).collect();
            let report = EvaluationReport {
                variant,
                fit_scope: setup.fit_scope,
                inner_artifacts: setup.config.inner_artifacts,
                seed: setup.seed,
                grid: setup.grid.clone(),
                auroc: auroc(&scores, &labels)?,
                per_subject,
            };
            Ok((report, models))
        })
        .collect()
}

pub fn outer_loo(subjects: &[PreparedSubject], variant: Variant, setup: &EvalSetup<'_>) -> Result<EvaluationReport> {
    let mut out = evaluate_variants(subjects, &[variant], setup)?;
    Ok(out.remove(0).0)
}

/// AUROC of a classifier that ignores its input.
pub const CHANCE_AUROC: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub fit_scope: FitScope,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<EvaluationReport>,
}

impl AblationTable {
    pub fn auroc_of(&self, model: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.model == model).map(|r| r.auroc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,test_auroc\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}\n", row.model, row.auroc));
        }
        out
    }
}

pub fn ablation_table(subjects: &[PreparedSubject], setup: &EvalSetup<'_>) -> Result<AblationTable> {
    let results = evaluate_variants(subjects, &Variant::ALL, setup)?;
    let mut rows: Vec<AblationRow> = results
        .iter()
        .map(|(r, _)| AblationRow {
            model: r.variant.name().to_string(),
            auroc: r.auroc,
        })
        .collect();
    rows.push(AblationRow {
        model: "chance".into(),
        auroc: CHANCE_AUROC,
    });
    Ok(AblationTable {
        seed: setup.seed,
        fit_scope: setup.fit_scope,
        rows,
        reports: results.into_iter().map(|(r, _)| r).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.9, 0.8, 0.3, 0.3], &[true, false, true, false]).unwrap();
        assert_eq!(pts.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(pts.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn grid_validation() {
        HyperGrid::default().validate().unwrap();
        assert!(HyperGrid { ks: vec![5, 2], cs: vec![1.0] }.validate().is_err());
        assert!(HyperGrid { ks: vec![], cs: vec![1.0] }.validate().is_err());
        assert!(HyperGrid { ks: vec![2], cs: vec![0.0] }.validate().is_err());
        let g = HyperGrid::default();
        assert_eq!(g.cs.len(), 7);
        assert!((g.cs[0] - 0.01).abs() < 1e-15 && (g.cs[6] - 10.0).abs() < 1e-12);
    }
}
