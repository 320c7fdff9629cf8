//! Shared pipeline plumbing: per-subject preprocessing and the
//! unsupervised artifacts (embedding, session types, vocabularies) that are
//! fit on a training fold.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit_weighted, KMeansConfig, SessionTypeModel};
use crate::embedding::{train_cbow, EmbeddingConfig, EmbeddingModel, Vocab};
use crate::error::{Error, Result};
use crate::features::{RescaleMode, Variant};
use crate::ingest::{derive_days_observed, Cohort, CategoryMap, Label};
use crate::seed::derive_seed;
use crate::session_repr::{session_apps, CategorySpace};
use crate::sessionizer::{corpus_of, sessionize_with_diagnostics, Session, SessionDiagnostics};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceScope {
    /// One sentence per user, spanning session boundaries.
    #[default]
    User,
    /// One sentence per session.
    Session,
}

/// Where the unsupervised artifacts used inside the hyperparameter loop
/// come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerArtifacts {
    /// Fit once on the outer training fold and shared by its inner folds.
    #[default]
    OuterFold,
    /// Refit for every inner fold.
    InnerFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub embedding: EmbeddingConfig,
    pub kmeans: KMeansConfig,
    pub rescaler: RescaleMode,
    pub sentence_scope: SentenceScope,
    pub dedupe_within_session: bool,
    pub inner_artifacts: InnerArtifacts,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            kmeans: KMeansConfig::default(),
            rescaler: RescaleMode::PerColumn,
            sentence_scope: SentenceScope::User,
            dedupe_within_session: false,
            inner_artifacts: InnerArtifacts::OuterFold,
        }
    }
}

/// A subject reduced to what the models consume.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSubject {
    pub subject_id: String,
    pub label: Label,
    pub days: f64,
    pub sessions: Vec<Session>,
    pub corpus: Vec<String>,
    pub diagnostics: SessionDiagnostics,
}

impl PreparedSubject {
    pub fn is_positive(&self) -> bool {
        self.label.is_positive()
    }
}

pub fn prepare_cohort(cohort: &Cohort) -> Result<Vec<PreparedSubject>> {
    cohort
        .subjects
        .par_iter()
        .map(|s| {
            let days = derive_days_observed(s)?;
            let (sessions, diagnostics) = sessionize_with_diagnostics(s);
            Ok(PreparedSubject {
                subject_id: s.subject_id.clone(),
                label: s.label,
                days,
                sessions,
                corpus: corpus_of(s),
                diagnostics,
            })
        })
        .collect()
}

/// Everything unsupervised fit on one training set.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub embedding: Option<EmbeddingModel>,
    /// Embedding with rows permuted (B2).
    pub permuted: Option<EmbeddingModel>,
    /// App vocabulary of the training corpora (one-hot app variants).
    pub vocab: Vocab,
    pub categories: CategorySpace,
    /// Session-type models per K for the full model.
    pub session_types: BTreeMap<usize, SessionTypeModel>,
    /// Session-type models per K over permuted embeddings (B2).
    pub permuted_types: BTreeMap<usize, SessionTypeModel>,
    /// Event-level cluster models per K (B1).
    pub event_types: BTreeMap<usize, SessionTypeModel>,
    pub dedupe_within_session: bool,
}

impl FoldArtifacts {
    pub fn embedding_for(&self, variant: Variant) -> Option<&EmbeddingModel> {
        match variant {
            Variant::Full | Variant::B1 => self.embedding.as_ref(),
            Variant::B2 => self.permuted.as_ref(),
            _ => None,
        }
    }

    pub fn types_for(&self, variant: Variant, k: usize) -> Option<&SessionTypeModel> {
        match variant {
            Variant::Full => self.session_types.get(&k),
            Variant::B2 => self.permuted_types.get(&k),
            Variant::B1 => self.event_types.get(&k),
            _ => None,
        }
    }
}

/// Sorted in-vocabulary indices of a session's apps, or `None` when the
/// session has no in-vocabulary app.
pub fn session_key(apps: &[String], vocab: &Vocab, dedupe: bool) -> Option<Vec<u32>> {
    let apps = session_apps(apps, dedupe);
    let mut key: Vec<u32> = apps
        .iter()
        .filter_map(|a| vocab.index_of(a).map(|i| i as u32))
        .collect();
    if key.is_empty() {
        return None;
    }
    key.sort_unstable();
    Some(key)
}

pub fn key_mean(key: &[u32], model: &EmbeddingModel) -> Vec<f64> {
    let mut v = vec![0.0; model.dim()];
    for &i in key {
        v.iter_mut()
            .zip(model.row(i as usize))
            .for_each(|(a, x)| *a += *x as f64);
    }
    let n = key.len() as f64;
    v.iter_mut().for_each(|a| *a /= n);
    v
}

fn sentences<'a>(train: &[&'a PreparedSubject], scope: SentenceScope) -> Vec<&'a [String]> {
    match scope {
        SentenceScope::User => train.iter().map(|s| s.corpus.as_slice()).collect(),
        SentenceScope::Session => train
            .iter()
            .flat_map(|s| s.sessions.iter().map(|x| x.apps.as_slice()))
            .collect(),
    }
}

fn fit_types(
    points: &[Vec<f64>],
    weights: &[f64],
    ks: &[usize],
    base: &KMeansConfig,
    seed: u64,
    label: &str,
) -> Result<BTreeMap<usize, SessionTypeModel>> {
    ks.iter()
        .map(|&k| {
            let cfg = KMeansConfig {
                k,
                seed: derive_seed(seed, &[label, &k.to_string()]),
                ..base.clone()
            };
            kmeans_fit_weighted(points, weights, &cfg).map(|m| (k, m))
        })
        .collect()
}

/// Unique session vectors of the training subjects with their multiplicities.
fn session_points(
    train: &[&PreparedSubject],
    model: &EmbeddingModel,
    dedupe: bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut keys: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for s in train {
        for session in &s.sessions {
            if let Some(key) = session_key(&session.apps, &model.vocab, dedupe) {
                *keys.entry(key).or_insert(0.0) += 1.0;
            }
        }
    }
    keys.into_iter().map(|(k, w)| (key_mean(&k, model), w)).unzip()
}

/// Fits the artifacts needed by `variants` on `train`.
pub fn fit_artifacts(
    train: &[&PreparedSubject],
    category_map: Option<&CategoryMap>,
    variants: &[Variant],
    ks: &[usize],
    config: &PipelineConfig,
    seed: u64,
) -> Result<FoldArtifacts> {
    if train.is_empty() {
        return Err(Error::Evaluation("no training subjects".into()));
    }
    let corpora: Vec<&[String]> = train.iter().map(|s| s.corpus.as_slice()).collect();
    let vocab = Vocab::build(&corpora, config.embedding.min_count)?;
    let needs_embedding = variants.iter().any(|v| v.uses_embedding());

    let mut artifacts = FoldArtifacts {
        embedding: None,
        permuted: None,
        vocab,
        categories: CategorySpace::new(category_map),
        session_types: BTreeMap::new(),
        permuted_types: BTreeMap::new(),
        event_types: BTreeMap::new(),
        dedupe_within_session: config.dedupe_within_session,
    };
    if !needs_embedding {
        return Ok(artifacts);
    }

    let emb_cfg = EmbeddingConfig {
        seed: derive_seed(seed, &["embedding"]),
        ..config.embedding.clone()
    };
    let embedding = train_cbow(&sentences(train, config.sentence_scope), &emb_cfg)?;
    let dedupe = config.dedupe_within_session;

    if variants.contains(&Variant::Full) {
        let (points, weights) = session_points(train, &embedding, dedupe);
        artifacts.session_types = fit_types(&points, &weights, ks, &config.kmeans, seed, "session_types")?;
    }
    if variants.contains(&Variant::B1) {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for s in train {
            for app in &s.corpus {
                if let Some(i) = embedding.vocab.index_of(app) {
                    *counts.entry(i).or_insert(0.0) += 1.0;
                }
            }
        }
        let mut idx: Vec<usize> = counts.keys().copied().collect();
        idx.sort_unstable();
        let points: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| embedding.row(i).iter().map(|&x| x as f64).collect())
            .collect();
        let weights: Vec<f64> = idx.iter().map(|i| counts[i]).collect();
        artifacts.event_types = fit_types(&points, &weights, ks, &config.kmeans, seed, "event_types")?;
    }
    if variants.contains(&Variant::B2) {
        let permuted = embedding.permute_embeddings(derive_seed(seed, &["permute"]));
        let (points, weights) = session_points(train, &permuted, dedupe);
        artifacts.permuted_types = fit_types(&points, &weights, ks, &config.kmeans, seed, "permuted_types")?;
        artifacts.permuted = Some(permuted);
    }
    artifacts.embedding = Some(embedding);
    Ok(artifacts)
}

/// Pre-rescale rows of every subject for one K (`None` without clustering).
pub type KMatrix = (Option<usize>, Vec<Vec<f64>>);

/// Pre-rescale feature rows for every subject in `subjects`, one matrix per
/// K (a single `None` entry for variants without clustering).
pub fn feature_matrices(
    subjects: &[&PreparedSubject],
    variant: Variant,
    ks: &[usize],
    artifacts: &FoldArtifacts,
) -> Result<Vec<KMatrix>> {
    let dedupe = artifacts.dedupe_within_session;
    match variant {
        Variant::Full | Variant::B2 => {
            let model = artifacts
                .embedding_for(variant)
                .ok_or_else(|| missing(variant, "embedding"))?;
            let types: Vec<&SessionTypeModel> = ks
                .iter()
                .map(|&k| artifacts.types_for(variant, k).ok_or_else(|| missing(variant, "session types")))
                .collect::<Result<_>>()?;
            let mut cache: HashMap<Vec<u32>, Vec<usize>> = HashMap::new();
            let mut out: Vec<Vec<Vec<f64>>> = ks.iter().map(|_| Vec::with_capacity(subjects.len())).collect();
            for s in subjects {
                let mut rows: Vec<Vec<f64>> = types.iter().map(|m| vec![0.0; m.k()]).collect();
                for session in &s.sessions {
                    let Some(key) = session_key(&session.apps, &model.vocab, dedupe) else {
                        continue;
                    };
                    if !cache.contains_key(&key) {
                        let v = key_mean(&key, model);
                        let assigned = types.iter().map(|m| m.assign(&v)).collect::<Result<Vec<_>>>()?;
                        cache.insert(key.clone(), assigned);
                    }
                    for (row, &t) in rows.iter_mut().zip(&cache[&key]) {
                        row[t] += 1.0;
                    }
                }
                for (slot, mut row) in out.iter_mut().zip(rows) {
                    row.iter_mut().for_each(|v| *v /= s.days);
                    slot.push(row);
                }
            }
            Ok(ks.iter().map(|&k| Some(k)).zip(out).collect())
        }
        Variant::B1 => {
            let model = artifacts
                .embedding_for(variant)
                .ok_or_else(|| missing(variant, "embedding"))?;
            let mut result = Vec::new();
            for &k in ks {
                let types = artifacts.types_for(variant, k).ok_or_else(|| missing(variant, "event types"))?;
                let app_type: Vec<usize> = model
                    .rows()
                    .map(|r| types.assign(&r.iter().map(|&x| x as f64).collect::<Vec<_>>()))
                    .collect::<Result<_>>()?;
                let rows = subjects
                    .iter()
                    .map(|s| {
                        let mut row = vec![0.0; k];
                        for app in &s.corpus {
                            if let Some(i) = model.vocab.index_of(app) {
                                row[app_type[i]] += 1.0;
                            }
                        }
                        row.iter_mut().for_each(|v| *v /= s.days);
                        row
                    })
                    .collect();
                result.push((Some(k), rows));
            }
            Ok(result)
        }
        _ => {
            let spec = crate::features::FeatureSpec::new(variant, None)?;
            let rows = subjects
                .iter()
                .map(|s| crate::features::featurize(s, &spec, artifacts).map(|f| f.values))
                .collect::<Result<_>>()?;
            Ok(vec![(None, rows)])
        }
    }
}

fn missing(variant: Variant, what: &str) -> Error {
    Error::Features(format!("variant {} is missing its {what} artifact", variant.name()))
}
