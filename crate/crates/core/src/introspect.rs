//! Reading the linear model back in terms of session types and sessions.
//!
//! A subject's rescaled feature for type `t` is `count_t / (days * factor_t)`,
//! so its decision value minus the intercept splits exactly into one term
//! `w_t / (days * factor_t)` per assigned session.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{fit, FitResult};
use crate::clustering::{nearest_app_to_centroid, SessionTypeModel};
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::evaluation::{select_hyperparameters, EvalSetup, FoldModel};
use crate::features::{Rescaler, Variant};
use crate::pipeline::{feature_matrices, fit_artifacts, key_mean, session_key, FoldArtifacts, PreparedSubject};
use crate::seed::derive_seed;
use crate::sessionizer::Session;

/// The pieces of a fitted session-type model needed to explain it.
#[derive(Debug, Clone, Copy)]
pub struct LinearView<'a> {
    pub embedding: &'a EmbeddingModel,
    pub types: &'a SessionTypeModel,
    pub rescaler: &'a Rescaler,
    pub fit: &'a FitResult,
    pub dedupe_within_session: bool,
}

impl<'a> LinearView<'a> {
    pub fn new(artifacts: &'a FoldArtifacts, variant: Variant, k: usize, rescaler: &'a Rescaler, fit: &'a FitResult) -> Result<Self> {
        if !matches!(variant, Variant::Full | Variant::B2) {
            return Err(Error::Introspect(format!("variant {variant} has no session types")));
        }
        let embedding = artifacts
            .embedding_for(variant)
            .ok_or_else(|| Error::Introspect("pipeline has no fitted embedding".into()))?;
        let types = artifacts
            .types_for(variant, k)
            .ok_or_else(|| Error::Introspect(format!("pipeline has no session types for K = {k}")))?;
        if fit.weights.len() != types.k() {
            return Err(Error::DimensionMismatch {
                context: "introspect::LinearView",
                expected: types.k(),
                got: fit.weights.len(),
            });
        }
        Ok(LinearView {
            embedding,
            types,
            rescaler,
            fit,
            dedupe_within_session: artifacts.dedupe_within_session,
        })
    }

    pub fn from_fold(model: &'a FoldModel) -> Result<Self> {
        let k = model
            .selection
            .k
            .ok_or_else(|| Error::Introspect("fold model has no K".into()))?;
        LinearView::new(&model.artifacts, model.variant, k, &model.rescaler, &model.fit)
    }

    /// Session type of a session, `None` when no app is in the vocabulary.
    pub fn assign(&self, session: &Session) -> Result<Option<usize>> {
        match session_key(&session.apps, &self.embedding.vocab, self.dedupe_within_session) {
            Some(key) => self.types.assign(&key_mean(&key, self.embedding)).map(Some),
            None => Ok(None),
        }
    }

    /// Rescaled feature row of a subject.
    pub fn features(&self, subject: &PreparedSubject) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.types.k()];
        for session in &subject.sessions {
            if let Some(t) = self.assign(session)? {
                row[t] += 1.0;
            }
        }
        row.iter_mut().for_each(|v| *v /= subject.days);
        self.rescaler.apply_row(&row)
    }

    /// `wᵀx` for a subject, intercept excluded.
    pub fn score_without_intercept(&self, subject: &PreparedSubject) -> Result<f64> {
        let x = self.features(subject)?;
        Ok(x.iter().zip(&self.fit.weights).map(|(a, b)| a * b).sum())
    }
}

/// A model fit to every subject, for explaining session types.
#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub variant: Variant,
    pub k: usize,
    pub c: f64,
    pub artifacts: FoldArtifacts,
    pub rescaler: Rescaler,
    pub fit: FitResult,
}

impl FittedPipeline {
    pub fn view(&self) -> Result<LinearView<'_>> {
        LinearView::new(&self.artifacts, self.variant, self.k, &self.rescaler, &self.fit)
    }
}

/// Fits the session-type model on all `subjects`. `K` and `C` are taken from
/// `fixed` when given, otherwise chosen by leave-one-out over the cohort.
pub fn fit_full_pipeline(
    subjects: &[PreparedSubject],
    variant: Variant,
    setup: &EvalSetup<'_>,
    fixed: Option<(usize, f64)>,
) -> Result<FittedPipeline> {
    let all: Vec<&PreparedSubject> = subjects.iter().collect();
    let labels: Vec<bool> = all.iter().map(|s| s.is_positive()).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Introspect("cohort contains a single class".into()));
    }
    let seed = derive_seed(setup.seed, &["introspect"]);
    let ks = match fixed {
        Some((k, _)) => vec![k],
        None => setup.grid.ks.clone(),
    };
    let artifacts = fit_artifacts(&all, setup.category_map, &[variant], &ks, setup.config, seed)?;
    let (k, c) = match fixed {
        Some(kc) => kc,
        None => {
            let sel = select_hyperparameters(&all, variant, setup, Some(&artifacts), seed)?;
            (sel.k.expect("session-type variants have K"), sel.c)
        }
    };
    let (_, matrix) = feature_matrices(&all, variant, &[k], &artifacts)?
        .into_iter()
        .next()
        .expect("one matrix");
    let rescaler = Rescaler::fit_rows(&matrix, setup.config.rescaler)?;
    let x: Vec<Vec<f64>> = matrix.iter().map(|r| rescaler.apply_row(r)).collect::<Result<_>>()?;
    let fit = fit(&x, &labels, c)?;
    Ok(FittedPipeline {
        variant,
        k,
        c,
        artifacts,
        rescaler,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeContribution {
    pub session_type_id: usize,
    pub weight: f64,
    pub feature_sum: f64,
    pub contribution: f64,
    pub nearest_app: String,
    pub most_common_session: Vec<String>,
    pub sessions: usize,
    pub app_distribution_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRanking {
    /// Apps indexing every `app_distribution_delta`.
    pub top_apps: Vec<String>,
    /// Most positive contributions first.
    pub positive: Vec<TypeContribution>,
    /// Most negative contributions first.
    pub negative: Vec<TypeContribution>,
    /// `weight * feature_sum` for every type, by type id.
    pub all_contributions: Vec<f64>,
}

/// The `top_m` most frequently opened apps over `sessions`; ties go to the
/// lexicographically smaller app.
pub fn top_apps<S: AsRef<[String]>>(sessions: &[S], top_m: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sessions {
        for a in s.as_ref() {
            *counts.entry(a.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(top_m).map(|(a, _)| a.to_string()).collect()
}

fn relative_frequencies<S: AsRef<[String]>>(sessions: &[S], apps: &[String]) -> Vec<f64> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for s in sessions {
        for a in s.as_ref() {
            *counts.entry(a.as_str()).or_insert(0) += 1;
            total += 1;
        }
    }
    apps.iter()
        .map(|a| *counts.get(a.as_str()).unwrap_or(&0) as f64 / total as f64)
        .collect()
}

/// `p - q` over the `top_m` globally most common apps, where `p` and `q`
/// are relative open frequencies within the type's sessions and within all
/// sessions.
pub fn app_distribution_delta<S: AsRef<[String]>, T: AsRef<[String]>>(
    type_sessions: &[S],
    all_sessions: &[T],
    top_m: usize,
) -> Result<(Vec<String>, Vec<f64>)> {
    let opens = |n: usize| n > 0;
    if !opens(type_sessions.iter().map(|s| s.as_ref().len()).sum()) {
        return Err(Error::Introspect("session type has no app opens".into()));
    }
    if !opens(all_sessions.iter().map(|s| s.as_ref().len()).sum()) {
        return Err(Error::Introspect("no app opens in the dataset".into()));
    }
    let apps = top_apps(all_sessions, top_m);
    let p = relative_frequencies(type_sessions, &apps);
    let q = relative_frequencies(all_sessions, &apps);
    Ok((apps, p.iter().zip(&q).map(|(a, b)| a - b).collect()))
}

/// Modal order-insensitive multiset of apps; ties go to the smallest
/// `|`-joined serialization.
pub fn most_common_session<S: AsRef<[String]>>(sessions: &[S]) -> Option<Vec<String>> {
    let mut counts: BTreeMap<String, (usize, Vec<String>)> = BTreeMap::new();
    for s in sessions {
        let mut apps = s.as_ref().to_vec();
        apps.sort();
        let entry = counts.entry(apps.join("|")).or_insert((0, apps));
        entry.0 += 1;
    }
    let mut best: Option<(usize, Vec<String>)> = None;
    // BTreeMap iterates in key order, so strict `>` keeps the smallest key.
    for (_, (n, apps)) in counts {
        if best.as_ref().is_none_or(|b| n > b.0) {
            best = Some((n, apps));
        }
    }
    best.map(|(_, apps)| apps)
}

/// Contribution of every session type over `subjects`, with the `top_n`
/// most positive and most negative types annotated. Zero contributions are
/// never listed.
pub fn rank_type_contributions(
    view: &LinearView<'_>,
    subjects: &[PreparedSubject],
    top_n: usize,
    top_m: usize,
) -> Result<TypeRanking> {
    let k = view.types.k();
    let mut feature_sum = vec![0.0; k];
    let mut members: Vec<Vec<&[String]>> = vec![Vec::new(); k];
    let mut all_sessions: Vec<&[String]> = Vec::new();
    for subject in subjects {
        for (t, v) in view.features(subject)?.into_iter().enumerate() {
            feature_sum[t] += v;
        }
        for session in &subject.sessions {
            all_sessions.push(&session.apps);
            if let Some(t) = view.assign(session)? {
                members[t].push(&session.apps);
            }
        }
    }
    let contributions: Vec<f64> = view.fit.weights.iter().zip(&feature_sum).map(|(w, f)| w * f).collect();
    let top = top_apps(&all_sessions, top_m);

    let describe = |t: usize| -> Result<TypeContribution> {
        let (_, delta) = app_distribution_delta(&members[t], &all_sessions, top_m)?;
        Ok(TypeContribution {
            session_type_id: t,
            weight: view.fit.weights[t],
            feature_sum: feature_sum[t],
            contribution: contributions[t],
            nearest_app: nearest_app_to_centroid(view.types, view.embedding, t)?,
            most_common_session: most_common_session(&members[t]).unwrap_or_default(),
            sessions: members[t].len(),
            app_distribution_delta: delta,
        })
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| contributions[b].total_cmp(&contributions[a]).then(a.cmp(&b)));
    let positive = order
        .iter()
        .filter(|&&t| contributions[t] > 0.0)
        .take(top_n)
        .map(|&t| describe(t))
        .collect::<Result<_>>()?;
    order.sort_by(|&a, &b| contributions[a].total_cmp(&contributions[b]).then(a.cmp(&b)));
    let negative = order
        .iter()
        .filter(|&&t| contributions[t] < 0.0)
        .take(top_n)
        .map(|&t| describe(t))
        .collect::<Result<_>>()?;
    Ok(TypeRanking {
        top_apps: top,
        positive,
        negative,
        all_contributions: contributions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionContribution {
    pub subject_id: String,
    /// Index into the subject's session list.
    pub session_index: usize,
    pub start_ts: i64,
    pub end_ts: i64,
    pub apps: Vec<String>,
    pub session_type_id: usize,
    pub contribution: f64,
}

/// Contribution of each of the subject's sessions that has a session type.
pub fn session_contributions(view: &LinearView<'_>, subject: &PreparedSubject) -> Result<Vec<SessionContribution>> {
    let mut out = Vec::new();
    for (i, session) in subject.sessions.iter().enumerate() {
        if let Some(t) = view.assign(session)? {
            out.push(SessionContribution {
                subject_id: subject.subject_id.clone(),
                session_index: i,
                start_ts: session.start_ts,
                end_ts: session.end_ts,
                apps: session.apps.clone(),
                session_type_id: t,
                contribution: view.fit.weights[t] / (view.rescaler.factor(t) * subject.days),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSessions {
    pub subject_id: String,
    pub probability: f64,
    /// Whether the most positive (high score) or most negative sessions are listed.
    pub high_score: bool,
    pub sessions: Vec<SessionContribution>,
    /// Fewer than the requested number of sessions were available.
    pub flagged: bool,
}

/// The `n` sessions pushing hardest toward the subject's predicted side:
/// most positive when `probability >= 0.5`, else most negative. Ties go to
/// the earlier session.
pub fn per_subject_top_sessions(
    view: &LinearView<'_>,
    subject: &PreparedSubject,
    probability: f64,
    n: usize,
) -> Result<TopSessions> {
    let mut sessions = session_contributions(view, subject)?;
    let high_score = probability >= 0.5;
    sessions.sort_by(|a, b| {
        let by_value = if high_score {
            b.contribution.total_cmp(&a.contribution)
        } else {
            a.contribution.total_cmp(&b.contribution)
        };
        by_value.then(a.start_ts.cmp(&b.start_ts))
    });
    let flagged = sessions.len() < n;
    sessions.truncate(n);
    Ok(TopSessions {
        subject_id: subject.subject_id.clone(),
        probability,
        high_score,
        sessions,
        flagged,
    })
}

/// Top sessions of every subject under the leave-one-out model that held it
/// out. `folds[i]` must be the model whose held-out subject is `subjects[i]`.
pub fn loo_top_sessions(subjects: &[PreparedSubject], folds: &[FoldModel], n: usize) -> Result<Vec<TopSessions>> {
    if folds.len() != subjects.len() {
        return Err(Error::DimensionMismatch {
            context: "introspect::loo_top_sessions",
            expected: subjects.len(),
            got: folds.len(),
        });
    }
    folds
        .par_iter()
        .map(|m| {
            let view = LinearView::from_fold(m)?;
            per_subject_top_sessions(&view, &subjects[m.held_out], m.probability, n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionReport {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub intercept: f64,
    pub types: TypeRanking,
    /// Top sessions per subject from the leave-one-out models.
    pub subjects: Vec<TopSessions>,
}

pub fn types_to_csv(ranking: &TypeRanking) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "direction",
        "rank",
        "session_type_id",
        "weight",
        "feature_sum",
        "contribution",
        "nearest_app",
        "most_common_session",
        "sessions",
    ])?;
    for (direction, list) in [("positive", &ranking.positive), ("negative", &ranking.negative)] {
        for (rank, t) in list.iter().enumerate() {
            w.write_record([
                direction.to_string(),
                (rank + 1).to_string(),
                t.session_type_id.to_string(),
                t.weight.to_string(),
                t.feature_sum.to_string(),
                t.contribution.to_string(),
                t.nearest_app.clone(),
                t.most_common_session.join("|"),
                t.sessions.to_string(),
            ])?;
        }
    }
    finish(w)
}

/// Long-format delta table: one row per (type, app).
pub fn deltas_to_csv(ranking: &TypeRanking) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["direction", "session_type_id", "app", "delta"])?;
    for (direction, list) in [("positive", &ranking.positive), ("negative", &ranking.negative)] {
        for t in list {
            for (app, d) in ranking.top_apps.iter().zip(&t.app_distribution_delta) {
                w.write_record([direction, &t.session_type_id.to_string(), app, &d.to_string()])?;
            }
        }
    }
    finish(w)
}

pub fn sessions_to_csv(subjects: &[TopSessions]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "subject",
        "probability",
        "high_score",
        "rank",
        "start_ts",
        "end_ts",
        "session_type_id",
        "contribution",
        "apps",
        "flagged",
    ])?;
    for s in subjects {
        for (rank, c) in s.sessions.iter().enumerate() {
            w.write_record([
                s.subject_id.clone(),
                s.probability.to_string(),
                s.high_score.to_string(),
                (rank + 1).to_string(),
                c.start_ts.to_string(),
                c.end_ts.to_string(),
                c.session_type_id.to_string(),
                c.contribution.to_string(),
                c.apps.join("|"),
                s.flagged.to_string(),
            ])?;
        }
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Introspect(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(apps: &[&str]) -> Vec<String> {
        apps.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn delta_single_app_type() {
        let all = vec![s(&["A"]), s(&["B", "C"]), s(&["A", "B"])];
        let ty = vec![s(&["A"])];
        let (apps, d) = app_distribution_delta(&ty, &all, 15).unwrap();
        let ia = apps.iter().position(|a| a == "A").unwrap();
        assert!((d[ia] - (1.0 - 2.0 / 5.0)).abs() < 1e-15);
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(apps, vec!["A", "B", "C"]);
    }

    #[test]
    fn delta_errors_on_empty_type() {
        let all = vec![s(&["A"])];
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(app_distribution_delta(&empty, &all, 3).is_err());
    }

    #[test]
    fn modal_session_is_order_insensitive_with_lexicographic_ties() {
        let sessions = vec![s(&["B", "A"]), s(&["A", "B"]), s(&["C"]), s(&["C"]), s(&["A", "A"])];
        assert_eq!(most_common_session(&sessions), Some(s(&["A", "B"])));
        assert_eq!(most_common_session::<Vec<String>>(&[]), None);
    }

    #[test]
    fn top_apps_tie_break() {
        let all = vec![s(&["b", "a", "c", "c"])];
        assert_eq!(top_apps(&all, 2), vec!["c", "a"]);
    }
}
