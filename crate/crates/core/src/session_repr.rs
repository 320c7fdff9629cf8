//! Fixed-length session vectors: the mean of app embeddings for the full
//! model, and means of one-hot indicators for the app and category
//! baselines.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingModel, Vocab};
use crate::ingest::{CategoryMap, UNKNOWN_CATEGORY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprKind {
    EmbeddingMean,
    OnehotApp,
    OnehotCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionVector {
    pub repr: ReprKind,
    pub values: Vec<f64>,
    /// Apps left out because they had no vector (out of vocabulary).
    pub skipped_apps: usize,
}

/// Apps of a session, optionally with repeated opens collapsed to the first.
pub fn session_apps(apps: &[String], dedupe: bool) -> Cow<'_, [String]> {
    if !dedupe {
        return Cow::Borrowed(apps);
    }
    let mut seen = HashSet::new();
    Cow::Owned(
        apps.iter()
            .filter(|a| seen.insert(a.as_str()))
            .cloned()
            .collect(),
    )
}

/// Mean embedding of the in-vocabulary apps, counted with multiplicity.
/// `None` when no app has a vector.
pub fn session_vector_mean(apps: &[String], model: &EmbeddingModel) -> Option<SessionVector> {
    let mut values = vec![0.0f64; model.dim()];
    let mut included = 0usize;
    for app in apps {
        if let Some(row) = model.lookup(app) {
            values.iter_mut().zip(row).for_each(|(v, x)| *v += *x as f64);
            included += 1;
        }
    }
    if included == 0 {
        return None;
    }
    let n = included as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Some(SessionVector {
        repr: ReprKind::EmbeddingMean,
        values,
        skipped_apps: apps.len() - included,
    })
}

/// Ordered category set with the reserved unknown bucket last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySpace {
    categories: Vec<String>,
    index: HashMap<String, usize>,
    map: CategoryMap,
}

impl CategorySpace {
    pub fn new(map: Option<&CategoryMap>) -> Self {
        let map = map.cloned().unwrap_or_default();
        let set: BTreeSet<String> = map
            .entries()
            .map(|(_, c)| c.to_string())
            .filter(|c| c != UNKNOWN_CATEGORY)
            .collect();
        let mut categories: Vec<String> = set.into_iter().collect();
        categories.push(UNKNOWN_CATEGORY.to_string());
        let index = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Self {
            categories,
            index,
            map,
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn index_of_app(&self, app: &str) -> usize {
        self.index[self.map.category_of(app)]
    }
}

/// Indicator space for the one-hot baselines.
#[derive(Debug, Clone, Copy)]
pub enum OnehotSpace<'a> {
    Apps(&'a Vocab),
    Categories(&'a CategorySpace),
}

impl OnehotSpace<'_> {
    pub fn len(&self) -> usize {
        match self {
            OnehotSpace::Apps(v) => v.len(),
            OnehotSpace::Categories(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, app: &str) -> Option<usize> {
        match self {
            OnehotSpace::Apps(v) => v.index_of(app),
            OnehotSpace::Categories(c) => Some(c.index_of_app(app)),
        }
    }

    fn kind(&self) -> ReprKind {
        match self {
            OnehotSpace::Apps(_) => ReprKind::OnehotApp,
            OnehotSpace::Categories(_) => ReprKind::OnehotCategory,
        }
    }
}

/// Mean of indicator vectors, i.e. the within-session relative frequency
/// of each app or category. Apps outside an app vocabulary are skipped;
/// `None` when nothing remains.
pub fn session_vector_onehot(apps: &[String], space: OnehotSpace<'_>) -> Option<SessionVector> {
    let mut values = vec![0.0f64; space.len()];
    let mut included = 0usize;
    for app in apps {
        if let Some(i) = space.index_of(app) {
            values[i] += 1.0;
            included += 1;
        }
    }
    if included == 0 {
        return None;
    }
    let n = included as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Some(SessionVector {
        repr: space.kind(),
        values,
        skipped_apps: apps.len() - included,
    })
}
