//! Per-subject feature vectors for the full model and the six baselines,
//! normalized per observed day and rescaled so training columns have mean 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::pipeline::{FoldArtifacts, PreparedSubject};
use crate::session_repr::{session_apps, session_vector_mean, session_vector_onehot, OnehotSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::B5,
        Variant::B6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::B1 => "B1",
            Variant::B2 => "B2",
            Variant::B3 => "B3",
            Variant::B4 => "B4",
            Variant::B5 => "B5",
            Variant::B6 => "B6",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "session-type counts over learned app embeddings",
            Variant::B1 => "clusters of individual app-event embeddings, no sessions",
            Variant::B2 => "session types over randomly permuted app embeddings",
            Variant::B3 => "sum of one-hot app session vectors",
            Variant::B4 => "sum of one-hot category session vectors",
            Variant::B5 => "app-open counts, no sessions",
            Variant::B6 => "category-open counts, no sessions",
        }
    }

    pub fn uses_clustering(self) -> bool {
        matches!(self, Variant::Full | Variant::B1 | Variant::B2)
    }

    pub fn uses_embedding(self) -> bool {
        self.uses_clustering()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub notes: String,
}

impl FeatureSpec {
    pub fn new(variant: Variant, k: Option<usize>) -> Result<Self> {
        match (variant.uses_clustering(), k) {
            (true, None) => Err(Error::Features(format!("variant {variant} requires K"))),
            (false, Some(_)) => Err(Error::Features(format!("variant {variant} takes no K"))),
            (true, Some(0)) => Err(Error::Features("K must be >= 1".into())),
            _ => Ok(Self {
                variant,
                k,
                notes: variant.description().to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub values: Vec<f64>,
    pub label: Label,
}

/// Pre-rescale features of one subject under `spec`.
pub fn featurize(
    subject: &PreparedSubject,
    spec: &FeatureSpec,
    artifacts: &FoldArtifacts,
) -> Result<SubjectFeatures> {
    let missing = |what: &str| Error::Features(format!("variant {} is missing its {what} artifact", spec.variant));
    let dedupe = artifacts.dedupe_within_session;
    let mut values = match spec.variant {
        Variant::Full | Variant::B2 => {
            let k = spec.k.ok_or_else(|| missing("K"))?;
            let model = artifacts.embedding_for(spec.variant).ok_or_else(|| missing("embedding"))?;
            let types = artifacts.types_for(spec.variant, k).ok_or_else(|| missing("session type"))?;
            let mut counts = vec![0.0; k];
            for session in &subject.sessions {
                let apps = session_apps(&session.apps, dedupe);
                if let Some(v) = session_vector_mean(&apps, model) {
                    counts[types.assign(&v.values)?] += 1.0;
                }
            }
            counts
        }
        Variant::B1 => {
            let k = spec.k.ok_or_else(|| missing("K"))?;
            let model = artifacts.embedding_for(spec.variant).ok_or_else(|| missing("embedding"))?;
            let types = artifacts.types_for(spec.variant, k).ok_or_else(|| missing("event type"))?;
            let mut counts = vec![0.0; k];
            for app in &subject.corpus {
                if let Some(row) = model.lookup(app) {
                    let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                    counts[types.assign(&v)?] += 1.0;
                }
            }
            counts
        }
        Variant::B3 | Variant::B4 => {
            let space = if spec.variant == Variant::B3 {
                OnehotSpace::Apps(&artifacts.vocab)
            } else {
                OnehotSpace::Categories(&artifacts.categories)
            };
            let mut sum = vec![0.0; space.len()];
            for session in &subject.sessions {
                let apps = session_apps(&session.apps, dedupe);
                if let Some(v) = session_vector_onehot(&apps, space) {
                    sum.iter_mut().zip(&v.values).for_each(|(s, x)| *s += x);
                }
            }
            sum
        }
        Variant::B5 | Variant::B6 => {
            let space = if spec.variant == Variant::B5 {
                OnehotSpace::Apps(&artifacts.vocab)
            } else {
                OnehotSpace::Categories(&artifacts.categories)
            };
            let mut counts = vec![0.0; space.len()];
            for app in &subject.corpus {
                if let Some(i) = space.index_of(app) {
                    counts[i] += 1.0;
                }
            }
            counts
        }
    };
    values.iter_mut().for_each(|v| *v /= subject.days);
    Ok(SubjectFeatures {
        subject_id: subject.subject_id.clone(),
        values,
        label: subject.label,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    #[default]
    PerColumn,
    GlobalScalar,
}

/// Divisors that give the training rows mean 1, per column or overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rescaler {
    PerColumn(Vec<f64>),
    GlobalScalar(f64),
}

impl Rescaler {
    pub fn fit_rows<R: AsRef<[f64]>>(rows: &[R], mode: RescaleMode) -> Result<Rescaler> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Features("cannot fit a rescaler on an empty training set".into()))?;
        let d = first.as_ref().len();
        let n = rows.len() as f64;
        let mut sums = vec![0.0; d];
        for row in rows {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "features::rescaler_fit",
                    expected: d,
                    got: row.len(),
                });
            }
            sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        let positive_or_one = |m: f64| if m > 0.0 && m.is_finite() { m } else { 1.0 };
        Ok(match mode {
            RescaleMode::PerColumn => {
                Rescaler::PerColumn(sums.iter().map(|s| positive_or_one(s / n)).collect())
            }
            RescaleMode::GlobalScalar => {
                let total: f64 = sums.iter().sum();
                let count = n * d as f64;
                Rescaler::GlobalScalar(if count > 0.0 { positive_or_one(total / count) } else { 1.0 })
            }
        })
    }

    /// Divisor applied to column `j`.
    pub fn factor(&self, j: usize) -> f64 {
        match self {
            Rescaler::PerColumn(f) => f[j],
            Rescaler::GlobalScalar(s) => *s,
        }
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if let Rescaler::PerColumn(f) = self {
            if f.len() != row.len() {
                return Err(Error::DimensionMismatch {
                    context: "features::rescaler_apply",
                    expected: f.len(),
                    got: row.len(),
                });
            }
        }
        Ok(row.iter().enumerate().map(|(j, v)| v / self.factor(j)).collect())
    }
}

pub fn rescaler_fit(train: &[SubjectFeatures], mode: RescaleMode) -> Result<Rescaler> {
    let rows: Vec<&[f64]> = train.iter().map(|f| f.values.as_slice()).collect();
    Rescaler::fit_rows(&rows, mode)
}

pub fn rescaler_apply(features: &SubjectFeatures, rescaler: &Rescaler) -> Result<SubjectFeatures> {
    Ok(SubjectFeatures {
        values: rescaler.apply_row(&features.values)?,
        ..features.clone()
    })
}

/// Feature table as CSV: `subject,label,f0..f{n-1}`.
pub fn features_to_csv<W: std::io::Write>(rows: &[SubjectFeatures], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["subject".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.subject_id.clone(), r.label.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<features csv>", e))?;
    Ok(())
}
