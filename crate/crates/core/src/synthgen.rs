//! Synthetic cohorts with planted, controllable class structure.
//!
//! Every subject gets a Poisson number of sessions placed uniformly over the
//! study span without overlap. A session is drawn from the shared background
//! templates with probability `shared_fraction`; otherwise from the class
//! templates, picking the subject's own class with probability
//! `(1 + cooccurrence_signal) / 2` and the other class otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    save_cohort, AppEvent, AppEventKind, CategoryMap, Cohort, Label, LockEvent, LockEventKind, Subject, MS_PER_DAY,
};
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InventoryApp {
    pub app: String,
    pub weight: f64,
    pub category: String,
}

/// A session recipe: every core app once, in random order, plus a Poisson
/// number of extra apps drawn from the inventory weights. A session that
/// would be empty gets one inventory app.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub name: String,
    pub apps: Vec<String>,
    #[serde(default)]
    pub extra_mean: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_healthy: usize,
    pub n_symptomatic: usize,
    pub days: f64,
    pub sessions_per_day: f64,
    pub app_inventory: Vec<InventoryApp>,
    pub healthy_templates: Vec<Template>,
    pub symptomatic_templates: Vec<Template>,
    pub shared_templates: Vec<Template>,
    pub shared_fraction: f64,
    pub cooccurrence_signal: f64,
    pub marginal_matched: bool,
    pub seed: u64,
    pub start_ts: i64,
    pub dwell_ms: (i64, i64),
    pub gap_ms: i64,
}

pub const APP_NAMES: [(&str, &str); 40] = [
    ("Messages", "communication"),
    ("Mail", "communication"),
    ("Safari", "web"),
    ("Phone", "communication"),
    ("Calendar", "productivity"),
    ("Clock", "utilities"),
    ("Facebook", "social"),
    ("Instagram", "social"),
    ("Camera", "photo"),
    ("Settings", "utilities"),
    ("Photos", "photo"),
    ("Maps", "navigation"),
    ("Weather", "weather"),
    ("Music", "music"),
    ("YouTube", "entertainment"),
    ("WhatsApp", "communication"),
    ("Notes", "productivity"),
    ("Reminders", "productivity"),
    ("Calculator", "utilities"),
    ("News", "news"),
    ("Podcasts", "music"),
    ("Twitter", "social"),
    ("Spotify", "music"),
    ("Netflix", "entertainment"),
    ("Amazon", "shopping"),
    ("eBay", "shopping"),
    ("Uber", "travel"),
    ("Banking", "finance"),
    ("Health", "health"),
    ("Fitness", "health"),
    ("Books", "books"),
    ("FaceTime", "communication"),
    ("Contacts", "communication"),
    ("AppStore", "utilities"),
    ("Files", "productivity"),
    ("Wallet", "finance"),
    ("Translate", "reference"),
    ("Stocks", "finance"),
    ("Skype", "communication"),
    ("Solitaire", "games"),
];

/// The 40-app inventory with Zipf(1.1) weights by list position.
pub fn default_inventory() -> Vec<InventoryApp> {
    APP_NAMES
        .iter()
        .enumerate()
        .map(|(r, (app, category))| InventoryApp {
            app: app.to_string(),
            weight: 1.0 / ((r + 1) as f64).powf(1.1),
            category: category.to_string(),
        })
        .collect()
}

fn template(name: &str, apps: &[&str], extra_mean: f64, weight: f64) -> Template {
    Template {
        name: name.to_string(),
        apps: apps.iter().map(|a| a.to_string()).collect(),
        extra_mean,
        weight,
    }
}

fn background() -> Vec<Template> {
    vec![template("background", &[], 0.5, 1.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "E1_strong_cooccurrence")]
    E1StrongCooccurrence,
    #[serde(rename = "E2_null")]
    E2Null,
    #[serde(rename = "E3_marginal_only")]
    E3MarginalOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::E1StrongCooccurrence, Scenario::E2Null, Scenario::E3MarginalOnly];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::E1StrongCooccurrence => "E1_strong_cooccurrence",
            Scenario::E2Null => "E2_null",
            Scenario::E3MarginalOnly => "E3_marginal_only",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// Healthy sessions group the 3x3 app grid by rows, symptomatic ones by
/// columns, so each app appears once per class with equal weight.
fn grid_templates(extra_mean: f64) -> (Vec<Template>, Vec<Template>) {
    let grid = [
        ["Messages", "Mail", "Safari"],
        ["Facebook", "Instagram", "Camera"],
        ["Phone", "Calendar", "Clock"],
    ];
    let rows = (0..3)
        .map(|r| template(&format!("healthy_{r}"), &grid[r], extra_mean, 1.0))
        .collect();
    let cols = (0..3)
        .map(|c| {
            let apps: Vec<&str> = grid.iter().map(|row| row[c]).collect();
            template(&format!("symptomatic_{c}"), &apps, extra_mean, 1.0)
        })
        .collect();
    (rows, cols)
}

pub fn scenario(name: Scenario, seed: u64) -> GeneratorConfig {
    let base = |healthy, symptomatic, signal, matched| GeneratorConfig {
        n_healthy: 40,
        n_symptomatic: 20,
        days: 84.0,
        sessions_per_day: 1.5,
        app_inventory: default_inventory(),
        healthy_templates: healthy,
        symptomatic_templates: symptomatic,
        shared_templates: background(),
        shared_fraction: 0.5,
        cooccurrence_signal: signal,
        marginal_matched: matched,
        seed,
        start_ts: 1_600_000_000_000,
        dwell_ms: (5_000, 120_000),
        gap_ms: 1_000,
    };
    match name {
        Scenario::E1StrongCooccurrence => {
            let (h, s) = grid_templates(0.3);
            base(h, s, 0.6, true)
        }
        Scenario::E2Null => {
            let (h, s) = grid_templates(0.3);
            base(h, s, 0.0, true)
        }
        Scenario::E3MarginalOnly => {
            let h = ["Messages", "Instagram", "Camera"]
                .iter()
                .map(|a| template(&format!("healthy_{a}"), &[a], 0.3, 1.0))
                .collect();
            let s = ["Phone", "Clock", "Calendar"]
                .iter()
                .map(|a| template(&format!("symptomatic_{a}"), &[a], 0.3, 1.0))
                .collect();
            base(h, s, 0.5, false)
        }
    }
}

fn template_marginals(templates: &[Template]) -> BTreeMap<&str, f64> {
    let total: f64 = templates.iter().map(|t| t.weight).sum();
    let mut out = BTreeMap::new();
    for t in templates {
        for a in &t.apps {
            *out.entry(a.as_str()).or_insert(0.0) += t.weight / total;
        }
    }
    out
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Synth(m));
        if !(self.days.is_finite() && self.days >= 1.0) {
            return bad("days must be >= 1".into());
        }
        if !(self.sessions_per_day.is_finite() && self.sessions_per_day > 0.0) {
            return bad("sessions_per_day must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cooccurrence_signal) {
            return bad("cooccurrence_signal must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad("shared_fraction must lie in [0, 1]".into());
        }
        if self.app_inventory.is_empty() {
            return bad("empty app inventory".into());
        }
        if self.app_inventory.iter().any(|a| !(a.weight.is_finite() && a.weight >= 0.0)) {
            return bad("inventory weights must be finite and >= 0".into());
        }
        if self.app_inventory.iter().all(|a| a.weight == 0.0) {
            return bad("inventory weights sum to zero".into());
        }
        if self.dwell_ms.0 < 1 || self.dwell_ms.1 < self.dwell_ms.0 || self.gap_ms < 1 {
            return bad("dwell range and gap must be positive".into());
        }
        let groups = [
            ("healthy", &self.healthy_templates, self.shared_fraction < 1.0),
            ("symptomatic", &self.symptomatic_templates, self.shared_fraction < 1.0),
            ("shared", &self.shared_templates, self.shared_fraction > 0.0),
        ];
        for (name, templates, needed) in groups {
            if templates.iter().any(|t| !(t.weight.is_finite() && t.weight >= 0.0 && t.extra_mean.is_finite() && t.extra_mean >= 0.0)) {
                return bad(format!("{name} templates need finite non-negative weights and extra means"));
            }
            if needed && templates.iter().map(|t| t.weight).sum::<f64>() <= 0.0 {
                return bad(format!("{name} templates are empty or weigh zero"));
            }
        }
        if self.marginal_matched {
            let h = template_marginals(&self.healthy_templates);
            let s = template_marginals(&self.symptomatic_templates);
            let extra = |ts: &[Template]| {
                let total: f64 = ts.iter().map(|t| t.weight).sum();
                ts.iter().map(|t| t.weight * t.extra_mean).sum::<f64>() / total
            };
            let apps: std::collections::BTreeSet<&str> = h.keys().chain(s.keys()).copied().collect();
            let same = apps
                .iter()
                .all(|a| (h.get(a).unwrap_or(&0.0) - s.get(a).unwrap_or(&0.0)).abs() < 1e-9)
                && (extra(&self.healthy_templates) - extra(&self.symptomatic_templates)).abs() < 1e-9;
            if !same {
                return bad("marginal_matched is set but class templates have different per-app marginals".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub label: Label,
    pub sessions: usize,
    pub template_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub truth: GroundTruth,
}

struct Sampler<'a> {
    config: &'a GeneratorConfig,
    inventory: WeightedIndex<f64>,
}

impl Sampler<'_> {
    fn pick<'t>(&self, templates: &'t [Template], rng: &mut ChaCha8Rng) -> &'t Template {
        let w = WeightedIndex::new(templates.iter().map(|t| t.weight)).expect("validated weights");
        &templates[w.sample(rng)]
    }

    fn session(&self, label: Label, rng: &mut ChaCha8Rng) -> (&str, Vec<String>) {
        let c = self.config;
        let templates = if rng.random::<f64>() < c.shared_fraction {
            &c.shared_templates
        } else {
            let own = rng.random::<f64>() < (1.0 + c.cooccurrence_signal) / 2.0;
            match (label, own) {
                (Label::Healthy, true) | (Label::Symptomatic, false) => &c.healthy_templates,
                _ => &c.symptomatic_templates,
            }
        };
        let t = self.pick(templates, rng);
        let mut apps = t.apps.clone();
        let extras = if t.extra_mean > 0.0 {
            Poisson::new(t.extra_mean).expect("validated mean").sample(rng) as usize
        } else {
            0
        };
        let extras = if apps.is_empty() { extras.max(1) } else { extras };
        for _ in 0..extras {
            apps.push(c.app_inventory[self.inventory.sample(rng)].app.clone());
        }
        apps.shuffle(rng);
        (&t.name, apps)
    }
}

/// Apps of one session with their offset from the unlock and dwell time.
type Opens = Vec<(String, i64, i64)>;

fn generate_subject(sampler: &Sampler<'_>, index: usize, subject_id: String, label: Label) -> Result<(Subject, SubjectTruth)> {
    let c = sampler.config;
    let mut rng = rng_from(derive_seed(c.seed, &["subject", &index.to_string()]));
    let n = Poisson::new(c.days * c.sessions_per_day)
        .map_err(|e| Error::Synth(e.to_string()))?
        .sample(&mut rng) as usize;

    let mut template_counts = BTreeMap::new();
    let mut contents: Vec<(Opens, i64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let (name, apps) = sampler.session(label, &mut rng);
        *template_counts.entry(name.to_string()).or_insert(0) += 1;
        let mut t = c.gap_ms;
        let mut opens = Vec::with_capacity(apps.len());
        for app in apps {
            let dwell = rng.random_range(c.dwell_ms.0..=c.dwell_ms.1);
            opens.push((app, t, dwell));
            t += dwell + 1;
        }
        contents.push((opens, t + c.gap_ms));
    }

    let span = (c.days * MS_PER_DAY) as i64;
    let busy: i64 = contents.iter().map(|(_, d)| d + c.gap_ms).sum();
    let free = span - busy;
    if free < 0 {
        return Err(Error::Synth(format!(
            "subject {subject_id}: {n} sessions do not fit into {} days without overlap; lower sessions_per_day",
            c.days
        )));
    }
    let mut offsets: Vec<i64> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    offsets.sort_unstable();

    let mut subject = Subject::new(subject_id.clone(), label);
    subject.days_observed = Some(c.days);
    let mut used = 0i64;
    for (offset, (opens, duration)) in offsets.into_iter().zip(contents) {
        let start = c.start_ts + offset + used;
        subject.lock_events.push(LockEvent {
            kind: LockEventKind::Unlock,
            ts: start,
        });
        for (app, at, dwell) in opens {
            subject.app_events.push(AppEvent {
                app_id: app.clone(),
                kind: AppEventKind::Open,
                ts: start + at,
            });
            subject.app_events.push(AppEvent {
                app_id: app,
                kind: AppEventKind::Close,
                ts: start + at + dwell,
            });
        }
        subject.lock_events.push(LockEvent {
            kind: LockEventKind::Lock,
            ts: start + duration,
        });
        used += duration + c.gap_ms;
    }
    let truth = SubjectTruth {
        subject_id,
        label,
        sessions: n,
        template_counts,
    };
    Ok((subject, truth))
}

pub fn generate(config: &GeneratorConfig) -> Result<SynthCohort> {
    config.validate()?;
    let sampler = Sampler {
        config,
        inventory: WeightedIndex::new(config.app_inventory.iter().map(|a| a.weight))
            .map_err(|e| Error::Synth(e.to_string()))?,
    };
    let roster: Vec<(String, Label)> = (0..config.n_healthy)
        .map(|i| (format!("h{:03}", i + 1), Label::Healthy))
        .chain((0..config.n_symptomatic).map(|i| (format!("s{:03}", i + 1), Label::Symptomatic)))
        .collect();
    let generated: Vec<(Subject, SubjectTruth)> = roster
        .into_par_iter()
        .enumerate()
        .map(|(i, (id, label))| generate_subject(&sampler, i, id, label))
        .collect::<Result<_>>()?;
    let (subjects, truths): (Vec<Subject>, Vec<SubjectTruth>) = generated.into_iter().unzip();
    let category_map = CategoryMap::new(
        config
            .app_inventory
            .iter()
            .map(|a| (a.app.clone(), a.category.clone()))
            .collect(),
    );
    Ok(SynthCohort {
        cohort: Cohort {
            subjects,
            category_map: Some(category_map),
        },
        truth: GroundTruth {
            config: config.clone(),
            subjects: truths,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub events: PathBuf,
    pub labels: PathBuf,
    pub category_map: PathBuf,
    pub truth: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> SynthPaths {
        SynthPaths {
            events: dir.join("events.jsonl"),
            labels: dir.join("labels.csv"),
            category_map: dir.join("categories.csv"),
            truth: dir.join("truth.json"),
        }
    }
}

/// Writes the cohort files and the ground-truth sidecar into `dir`.
pub fn write_synth(synth: &SynthCohort, dir: &Path) -> Result<SynthPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths::in_dir(dir);
    save_cohort(&synth.cohort, &paths.events, &paths.labels, Some(&paths.category_map))?;
    let truth = serde_json::to_vec_pretty(&synth.truth)?;
    fs::write(&paths.truth, truth).map_err(|e| Error::io(&paths.truth, e))?;
    Ok(paths)
}
