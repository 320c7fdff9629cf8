//! Subcommand drivers: `synth`, `evaluate`, `ablate`, `introspect`.
//!
//! Every command reads one JSON [`RunConfig`] (unknown keys rejected), lets
//! a few flags override it, and writes its artifacts plus `manifest.json`
//! into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::KMeansConfig;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::evaluation::{ablation_table, evaluate_variants, EvalSetup, FitScope, HyperGrid};
use crate::features::{features_to_csv, RescaleMode, SubjectFeatures, Variant};
use crate::ingest::{load_cohort, Cohort};
use crate::introspect::{
    deltas_to_csv, fit_full_pipeline, loo_top_sessions, rank_type_contributions, sessions_to_csv, types_to_csv,
    IntrospectionReport,
};
use crate::pipeline::{prepare_cohort, InnerArtifacts, PipelineConfig, PreparedSubject, SentenceScope};
use crate::synthgen::{generate, scenario, write_synth, GeneratorConfig, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub events: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub category_map: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            events: None,
            labels: None,
            category_map: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Named scenario; ignored when `generator` is given.
    pub scenario: Option<Scenario>,
    pub generator: Option<GeneratorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrospectConfig {
    pub top_n: usize,
    pub top_m: usize,
    pub sessions_per_subject: usize,
    /// Fixed K for the all-subject model; selected by leave-one-out when unset.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
}

impl Default for IntrospectConfig {
    fn default() -> Self {
        Self {
            top_n: 4,
            top_m: 15,
            sessions_per_subject: 3,
            k: None,
            c: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub variant: Variant,
    pub grid: HyperGrid,
    pub embedding: EmbeddingConfig,
    pub kmeans: KMeansConfig,
    pub rescaler: RescaleMode,
    pub sentence_scope: SentenceScope,
    pub dedupe_within_session: bool,
    pub inner_artifacts: InnerArtifacts,
    pub fit_scope: FitScope,
    pub synth: SynthConfig,
    pub introspect: IntrospectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            variant: Variant::Full,
            grid: HyperGrid::default(),
            embedding: pipeline.embedding,
            kmeans: pipeline.kmeans,
            rescaler: pipeline.rescaler,
            sentence_scope: pipeline.sentence_scope,
            dedupe_within_session: pipeline.dedupe_within_session,
            inner_artifacts: pipeline.inner_artifacts,
            fit_scope: FitScope::PerFold,
            synth: SynthConfig::default(),
            introspect: IntrospectConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            embedding: self.embedding.clone(),
            kmeans: self.kmeans.clone(),
            rescaler: self.rescaler,
            sentence_scope: self.sentence_scope,
            dedupe_within_session: self.dedupe_within_session,
            inner_artifacts: self.inner_artifacts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.embedding.validate()?;
        if self.introspect.top_m == 0 || self.introspect.sessions_per_subject == 0 {
            return Err(Error::Config("introspect top_m and sessions_per_subject must be >= 1".into()));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        match &self.synth.generator {
            Some(g) => GeneratorConfig {
                seed: self.seed,
                ..g.clone()
            },
            None => scenario(self.synth.scenario.unwrap_or(Scenario::E1StrongCooccurrence), self.seed),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "appsession", version, about = "Cognitive-health classification from app-usage sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth(CommonArgs),
    /// Nested leave-one-out evaluation of one variant.
    Evaluate(CommonArgs),
    /// Nested leave-one-out evaluation of all seven variants.
    Ablate(CommonArgs),
    /// Session-type and per-subject session contributions.
    Introspect(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub fit_scope: Option<FitScope>,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub category_map: Option<PathBuf>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.paths.out = out.clone();
        }
        if let Some(v) = self.variant {
            config.variant = v;
        }
        if let Some(f) = self.fit_scope {
            config.fit_scope = f;
        }
        if let Some(s) = self.scenario {
            config.synth.scenario = Some(s);
            config.synth.generator = None;
        }
        for (flag, slot) in [
            (&self.events, &mut config.paths.events),
            (&self.labels, &mut config.paths.labels),
            (&self.category_map, &mut config.paths.category_map),
        ] {
            if let Some(p) = flag {
                *slot = Some(p.clone());
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    runtime_ms: u128,
}

#[derive(Debug, Serialize)]
struct InputFile {
    path: PathBuf,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes artifact files into the output directory and tracks their names
/// for the manifest.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Outputs> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    fn finish(mut self, command: &str, config: &RunConfig, inputs: &[&Path], started: Instant) -> Result<PathBuf> {
        let inputs = inputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(InputFile {
                    path: p.to_path_buf(),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<_>>()?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed,
            config_sha256: sha256_hex(&serde_json::to_vec(config)?),
            config,
            inputs,
            outputs: self.written.clone(),
            runtime_ms: started.elapsed().as_millis(),
        };
        self.json("manifest.json", &manifest)?;
        Ok(self.dir)
    }
}

struct LoadedCohort {
    cohort: Cohort,
    subjects: Vec<PreparedSubject>,
    inputs: Vec<PathBuf>,
}

fn load(config: &RunConfig) -> Result<LoadedCohort> {
    let events = config
        .paths
        .events
        .clone()
        .ok_or_else(|| Error::Config("paths.events is required".into()))?;
    let labels = config
        .paths
        .labels
        .clone()
        .ok_or_else(|| Error::Config("paths.labels is required".into()))?;
    let cohort = load_cohort(&events, &labels, config.paths.category_map.as_deref())?;
    let subjects = prepare_cohort(&cohort)?;
    let mut inputs = vec![events, labels];
    inputs.extend(config.paths.category_map.clone());
    Ok(LoadedCohort {
        cohort,
        subjects,
        inputs,
    })
}

fn input_refs(inputs: &[PathBuf]) -> Vec<&Path> {
    inputs.iter().map(PathBuf::as_path).collect()
}

pub fn cmd_synth(config: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let synth = generate(&config.generator())?;
    let mut out = Outputs::new(&config.paths.out)?;
    write_synth(&synth, &out.dir)?;
    out.written
        .extend(["events.jsonl", "labels.csv", "categories.csv", "truth.json"].map(String::from));
    out.finish("synth", config, &[], started)
}

fn report_csv(report: &crate::evaluation::EvaluationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject", "label", "probability", "K", "C"])?;
    for p in &report.per_subject {
        w.write_record([
            p.subject_id.clone(),
            p.label.to_string(),
            p.probability.to_string(),
            p.chosen_k.map(|k| k.to_string()).unwrap_or_default(),
            p.chosen_c.to_string(),
        ])?;
    }
    into_string(w)
}

fn roc_csv(report: &crate::evaluation::EvaluationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in report.roc_curve()? {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8 fields"))
}

fn setup<'a>(config: &'a RunConfig, cohort: &'a Cohort, pipeline: &'a PipelineConfig) -> EvalSetup<'a> {
    EvalSetup {
        category_map: cohort.category_map.as_ref(),
        grid: &config.grid,
        config: pipeline,
        fit_scope: config.fit_scope,
        seed: config.seed,
    }
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let data = load(config)?;
    let pipeline = config.pipeline();
    let (report, _) = evaluate_variants(&data.subjects, &[config.variant], &setup(config, &data.cohort, &pipeline))?
        .remove(0);
    let mut out = Outputs::new(&config.paths.out)?;
    out.json("report.json", &report)?;
    out.write("report.csv", report_csv(&report)?)?;
    out.write("roc.csv", roc_csv(&report)?)?;
    out.finish("evaluate", config, &input_refs(&data.inputs), started)
}

pub fn cmd_ablate(config: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let data = load(config)?;
    let pipeline = config.pipeline();
    let table = ablation_table(&data.subjects, &setup(config, &data.cohort, &pipeline))?;
    let mut out = Outputs::new(&config.paths.out)?;
    out.write("ablation.csv", table.to_csv())?;
    out.json("ablation.json", &table)?;
    out.finish("ablate", config, &input_refs(&data.inputs), started)
}

pub fn cmd_introspect(config: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    if !matches!(config.variant, Variant::Full | Variant::B2) {
        return Err(Error::Config(format!("introspection needs session types; variant {} has none", config.variant)));
    }
    let data = load(config)?;
    let pipeline = config.pipeline();
    let setup = setup(config, &data.cohort, &pipeline);
    let ic = &config.introspect;
    let fixed = match (ic.k, ic.c) {
        (Some(k), Some(c)) => Some((k, c)),
        (None, None) => None,
        _ => return Err(Error::Config("introspect K and C must be given together".into())),
    };

    let fitted = fit_full_pipeline(&data.subjects, config.variant, &setup, fixed)?;
    let view = fitted.view()?;
    let types = rank_type_contributions(&view, &data.subjects, ic.top_n, ic.top_m)?;
    let (_, folds) = evaluate_variants(&data.subjects, &[config.variant], &setup)?.remove(0);
    let sessions = loo_top_sessions(&data.subjects, &folds, ic.sessions_per_subject)?;

    let features: Vec<SubjectFeatures> = data
        .subjects
        .iter()
        .map(|s| {
            Ok(SubjectFeatures {
                subject_id: s.subject_id.clone(),
                values: view.features(s)?,
                label: s.label,
            })
        })
        .collect::<Result<_>>()?;
    let mut features_csv = Vec::new();
    features_to_csv(&features, &mut features_csv)?;

    let report = IntrospectionReport {
        variant: config.variant,
        k: fitted.k,
        c: fitted.c,
        intercept: fitted.fit.intercept,
        types,
        subjects: sessions,
    };
    let mut out = Outputs::new(&config.paths.out)?;
    out.json("introspection.json", &report)?;
    out.write("types.csv", types_to_csv(&report.types)?)?;
    out.write("deltas.csv", deltas_to_csv(&report.types)?)?;
    out.write("sessions.csv", sessions_to_csv(&report.subjects)?)?;
    out.write("features.csv", features_csv)?;
    out.write("embedding.bin", view.embedding.to_bytes()?)?;
    out.write("session_types.bin", view.types.to_bytes()?)?;
    out.finish("introspect", config, &input_refs(&data.inputs), started)
}

pub fn run(command: &Command) -> Result<PathBuf> {
    match command {
        Command::Synth(a) => cmd_synth(&a.resolve()?),
        Command::Evaluate(a) => cmd_evaluate(&a.resolve()?),
        Command::Ablate(a) => cmd_ablate(&a.resolve()?),
        Command::Introspect(a) => cmd_introspect(&a.resolve()?),
    }
}

/// Process exit code for a command outcome: 0 success, 1 invalid input or
/// configuration, 2 failure while running.
pub fn exit_code(result: &Result<PathBuf>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}
