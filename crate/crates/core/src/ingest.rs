//! Loading and validating per-subject app and lock event streams.
//!
//! Events arrive as JSON Lines, labels as `subject,label[,days_observed]`
//! CSV, and the optional category map as `app,category` CSV. Streams are
//! stably sorted by timestamp on load; duplicate rows are kept.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MS_PER_DAY: f64 = 86_400_000.0;

/// Category assigned to apps missing from the category map.
pub const UNKNOWN_CATEGORY: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppEventKind {
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockEventKind {
    Unlock,
    Lock,
}

/// An app opening or closing. The owning subject is the [`Subject`] that
/// holds the event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppEvent {
    pub app_id: String,
    pub kind: AppEventKind,
    /// Milliseconds since the Unix epoch, UTC.
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEvent {
    pub kind: LockEventKind,
    pub ts: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Symptomatic,
}

impl Label {
    /// `true` for the positive (symptomatic) class.
    pub fn is_positive(self) -> bool {
        self == Label::Symptomatic
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Symptomatic => "symptomatic",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(Label::Healthy),
            "symptomatic" => Ok(Label::Symptomatic),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub subject_id: String,
    pub label: Label,
    /// Explicit observation length in days; derived from the event span
    /// when absent.
    pub days_observed: Option<f64>,
    pub app_events: Vec<AppEvent>,
    pub lock_events: Vec<LockEvent>,
}

impl Subject {
    pub fn new(subject_id: impl Into<String>, label: Label) -> Self {
        Self {
            subject_id: subject_id.into(),
            label,
            days_observed: None,
            app_events: Vec::new(),
            lock_events: Vec::new(),
        }
    }

    /// Stable sort of both streams by timestamp.
    pub fn sort_streams(&mut self) {
        self.app_events.sort_by_key(|e| e.ts);
        self.lock_events.sort_by_key(|e| e.ts);
    }
}

/// Observation length: metadata override, else the span of all events in
/// days, floored at one day.
pub fn derive_days_observed(subject: &Subject) -> Result<f64> {
    if let Some(days) = subject.days_observed {
        return Ok(days);
    }
    let ts = subject
        .app_events
        .iter()
        .map(|e| e.ts)
        .chain(subject.lock_events.iter().map(|e| e.ts));
    let (min, max) = ts.fold(None, |acc: Option<(i64, i64)>, t| match acc {
        None => Some((t, t)),
        Some((lo, hi)) => Some((lo.min(t), hi.max(t))),
    })
    .ok_or_else(|| Error::NoObservation(subject.subject_id.clone()))?;
    Ok(((max - min) as f64 / MS_PER_DAY).max(1.0))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    map: BTreeMap<String, String>,
}

impl CategoryMap {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub fn category_of(&self, app: &str) -> &str {
        self.map.get(app).map(String::as_str).unwrap_or(UNKNOWN_CATEGORY)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, c)| (a.as_str(), c.as_str()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub category_map: Option<CategoryMap>,
}

impl Cohort {
    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn total_events(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.app_events.len() + s.lock_events.len())
            .sum()
    }
}

#[derive(Serialize)]
struct EventRow<'a> {
    subject: &'a str,
    ts: i64,
    stream: &'static str,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    app: Option<&'a str>,
}

fn parse_err(file: &Path, line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

enum ParsedEvent {
    App(String, AppEvent),
    Lock(String, LockEvent),
}

fn parse_event_line(path: &Path, line_no: usize, line: &str) -> Result<ParsedEvent> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| parse_err(path, line_no, "<line>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(path, line_no, "<line>", "expected a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "subject" | "ts" | "stream" | "kind" | "app") {
            return Err(parse_err(path, line_no, key, "unknown field"));
        }
    }
    let str_field = |name: &str| -> Result<&str> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.as_str()),
            Some(_) => Err(parse_err(path, line_no, name, "expected a string")),
            None => Err(parse_err(path, line_no, name, "missing")),
        }
    };
    let subject = str_field("subject")?;
    if subject.is_empty() {
        return Err(parse_err(path, line_no, "subject", "empty"));
    }
    let ts = match obj.get("ts") {
        Some(v) => v
            .as_i64()
            .ok_or_else(|| parse_err(path, line_no, "ts", "expected an integer"))?,
        None => return Err(parse_err(path, line_no, "ts", "missing")),
    };
    if ts < 0 {
        return Err(parse_err(path, line_no, "ts", "negative timestamp"));
    }
    let stream = str_field("stream")?;
    let kind = str_field("kind")?;
    match stream {
        "app" => {
            let kind = match kind {
                "open" => AppEventKind::Open,
                "close" => AppEventKind::Close,
                other => {
                    return Err(parse_err(
                        path,
                        line_no,
                        "kind",
                        format!("`{other}` is not valid for stream app"),
                    ))
                }
            };
            let app = str_field("app")?;
            if app.is_empty() {
                return Err(parse_err(path, line_no, "app", "empty"));
            }
            Ok(ParsedEvent::App(
                subject.to_string(),
                AppEvent {
                    app_id: app.to_string(),
                    kind,
                    ts,
                },
            ))
        }
        "lock" => {
            let kind = match kind {
                "unlock" => LockEventKind::Unlock,
                "lock" => LockEventKind::Lock,
                other => {
                    return Err(parse_err(
                        path,
                        line_no,
                        "kind",
                        format!("`{other}` is not valid for stream lock"),
                    ))
                }
            };
            if obj.contains_key("app") {
                return Err(parse_err(path, line_no, "app", "not allowed for stream lock"));
            }
            Ok(ParsedEvent::Lock(subject.to_string(), LockEvent { kind, ts }))
        }
        other => Err(parse_err(
            path,
            line_no,
            "stream",
            format!("`{other}` is not one of app, lock"),
        )),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<Subject>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(open(path)?);
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let with_days = match names.as_slice() {
        ["subject", "label"] => false,
        ["subject", "label", "days_observed"] => true,
        _ => {
            return Err(parse_err(
                path,
                1,
                "<header>",
                "expected subject,label[,days_observed]",
            ))
        }
    };
    let mut subjects: Vec<Subject> = Vec::new();
    let mut seen = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != names.len() && !(with_days && record.len() == 2) {
            return Err(parse_err(path, line, "<row>", "wrong number of columns"));
        }
        let id = record.get(0).unwrap_or("").trim();
        if id.is_empty() {
            return Err(parse_err(path, line, "subject", "empty"));
        }
        let raw_label = record.get(1).unwrap_or("").trim();
        let label: Label = raw_label.parse().map_err(|label| Error::UnknownLabel {
            file: path.to_path_buf(),
            line,
            label,
        })?;
        let days = match record.get(2).map(str::trim) {
            None | Some("") => None,
            Some(raw) => {
                let days: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(path, line, "days_observed", "not a number"))?;
                if !days.is_finite() || days < 1.0 {
                    return Err(parse_err(path, line, "days_observed", "must be a finite value >= 1"));
                }
                Some(days)
            }
        };
        if seen.insert(id.to_string(), subjects.len()).is_some() {
            return Err(Error::DuplicateSubject(id.to_string()));
        }
        let mut subject = Subject::new(id, label);
        subject.days_observed = days;
        subjects.push(subject);
    }
    Ok(subjects)
}

fn read_category_map(path: &Path) -> Result<CategoryMap> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?);
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["app", "category"] {
        return Err(parse_err(path, 1, "<header>", "expected app,category"));
    }
    let mut map = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let app = record.get(0).unwrap_or("").trim();
        let category = record.get(1).unwrap_or("").trim();
        if app.is_empty() {
            return Err(parse_err(path, line, "app", "empty"));
        }
        if category.is_empty() {
            return Err(parse_err(path, line, "category", "empty"));
        }
        map.insert(app.to_string(), category.to_string());
    }
    Ok(CategoryMap::new(map))
}

/// Loads a cohort from the events, labels and optional category-map files.
pub fn load_cohort(
    events_path: &Path,
    labels_path: &Path,
    category_map_path: Option<&Path>,
) -> Result<Cohort> {
    let mut subjects = read_labels(labels_path)?;
    let index: HashMap<String, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.subject_id.clone(), i))
        .collect();

    let reader = BufReader::new(open(events_path)?);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(events_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (subject_id, event) = match parse_event_line(events_path, line_no, &line)? {
            ParsedEvent::App(s, e) => (s, Ok(e)),
            ParsedEvent::Lock(s, e) => (s, Err(e)),
        };
        let slot = *index
            .get(&subject_id)
            .ok_or(Error::UnlabeledSubject(subject_id))?;
        match event {
            Ok(app) => subjects[slot].app_events.push(app),
            Err(lock) => subjects[slot].lock_events.push(lock),
        }
    }
    for subject in &mut subjects {
        subject.sort_streams();
    }

    let category_map = category_map_path.map(read_category_map).transpose()?;
    Ok(Cohort {
        subjects,
        category_map,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes a cohort in the same formats [`load_cohort`] reads. Events are
/// written per subject in label-file order, both streams merged by time
/// with lock events first on ties.
pub fn save_cohort(
    cohort: &Cohort,
    events_path: &Path,
    labels_path: &Path,
    category_map_path: Option<&Path>,
) -> Result<()> {
    let mut events = create(events_path)?;
    for subject in &cohort.subjects {
        let mut rows: Vec<(i64, u8, EventRow)> = Vec::new();
        for e in &subject.lock_events {
            rows.push((
                e.ts,
                0,
                EventRow {
                    subject: &subject.subject_id,
                    ts: e.ts,
                    stream: "lock",
                    kind: match e.kind {
                        LockEventKind::Unlock => "unlock",
                        LockEventKind::Lock => "lock",
                    },
                    app: None,
                },
            ));
        }
        for e in &subject.app_events {
            rows.push((
                e.ts,
                1,
                EventRow {
                    subject: &subject.subject_id,
                    ts: e.ts,
                    stream: "app",
                    kind: match e.kind {
                        AppEventKind::Open => "open",
                        AppEventKind::Close => "close",
                    },
                    app: Some(&e.app_id),
                },
            ));
        }
        // Stable: keeps each stream's stored order on equal keys.
        rows.sort_by_key(|(ts, stream, _)| (*ts, *stream));
        for (_, _, row) in rows {
            serde_json::to_writer(&mut events, &row)?;
            events.write_all(b"\n").map_err(|e| Error::io(events_path, e))?;
        }
    }
    events.flush().map_err(|e| Error::io(events_path, e))?;

    let with_days = cohort.subjects.iter().any(|s| s.days_observed.is_some());
    let mut labels = csv::Writer::from_writer(create(labels_path)?);
    if with_days {
        labels.write_record(["subject", "label", "days_observed"])?;
    } else {
        labels.write_record(["subject", "label"])?;
    }
    for s in &cohort.subjects {
        if with_days {
            let days = s.days_observed.map(|d| d.to_string()).unwrap_or_default();
            labels.write_record([s.subject_id.as_str(), s.label.as_str(), days.as_str()])?;
        } else {
            labels.write_record([s.subject_id.as_str(), s.label.as_str()])?;
        }
    }
    labels.flush().map_err(|e| Error::io(labels_path, e))?;

    if let (Some(path), Some(map)) = (category_map_path, &cohort.category_map) {
        let mut out = csv::Writer::from_writer(create(path)?);
        out.write_record(["app", "category"])?;
        for (app, category) in map.entries() {
            out.write_record([app, category])?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
