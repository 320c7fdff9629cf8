//! Segmentation of app-open streams into unlock/lock interaction sessions.

use serde::{Deserialize, Serialize};

use crate::ingest::{AppEventKind, LockEventKind, Subject};

/// App openings between one unlock and the following lock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub subject_id: String,
    pub start_ts: i64,
    pub end_ts: i64,
    /// Apps in order of opening, repeats included.
    pub apps: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDiagnostics {
    /// App opens that fell outside every unlock/lock window.
    pub dropped_opens: usize,
    /// Lock events with no preceding unlock.
    pub unpaired_locks: usize,
    /// Unlock events ignored because a window was already open, or never closed.
    pub unpaired_unlocks: usize,
    /// Windows that contained no app opens (or had zero length).
    pub empty_sessions: usize,
}

impl SessionDiagnostics {
    pub fn merge(&mut self, other: &SessionDiagnostics) {
        self.dropped_opens += other.dropped_opens;
        self.unpaired_locks += other.unpaired_locks;
        self.unpaired_unlocks += other.unpaired_unlocks;
        self.empty_sessions += other.empty_sessions;
    }
}

/// Unlock/lock windows `[start, end)`, pairing each unlock with the next
/// lock. Assumes the lock stream is sorted.
pub fn lock_windows(subject: &Subject, diag: &mut SessionDiagnostics) -> Vec<(i64, i64)> {
    let mut windows = Vec::new();
    let mut open: Option<i64> = None;
    for event in &subject.lock_events {
        match (event.kind, open) {
            (LockEventKind::Unlock, None) => open = Some(event.ts),
            (LockEventKind::Unlock, Some(_)) => diag.unpaired_unlocks += 1,
            (LockEventKind::Lock, Some(start)) => {
                if event.ts > start {
                    windows.push((start, event.ts));
                } else {
                    diag.empty_sessions += 1;
                }
                open = None;
            }
            (LockEventKind::Lock, None) => diag.unpaired_locks += 1,
        }
    }
    if open.is_some() {
        diag.unpaired_unlocks += 1;
    }
    windows
}

pub fn sessionize(subject: &Subject) -> Vec<Session> {
    sessionize_with_diagnostics(subject).0
}

pub fn sessionize_with_diagnostics(subject: &Subject) -> (Vec<Session>, SessionDiagnostics) {
    let mut diag = SessionDiagnostics::default();
    let windows = lock_windows(subject, &mut diag);
    let mut sessions: Vec<Session> = windows
        .iter()
        .map(|&(start_ts, end_ts)| Session {
            subject_id: subject.subject_id.clone(),
            start_ts,
            end_ts,
            apps: Vec::new(),
        })
        .collect();

    // Windows are sorted and disjoint, so one forward pointer suffices.
    let mut w = 0;
    for event in subject
        .app_events
        .iter()
        .filter(|e| e.kind == AppEventKind::Open)
    {
        while w < windows.len() && windows[w].1 <= event.ts {
            w += 1;
        }
        match windows.get(w) {
            Some(&(start, end)) if start <= event.ts && event.ts < end => {
                sessions[w].apps.push(event.app_id.clone())
            }
            _ => diag.dropped_opens += 1,
        }
    }

    let before = sessions.len();
    sessions.retain(|s| !s.apps.is_empty());
    diag.empty_sessions += before - sessions.len();
    (sessions, diag)
}

/// The subject's full time-ordered sequence of app opens.
pub fn corpus_of(subject: &Subject) -> Vec<String> {
    subject
        .app_events
        .iter()
        .filter(|e| e.kind == AppEventKind::Open)
        .map(|e| e.app_id.clone())
        .collect()
}
