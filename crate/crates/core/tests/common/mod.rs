//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use appsession::ingest::{AppEvent, AppEventKind, LockEvent, LockEventKind, Subject};

/// AUROC by explicit comparison of every positive/negative pair.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Minimum two-cluster inertia over every partition into two non-empty parts.
pub fn exhaustive_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let sse = |members: &[usize]| -> f64 {
        let d = points[0].len();
        let mut mean = vec![0.0; d];
        for &i in members {
            for (m, v) in mean.iter_mut().zip(&points[i]) {
                *m += v / members.len() as f64;
            }
        }
        members
            .iter()
            .map(|&i| points[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum()
    };
    let mut best = f64::INFINITY;
    // Point 0 always sits in the first part, so each partition is seen once.
    for mask in 0u32..(1 << (n - 1)) {
        let (mut a, mut b) = (vec![0], Vec::new());
        for i in 1..n {
            if mask & (1 << (i - 1)) != 0 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        if b.is_empty() {
            continue;
        }
        best = best.min(sse(&a) + sse(&b));
    }
    best
}

/// Sessions by scanning the lock stream for the window that contains each
/// open: a window starts at an unlock seen while no window is open and ends
/// at the next lock.
pub fn brute_force_sessions(subject: &Subject) -> Vec<(i64, i64, Vec<String>)> {
    let mut windows: Vec<(i64, i64)> = Vec::new();
    let mut i = 0;
    let locks = &subject.lock_events;
    while i < locks.len() {
        if locks[i].kind == LockEventKind::Unlock {
            let start = locks[i].ts;
            let close = (i + 1..locks.len()).find(|&j| locks[j].kind == LockEventKind::Lock);
            match close {
                Some(j) => {
                    windows.push((start, locks[j].ts));
                    i = j + 1;
                }
                None => break,
            }
        } else {
            i += 1;
        }
    }
    windows
        .into_iter()
        .filter(|(s, e)| e > s)
        .map(|(s, e)| {
            let apps: Vec<String> = subject
                .app_events
                .iter()
                .filter(|a| a.kind == AppEventKind::Open && a.ts >= s && a.ts < e)
                .map(|a| a.app_id.clone())
                .collect();
            (s, e, apps)
        })
        .filter(|(_, _, apps)| !apps.is_empty())
        .collect()
}

pub fn lock(kind: LockEventKind, ts: i64) -> LockEvent {
    LockEvent { kind, ts }
}

pub fn open(app: &str, ts: i64) -> AppEvent {
    AppEvent {
        app_id: app.to_string(),
        kind: AppEventKind::Open,
        ts,
    }
}
