use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ActivityEvent, DataWarning, PatientId, PatientTimeline, StageId, ThreadId};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Mixing weights of the three seniority factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeniorityWeights {
    pub threads: f64,
    pub stages: f64,
    pub tenure: f64,
}

impl Default for SeniorityWeights {
    fn default() -> Self {
        Self {
            threads: 1.0 / 3.0,
            stages: 1.0 / 3.0,
            tenure: 1.0 / 3.0,
        }
    }
}

/// Dataset-wide maxima used to normalize each seniority factor into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeniorityScale {
    pub max_threads: f64,
    pub max_stages: f64,
    pub max_tenure_days: f64,
    pub weights: SeniorityWeights,
}

impl SeniorityScale {
    /// Scans every patient's full history. `by_patient` must hold each
    /// patient's events sorted by timestamp.
    pub fn from_histories<'a>(
        by_patient: impl IntoIterator<Item = &'a [ActivityEvent]>,
        weights: SeniorityWeights,
    ) -> Self {
        let mut scale = SeniorityScale {
            max_threads: 0.0,
            max_stages: 0.0,
            max_tenure_days: 0.0,
            weights,
        };
        for events in by_patient {
            let (Some(first), Some(last)) = (events.first(), events.last()) else {
                continue;
            };
            let threads: HashSet<_> = events.iter().map(|e| e.thread).collect();
            let stages: HashSet<_> = events.iter().map(|e| e.stage).collect();
            scale.max_threads = scale.max_threads.max(threads.len() as f64);
            scale.max_stages = scale.max_stages.max(stages.len() as f64);
            scale.max_tenure_days = scale
                .max_tenure_days
                .max(tenure_days(first.timestamp, last.timestamp));
        }
        scale
    }

    fn combine(&self, n_threads: usize, n_stages: usize, tenure: f64) -> f64 {
        let term = |count: f64, max: f64| if max > 0.0 { count / max } else { 0.0 };
        let w = self.weights;
        w.threads * term(n_threads as f64, self.max_threads)
            + w.stages * term(n_stages as f64, self.max_stages)
            + w.tenure * term(tenure, self.max_tenure_days)
    }
}

fn tenure_days(first: i64, now: i64) -> f64 {
    (now - first).max(0) as f64 / SECONDS_PER_DAY
}

/// Seniority after the events in `prefix`, with `tenure_days` since the
/// patient's first activity.
pub fn compute_seniority(prefix: &[ActivityEvent], tenure_days: f64, scale: &SeniorityScale) -> f64 {
    assert!(!prefix.is_empty(), "seniority needs at least one event");
    let threads: HashSet<ThreadId> = prefix.iter().map(|e| e.thread).collect();
    let stages: HashSet<StageId> = prefix.iter().map(|e| e.stage).collect();
    scale.combine(threads.len(), stages.len(), tenure_days)
}

/// Seniority after each event of a sorted history, computed incrementally.
pub fn seniority_at(events: &[ActivityEvent], scale: &SeniorityScale) -> Vec<f64> {
    let Some(first) = events.first() else {
        return Vec::new();
    };
    let mut threads = HashSet::new();
    let mut stages = HashSet::new();
    events
        .iter()
        .map(|e| {
            threads.insert(e.thread);
            stages.insert(e.stage);
            scale.combine(
                threads.len(),
                stages.len(),
                tenure_days(first.timestamp, e.timestamp),
            )
        })
        .collect()
}

/// Keeps a patient's most recent `steps` events; shorter histories are
/// right-padded and masked.
pub fn discretize_time(
    patient: PatientId,
    events: &[ActivityEvent],
    steps: usize,
    scale: &SeniorityScale,
) -> (PatientTimeline, Option<DataWarning>) {
    assert!(steps >= 1, "timelines need at least one step");
    if events.is_empty() {
        let timeline = PatientTimeline {
            patient,
            threads: vec![ThreadId(0); steps],
            stages: vec![StageId(0); steps],
            seniority: vec![0.0; steps],
            timestamps: vec![0; steps],
            mask: vec![false; steps],
        };
        return (timeline, Some(DataWarning::NoEvents { patient }));
    }
    let all_seniority = seniority_at(events, scale);
    let start = events.len().saturating_sub(steps);
    let kept = &events[start..];
    let kept_seniority = &all_seniority[start..];

    let mut timeline = PatientTimeline {
        patient,
        threads: Vec::with_capacity(steps),
        stages: Vec::with_capacity(steps),
        seniority: Vec::with_capacity(steps),
        timestamps: Vec::with_capacity(steps),
        mask: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let i = t.min(kept.len() - 1);
        timeline.threads.push(kept[i].thread);
        timeline.stages.push(kept[i].stage);
        timeline.seniority.push(kept_seniority[i]);
        timeline.timestamps.push(kept[i].timestamp);
        timeline.mask.push(t < kept.len());
    }
    (timeline, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(patient: usize, day: i64, thread: usize, stage: usize) -> ActivityEvent {
        ActivityEvent {
            patient: PatientId(patient),
            timestamp: day * 86_400,
            thread: ThreadId(thread),
            stage: StageId(stage),
        }
    }

    fn scale(max: (f64, f64, f64)) -> SeniorityScale {
        SeniorityScale {
            max_threads: max.0,
            max_stages: max.1,
            max_tenure_days: max.2,
            weights: SeniorityWeights::default(),
        }
    }

    #[test]
    fn first_event_seniority() {
        let s = compute_seniority(&[event(0, 0, 3, 0)], 0.0, &scale((100.0, 10.0, 1000.0)));
        // spreadsheet-style evaluation: (0.01 + 0.1 + 0) / 3
        let expected = (1.0 / 100.0 + 1.0 / 10.0 + 0.0 / 1000.0) / 3.0;
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.036_666_666_666_666_67).abs() < 1e-12);
    }

    #[test]
    fn maxima_give_unit_seniority() {
        let events = vec![event(0, 0, 1, 0), event(0, 5, 2, 1)];
        let sc = scale((2.0, 2.0, 5.0));
        assert!((compute_seniority(&events, 5.0, &sc) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_maxima_terms_vanish() {
        let events = vec![event(0, 0, 1, 0)];
        let sc = scale((1.0, 0.0, 0.0));
        assert!((compute_seniority(&events, 0.0, &sc) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn repeat_visits_grow_only_through_tenure() {
        let events = vec![event(0, 0, 1, 0), event(0, 3, 1, 0), event(0, 7, 1, 0)];
        let s = seniority_at(&events, &scale((4.0, 4.0, 10.0)));
        assert!(s[1] > s[0] && s[2] > s[1]);
        assert!((s[1] - s[0] - 0.3 / 3.0).abs() < 1e-12);
        assert!((s[2] - s[1] - 0.4 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn incremental_matches_prefix_route() {
        let events: Vec<_> = (0..9)
            .map(|i| event(0, i * i, (i % 4) as usize, (i / 3) as usize))
            .collect();
        let sc = scale((5.0, 3.0, 70.0));
        let inc = seniority_at(&events, &sc);
        for k in 1..=events.len() {
            let tenure = (events[k - 1].timestamp - events[0].timestamp) as f64 / 86_400.0;
            let direct = compute_seniority(&events[..k], tenure, &sc);
            assert!((inc[k - 1] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_keeps_latest_events() {
        let events: Vec<_> = (0..12).map(|i| event(0, i, i as usize, 0)).collect();
        let (tl, warn) = discretize_time(PatientId(0), &events, 10, &scale((12.0, 1.0, 11.0)));
        assert!(warn.is_none());
        let threads: Vec<usize> = tl.threads.iter().map(|t| t.0).collect();
        assert_eq!(threads, (2..12).collect::<Vec<_>>());
        assert!(tl.mask.iter().all(|m| *m));
    }

    #[test]
    fn short_history_is_padded() {
        let events: Vec<_> = (0..3).map(|i| event(0, i, i as usize, 0)).collect();
        let (tl, _) = discretize_time(PatientId(0), &events, 10, &scale((3.0, 1.0, 2.0)));
        assert_eq!(tl.real_len(), 3);
        assert_eq!(&tl.mask[..3], &[true; 3]);
        assert!(tl.mask[3..].iter().all(|m| !*m));
        assert_eq!(tl.threads[9], ThreadId(2));
        assert!(tl.seniority.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn empty_history_is_fully_masked() {
        let (tl, warn) = discretize_time(PatientId(4), &[], 10, &scale((1.0, 1.0, 1.0)));
        assert_eq!(tl.steps(), 10);
        assert!(tl.is_empty());
        assert_eq!(warn, Some(DataWarning::NoEvents { patient: PatientId(4) }));
    }

    #[test]
    fn step_lookup() {
        let events: Vec<_> = (0..3).map(|i| event(0, 10 * i, i as usize, 0)).collect();
        let (tl, _) = discretize_time(PatientId(0), &events, 5, &scale((3.0, 1.0, 20.0)));
        assert_eq!(tl.step_at(-5), 0);
        assert_eq!(tl.step_at(10 * 86_400), 1);
        assert_eq!(tl.step_at(i64::MAX), 2);
        assert_eq!(tl.seniority_at_time(-1), 0.0);
    }
}
