//! Domain types for support interactions, patient timelines and the dynamic
//! seeker/helper graph, plus dataset ingestion.

mod graph;
pub(crate) mod ingest;
mod timeline;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use graph::{build_adjacency, BipartiteAdjacency, DynamicSupportGraph, RoleIndex, SupportPair};
pub use ingest::{
    ingest_bundle, ingest_dataset, write_bundle, BundleMeta, Dataset, ACTIVITIES_FILE, ACTIVITIES_HEADER, INTERACTIONS_FILE,
    INTERACTIONS_HEADER, META_FILE,
};
pub use timeline::{compute_seniority, discretize_time, seniority_at, SeniorityScale, SeniorityWeights};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(
    /// Dense 0-based patient index.
    PatientId
);
id_type!(ThreadId);
id_type!(StageId);

/// A helper answering a seeker's question on a thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    #[serde(rename = "seeker_id")]
    pub seeker: PatientId,
    #[serde(rename = "helper_id")]
    pub helper: PatientId,
    #[serde(rename = "thread_id")]
    pub thread: ThreadId,
    pub timestamp: i64,
}

/// A patient visiting a thread while in some health stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivityEvent {
    #[serde(rename = "patient_id")]
    pub patient: PatientId,
    pub timestamp: i64,
    #[serde(rename = "thread_id")]
    pub thread: ThreadId,
    #[serde(rename = "stage_id")]
    pub stage: StageId,
}

/// Per-patient sequences aligned to `T` discrete steps. Padding is a
/// contiguous tail with `mask == false`; padded entries repeat the last real
/// step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTimeline {
    pub patient: PatientId,
    pub threads: Vec<ThreadId>,
    pub stages: Vec<StageId>,
    pub seniority: Vec<f64>,
    pub timestamps: Vec<i64>,
    pub mask: Vec<bool>,
}

impl PatientTimeline {
    pub fn steps(&self) -> usize {
        self.mask.len()
    }

    /// Number of real (unmasked) steps.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.real_len() == 0
    }

    /// 0-based index of the latest real step at or before `timestamp`;
    /// falls back to the first step when every kept event is later.
    pub fn step_at(&self, timestamp: i64) -> usize {
        let n = self.real_len();
        if n == 0 {
            return 0;
        }
        self.timestamps[..n]
            .iter()
            .rposition(|&ts| ts <= timestamp)
            .unwrap_or(0)
    }

    /// Seniority at the latest real step at or before `timestamp`, or 0 when
    /// the patient had no activity yet.
    pub fn seniority_at_time(&self, timestamp: i64) -> f64 {
        let n = self.real_len();
        match self.timestamps[..n].iter().rposition(|&ts| ts <= timestamp) {
            Some(i) => self.seniority[i],
            None => 0.0,
        }
    }

    pub fn last_real_step(&self) -> Option<usize> {
        self.real_len().checked_sub(1)
    }
}

/// Recoverable oddities found while building a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataWarning {
    NoEvents { patient: PatientId },
    StageRegression { patient: PatientId, timestamp: i64 },
    DuplicateRows { file: &'static str, count: usize },
}

impl fmt::Display for DataWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataWarning::NoEvents { patient } => {
                write!(f, "patient {patient} has no activity events; timeline fully masked")
            }
            DataWarning::StageRegression { patient, timestamp } => write!(
                f,
                "patient {patient} moves to an earlier health stage at t={timestamp}"
            ),
            DataWarning::DuplicateRows { file, count } => {
                write!(f, "{file}: dropped {count} exact duplicate rows")
            }
        }
    }
}

/// Dataset-level ingestion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Number of discrete steps per timeline.
    pub steps: usize,
    pub seniority_weights: SeniorityWeights,
    /// Earliest admissible timestamp (epoch seconds).
    pub epoch: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            seniority_weights: SeniorityWeights::default(),
            epoch: 0,
        }
    }
}
