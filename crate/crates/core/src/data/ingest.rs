use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::graph::{DynamicSupportGraph, SupportPair};
use super::timeline::{discretize_time, SeniorityScale};
use super::{ActivityEvent, DataConfig, DataWarning, Interaction, PatientId, PatientTimeline};
use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: [&str; 4] = ["seeker_id", "helper_id", "thread_id", "timestamp"];
pub const ACTIVITIES_HEADER: [&str; 4] = ["patient_id", "timestamp", "thread_id", "stage_id"];

pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const ACTIVITIES_FILE: &str = "activities.csv";
pub const META_FILE: &str = "meta.json";

/// Key-value manifest stored beside the two CSV files of a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n_patients: usize,
    pub n_threads: usize,
    pub n_stages: usize,
    pub n_interactions: usize,
    pub n_activities: usize,
    pub steps: usize,
    pub epoch: i64,
}

/// An ingested dataset: raw records plus the derived timelines and graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub n_patients: usize,
    pub n_threads: usize,
    pub n_stages: usize,
    /// Sorted chronologically, exact duplicates removed.
    pub interactions: Vec<Interaction>,
    /// Sorted by patient, then timestamp.
    pub activities: Vec<ActivityEvent>,
    pub timelines: Vec<PatientTimeline>,
    pub graph: DynamicSupportGraph,
    pub scale: SeniorityScale,
    pub warnings: Vec<DataWarning>,
}

impl Dataset {
    /// Builds a dataset from in-memory records. `sizes` optionally widens
    /// the id spaces beyond the largest observed ids.
    pub fn from_records(
        interactions: Vec<Interaction>,
        activities: Vec<ActivityEvent>,
        config: DataConfig,
        sizes: Option<(usize, usize, usize)>,
    ) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if interactions.is_empty() {
            return Err(Error::EmptyDataset("no interactions".into()));
        }
        if activities.is_empty() {
            return Err(Error::EmptyDataset("no activity events".into()));
        }
        let mut warnings = Vec::new();

        let active: HashSet<PatientId> = activities.iter().map(|a| a.patient).collect();
        for (i, it) in interactions.iter().enumerate() {
            let line = i as u64 + 2;
            for p in [it.seeker, it.helper] {
                if !active.contains(&p) {
                    return Err(Error::UnknownPatient { patient: p.0, line });
                }
            }
        }

        let interactions = dedup(interactions, "interactions", &mut warnings, |v| {
            v.sort_by_key(|i| (i.timestamp, i.seeker, i.helper, i.thread));
        });
        let activities = dedup(activities, "activities", &mut warnings, |v| {
            v.sort_by_key(|a| (a.patient, a.timestamp, a.thread, a.stage));
        });

        let (mut n_patients, mut n_threads, mut n_stages) = sizes.unwrap_or((0, 0, 0));
        n_patients = n_patients.max(activities.iter().map(|a| a.patient.0 + 1).max().unwrap_or(0));
        n_threads = n_threads.max(
            activities
                .iter()
                .map(|a| a.thread.0 + 1)
                .chain(interactions.iter().map(|i| i.thread.0 + 1))
                .max()
                .unwrap_or(0),
        );
        n_stages = n_stages.max(activities.iter().map(|a| a.stage.0 + 1).max().unwrap_or(0));

        let mut by_patient: Vec<&[ActivityEvent]> = vec![&[]; n_patients];
        let mut start = 0;
        while start < activities.len() {
            let p = activities[start].patient;
            let end = start + activities[start..].partition_point(|a| a.patient == p);
            by_patient[p.0] = &activities[start..end];
            start = end;
        }

        for events in &by_patient {
            for w in events.windows(2) {
                if w[1].stage < w[0].stage {
                    warnings.push(DataWarning::StageRegression {
                        patient: w[1].patient,
                        timestamp: w[1].timestamp,
                    });
                }
            }
        }

        let scale = SeniorityScale::from_histories(by_patient.iter().copied(), config.seniority_weights);
        let timelines: Vec<PatientTimeline> = by_patient
            .iter()
            .enumerate()
            .map(|(p, events)| {
                let (tl, w) = discretize_time(PatientId(p), events, config.steps, &scale);
                warnings.extend(w);
                tl
            })
            .collect();

        let pairs = interactions
            .iter()
            .map(|it| SupportPair {
                seeker: it.seeker,
                helper: it.helper,
                thread: it.thread,
                timestamp: it.timestamp,
                seeker_step: timelines[it.seeker.0].step_at(it.timestamp),
                helper_step: timelines[it.helper.0].step_at(it.timestamp),
            })
            .collect();
        let graph = DynamicSupportGraph::new(n_patients, config.steps, pairs);

        for w in &warnings {
            warn!("{w}");
        }

        Ok(Self {
            config,
            n_patients,
            n_threads,
            n_stages,
            interactions,
            activities,
            timelines,
            graph,
            scale,
            warnings,
        })
    }

    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            n_patients: self.n_patients,
            n_threads: self.n_threads,
            n_stages: self.n_stages,
            n_interactions: self.interactions.len(),
            n_activities: self.activities.len(),
            steps: self.config.steps,
            epoch: self.config.epoch,
        }
    }

    /// Events of one patient, sorted by timestamp.
    pub fn history(&self, patient: PatientId) -> &[ActivityEvent] {
        let lo = self.activities.partition_point(|a| a.patient < patient);
        let hi = self.activities.partition_point(|a| a.patient <= patient);
        &self.activities[lo..hi]
    }
}

fn dedup<T: PartialEq>(
    mut rows: Vec<T>,
    file: &'static str,
    warnings: &mut Vec<DataWarning>,
    sort: impl FnOnce(&mut Vec<T>),
) -> Vec<T> {
    sort(&mut rows);
    let before = rows.len();
    rows.dedup();
    if rows.len() < before {
        warnings.push(DataWarning::DuplicateRows {
            file,
            count: before - rows.len(),
        });
    }
    rows
}

fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str; 4]) -> Result<Vec<T>> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::MalformedRow {
                file: file.clone(),
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let found = reader.headers().map_err(|e| Error::MalformedRow {
        file: file.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    if found.iter().collect::<Vec<_>>() != header.as_slice() {
        return Err(Error::MalformedRow {
            file,
            line: 1,
            message: format!("expected header `{}`", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<T>() {
        match record {
            Ok(row) => rows.push(row),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(Error::MalformedRow {
                    file,
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(rows)
}

fn check_interactions(path: &Path, rows: &[Interaction], epoch: i64) -> Result<()> {
    for (i, it) in rows.iter().enumerate() {
        let problem = if it.seeker == it.helper {
            Some("seeker and helper are the same patient".to_string())
        } else if it.timestamp < epoch {
            Some(format!("timestamp {} precedes dataset epoch {epoch}", it.timestamp))
        } else {
            None
        };
        if let Some(message) = problem {
            return Err(Error::MalformedRow {
                file: path.display().to_string(),
                line: i as u64 + 2,
                message,
            });
        }
    }
    Ok(())
}

/// Reads the two CSV files and builds timelines and the support graph.
pub fn ingest_dataset(interactions_path: &Path, activities_path: &Path, config: DataConfig) -> Result<Dataset> {
    read_dataset(interactions_path, activities_path, config, None)
}

fn read_dataset(
    interactions_path: &Path,
    activities_path: &Path,
    config: DataConfig,
    sizes: Option<(usize, usize, usize)>,
) -> Result<Dataset> {
    let interactions: Vec<Interaction> = read_rows(interactions_path, &INTERACTIONS_HEADER)?;
    check_interactions(interactions_path, &interactions, config.epoch)?;
    let activities: Vec<ActivityEvent> = read_rows(activities_path, &ACTIVITIES_HEADER)?;
    for (i, a) in activities.iter().enumerate() {
        if a.timestamp < config.epoch {
            return Err(Error::MalformedRow {
                file: activities_path.display().to_string(),
                line: i as u64 + 2,
                message: format!("timestamp {} precedes dataset epoch {}", a.timestamp, config.epoch),
            });
        }
    }
    Dataset::from_records(interactions, activities, config, sizes)
}

/// Reads a bundle directory. When `meta.json` is present its id-space sizes
/// are honoured.
pub fn ingest_bundle(dir: &Path, config: DataConfig) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let sizes = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: meta_path.clone(),
            source,
        })?;
        Some((meta.n_patients, meta.n_threads, meta.n_stages))
    } else {
        None
    };
    read_dataset(&dir.join(INTERACTIONS_FILE), &dir.join(ACTIVITIES_FILE), config, sizes)
}

/// Writes `interactions.csv`, `activities.csv` and `meta.json` into `dir`.
pub fn write_bundle(dir: &Path, dataset: &Dataset) -> Result<()> {
    write_records(dir, &dataset.interactions, &dataset.activities, &dataset.meta())
}

pub(crate) fn write_records(
    dir: &Path,
    interactions: &[Interaction],
    activities: &[ActivityEvent],
    meta: &BundleMeta,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(INTERACTIONS_FILE), interactions)?;
    write_csv(&dir.join(ACTIVITIES_FILE), activities)?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    })?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
