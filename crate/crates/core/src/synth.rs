//! Synthetic community generator with planted seniority structure and a
//! ground-truth sidecar.
//!
//! Every patient gets a latent expertise in `[0, 1)`. Expertise drives the
//! length of the activity history, how far the patient moves through the
//! health stages and how long they stay, which in turn drives seniority.
//! Threads are grouped into communities; patients mostly visit threads of
//! their own community. Seekers are the least expert patients and helpers
//! the most expert, with the middle holding both roles when the pools
//! overlap. Each interaction is either planted (helper seniority exceeds the
//! seeker's by at least `seniority_gap`) or, with probability `noise_rate`,
//! noisy (helper seniority does not exceed the seeker's).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ingest::write_records;
use crate::data::{
    seniority_at, ActivityEvent, BundleMeta, DataConfig, Dataset, Interaction, PatientId, SeniorityScale,
    SeniorityWeights, StageId, ThreadId,
};
use crate::error::{Error, Result};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
/// 2014-01-01T00:00:00Z.
pub const BASE_TIMESTAMP: i64 = 1_388_534_400;
const HORIZON_DAYS: f64 = 5.0 * 365.0;
const DAY: f64 = 86_400.0;
const THREADS_PER_COMMUNITY: usize = 20;
const IN_COMMUNITY: f64 = 0.85;
const ATTEMPTS: usize = 200;

/// Default share of patients acting as seekers / helpers.
pub const SEEKER_FRACTION: f64 = 189.0 / 296.0;
pub const HELPER_FRACTION: f64 = 243.0 / 296.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_threads: usize,
    pub n_stages: usize,
    pub n_interactions: usize,
    pub steps: usize,
    pub seniority_gap: f64,
    pub noise_rate: f64,
    pub seed: u64,
    /// Seeker pool size; defaults to a fixed share of `n_patients`.
    pub n_seekers: Option<usize>,
    /// Helper pool size; defaults to a fixed share of `n_patients`.
    pub n_helpers: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            n_threads: 200,
            n_stages: 6,
            n_interactions: 5000,
            steps: 10,
            seniority_gap: 0.1,
            noise_rate: 0.0,
            seed: 0,
            n_seekers: None,
            n_helpers: None,
        }
    }
}

impl GeneratorConfig {
    /// Seeker and helper pool sizes after defaults.
    pub fn pool_sizes(&self) -> (usize, usize) {
        let m = self.n_patients;
        let frac = |f: f64| ((m as f64 * f).round() as usize).clamp(1, m);
        (
            self.n_seekers.unwrap_or_else(|| frac(SEEKER_FRACTION)),
            self.n_helpers.unwrap_or_else(|| frac(HELPER_FRACTION)),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_patients < 2 {
            return bad(format!("n_patients = {} but at least 2 are needed", self.n_patients));
        }
        if self.n_interactions == 0 {
            return bad("n_interactions must be >= 1".into());
        }
        if self.n_threads == 0 || self.n_stages == 0 || self.steps == 0 {
            return bad("n_threads, n_stages and steps must be >= 1".into());
        }
        if !(self.seniority_gap > 0.0 && self.seniority_gap <= 1.0) {
            return bad(format!("seniority_gap {} must lie in (0, 1]", self.seniority_gap));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} must lie in [0, 1)", self.noise_rate));
        }
        let (a, b) = self.pool_sizes();
        if a == 0 || b == 0 || a > self.n_patients || b > self.n_patients {
            return bad(format!("pool sizes seekers={a} helpers={b} must lie in 1..={}", self.n_patients));
        }
        if a + b < 2 || (self.n_patients == 2 && a + b > 2 && a == b) {
            return bad("seeker and helper pools leave no distinct pair".into());
        }
        if self.n_interactions < a.max(b) {
            return bad(format!(
                "n_interactions = {} cannot cover {a} seekers and {b} helpers",
                self.n_interactions
            ));
        }
        Ok(())
    }
}

/// Sidecar written next to a generated bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub expertise: Vec<f64>,
    pub community: Vec<usize>,
    pub seekers: Vec<PatientId>,
    pub helpers: Vec<PatientId>,
    /// One flag per row of `interactions.csv`: drawn as a noise pair.
    pub noisy: Vec<bool>,
}

pub struct Generated {
    pub interactions: Vec<Interaction>,
    pub activities: Vec<ActivityEvent>,
    pub truth: GroundTruth,
}

impl Generated {
    pub fn meta(&self) -> BundleMeta {
        let c = &self.truth.config;
        BundleMeta {
            n_patients: c.n_patients,
            n_threads: c.n_threads,
            n_stages: c.n_stages,
            n_interactions: self.interactions.len(),
            n_activities: self.activities.len(),
            steps: c.steps,
            epoch: 0,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            steps: self.truth.config.steps,
            ..DataConfig::default()
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let c = &self.truth.config;
        Dataset::from_records(
            self.interactions.clone(),
            self.activities.clone(),
            self.data_config(),
            Some((c.n_patients, c.n_threads, c.n_stages)),
        )
    }
}

/// Seniority of each patient after each of their events, over full histories.
struct SeniorityBook {
    times: Vec<Vec<i64>>,
    values: Vec<Vec<f64>>,
    threads: Vec<Vec<ThreadId>>,
}

impl SeniorityBook {
    fn new(histories: &[Vec<ActivityEvent>], weights: SeniorityWeights) -> Self {
        let scale = SeniorityScale::from_histories(histories.iter().map(|h| h.as_slice()), weights);
        Self {
            times: histories.iter().map(|h| h.iter().map(|e| e.timestamp).collect()).collect(),
            values: histories.iter().map(|h| seniority_at(h, &scale)).collect(),
            threads: histories.iter().map(|h| h.iter().map(|e| e.thread).collect()).collect(),
        }
    }

    /// Index of the latest event at or before `ts`.
    fn last_event(&self, p: usize, ts: i64) -> Option<usize> {
        self.times[p].partition_point(|&t| t <= ts).checked_sub(1)
    }

    fn at(&self, p: usize, ts: i64) -> f64 {
        self.last_event(p, ts).map_or(0.0, |i| self.values[p][i])
    }

    fn visited_by(&self, p: usize, thread: ThreadId, ts: i64) -> bool {
        let n = self.times[p].partition_point(|&t| t <= ts);
        self.threads[p][..n].contains(&thread)
    }

    fn window(&self, p: usize) -> (i64, i64) {
        (self.times[p][0], *self.times[p].last().expect("non-empty history"))
    }
}

fn community_threads(c: usize, n_communities: usize, n_threads: usize) -> std::ops::Range<usize> {
    let start = c * THREADS_PER_COMMUNITY;
    let end = if c + 1 == n_communities { n_threads } else { start + THREADS_PER_COMMUNITY };
    start..end
}

fn make_history(
    rng: &mut ChaCha8Rng,
    patient: usize,
    expertise: f64,
    community: usize,
    n_communities: usize,
    cfg: &GeneratorConfig,
) -> Vec<ActivityEvent> {
    let lo = (cfg.steps / 2).max(2).min(cfg.steps.max(2));
    let hi = cfg.steps.max(lo);
    let n_events = (lo as f64 + expertise * (hi - lo) as f64 + rng.random_range(-0.5..0.5))
        .round()
        .clamp(lo as f64, hi as f64) as usize;
    let tenure_days = ((0.05 + 0.75 * expertise) * rng.random_range(0.8..1.2) * HORIZON_DAYS).min(HORIZON_DAYS);
    let end_day = HORIZON_DAYS * (1.0 - rng.random_range(0.0..0.05));
    let start_day = (end_day - tenure_days).max(0.0);
    let tenure_days = end_day - start_day;
    let mut days: Vec<f64> = (0..n_events)
        .map(|i| match i {
            0 => 0.0,
            i if i + 1 == n_events => tenure_days,
            _ => rng.random_range(0.0..tenure_days),
        })
        .collect();
    days.sort_by(f64::total_cmp);

    let own = community_threads(community, n_communities, cfg.n_threads);
    let mut stage = rng.random_range(0..cfg.n_stages.div_ceil(3));
    let advance = 0.1 + 0.4 * expertise;
    days.iter()
        .enumerate()
        .map(|(i, d)| {
            if i > 0 && stage + 1 < cfg.n_stages && rng.random_bool(advance) {
                stage += 1;
            }
            let thread = if rng.random_bool(IN_COMMUNITY) {
                rng.random_range(own.clone())
            } else {
                rng.random_range(0..cfg.n_threads)
            };
            ActivityEvent {
                patient: PatientId(patient),
                timestamp: BASE_TIMESTAMP + (start_day * DAY + d * DAY).round() as i64,
                thread: ThreadId(thread),
                stage: StageId(stage),
            }
        })
        .collect()
}

struct Planter<'a> {
    book: &'a SeniorityBook,
    expertise: &'a [f64],
    community: &'a [usize],
    thread_community: Vec<usize>,
    gap: f64,
}

impl Planter<'_> {
    fn admissible(&self, s: f64, o: f64, noisy: bool) -> bool {
        if noisy {
            o <= s
        } else {
            o - s >= self.gap
        }
    }

    /// Picks a helper for `seeker` at `ts`, preferring helpers who visited
    /// the seeker's current thread, then the thread's community.
    fn pick_helper(&self, rng: &mut ChaCha8Rng, seeker: usize, ts: i64, helpers: &[usize], noisy: bool) -> Option<(usize, ThreadId)> {
        let i = self.book.last_event(seeker, ts)?;
        let thread = self.book.threads[seeker][i];
        let s = self.book.values[seeker][i];
        let valid: Vec<usize> = helpers
            .iter()
            .copied()
            .filter(|&h| h != seeker && self.book.last_event(h, ts).is_some())
            .filter(|&h| self.admissible(s, self.book.at(h, ts), noisy))
            .collect();
        if valid.is_empty() {
            return None;
        }
        let tc = self.thread_community[thread.0];
        let tiers: [Vec<usize>; 2] = [
            valid.iter().copied().filter(|&h| self.book.visited_by(h, thread, ts)).collect(),
            valid.iter().copied().filter(|&h| self.community[h] == tc).collect(),
        ];
        let pool = tiers.iter().find(|t| !t.is_empty()).unwrap_or(&valid);
        let w: Vec<f64> = pool.iter().map(|&h| self.expertise[h] + 0.05).collect();
        let pick = WeightedIndex::new(&w).expect("positive weights").sample(rng);
        Some((pool[pick], thread))
    }

    fn random_time(&self, rng: &mut ChaCha8Rng, p: usize) -> i64 {
        let (a, b) = self.book.window(p);
        rng.random_range(a..=b)
    }
}

/// Noise flags drawn up front and handed out without replacement, so forced
/// placements can take whichever kind is feasible without changing the
/// total.
struct FlagPool {
    noisy: usize,
    planted: usize,
}

impl FlagPool {
    fn draw(&self, rng: &mut ChaCha8Rng) -> bool {
        rng.random_range(0..self.noisy + self.planted) < self.noisy
    }

    fn available(&self, noisy: bool) -> bool {
        if noisy {
            self.noisy > 0
        } else {
            self.planted > 0
        }
    }

    fn take(&mut self, noisy: bool) {
        if noisy {
            self.noisy -= 1;
        } else {
            self.planted -= 1;
        }
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Generated> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.n_patients;
    let n_communities = (config.n_threads / THREADS_PER_COMMUNITY).max(1);

    let expertise: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    let community: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_communities)).collect();
    let histories: Vec<Vec<ActivityEvent>> = (0..m)
        .map(|p| make_history(&mut rng, p, expertise[p], community[p], n_communities, config))
        .collect();
    let book = SeniorityBook::new(&histories, SeniorityWeights::default());

    let mut by_expertise: Vec<usize> = (0..m).collect();
    by_expertise.sort_by(|&a, &b| expertise[a].total_cmp(&expertise[b]).then(a.cmp(&b)));
    let (a, b) = config.pool_sizes();
    let mut seekers: Vec<usize> = by_expertise[..a].to_vec();
    let mut helpers: Vec<usize> = by_expertise[m - b..].to_vec();
    seekers.sort_unstable();
    helpers.sort_unstable();

    let planter = Planter {
        book: &book,
        expertise: &expertise,
        community: &community,
        thread_community: (0..config.n_threads)
            .map(|t| (t / THREADS_PER_COMMUNITY).min(n_communities - 1))
            .collect(),
        gap: config.seniority_gap,
    };
    let seeker_weights = WeightedIndex::new(seekers.iter().map(|&p| 1.0 - expertise[p] + 0.05)).expect("positive weights");

    let n_noisy = (0..config.n_interactions).filter(|_| rng.random_bool(config.noise_rate)).count();
    let mut flags = FlagPool {
        noisy: n_noisy,
        planted: config.n_interactions - n_noisy,
    };
    let mut seen = HashSet::new();
    let mut rows: Vec<(Interaction, bool)> = Vec::with_capacity(config.n_interactions);
    let mut push = |rows: &mut Vec<(Interaction, bool)>, s: usize, h: usize, thread: ThreadId, ts: i64, noisy: bool| {
        let it = Interaction {
            seeker: PatientId(s),
            helper: PatientId(h),
            thread,
            timestamp: ts,
        };
        if seen.insert(it) {
            rows.push((it, noisy));
            true
        } else {
            false
        }
    };

    // every seeker once
    let mut order = seekers.clone();
    order.shuffle(&mut rng);
    for &s in &order {
        let first = flags.draw(&mut rng);
        let placed = [first, !first].into_iter().filter(|&n| flags.available(n)).find(|&noisy| {
            (0..ATTEMPTS).any(|k| {
                let ts = if k + 1 == ATTEMPTS { book.window(s).0 } else { planter.random_time(&mut rng, s) };
                match planter.pick_helper(&mut rng, s, ts, &helpers, noisy) {
                    Some((h, thread)) => push(&mut rows, s, h, thread, ts, noisy),
                    None => false,
                }
            })
        });
        match placed {
            Some(noisy) => flags.take(noisy),
            None => {
                return Err(Error::InvalidConfig(format!(
                    "could not find any helper for seeker {s}; relax seniority_gap or pool sizes"
                )))
            }
        }
    }

    // every helper not yet used, once
    let used: HashSet<usize> = rows.iter().map(|(i, _)| i.helper.0).collect();
    let mut missing: Vec<usize> = helpers.iter().copied().filter(|h| !used.contains(h)).collect();
    missing.shuffle(&mut rng);
    for &h in &missing {
        let first = flags.draw(&mut rng);
        let placed = [first, !first].into_iter().filter(|&n| flags.available(n)).find(|&noisy| (0..ATTEMPTS).any(|k| {
            let ts = if k + 1 == ATTEMPTS { book.window(h).1 } else { planter.random_time(&mut rng, h) };
            let o = book.at(h, ts);
            let cands: Vec<usize> = seekers
                .iter()
                .copied()
                .filter(|&s| s != h && book.last_event(s, ts).is_some() && planter.admissible(book.at(s, ts), o, noisy))
                .collect();
            if cands.is_empty() {
                return false;
            }
            let w: Vec<f64> = cands.iter().map(|&s| 1.0 - expertise[s] + 0.05).collect();
            let s = cands[WeightedIndex::new(&w).expect("positive weights").sample(&mut rng)];
            let thread = book.threads[s][book.last_event(s, ts).expect("active")];
            push(&mut rows, s, h, thread, ts, noisy)
        }));
        match placed {
            Some(noisy) => flags.take(noisy),
            None => {
                return Err(Error::InvalidConfig(format!(
                    "could not find any seeker for helper {h}; relax seniority_gap or pool sizes"
                )))
            }
        }
    }

    let mut failures = 0usize;
    while rows.len() < config.n_interactions {
        let noisy = flags.draw(&mut rng);
        let s = seekers[seeker_weights.sample(&mut rng)];
        let ts = planter.random_time(&mut rng, s);
        let ok = match planter.pick_helper(&mut rng, s, ts, &helpers, noisy) {
            Some((h, thread)) => push(&mut rows, s, h, thread, ts, noisy),
            None => false,
        };
        if ok {
            flags.take(noisy);
        } else {
            failures += 1;
            if failures > 1000 * config.n_interactions {
                return Err(Error::InvalidConfig("interaction sampling keeps failing; config is infeasible".into()));
            }
        }
    }

    rows.sort_by_key(|(i, _)| (i.timestamp, i.seeker, i.helper, i.thread));
    let (interactions, noisy): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let activities: Vec<ActivityEvent> = histories.into_iter().flatten().collect();
    Ok(Generated {
        interactions,
        activities,
        truth: GroundTruth {
            config: config.clone(),
            expertise,
            community,
            seekers: seekers.into_iter().map(PatientId).collect(),
            helpers: helpers.into_iter().map(PatientId).collect(),
            noisy,
        },
    })
}

/// Writes the bundle files and the ground-truth sidecar into `dir`.
pub fn write_generated(dir: &Path, generated: &Generated) -> Result<()> {
    write_records(dir, &generated.interactions, &generated.activities, &generated.meta())?;
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = serde_json::to_string_pretty(&generated.truth).expect("ground truth serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Statistics recomputed from a bundle and its sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReport {
    pub n_interactions: usize,
    /// Share of interactions whose helper is strictly more senior than the
    /// seeker at the interaction time.
    pub satisfaction_rate: f64,
    /// Share of interactions whose helper visited the thread at or before
    /// the interaction.
    pub thread_overlap_rate: f64,
    /// Share of rows drawn as noise pairs.
    pub noise_fraction: f64,
    pub expertise: Vec<f64>,
}

pub fn report_for(dataset: &Dataset, truth: &GroundTruth) -> GroundTruthReport {
    let histories: Vec<Vec<ActivityEvent>> = (0..dataset.n_patients)
        .map(|p| dataset.history(PatientId(p)).to_vec())
        .collect();
    let book = SeniorityBook::new(&histories, dataset.config.seniority_weights);
    let n = dataset.interactions.len().max(1) as f64;
    let satisfied = dataset
        .interactions
        .iter()
        .filter(|i| book.at(i.helper.0, i.timestamp) > book.at(i.seeker.0, i.timestamp))
        .count();
    let overlap = dataset
        .interactions
        .iter()
        .filter(|i| book.visited_by(i.helper.0, i.thread, i.timestamp))
        .count();
    GroundTruthReport {
        n_interactions: dataset.interactions.len(),
        satisfaction_rate: satisfied as f64 / n,
        thread_overlap_rate: overlap as f64 / n,
        noise_fraction: truth.noisy.iter().filter(|x| **x).count() as f64 / truth.noisy.len().max(1) as f64,
        expertise: truth.expertise.clone(),
    }
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let path = dir.join(GROUND_TRUTH_FILE);
    if !path.exists() {
        return Err(Error::MissingGroundTruth(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Reads a generated bundle and recomputes its ground-truth statistics.
pub fn ground_truth_report(dir: &Path) -> Result<GroundTruthReport> {
    let truth = read_ground_truth(dir)?;
    let dataset = crate::data::ingest_bundle(
        dir,
        DataConfig {
            steps: truth.config.steps,
            ..DataConfig::default()
        },
    )?;
    Ok(report_for(&dataset, &truth))
}
