//! Full-candidate ranking protocol, ranking metrics, the random-ranking
//! reference and seniority diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::data::{PatientId, PatientTimeline, RoleIndex, SupportPair};
use crate::error::{Error, Result};
use crate::model::Encoded;

pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];

/// One held-out (seeker, true helper) query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub seeker: PatientId,
    pub helper: PatientId,
    pub seeker_step: usize,
    pub helper_step: usize,
    pub timestamp: i64,
}

impl From<&SupportPair> for Query {
    fn from(p: &SupportPair) -> Self {
        Self {
            seeker: p.seeker,
            helper: p.helper,
            seeker_step: p.seeker_step,
            helper_step: p.helper_step,
            timestamp: p.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query: Query,
    /// Candidates by descending score, ties by ascending id.
    pub candidates: Vec<(PatientId, f64)>,
    /// 1-based rank of the true helper.
    pub rank: usize,
}

/// Anything that scores a seeker against helpers.
pub trait Scorer {
    /// Whether the seeker has a trained representation.
    fn knows_seeker(&self, seeker: PatientId) -> bool;
    fn score(&self, seeker: PatientId, helper: PatientId) -> f64;
}

/// Dot-product scorer over propagated seeker rows and helper rows.
#[derive(Debug, Clone)]
pub struct EmbeddingScorer {
    pub seeker_rows: Mat,
    pub helper_rows: Mat,
    pub known_seekers: Vec<bool>,
}

impl EmbeddingScorer {
    /// From a `2m`-row propagated embedding.
    pub fn from_propagated(e: &Mat, roles: &RoleIndex) -> Self {
        let m = roles.is_seeker.len();
        Self {
            seeker_rows: e.slice(ndarray::s![..m, ..]).to_owned(),
            helper_rows: e.slice(ndarray::s![m.., ..]).to_owned(),
            known_seekers: roles.is_seeker.clone(),
        }
    }
}

impl Scorer for EmbeddingScorer {
    fn knows_seeker(&self, seeker: PatientId) -> bool {
        self.known_seekers.get(seeker.0).copied().unwrap_or(false)
    }

    fn score(&self, seeker: PatientId, helper: PatientId) -> f64 {
        self.seeker_rows.row(seeker.0).dot(&self.helper_rows.row(helper.0))
    }
}

/// Sorts scored candidates: descending score, ascending id on ties.
pub fn sort_candidates(scored: &mut [(PatientId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Scores every candidate for the query's seeker and locates the true helper.
pub fn rank_helpers(scorer: &impl Scorer, query: Query, candidates: &[PatientId]) -> Result<RankingResult> {
    if !scorer.knows_seeker(query.seeker) {
        return Err(Error::UnseenSeeker(query.seeker.0));
    }
    let mut scored: Vec<(PatientId, f64)> = candidates.iter().map(|&h| (h, scorer.score(query.seeker, h))).collect();
    if let Some((h, s)) = scored.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::OutOfRange(format!("non-finite score {s} for helper {h}")));
    }
    sort_candidates(&mut scored);
    let rank = scored
        .iter()
        .position(|(h, _)| *h == query.helper)
        .ok_or_else(|| Error::OutOfRange(format!("true helper {} is not a candidate", query.helper)))?
        + 1;
    Ok(RankingResult {
        query,
        candidates: scored,
        rank,
    })
}

pub fn rank_all(scorer: &impl Scorer, queries: &[Query], candidates: &[PatientId]) -> Result<Vec<RankingResult>> {
    queries.iter().map(|q| rank_helpers(scorer, *q, candidates)).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn mrr_of_ranks(ranks: &[usize]) -> f64 {
    mean(ranks.iter().map(|&r| 1.0 / r as f64))
}

pub fn ndcg_of_ranks(ranks: &[usize], k: usize) -> f64 {
    mean(ranks.iter().map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }))
}

pub fn hit_of_ranks(ranks: &[usize], k: usize) -> f64 {
    mean(ranks.iter().map(|&r| if r <= k { 1.0 } else { 0.0 }))
}

fn ranks(results: &[RankingResult]) -> Vec<usize> {
    results.iter().map(|r| r.rank).collect()
}

pub fn mrr(results: &[RankingResult]) -> f64 {
    mrr_of_ranks(&ranks(results))
}

pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> f64 {
    ndcg_of_ranks(&ranks(results), k)
}

pub fn hit_at_k(results: &[RankingResult], k: usize) -> f64 {
    hit_of_ranks(&ranks(results), k)
}

/// Metrics for one model on one query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub n_queries: usize,
    pub mrr: f64,
    pub ndcg: BTreeMap<usize, f64>,
    pub hit: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn from_ranks(model: &str, ranks: &[usize], ks: &[usize]) -> Self {
        Self {
            model: model.to_string(),
            n_queries: ranks.len(),
            mrr: mrr_of_ranks(ranks),
            ndcg: ks.iter().map(|&k| (k, ndcg_of_ranks(ranks, k))).collect(),
            hit: ks.iter().map(|&k| (k, hit_of_ranks(ranks, k))).collect(),
        }
    }

    pub fn from_results(model: &str, results: &[RankingResult], ks: &[usize]) -> Self {
        Self::from_ranks(model, &ranks(results), ks)
    }

    /// Expected metrics of a uniformly random ordering over `n_candidates`.
    pub fn random_reference(n_queries: usize, n_candidates: usize, ks: &[usize]) -> Self {
        let n = n_candidates.max(1);
        let inv = 1.0 / n as f64;
        let ndcg = |k: usize| (1..=k.min(n)).map(|r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() * inv;
        Self {
            model: "random".into(),
            n_queries,
            mrr: (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() * inv,
            ndcg: ks.iter().map(|&k| (k, ndcg(k))).collect(),
            hit: ks.iter().map(|&k| (k, k.min(n) as f64 * inv)).collect(),
        }
    }

    /// Rows of `metric,K,value,model`; MRR carries an empty K.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (k, v) in &self.ndcg {
            rows.push(format!("NDCG,{k},{v},{}", self.model));
        }
        for (k, v) in &self.hit {
            rows.push(format!("HIT,{k},{v},{}", self.model));
        }
        rows.push(format!("MRR,,{},{}", self.mrr, self.model));
        rows
    }

    /// Flat summary keyed like a results table (`NDCG@3`, ..., `MRR`).
    pub fn summary(&self) -> BTreeMap<String, f64> {
        let mut s = BTreeMap::new();
        for (k, v) in &self.ndcg {
            s.insert(format!("NDCG@{k}"), *v);
        }
        for (k, v) in &self.hit {
            s.insert(format!("HIT@{k}"), *v);
        }
        s.insert("MRR".into(), self.mrr);
        s
    }
}

pub const METRICS_HEADER: &str = "metric,K,value,model";

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.csv_rows() {
            let _ = writeln!(out, "{row}");
        }
    }
    out
}

/// Stable digest of a query set and its candidate list.
pub fn query_set_hash(queries: &[Query], candidates: &[PatientId]) -> String {
    let mut h = Sha256::new();
    for q in queries {
        h.update(format!("{},{},{},{},{};", q.seeker, q.helper, q.seeker_step, q.helper_step, q.timestamp));
    }
    h.update(b"|");
    for c in candidates {
        h.update(format!("{c};"));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Held-out queries whose seeker and helper both appear in training.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub dropped_unseen_seeker: usize,
    pub dropped_unseen_helper: usize,
}

pub fn build_queries(pairs: &[SupportPair], train_roles: &RoleIndex) -> QuerySet {
    let mut out = QuerySet {
        queries: Vec::new(),
        dropped_unseen_seeker: 0,
        dropped_unseen_helper: 0,
    };
    for p in pairs {
        if !train_roles.is_seeker[p.seeker.0] {
            out.dropped_unseen_seeker += 1;
        } else if !train_roles.is_helper[p.helper.0] {
            out.dropped_unseen_helper += 1;
        } else {
            out.queries.push(Query::from(p));
        }
    }
    out
}

/// Seniority diagnostics of a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeniorityDiagnostics {
    /// Mean over pairs of `Σ_i ReLU(z_p,i − z_q,i)` at each pair's steps.
    pub mean_hinge_violation: f64,
    /// Share of top-1 recommendations whose helper outranks the seeker in seniority.
    pub top1_senior_fraction: f64,
    /// Mean per-patient share of latent dimensions that did not decrease on
    /// steps where seniority rose.
    pub monotone_fraction: f64,
}

pub fn mean_hinge_violation(encoded: &Encoded, queries: &[Query]) -> f64 {
    mean(queries.iter().map(|q| {
        let zp = encoded.z_at(q.seeker, q.seeker_step);
        let zq = encoded.z_at(q.helper, q.helper_step);
        zp.iter().zip(zq.iter()).map(|(a, b)| (a - b).max(0.0)).sum::<f64>()
    }))
}

/// Share of queries whose top-ranked helper has higher seniority than the
/// seeker at the query time.
pub fn top1_senior_fraction(results: &[RankingResult], timelines: &[PatientTimeline]) -> f64 {
    mean(results.iter().filter_map(|r| {
        let (top, _) = r.candidates.first()?;
        let ts = r.query.timestamp;
        let o = timelines[top.0].seniority_at_time(ts);
        let s = timelines[r.query.seeker.0].seniority_at_time(ts);
        Some(if o > s { 1.0 } else { 0.0 })
    }))
}

pub fn monotone_fraction(encoded: &Encoded, timelines: &[PatientTimeline]) -> f64 {
    let dim = encoded.z.first().map_or(0, |z| z.ncols());
    mean(timelines.iter().filter_map(|tl| {
        let (mut up, mut total) = (0usize, 0usize);
        for t in 1..tl.steps() {
            if !tl.mask[t] || tl.seniority[t] <= tl.seniority[t - 1] {
                continue;
            }
            let prev = encoded.z[t - 1].row(tl.patient.0);
            let cur = encoded.z[t].row(tl.patient.0);
            up += prev.iter().zip(cur.iter()).filter(|(a, b)| b >= a).count();
            total += dim;
        }
        (total > 0).then(|| up as f64 / total as f64)
    }))
}

pub fn seniority_diagnostics(
    encoded: &Encoded,
    timelines: &[PatientTimeline],
    results: &[RankingResult],
) -> SeniorityDiagnostics {
    let queries: Vec<Query> = results.iter().map(|r| r.query).collect();
    SeniorityDiagnostics {
        mean_hinge_violation: mean_hinge_violation(encoded, &queries),
        top1_senior_fraction: top1_senior_fraction(results, timelines),
        monotone_fraction: monotone_fraction(encoded, timelines),
    }
}

/// Empirical share of seniority-respecting recommendations under uniformly
/// random top-1 choice.
pub fn random_top1_senior_fraction(queries: &[Query], candidates: &[PatientId], timelines: &[PatientTimeline]) -> f64 {
    mean(queries.iter().map(|q| {
        let s = timelines[q.seeker.0].seniority_at_time(q.timestamp);
        let above = candidates
            .iter()
            .filter(|h| timelines[h.0].seniority_at_time(q.timestamp) > s)
            .count();
        above as f64 / candidates.len().max(1) as f64
    }))
}

/// Row of `z` means for each patient at their last real step.
pub fn final_z(encoded: &Encoded, timelines: &[PatientTimeline]) -> Mat {
    let dim = encoded.z.first().map_or(0, |z| z.ncols());
    let mut out = Mat::zeros((timelines.len(), dim));
    for (tl, mut row) in timelines.iter().zip(out.axis_iter_mut(Axis(0))) {
        let t = tl.last_real_step().unwrap_or(0);
        row.assign(&encoded.z[t].row(tl.patient.0));
    }
    out
}
