//! Mini-batch training: chronological split, triplet batches, Adam updates,
//! per-component loss trace and early stopping on validation NDCG.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{Dataset, DynamicSupportGraph, PatientId, SupportPair};
use crate::error::{Error, Result};
use crate::eval::{build_queries, ndcg_at_k, rank_all, EmbeddingScorer, Query};
use crate::model::{Ablation, BatchPair, GraphContext, LossVars, MintModel, ModelConfig, Noise};
use crate::objectives::{sample_negatives, LossComponents, LossWeights};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Cutoff of the validation NDCG used for early stopping.
    pub val_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.001,
            epochs: 100,
            weights: LossWeights::default(),
            seed: 0,
            model: ModelConfig::default(),
            patience: 10,
            clip_norm: Some(5.0),
            train_fraction: 0.8,
            val_fraction: 0.1,
            val_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return bad(format!(
                "split fractions train={} val={} are invalid",
                self.train_fraction, self.val_fraction
            ));
        }
        if self.val_k == 0 {
            return bad("val_k must be >= 1".into());
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        self.weights.validate()
    }

    /// Weights actually optimized: `wo_senior` zeroes `beta`.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.model.ablation == Ablation::WoSenior {
            w.beta = 0.0;
        }
        w
    }
}

/// Chronological split of the interaction list: `[0, train_end)` train,
/// `[train_end, val_end)` validation, the rest test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl Split {
    pub fn chronological(total: usize, train_fraction: f64, val_fraction: f64) -> Self {
        let train_end = ((total as f64 * train_fraction).round() as usize).clamp(1.min(total), total);
        let val_end = ((total as f64 * (train_fraction + val_fraction)).round() as usize).clamp(train_end, total);
        Self {
            train_end,
            val_end,
            total,
        }
    }

    pub fn train<'a>(&self, pairs: &'a [SupportPair]) -> &'a [SupportPair] {
        &pairs[..self.train_end]
    }

    pub fn val<'a>(&self, pairs: &'a [SupportPair]) -> &'a [SupportPair] {
        &pairs[self.train_end..self.val_end]
    }

    pub fn test<'a>(&self, pairs: &'a [SupportPair]) -> &'a [SupportPair] {
        &pairs[self.val_end..]
    }
}

/// Everything derived from a dataset and split that training and
/// evaluation share.
pub struct Prepared {
    pub split: Split,
    pub train_graph: DynamicSupportGraph,
    pub ctx: GraphContext,
    /// Helpers seen in training; the candidate set for every query.
    pub candidates: Vec<PatientId>,
    pub val_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub linked: HashMap<PatientId, HashSet<PatientId>>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, split: Split, model: &ModelConfig) -> Result<Self> {
        if split.train_end == 0 {
            return Err(Error::EmptyDataset("no training interactions".into()));
        }
        let train_graph = dataset.graph.restrict(0..split.train_end);
        let conditioning = model.vae.graph_conditioning && model.ablation != Ablation::WVae;
        let ctx = GraphContext::new(&train_graph, conditioning);
        let val = build_queries(split.val(&dataset.graph.pairs), &train_graph.roles);
        let test = build_queries(split.test(&dataset.graph.pairs), &train_graph.roles);
        for (name, q) in [("validation", &val), ("test", &test)] {
            if q.dropped_unseen_seeker + q.dropped_unseen_helper > 0 {
                info!(
                    "{name}: dropped {} queries with unseen seeker and {} with unseen helper",
                    q.dropped_unseen_seeker, q.dropped_unseen_helper
                );
            }
        }
        let mut linked: HashMap<PatientId, HashSet<PatientId>> = HashMap::new();
        for p in &train_graph.pairs {
            linked.entry(p.seeker).or_default().insert(p.helper);
        }
        Ok(Self {
            split,
            candidates: train_graph.roles.helpers(),
            ctx,
            train_graph,
            val_queries: val.queries,
            test_queries: test.queries,
            linked,
        })
    }

    pub fn for_config(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let split = Split::chronological(dataset.graph.pairs.len(), config.train_fraction, config.val_fraction);
        Self::new(dataset, split, &config.model)
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub components: LossComponents,
    pub total: f64,
    pub val_ndcg: Option<f64>,
}

pub const TRACE_HEADER: &str = "epoch,component,value";

/// Loss trace as CSV rows `epoch,component,value`, components then `total`.
pub fn trace_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in records {
        for (name, v) in LossComponents::NAMES.iter().zip(r.components.values()) {
            out.push_str(&format!("{},{name},{v}\n", r.epoch));
        }
        out.push_str(&format!("{},total,{}\n", r.epoch, r.total));
    }
    out
}

pub struct TrainOutcome {
    pub model: MintModel,
    pub checkpoint: Checkpoint,
    /// Loss before any update.
    pub initial: EpochRecord,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Builds the batches of one epoch in shuffled order, with one fresh
/// negative per positive.
pub fn epoch_batches(
    pairs: &[SupportPair],
    prepared: &Prepared,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<BatchPair>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let empty = HashSet::new();
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let p = &pairs[i];
            let linked = prepared.linked.get(&p.seeker).unwrap_or(&empty);
            let draw = sample_negatives(linked, &prepared.candidates, 1, rng);
            let Some(&neg) = draw.helpers.first() else {
                warn!("seeker {} is linked to every helper; triplet skipped", p.seeker);
                continue;
            };
            batch.push(BatchPair {
                seeker: p.seeker,
                pos: p.helper,
                neg,
                seeker_step: p.seeker_step,
                helper_step: p.helper_step,
            });
        }
        if !batch.is_empty() {
            batches.push(batch);
        }
    }
    batches
}

/// Distinct patients of a batch in order of first appearance.
pub fn batch_patients(batch: &[BatchPair]) -> Vec<PatientId> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in batch {
        for id in [p.seeker, p.pos, p.neg] {
            if seen.insert(id) {
                out.push(id);
            }
        }
    }
    out
}

/// One forward pass: the tape, parameter bindings and loss handles.
pub fn forward_batch(
    model: &MintModel,
    dataset: &Dataset,
    prepared: &Prepared,
    batch: &[BatchPair],
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> (Tape, crate::nn::Bound, LossVars) {
    let patients = batch_patients(batch);
    let noise = Noise::draw(rng, model.n_patients, patients.len(), dataset.config.steps, &model.config.vae);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let loss = model.batch_objective(
        &mut tape,
        &bound,
        &prepared.ctx,
        &dataset.timelines,
        &patients,
        batch,
        &noise,
        weights,
    );
    (tape, bound, loss)
}

fn check_finite(c: &LossComponents, total: f64, epoch: usize) -> Result<()> {
    for (name, v) in LossComponents::NAMES.iter().zip(c.values()).chain([(&"total", total)]) {
        if !v.is_finite() {
            return Err(Error::Divergence {
                component: name.to_string(),
                epoch,
            });
        }
    }
    Ok(())
}

#[derive(Default)]
struct Accum {
    sums: [f64; 6],
    batches: usize,
}

impl Accum {
    fn add(&mut self, c: &LossComponents, total: f64) {
        for (s, v) in self.sums.iter_mut().zip(c.values().into_iter().chain([total])) {
            *s += v;
        }
        self.batches += 1;
    }

    fn record(&self, epoch: usize, val_ndcg: Option<f64>) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        let s = self.sums.map(|v| v / n);
        EpochRecord {
            epoch,
            components: LossComponents {
                dis: s[0],
                smo: s[1],
                bpr: s[2],
                reg: s[3],
                cons: s[4],
            },
            total: s[5],
            val_ndcg,
        }
    }
}

/// Validation NDCG@k of a model, or `None` without validation queries.
pub fn validation_ndcg(model: &MintModel, dataset: &Dataset, prepared: &Prepared, k: usize) -> Result<Option<f64>> {
    if prepared.val_queries.is_empty() {
        return Ok(None);
    }
    let enc = model.encode(&dataset.timelines);
    let e = model.propagated(&enc, &prepared.ctx);
    let scorer = EmbeddingScorer::from_propagated(&e, &prepared.train_graph.roles);
    let results = rank_all(&scorer, &prepared.val_queries, &prepared.candidates)?;
    Ok(Some(ndcg_at_k(&results, k)))
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = Prepared::for_config(dataset, config)?;
    train_prepared(dataset, &prepared, config)
}

pub fn train_prepared(dataset: &Dataset, prepared: &Prepared, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let weights = config.effective_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MintModel::new(
        config.model.clone(),
        dataset.n_patients,
        dataset.n_threads,
        dataset.n_stages,
        &mut rng,
    );
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        clip_norm: config.clip_norm,
        ..AdamConfig::default()
    });
    let train_pairs = prepared.train_graph.pairs.clone();

    let mut acc = Accum::default();
    for batch in epoch_batches(&train_pairs, prepared, config.batch_size, &mut rng) {
        let (tape, _, loss) = forward_batch(&model, dataset, prepared, &batch, &weights, &mut rng);
        let c = loss.components(&tape);
        let total = tape.scalar(loss.total);
        check_finite(&c, total, 0)?;
        acc.add(&c, total);
    }
    let initial = acc.record(0, validation_ndcg(&model, dataset, prepared, config.val_k)?);
    info!("epoch 0: loss {:.6}", initial.total);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, crate::nn::Params)> = None;
    let mut stale = 0;
    let mut last_epoch = 0;
    for epoch in 1..=config.epochs {
        let mut acc = Accum::default();
        for batch in epoch_batches(&train_pairs, prepared, config.batch_size, &mut rng) {
            let (tape, bound, loss) = forward_batch(&model, dataset, prepared, &batch, &weights, &mut rng);
            let c = loss.components(&tape);
            let total = tape.scalar(loss.total);
            check_finite(&c, total, epoch)?;
            acc.add(&c, total);
            let mut grads = tape.backward(loss.total);
            let mut named = BTreeMap::new();
            for (name, var) in model.params.names().iter().zip(bound.vars()) {
                if let Some(g) = grads.take(*var) {
                    named.insert(name.clone(), g);
                }
            }
            let norm = adam.step(&mut model.params, &named);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    component: "gradient".into(),
                    epoch,
                });
            }
        }
        let val = validation_ndcg(&model, dataset, prepared, config.val_k)?;
        let rec = acc.record(epoch, val);
        debug!("epoch {epoch}: loss {:.6} val {:?}", rec.total, rec.val_ndcg);
        history.push(rec);
        last_epoch = epoch;
        if let Some(v) = val {
            match &best {
                Some((b, _, _)) if v <= *b => stale += 1,
                _ => {
                    best = Some((v, epoch, model.params.clone()));
                    stale = 0;
                }
            }
            if config.patience > 0 && stale >= config.patience {
                info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((v, e, params)) => {
            info!("best validation NDCG@{} = {v:.4} at epoch {e}", config.val_k);
            model.params = params;
            e
        }
        None => last_epoch,
    };
    let checkpoint = Checkpoint {
        model: model.clone(),
        train: config.clone(),
        split: prepared.split,
        epoch: last_epoch,
        best_epoch,
        rng: RngState::capture(&rng),
        initial: Some(initial),
        history: history.clone(),
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        initial,
        history,
        best_epoch,
    })
}

/// Gradient of every parameter for one batch and loss component, by name.
pub fn batch_gradients(tape: &Tape, bound: &crate::nn::Bound, model: &MintModel, out: crate::autodiff::Var) -> BTreeMap<String, Mat> {
    let grads = tape.backward(out);
    model
        .params
        .iter()
        .zip(bound.vars())
        .map(|((name, p), v)| (name.to_string(), grads.get_or_zeros(*v, p.dim())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = Split::chronological(100, 0.8, 0.1);
        assert_eq!((s.train_end, s.val_end), (80, 90));
        let s = Split::chronological(1, 0.8, 0.1);
        assert_eq!((s.train_end, s.val_end), (1, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let mut c = TrainConfig::default();
        c.model.ablation = Ablation::WoSenior;
        assert_eq!(c.effective_weights().beta, 0.0);
    }

    #[test]
    fn trace_rows_per_epoch() {
        let r = EpochRecord {
            epoch: 1,
            components: LossComponents::default(),
            total: 0.0,
            val_ndcg: None,
        };
        let csv = trace_csv(&[r, EpochRecord { epoch: 2, ..r }]);
        assert_eq!(csv.lines().count(), 1 + 2 * 6);
    }
}
