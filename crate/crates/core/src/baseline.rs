//! BPR-MF reference: free seeker and helper embeddings trained with the
//! ranking loss only, evaluated through the same protocol as the model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape};
use crate::data::{Dataset, PatientId};
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, rank_all, Scorer};
use crate::nn::{normal_init, Params};
use crate::objectives::bpr_on_tape;
use crate::optim::{Adam, AdamConfig};
use crate::trainer::{epoch_batches, Prepared, TrainConfig};

pub const BASELINE_DIM: usize = 16;
const SEEKER: &str = "bprmf.seeker";
const HELPER: &str = "bprmf.helper";

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineBprMf {
    pub params: Params,
    pub known_seekers: Vec<bool>,
}

impl Scorer for BaselineBprMf {
    fn knows_seeker(&self, seeker: PatientId) -> bool {
        self.known_seekers.get(seeker.0).copied().unwrap_or(false)
    }

    fn score(&self, seeker: PatientId, helper: PatientId) -> f64 {
        let s = self.params.get(SEEKER).expect("seeker table");
        let h = self.params.get(HELPER).expect("helper table");
        s.row(seeker.0).dot(&h.row(helper.0))
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: BaselineBprMf,
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
}

fn val_ndcg(model: &BaselineBprMf, prepared: &Prepared, k: usize) -> Result<Option<f64>> {
    if prepared.val_queries.is_empty() {
        return Ok(None);
    }
    let r = rank_all(model, &prepared.val_queries, &prepared.candidates)?;
    Ok(Some(ndcg_at_k(&r, k)))
}

/// Trains with the batch size, learning rate, epochs, patience and seed of
/// `config`; model and loss-weight settings are ignored.
pub fn train_baseline(dataset: &Dataset, prepared: &Prepared, config: &TrainConfig) -> Result<BaselineOutcome> {
    config.validate()?;
    let m = dataset.n_patients;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xB9B0_0000);
    let mut params = Params::new();
    params.insert(SEEKER, normal_init(&mut rng, (m, BASELINE_DIM), 0.1));
    params.insert(HELPER, normal_init(&mut rng, (m, BASELINE_DIM), 0.1));
    let mut model = BaselineBprMf {
        params,
        known_seekers: prepared.train_graph.roles.is_seeker.clone(),
    };
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        clip_norm: config.clip_norm,
        ..AdamConfig::default()
    });
    let pairs = prepared.train_graph.pairs.clone();

    let batch_loss = |params: &Params, batch: &[crate::model::BatchPair]| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let s: Vec<usize> = batch.iter().map(|p| p.seeker.0).collect();
        let pos: Vec<usize> = batch.iter().map(|p| p.pos.0).collect();
        let neg: Vec<usize> = batch.iter().map(|p| p.neg.0).collect();
        let sv = tape.gather(bound.var(SEEKER), &s);
        let pv = tape.gather(bound.var(HELPER), &pos);
        let nv = tape.gather(bound.var(HELPER), &neg);
        let l = bpr_on_tape(&mut tape, sv, pv, nv);
        let l = tape.scale(l, 1.0 / batch.len() as f64);
        (tape, bound, l)
    };

    let batches = epoch_batches(&pairs, prepared, config.batch_size, &mut rng);
    let initial_loss =
        batches.iter().map(|b| batch_loss(&model.params, b)).map(|(t, _, l)| t.scalar(l)).sum::<f64>() / batches.len().max(1) as f64;

    let mut losses = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let batches = epoch_batches(&pairs, prepared, config.batch_size, &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let (tape, bound, l) = batch_loss(&model.params, batch);
            let v = tape.scalar(l);
            if !v.is_finite() {
                return Err(Error::Divergence {
                    component: "bpr".into(),
                    epoch,
                });
            }
            sum += v;
            let mut grads = tape.backward(l);
            let mut named = BTreeMap::new();
            for (name, var) in model.params.names().iter().zip(bound.vars()) {
                if let Some(g) = grads.take(*var) {
                    named.insert(name.clone(), g);
                }
            }
            adam.step(&mut model.params, &named);
        }
        losses.push(sum / batches.len().max(1) as f64);
        if let Some(v) = val_ndcg(&model, prepared, config.val_k)? {
            match &best {
                Some((b, _, _)) if v <= *b => stale += 1,
                _ => {
                    best = Some((v, epoch, model.params.clone()));
                    stale = 0;
                }
            }
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, p)) => {
            model.params = p;
            e
        }
        None => losses.len(),
    };
    Ok(BaselineOutcome {
        model,
        initial_loss,
        losses,
        best_epoch,
    })
}

impl BaselineBprMf {
    pub fn seeker_table(&self) -> &Mat {
        self.params.get(SEEKER).expect("seeker table")
    }

    pub fn helper_table(&self) -> &Mat {
        self.params.get(HELPER).expect("helper table")
    }
}
