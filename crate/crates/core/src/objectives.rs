//! Loss terms beyond the ELBO: temporal smoothness, BPR ranking, the
//! seniority-monotonic regularizer and the helper-above-seeker constraint,
//! plus their weighted combination.
//!
//! Each term has a tape form used during training and a plain form over
//! `ndarray` inputs. Plain forms average over the batch.

use std::collections::HashSet;
use std::rc::Rc;

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::PatientId;
use crate::error::{Error, Result};
use crate::vae::sum_vars;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// ELBO weight.
    pub alpha: f64,
    /// Smoothness weight.
    pub gamma: f64,
    /// BPR weight.
    pub lambda: f64,
    /// Weight of the monotonic regularizer plus seniority constraint.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            gamma: 0.1,
            lambda: 1.0,
            beta: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("gamma", self.gamma), ("lambda", self.lambda), ("beta", self.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// How the helper-above-seeker constraint is turned into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// `Σ_i ReLU(z_p,i − z_q,i)`.
    #[default]
    Hinge,
    /// `Σ_i (z_p,i − z_q,i)`, unbounded below.
    Raw,
}

/// One BPR triplet: indices into the seeker and helper views, plus the
/// positive interaction's step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub seeker: usize,
    pub pos: usize,
    pub neg: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

/// Per-component loss values for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dis: f64,
    pub smo: f64,
    pub bpr: f64,
    pub reg: f64,
    pub cons: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 5] = ["dis", "smo", "bpr", "reg", "cons"];

    pub fn values(&self) -> [f64; 5] {
        [self.dis, self.smo, self.bpr, self.reg, self.cons]
    }
}

/// `α·dis + γ·smo + λ·bpr + β·(reg + cons)`.
pub fn total_objective(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.alpha * c.dis + w.gamma * c.smo + w.lambda * c.bpr + w.beta * (c.reg + c.cons))
}

fn step_weights(masks: &[Vec<bool>], t: usize) -> Vec<f64> {
    masks.iter().map(|m| if m[t] { 1.0 } else { 0.0 }).collect()
}

fn broadcast(rows: &[f64], cols: usize) -> Rc<Mat> {
    Rc::new(Mat::from_shape_fn((rows.len(), cols), |(r, _)| rows[r]))
}

/// `Σ_b Σ_{t≥2} m_t ‖z_t − z_{t−1}‖²` over a batch (not averaged).
pub fn smoothness_on_tape(tape: &mut Tape, z: &[Var], masks: &[Vec<bool>]) -> Var {
    let mut terms = Vec::new();
    for t in 1..z.len() {
        let d = tape.sub(z[t], z[t - 1]);
        let d2 = tape.square(d);
        let w = broadcast(&step_weights(masks, t), tape.shape(d2).1);
        let wd = tape.mul_const(d2, w);
        terms.push(tape.sum(wd));
    }
    if terms.is_empty() {
        return tape.constant_scalar(0.0);
    }
    sum_vars(tape, &terms)
}

/// `Σ_b Σ_{t≥2} m_t Σ_i ReLU[(s_t − s_{t−1}) (z_{t−1,i} − z_{t,i})]` (not averaged).
pub fn monotonic_on_tape(tape: &mut Tape, z: &[Var], seniority: &[Vec<f64>], masks: &[Vec<bool>]) -> Var {
    let mut terms = Vec::new();
    for t in 1..z.len() {
        let ds: Vec<f64> = seniority
            .iter()
            .zip(masks)
            .map(|(s, m)| if m[t] { s[t] - s[t - 1] } else { 0.0 })
            .collect();
        let drop = tape.sub(z[t - 1], z[t]);
        let scaled = tape.mul_const(drop, broadcast(&ds, tape.shape(drop).1));
        let r = tape.relu(scaled);
        terms.push(tape.sum(r));
    }
    if terms.is_empty() {
        return tape.constant_scalar(0.0);
    }
    sum_vars(tape, &terms)
}

/// Helper-above-seeker constraint summed over pair rows (not averaged).
pub fn seniority_constraint_on_tape(tape: &mut Tape, z_seeker: Var, z_helper: Var, mode: ConstraintMode) -> Var {
    let d = tape.sub(z_seeker, z_helper);
    match mode {
        ConstraintMode::Hinge => {
            let r = tape.relu(d);
            tape.sum(r)
        }
        ConstraintMode::Raw => tape.sum(d),
    }
}

/// `−Σ ln σ(⟨s, h⁺⟩ − ⟨s, h⁻⟩)` over aligned rows (not averaged).
pub fn bpr_on_tape(tape: &mut Tape, seeker: Var, pos: Var, neg: Var) -> Var {
    let sp = tape.row_dot(seeker, pos);
    let sn = tape.row_dot(seeker, neg);
    let diff = tape.sub(sp, sn);
    let ls = tape.log_sigmoid(diff);
    let s = tape.sum(ls);
    tape.scale(s, -1.0)
}

fn stack_steps(tape: &mut Tape, z: &[Mat]) -> Vec<Var> {
    let steps = z.first().map_or(0, |m| m.nrows());
    let dim = z.first().map_or(0, |m| m.ncols());
    (0..steps)
        .map(|t| {
            let rows = Mat::from_shape_fn((z.len(), dim), |(b, i)| z[b][[t, i]]);
            tape.leaf(rows)
        })
        .collect()
}

/// Mean over patients of the smoothness penalty; `z[b]` is `T x D`.
pub fn smoothness_loss(z: &[Mat], masks: &[Vec<bool>]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let mut tape = Tape::new();
    let steps = stack_steps(&mut tape, z);
    let s = smoothness_on_tape(&mut tape, &steps, masks);
    tape.scalar(s) / z.len() as f64
}

/// Mean over patients of the monotonic regularizer.
pub fn monotonic_regularizer(z: &[Mat], seniority: &[Vec<f64>], masks: &[Vec<bool>]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let mut tape = Tape::new();
    let steps = stack_steps(&mut tape, z);
    let s = monotonic_on_tape(&mut tape, &steps, seniority, masks);
    tape.scalar(s) / z.len() as f64
}

/// Mean over pairs of the seniority constraint; rows of `z_seeker` and
/// `z_helper` are aligned pairs at their interaction step.
pub fn seniority_constraint_loss(z_seeker: &Mat, z_helper: &Mat, mode: ConstraintMode) -> f64 {
    if z_seeker.nrows() == 0 {
        return 0.0;
    }
    let mut tape = Tape::new();
    let p = tape.leaf(z_seeker.clone());
    let q = tape.leaf(z_helper.clone());
    let s = seniority_constraint_on_tape(&mut tape, p, q, mode);
    tape.scalar(s) / z_seeker.nrows() as f64
}

/// Mean BPR loss; triplet indices address rows of `e_p` and `e_q`.
pub fn bpr_loss(e_p: &Mat, e_q: &Mat, batch: &TripletBatch) -> f64 {
    if batch.triplets.is_empty() {
        return 0.0;
    }
    let mut tape = Tape::new();
    let ep = tape.leaf(e_p.clone());
    let eq = tape.leaf(e_q.clone());
    let s: Vec<usize> = batch.triplets.iter().map(|t| t.seeker).collect();
    let p: Vec<usize> = batch.triplets.iter().map(|t| t.pos).collect();
    let n: Vec<usize> = batch.triplets.iter().map(|t| t.neg).collect();
    let sv = tape.gather(ep, &s);
    let pv = tape.gather(eq, &p);
    let nv = tape.gather(eq, &n);
    let l = bpr_on_tape(&mut tape, sv, pv, nv);
    tape.scalar(l) / batch.triplets.len() as f64
}

/// Result of drawing negatives for one seeker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeDraw {
    pub helpers: Vec<PatientId>,
    /// Fewer than `k` candidates existed.
    pub exhausted: bool,
}

/// Draws `k` helpers uniformly without replacement from `helpers` minus the
/// seeker's `linked` set.
pub fn sample_negatives(linked: &HashSet<PatientId>, helpers: &[PatientId], k: usize, rng: &mut impl Rng) -> NegativeDraw {
    if k == 1 && linked.len() * 2 < helpers.len() {
        loop {
            let h = helpers[rng.random_range(0..helpers.len())];
            if !linked.contains(&h) {
                return NegativeDraw {
                    helpers: vec![h],
                    exhausted: false,
                };
            }
        }
    }
    let pool: Vec<PatientId> = helpers.iter().copied().filter(|h| !linked.contains(h)).collect();
    if pool.len() <= k {
        if pool.len() < k {
            warn!("only {} negative candidates for {k} requested", pool.len());
        }
        return NegativeDraw {
            exhausted: pool.len() < k,
            helpers: pool,
        };
    }
    let picks = index::sample(rng, pool.len(), k);
    NegativeDraw {
        helpers: picks.into_iter().map(|i| pool[i]).collect(),
        exhausted: false,
    }
}
