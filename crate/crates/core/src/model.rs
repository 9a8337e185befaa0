//! The full recommender: parameters, graph context and the batch objective
//! that ties the VAE, graph propagation and ranking/seniority losses together.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::{DynamicSupportGraph, PatientId, PatientTimeline};
use crate::error::{Error, Result};
use crate::graph_prop::{normalize_symmetric, propagate_on_tape, LayerAverage, RoleViews};
use crate::nn::{normal_init, Bound, Params};
use crate::objectives::{
    bpr_on_tape, monotonic_on_tape, seniority_constraint_on_tape, smoothness_on_tape, ConstraintMode,
    LossComponents, LossWeights,
};
use crate::sparse::CsrMatrix;
use crate::vae::{elbo_on_tape, sample_on_tape, GaussianVars, VaeConfig, VaeNets};

pub const STATIC_X: &str = "static_x";

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Time-invariant branch replaced by a free per-patient embedding.
    WVae,
    /// Monotonic regularizer and seniority constraint switched off.
    WoSenior,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::WVae => "w_vae",
            Ablation::WoSenior => "wo_senior",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "w_vae" => Ok(Ablation::WVae),
            "wo_senior" => Ok(Ablation::WoSenior),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation `{other}` (expected full, w_vae or wo_senior)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub layers: usize,
    pub layer_average: LayerAverage,
    pub constraint_mode: ConstraintMode,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            layers: 3,
            layer_average: LayerAverage::Uniform,
            constraint_mode: ConstraintMode::Hinge,
            ablation: Ablation::Full,
        }
    }
}

/// Graph-derived constants shared by every forward pass.
pub struct GraphContext {
    pub n_patients: usize,
    /// Normalized `2m x 2m` bipartite adjacency.
    pub norm_adj: Rc<CsrMatrix>,
    pub views: RoleViews,
    /// Normalized patient-level adjacency of each snapshot, for decoder
    /// conditioning. Empty when conditioning is off.
    pub step_adj: Vec<Rc<CsrMatrix>>,
}

impl GraphContext {
    pub fn new(graph: &DynamicSupportGraph, conditioning: bool) -> Self {
        let m = graph.n_patients;
        let adj = crate::data::BipartiteAdjacency::from_edges(m, &graph.edges());
        let step_adj = if conditioning {
            (1..=graph.steps)
                .map(|t| {
                    let entries: Vec<_> = graph
                        .snapshot(t)
                        .into_iter()
                        .flat_map(|(s, h)| [(s.0, h.0, 1.0), (h.0, s.0, 1.0)])
                        .collect();
                    let a = CsrMatrix::from_triplets(m, m, &entries);
                    // repeated undirected edges collapse to weight 1
                    let binary = binarize(&a);
                    Rc::new(normalize_symmetric(&binary))
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            n_patients: m,
            norm_adj: Rc::new(normalize_symmetric(&adj.matrix)),
            views: RoleViews::new(&graph.roles),
            step_adj,
        }
    }
}

fn binarize(a: &CsrMatrix) -> CsrMatrix {
    let (rows, cols) = a.shape();
    let entries: Vec<_> = (0..rows)
        .flat_map(|r| a.row(r).filter(|(_, v)| *v != 0.0).map(move |(c, _)| (r, c, 1.0)))
        .collect();
    CsrMatrix::from_triplets(rows, cols, &entries)
}

/// A positive pair used in one training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPair {
    pub seeker: PatientId,
    pub pos: PatientId,
    pub neg: PatientId,
    pub seeker_step: usize,
    pub helper_step: usize,
}

/// Reparameterization noise for one forward pass. All-zero noise turns
/// every sample into its mean.
#[derive(Debug, Clone)]
pub struct Noise {
    pub x: Rc<Mat>,
    pub z: Vec<Rc<Mat>>,
}

impl Noise {
    pub fn draw(rng: &mut impl Rng, n_patients: usize, batch: usize, steps: usize, cfg: &VaeConfig) -> Self {
        Self {
            x: Rc::new(normal_init(rng, (n_patients, cfg.x_dim), 1.0)),
            z: (0..steps)
                .map(|_| Rc::new(normal_init(rng, (batch, cfg.z_dim), 1.0)))
                .collect(),
        }
    }

    pub fn zeros(n_patients: usize, batch: usize, steps: usize, cfg: &VaeConfig) -> Self {
        Self {
            x: Rc::new(Mat::zeros((n_patients, cfg.x_dim))),
            z: (0..steps).map(|_| Rc::new(Mat::zeros((batch, cfg.z_dim)))).collect(),
        }
    }
}

/// Tape handles of each loss component (batch means) and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub dis: Var,
    pub smo: Var,
    pub bpr: Var,
    pub reg: Var,
    pub cons: Var,
    pub total: Var,
}

impl LossVars {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            dis: tape.scalar(self.dis),
            smo: tape.scalar(self.smo),
            bpr: tape.scalar(self.bpr),
            reg: tape.scalar(self.reg),
            cons: tape.scalar(self.cons),
        }
    }

    pub fn component(&self, name: &str) -> Var {
        match name {
            "dis" => self.dis,
            "smo" => self.smo,
            "bpr" => self.bpr,
            "reg" => self.reg,
            "cons" => self.cons,
            "total" => self.total,
            other => panic!("unknown loss component {other}"),
        }
    }
}

/// Posterior means for every patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `m x D_x` time-invariant codes (posterior means, or the static table).
    pub x: Mat,
    /// Per step, `m x D_z` posterior means of the time-varying code.
    pub z: Vec<Mat>,
}

impl Encoded {
    pub fn z_at(&self, patient: PatientId, step: usize) -> ndarray::ArrayView1<'_, f64> {
        self.z[step].row(patient.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MintModel {
    pub config: ModelConfig,
    pub nets: VaeNets,
    pub params: Params,
    pub n_patients: usize,
    pub n_threads: usize,
    pub n_stages: usize,
}

impl MintModel {
    pub fn new(config: ModelConfig, n_patients: usize, n_threads: usize, n_stages: usize, rng: &mut impl Rng) -> Self {
        let nets = VaeNets::new(config.vae.clone());
        let mut params = Params::new();
        let with_x = config.ablation != Ablation::WVae;
        nets.init(&mut params, rng, n_threads, n_stages, with_x);
        if !with_x {
            params.insert(STATIC_X, normal_init(rng, (n_patients, config.vae.x_dim), 0.1));
        }
        Self {
            config,
            nets,
            params,
            n_patients,
            n_threads,
            n_stages,
        }
    }

    /// Rebuilds a model around stored parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, n_patients: usize, n_threads: usize, n_stages: usize, params: Params) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(config.clone(), n_patients, n_threads, n_stages, &mut rng);
        for (name, value) in template.params.iter() {
            match params.get(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => {
                    return Err(Error::Incompatible(format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        v.dim(),
                        value.dim()
                    )))
                }
                None => {
                    return Err(Error::Incompatible(format!(
                        "parameter {name} missing (model variant `{}`)",
                        config.ablation
                    )))
                }
            }
        }
        if params.len() != template.params.len() {
            let extra: Vec<_> = params.names().iter().filter(|n| !template.params.contains(n)).cloned().collect();
            return Err(Error::Incompatible(format!(
                "unexpected parameters {extra:?} for model variant `{}`",
                config.ablation
            )));
        }
        Ok(Self {
            nets: template.nets,
            config,
            params,
            n_patients,
            n_threads,
            n_stages,
        })
    }

    fn uses_x_encoder(&self) -> bool {
        self.config.ablation != Ablation::WVae
    }

    /// Time-invariant codes for all patients: sample (or mean under zero
    /// noise) plus posterior parameters when the encoder is active.
    fn all_x(&self, tape: &mut Tape, bound: &Bound, timelines: &[PatientTimeline], noise: &Noise) -> (Var, Option<GaussianVars>) {
        if !self.uses_x_encoder() {
            return (bound.var(STATIC_X), None);
        }
        let refs: Vec<&PatientTimeline> = timelines.iter().collect();
        let u = self.nets.embed_batch(tape, bound, &refs);
        let masks: Vec<Vec<bool>> = timelines.iter().map(|t| t.mask.clone()).collect();
        let q = self.nets.encode_x(tape, bound, &u, &masks);
        (sample_on_tape(tape, q, noise.x.clone()), Some(q))
    }

    /// Builds the objective for one batch on `tape` and returns the
    /// component handles. `patients` are the distinct batch patients that
    /// receive VAE losses; every pair's patients must be among them.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ctx: &GraphContext,
        timelines: &[PatientTimeline],
        patients: &[PatientId],
        pairs: &[BatchPair],
        noise: &Noise,
        weights: &LossWeights,
    ) -> LossVars {
        let m = self.n_patients;
        let cfg = &self.config;
        let (x_all, x_post) = self.all_x(tape, bound, timelines, noise);

        // ranking branch
        let both_sides: Vec<usize> = (0..m).chain(0..m).collect();
        let stacked = tape.gather(x_all, &both_sides);
        let e = propagate_on_tape(tape, stacked, &ctx.norm_adj, cfg.layers, cfg.layer_average);
        let bpr = if pairs.is_empty() {
            tape.constant_scalar(0.0)
        } else {
            let s: Vec<usize> = pairs.iter().map(|p| p.seeker.0).collect();
            let pos: Vec<usize> = pairs.iter().map(|p| m + p.pos.0).collect();
            let neg: Vec<usize> = pairs.iter().map(|p| m + p.neg.0).collect();
            let sv = tape.gather(e, &s);
            let pv = tape.gather(e, &pos);
            let nv = tape.gather(e, &neg);
            let l = bpr_on_tape(tape, sv, pv, nv);
            tape.scale(l, 1.0 / pairs.len() as f64)
        };

        // sequence branch over the batch patients
        let local: HashMap<PatientId, usize> = patients.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let rows: Vec<usize> = patients.iter().map(|p| p.0).collect();
        let batch_tl: Vec<&PatientTimeline> = patients.iter().map(|p| &timelines[p.0]).collect();
        let masks: Vec<Vec<bool>> = batch_tl.iter().map(|t| t.mask.clone()).collect();
        let seniority: Vec<Vec<f64>> = batch_tl.iter().map(|t| t.seniority.clone()).collect();
        let n = patients.len().max(1) as f64;

        let u = self.nets.embed_batch(tape, bound, &batch_tl);
        let steps = u.len();
        let z_post = self.nets.encode_z(tape, bound, &u);
        let z: Vec<Var> = z_post
            .iter()
            .zip(&noise.z)
            .map(|(q, eps)| sample_on_tape(tape, *q, eps.clone()))
            .collect();
        let z_prior = self.nets.prior(tape, bound, &z);

        let x_batch = if self.uses_x_encoder() {
            tape.gather(x_all, &rows)
        } else {
            tape.leaf(Mat::zeros((patients.len(), cfg.vae.x_dim)))
        };
        let recon: Vec<Var> = (0..steps)
            .map(|t| {
                let x_cond = if self.uses_x_encoder() && !ctx.step_adj.is_empty() {
                    let agg = tape.spmm(ctx.step_adj[t].clone(), x_all);
                    let agg = tape.gather(agg, &rows);
                    tape.add(x_batch, agg)
                } else {
                    x_batch
                };
                self.nets.decode(tape, bound, x_cond, z[t])
            })
            .collect();
        let x_post_batch = x_post.map(|q| GaussianVars {
            mu: tape.gather(q.mu, &rows),
            log_sigma: tape.gather(q.log_sigma, &rows),
        });
        let terms = elbo_on_tape(tape, &u, &recon, &masks, &z_post, &z_prior, x_post_batch);
        let mut dis = tape.add(terms.reconstruction, terms.kl_z);
        if let Some(kx) = terms.kl_x {
            dis = tape.add(dis, kx);
        }
        let dis = tape.scale(dis, 1.0 / n);

        let smo = smoothness_on_tape(tape, &z, &masks);
        let smo = tape.scale(smo, 1.0 / n);
        let reg = monotonic_on_tape(tape, &z, &seniority, &masks);
        let reg = tape.scale(reg, 1.0 / n);

        let cons = if pairs.is_empty() {
            tape.constant_scalar(0.0)
        } else {
            let b = patients.len();
            let all_z = tape.concat_rows(&z);
            let seeker_rows: Vec<usize> = pairs.iter().map(|p| p.seeker_step * b + local[&p.seeker]).collect();
            let helper_rows: Vec<usize> = pairs.iter().map(|p| p.helper_step * b + local[&p.pos]).collect();
            let zp = tape.gather(all_z, &seeker_rows);
            let zq = tape.gather(all_z, &helper_rows);
            let c = seniority_constraint_on_tape(tape, zp, zq, cfg.constraint_mode);
            tape.scale(c, 1.0 / pairs.len() as f64)
        };

        let mut parts = Vec::new();
        for (w, v) in [
            (weights.alpha, dis),
            (weights.gamma, smo),
            (weights.lambda, bpr),
            (weights.beta, reg),
            (weights.beta, cons),
        ] {
            if w != 0.0 {
                parts.push(tape.scale(v, w));
            }
        }
        let total = if parts.is_empty() {
            tape.constant_scalar(0.0)
        } else {
            crate::vae::sum_vars(tape, &parts)
        };
        LossVars {
            dis,
            smo,
            bpr,
            reg,
            cons,
            total,
        }
    }

    /// Posterior means of `x` and every `z_t` for all patients.
    pub fn encode(&self, timelines: &[PatientTimeline]) -> Encoded {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let m = timelines.len();
        let x = if self.uses_x_encoder() {
            let refs: Vec<&PatientTimeline> = timelines.iter().collect();
            let u = self.nets.embed_batch(&mut tape, &bound, &refs);
            let masks: Vec<Vec<bool>> = timelines.iter().map(|t| t.mask.clone()).collect();
            let q = self.nets.encode_x(&mut tape, &bound, &u, &masks);
            tape.value(q.mu).clone()
        } else {
            self.params.get(STATIC_X).expect("static table").clone()
        };
        let refs: Vec<&PatientTimeline> = timelines.iter().collect();
        let u = self.nets.embed_batch(&mut tape, &bound, &refs);
        let z = self
            .nets
            .encode_z(&mut tape, &bound, &u)
            .into_iter()
            .map(|g| tape.value(g.mu).clone())
            .collect();
        debug_assert_eq!(x.nrows(), m);
        Encoded { x, z }
    }

    /// Propagated `2m x D_x` embedding built from posterior means.
    pub fn propagated(&self, encoded: &Encoded, ctx: &GraphContext) -> Mat {
        let m = self.n_patients;
        let both: Vec<usize> = (0..m).chain(0..m).collect();
        let stacked = encoded.x.select(Axis(0), &both);
        crate::graph_prop::propagate(&stacked, &ctx.norm_adj, self.config.layers, self.config.layer_average)
            .expect("propagation shapes agree")
            .averaged
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in [Ablation::Full, Ablation::WVae, Ablation::WoSenior] {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let wvae = MintModel::new(
            ModelConfig {
                ablation: Ablation::WVae,
                ..ModelConfig::default()
            },
            4,
            3,
            2,
            &mut rng,
        );
        let err = MintModel::from_params(ModelConfig::default(), 4, 3, 2, wvae.params.clone()).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
        let ok = MintModel::from_params(wvae.config.clone(), 4, 3, 2, wvae.params.clone()).unwrap();
        assert_eq!(ok.params, wvae.params);
    }
}
