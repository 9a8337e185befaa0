//! Disentangled sequential VAE over patient activity sequences.
//!
//! A patient's per-step feature `u_t = [thread embedding, stage embedding]`
//! is explained by a time-invariant code `x` (posterior conditioned on the
//! whole sequence) and a time-varying code `z_t` (posterior conditioned on
//! `u_{<=t}`, prior conditioned on `z_{<t}`). The decoder maps
//! `[x_cond, z_t]` to the mean of `u_t`; the observation variance is fixed
//! to one.

use std::rc::Rc;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::PatientTimeline;
use crate::error::{Error, Result};
use crate::nn::{normal_init, row_mask, Bound, GruCell, Linear, Params};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;

pub const THREAD_TABLE: &str = "embedding.thread";
pub const STAGE_TABLE: &str = "embedding.stage";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub thread_dim: usize,
    pub stage_dim: usize,
    pub x_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    /// Aggregate `x` over the step's snapshot graph before decoding.
    pub graph_conditioning: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            thread_dim: 8,
            stage_dim: 8,
            x_dim: 8,
            z_dim: 8,
            hidden: 16,
            decoder_hidden: 16,
            graph_conditioning: true,
        }
    }
}

impl VaeConfig {
    pub fn feature_dim(&self) -> usize {
        self.thread_dim + self.stage_dim
    }
}

/// Diagonal Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Array1<f64>,
    pub log_sigma: Array1<f64>,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: Array1::zeros(dim),
            log_sigma: Array1::zeros(dim),
        }
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_sigma.mapv(f64::exp)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Posterior parameters for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParams {
    pub x: GaussianParams,
    pub z: Vec<GaussianParams>,
}

/// Posterior parameters together with the samples drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub params: LatentParams,
    pub x_sample: Array1<f64>,
    pub z_samples: Vec<Array1<f64>>,
}

/// Learned thread and stage lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub thread: Mat,
    pub stage: Mat,
}

impl EmbeddingTables {
    pub fn from_params(params: &Params) -> Self {
        Self {
            thread: params.get(THREAD_TABLE).expect("thread table").clone(),
            stage: params.get(STAGE_TABLE).expect("stage table").clone(),
        }
    }
}

/// Rows of `u_{1:T}` for one timeline: `T x (D_v + D_h)`. Masked steps
/// repeat the last real row; a fully masked timeline gives zeros.
pub fn embed_features(timeline: &PatientTimeline, tables: &EmbeddingTables) -> Result<Mat> {
    let (dv, dh) = (tables.thread.ncols(), tables.stage.ncols());
    let steps = timeline.steps();
    let mut u = Mat::zeros((steps, dv + dh));
    if timeline.is_empty() {
        return Ok(u);
    }
    for t in 0..steps {
        let (th, st) = (timeline.threads[t].0, timeline.stages[t].0);
        if th >= tables.thread.nrows() {
            return Err(Error::OutOfRange(format!("thread id {th} >= {}", tables.thread.nrows())));
        }
        if st >= tables.stage.nrows() {
            return Err(Error::OutOfRange(format!("stage id {st} >= {}", tables.stage.nrows())));
        }
        u.slice_mut(ndarray::s![t, ..dv]).assign(&tables.thread.row(th));
        u.slice_mut(ndarray::s![t, dv..]).assign(&tables.stage.row(st));
    }
    Ok(u)
}

pub fn reparameterize(params: &GaussianParams, noise: &Array1<f64>) -> Array1<f64> {
    let sigma = params.log_sigma.mapv(|l| l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp());
    &params.mu + &(sigma * noise)
}

/// `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussians(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "KL between Gaussians of different dimension");
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.log_sigma[i], p.log_sigma[i]);
        let var_ratio = (2.0 * (lq - lp)).exp();
        let d = q.mu[i] - p.mu[i];
        kl += lp - lq + 0.5 * (var_ratio + d * d * (-2.0 * lp).exp()) - 0.5;
    }
    kl.max(0.0)
}

/// Negative ELBO for one patient with constants dropped:
/// `Σ_t m_t ½‖u_t − μ_{u,t}‖² + KL(q(x) ‖ N(0, I)) + Σ_t m_t KL(q(z_t) ‖ p(z_t | z_{<t}))`.
pub fn elbo_loss(
    u: &Mat,
    mask: &[bool],
    latents: &LatentParams,
    reconstructions: &[Array1<f64>],
    priors: &[GaussianParams],
) -> Result<f64> {
    let steps = mask.len();
    if u.nrows() != steps || reconstructions.len() != steps || priors.len() != steps || latents.z.len() != steps {
        return Err(Error::Shape(format!(
            "elbo inputs disagree on step count: u {}, mask {steps}, recon {}, priors {}, z {}",
            u.nrows(),
            reconstructions.len(),
            priors.len(),
            latents.z.len()
        )));
    }
    let mut loss = 0.0;
    for t in 0..steps {
        if !mask[t] {
            continue;
        }
        if reconstructions[t].len() != u.ncols() {
            return Err(Error::Shape("reconstruction width differs from feature width".into()));
        }
        let diff = &u.row(t) - &reconstructions[t];
        loss += 0.5 * diff.dot(&diff);
        loss += kl_diag_gaussians(&latents.z[t], &priors[t]);
    }
    if mask.iter().any(|m| *m) {
        loss += kl_diag_gaussians(&latents.x, &GaussianParams::standard(latents.x.dim()));
    }
    Ok(loss)
}

/// The recurrent encoders, prior network and decoder, addressed by
/// parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeNets {
    pub config: VaeConfig,
    pub prior_cell: GruCell,
    pub prior_head: Linear,
    pub z_cell: GruCell,
    pub z_head: Linear,
    pub x_cell: GruCell,
    pub x_head: Linear,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
}

/// Tape handles for a Gaussian over a batch: `rows x dim` each.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl VaeNets {
    pub fn new(config: VaeConfig) -> Self {
        let u = config.feature_dim();
        let h = config.hidden;
        Self {
            prior_cell: GruCell::new("prior.gru", config.z_dim, h),
            prior_head: Linear::new("prior.head", h, 2 * config.z_dim),
            z_cell: GruCell::new("posterior_z.gru", u, h),
            z_head: Linear::new("posterior_z.head", h, 2 * config.z_dim),
            x_cell: GruCell::new("posterior_x.gru", u, h),
            x_head: Linear::new("posterior_x.head", h, 2 * config.x_dim),
            decoder_hidden: Linear::new("decoder.hidden", config.x_dim + config.z_dim, config.decoder_hidden),
            decoder_out: Linear::new("decoder.out", config.decoder_hidden, u),
            config,
        }
    }

    /// Registers embedding tables, prior, z-posterior and decoder; the
    /// x-posterior only when `with_x_encoder`.
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng, n_threads: usize, n_stages: usize, with_x_encoder: bool) {
        let c = &self.config;
        params.insert(THREAD_TABLE, normal_init(rng, (n_threads.max(1), c.thread_dim), 1.0));
        params.insert(STAGE_TABLE, normal_init(rng, (n_stages.max(1), c.stage_dim), 1.0));
        self.prior_cell.init(params, rng);
        self.prior_head.init(params, rng);
        self.z_cell.init(params, rng);
        self.z_head.init(params, rng);
        if with_x_encoder {
            self.x_cell.init(params, rng);
            self.x_head.init(params, rng);
        }
        self.decoder_hidden.init(params, rng);
        self.decoder_out.init(params, rng);
    }

    /// Per-step feature rows for a batch of timelines.
    pub fn embed_batch(&self, tape: &mut Tape, bound: &Bound, timelines: &[&PatientTimeline]) -> Vec<Var> {
        let steps = timelines.first().map_or(0, |t| t.steps());
        (0..steps)
            .map(|t| {
                let pick = |f: &dyn Fn(&PatientTimeline) -> usize| -> Rc<Vec<Option<usize>>> {
                    Rc::new(
                        timelines
                            .iter()
                            .map(|tl| (!tl.is_empty()).then(|| f(tl)))
                            .collect(),
                    )
                };
                let threads = pick(&|tl| tl.threads[t].0);
                let stages = pick(&|tl| tl.stages[t].0);
                let v = tape.gather_rows(bound.var(THREAD_TABLE), threads);
                let h = tape.gather_rows(bound.var(STAGE_TABLE), stages);
                tape.concat_cols(&[v, h])
            })
            .collect()
    }

    fn split_head(&self, tape: &mut Tape, out: Var, dim: usize) -> GaussianVars {
        let mu = tape.slice_cols(out, 0, dim);
        let ls = tape.slice_cols(out, dim, 2 * dim);
        let log_sigma = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        GaussianVars { mu, log_sigma }
    }

    /// `q(x | u_{1:T})`: recurrent pass that freezes on padded steps, then one
    /// affine layer.
    pub fn encode_x(&self, tape: &mut Tape, bound: &Bound, u: &[Var], masks: &[Vec<bool>]) -> GaussianVars {
        let batch = tape.shape(u[0]).0;
        let mut h = self.x_cell.zero_state(tape, batch);
        for (t, ut) in u.iter().enumerate() {
            let keep: Vec<bool> = masks.iter().map(|m| m[t]).collect();
            h = self.x_cell.masked_step(tape, bound, *ut, h, row_mask(&keep, self.config.hidden));
        }
        let out = self.x_head.forward(tape, bound, h);
        self.split_head(tape, out, self.config.x_dim)
    }

    /// `q(z_t | u_{<=t})` for every step.
    pub fn encode_z(&self, tape: &mut Tape, bound: &Bound, u: &[Var]) -> Vec<GaussianVars> {
        let batch = tape.shape(u[0]).0;
        let mut h = self.z_cell.zero_state(tape, batch);
        u.iter()
            .map(|ut| {
                h = self.z_cell.step(tape, bound, *ut, h);
                let out = self.z_head.forward(tape, bound, h);
                self.split_head(tape, out, self.config.z_dim)
            })
            .collect()
    }

    /// `p(z_t | z_{<t})` for every step given the sequence of `z` values;
    /// step 1 is the standard normal.
    pub fn prior(&self, tape: &mut Tape, bound: &Bound, z: &[Var]) -> Vec<GaussianVars> {
        let batch = tape.shape(z[0]).0;
        let dim = self.config.z_dim;
        let mut out = Vec::with_capacity(z.len());
        out.push(GaussianVars {
            mu: tape.leaf(Mat::zeros((batch, dim))),
            log_sigma: tape.leaf(Mat::zeros((batch, dim))),
        });
        let mut h = self.prior_cell.zero_state(tape, batch);
        for zt in &z[..z.len().saturating_sub(1)] {
            h = self.prior_cell.step(tape, bound, *zt, h);
            let head = self.prior_head.forward(tape, bound, h);
            out.push(self.split_head(tape, head, dim));
        }
        out
    }

    pub fn decode(&self, tape: &mut Tape, bound: &Bound, x_cond: Var, z: Var) -> Var {
        let input = tape.concat_cols(&[x_cond, z]);
        let hidden = self.decoder_hidden.forward(tape, bound, input);
        let hidden = tape.tanh(hidden);
        self.decoder_out.forward(tape, bound, hidden)
    }
}

/// `mu + exp(log_sigma) * noise`.
pub fn sample_on_tape(tape: &mut Tape, g: GaussianVars, noise: Rc<Mat>) -> Var {
    let sigma = tape.exp(g.log_sigma);
    let scaled = tape.mul_const(sigma, noise);
    tape.add(g.mu, scaled)
}

/// Elementwise KL terms of `q || p`, shape `rows x dim`.
pub fn kl_on_tape(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Var {
    // lp - lq + ½ (exp(2(lq - lp)) + (mq - mp)² exp(-2 lp)) - ½
    let dl = tape.sub(q.log_sigma, p.log_sigma);
    let two_dl = tape.scale(dl, 2.0);
    let ratio = tape.exp(two_dl);
    let dm = tape.sub(q.mu, p.mu);
    let dm2 = tape.square(dm);
    let neg2lp = tape.scale(p.log_sigma, -2.0);
    let inv_var = tape.exp(neg2lp);
    let quad = tape.mul(dm2, inv_var);
    let inner = tape.add(ratio, quad);
    let half = tape.scale(inner, 0.5);
    let kl = tape.sub(half, dl);
    tape.add_scalar(kl, -0.5)
}

/// Sum of `x` with each row weighted by `weights[row]`.
pub fn row_weighted_sum(tape: &mut Tape, x: Var, weights: &[f64]) -> Var {
    let cols = tape.shape(x).1;
    let w = Rc::new(Mat::from_shape_fn((weights.len(), cols), |(r, _)| weights[r]));
    let wx = tape.mul_const(x, w);
    tape.sum(wx)
}

/// Decomposed negative ELBO for a batch, each term summed over patients.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    pub reconstruction: Var,
    pub kl_x: Option<Var>,
    pub kl_z: Var,
}

/// Builds the batch ELBO terms on the tape. `masks[b][t]` marks real steps;
/// `recon[t]` and `u[t]` are `batch x D_u`.
pub fn elbo_on_tape(
    tape: &mut Tape,
    u: &[Var],
    recon: &[Var],
    masks: &[Vec<bool>],
    z_post: &[GaussianVars],
    z_prior: &[GaussianVars],
    x_post: Option<GaussianVars>,
) -> ElboTerms {
    let steps = u.len();
    let mut rec_terms = Vec::with_capacity(steps);
    let mut kl_terms = Vec::with_capacity(steps);
    for t in 0..steps {
        let w: Vec<f64> = masks.iter().map(|m| if m[t] { 1.0 } else { 0.0 }).collect();
        let d = tape.sub(u[t], recon[t]);
        let d2 = tape.square(d);
        let r = row_weighted_sum(tape, d2, &w);
        rec_terms.push(tape.scale(r, 0.5));
        let kl = kl_on_tape(tape, z_post[t], z_prior[t]);
        kl_terms.push(row_weighted_sum(tape, kl, &w));
    }
    let reconstruction = sum_vars(tape, &rec_terms);
    let kl_z = sum_vars(tape, &kl_terms);
    let kl_x = x_post.map(|q| {
        let rows = tape.shape(q.mu).0;
        let dim = tape.shape(q.mu).1;
        let std = GaussianVars {
            mu: tape.leaf(Mat::zeros((rows, dim))),
            log_sigma: tape.leaf(Mat::zeros((rows, dim))),
        };
        let kl = kl_on_tape(tape, q, std);
        let w: Vec<f64> = masks
            .iter()
            .map(|m| if m.iter().any(|b| *b) { 1.0 } else { 0.0 })
            .collect();
        row_weighted_sum(tape, kl, &w)
    });
    ElboTerms {
        reconstruction,
        kl_x,
        kl_z,
    }
}

pub fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut it = vars.iter();
    let first = *it.next().expect("sum of no terms");
    it.fold(first, |acc, v| tape.add(acc, *v))
}

fn row_to_gaussian(tape: &Tape, g: GaussianVars, row: usize) -> GaussianParams {
    GaussianParams {
        mu: tape.value(g.mu).row(row).to_owned(),
        log_sigma: tape.value(g.log_sigma).row(row).to_owned(),
    }
}

fn rows_to_tape(tape: &mut Tape, rows: &[Array1<f64>]) -> Var {
    let dim = rows.first().map_or(0, |r| r.len());
    let m = Mat::from_shape_fn((rows.len(), dim), |(r, c)| rows[r][c]);
    tape.leaf(m)
}

impl VaeNets {
    /// `p(z_t | z_{<t})` recomputed from scratch for a prefix of `z` values.
    pub fn prior_step(&self, params: &Params, z_prefix: &[Array1<f64>]) -> GaussianParams {
        if z_prefix.is_empty() {
            return GaussianParams::standard(self.config.z_dim);
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut h = self.prior_cell.zero_state(&mut tape, 1);
        for z in z_prefix {
            let zt = rows_to_tape(&mut tape, std::slice::from_ref(z));
            h = self.prior_cell.step(&mut tape, &bound, zt, h);
        }
        let head = self.prior_head.forward(&mut tape, &bound, h);
        let g = self.split_head(&mut tape, head, self.config.z_dim);
        row_to_gaussian(&tape, g, 0)
    }

    /// Posterior parameters of `x` and every `z_t` for one feature sequence.
    pub fn infer_posteriors(&self, params: &Params, u: &Mat, mask: &[bool]) -> LatentParams {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let steps: Vec<Var> = u
            .rows()
            .into_iter()
            .map(|r| tape.leaf(r.to_owned().insert_axis(ndarray::Axis(0))))
            .collect();
        let z = self.encode_z(&mut tape, &bound, &steps);
        let x = self.encode_x(&mut tape, &bound, &steps, &[mask.to_vec()]);
        LatentParams {
            x: row_to_gaussian(&tape, x, 0),
            z: z.into_iter().map(|g| row_to_gaussian(&tape, g, 0)).collect(),
        }
    }

    /// Mean of `u_t` given the conditioned time-invariant code and `z_t`.
    pub fn decode_one(&self, params: &Params, x_cond: &Array1<f64>, z: &Array1<f64>) -> Array1<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = rows_to_tape(&mut tape, std::slice::from_ref(x_cond));
        let zt = rows_to_tape(&mut tape, std::slice::from_ref(z));
        let out = self.decode(&mut tape, &bound, x, zt);
        tape.value(out).row(0).to_owned()
    }
}
