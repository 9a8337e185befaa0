//! Flat `key = value` run configuration covering data, generation,
//! training and evaluation settings.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::to_text`] writes every key, so an echoed file
//! reproduces a run exactly.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::graph_prop::LayerAverage;
use crate::model::Ablation;
use crate::objectives::ConstraintMode;
use crate::synth::GeneratorConfig;
use crate::trainer::TrainConfig;

/// Every key with its meaning. Defaults are those of [`RunConfig::default`].
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "RNG seed for generation and training"),
    ("steps", "discrete steps per patient timeline"),
    ("seniority_weight_threads", "weight of the distinct-thread factor in seniority"),
    ("seniority_weight_stages", "weight of the distinct-stage factor in seniority"),
    ("seniority_weight_tenure", "weight of the tenure factor in seniority"),
    ("data_epoch", "earliest admissible timestamp (epoch seconds)"),
    ("patients", "generator: number of patients"),
    ("threads", "generator: number of threads"),
    ("stages", "generator: number of health stages"),
    ("interactions", "generator: number of interactions"),
    ("seniority_gap", "generator: minimum helper-over-seeker seniority of planted pairs"),
    ("noise_rate", "generator: probability that an interaction ignores seniority"),
    ("seekers", "generator: seeker pool size, or `auto`"),
    ("helpers", "generator: helper pool size, or `auto`"),
    ("batch_size", "triplets per batch"),
    ("learning_rate", "Adam step size"),
    ("epochs", "maximum training epochs"),
    ("patience", "early-stopping patience in epochs (0 disables)"),
    ("clip_norm", "global gradient-norm cap, or `none`"),
    ("alpha", "weight of the variational loss"),
    ("gamma", "weight of the smoothness loss"),
    ("lambda", "weight of the ranking loss"),
    ("beta", "weight of the monotonic regularizer plus seniority constraint"),
    ("ablation", "model variant: full, w_vae or wo_senior"),
    ("train_fraction", "chronological share of interactions used for training"),
    ("val_fraction", "chronological share used for validation"),
    ("val_k", "cutoff of the validation NDCG used for early stopping"),
    ("layers", "graph propagation layers"),
    ("layer_average", "layer weighting: uniform (1/(L+1)) or one_over_l (1/L)"),
    ("constraint_mode", "seniority constraint: hinge or raw"),
    ("graph_conditioning", "aggregate x over the step's snapshot before decoding"),
    ("thread_dim", "thread embedding size"),
    ("stage_dim", "stage embedding size"),
    ("x_dim", "time-invariant latent size"),
    ("z_dim", "time-varying latent size"),
    ("hidden", "recurrent hidden size"),
    ("decoder_hidden", "decoder hidden size"),
    ("ks", "comma-separated evaluation cutoffs"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            ks: crate::eval::DEFAULT_KS.to_vec(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let g = &mut self.generator;
        match key {
            "seed" => {
                let s: u64 = parse(key, v)?;
                g.seed = s;
                t.seed = s;
            }
            "steps" => {
                let s = parse(key, v)?;
                self.data.steps = s;
                g.steps = s;
            }
            "seniority_weight_threads" => self.data.seniority_weights.threads = parse(key, v)?,
            "seniority_weight_stages" => self.data.seniority_weights.stages = parse(key, v)?,
            "seniority_weight_tenure" => self.data.seniority_weights.tenure = parse(key, v)?,
            "data_epoch" => self.data.epoch = parse(key, v)?,
            "patients" => g.n_patients = parse(key, v)?,
            "threads" => g.n_threads = parse(key, v)?,
            "stages" => g.n_stages = parse(key, v)?,
            "interactions" => g.n_interactions = parse(key, v)?,
            "seniority_gap" => g.seniority_gap = parse(key, v)?,
            "noise_rate" => g.noise_rate = parse(key, v)?,
            "seekers" => g.n_seekers = parse_auto(key, v)?,
            "helpers" => g.n_helpers = parse_auto(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "clip_norm" => {
                t.clip_norm = match v {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "alpha" => t.weights.alpha = parse(key, v)?,
            "gamma" => t.weights.gamma = parse(key, v)?,
            "lambda" => t.weights.lambda = parse(key, v)?,
            "beta" => t.weights.beta = parse(key, v)?,
            "ablation" => t.model.ablation = v.parse::<Ablation>()?,
            "train_fraction" => t.train_fraction = parse(key, v)?,
            "val_fraction" => t.val_fraction = parse(key, v)?,
            "val_k" => t.val_k = parse(key, v)?,
            "layers" => t.model.layers = parse(key, v)?,
            "layer_average" => {
                t.model.layer_average = match v {
                    "uniform" => LayerAverage::Uniform,
                    "one_over_l" => LayerAverage::OneOverL,
                    _ => return Err(Error::InvalidConfig(format!("`{key}`: expected uniform or one_over_l, got `{v}`"))),
                }
            }
            "constraint_mode" => {
                t.model.constraint_mode = match v {
                    "hinge" => ConstraintMode::Hinge,
                    "raw" => ConstraintMode::Raw,
                    _ => return Err(Error::InvalidConfig(format!("`{key}`: expected hinge or raw, got `{v}`"))),
                }
            }
            "graph_conditioning" => t.model.vae.graph_conditioning = parse(key, v)?,
            "thread_dim" => t.model.vae.thread_dim = parse(key, v)?,
            "stage_dim" => t.model.vae.stage_dim = parse(key, v)?,
            "x_dim" => t.model.vae.x_dim = parse(key, v)?,
            "z_dim" => t.model.vae.z_dim = parse(key, v)?,
            "hidden" => t.model.vae.hidden = parse(key, v)?,
            "decoder_hidden" => t.model.vae.decoder_hidden = parse(key, v)?,
            "ks" => {
                let ks: Vec<usize> = v.split(',').map(|k| parse(key, k.trim())).collect::<Result<_>>()?;
                if ks.is_empty() || ks.contains(&0) {
                    return Err(Error::InvalidConfig("`ks` needs cutoffs >= 1".into()));
                }
                self.ks = ks;
            }
            other => return Err(Error::InvalidConfig(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let g = &self.generator;
        let w = &self.data.seniority_weights;
        Some(match key {
            "seed" => t.seed.to_string(),
            "steps" => self.data.steps.to_string(),
            "seniority_weight_threads" => w.threads.to_string(),
            "seniority_weight_stages" => w.stages.to_string(),
            "seniority_weight_tenure" => w.tenure.to_string(),
            "data_epoch" => self.data.epoch.to_string(),
            "patients" => g.n_patients.to_string(),
            "threads" => g.n_threads.to_string(),
            "stages" => g.n_stages.to_string(),
            "interactions" => g.n_interactions.to_string(),
            "seniority_gap" => g.seniority_gap.to_string(),
            "noise_rate" => g.noise_rate.to_string(),
            "seekers" => show_auto(g.n_seekers),
            "helpers" => show_auto(g.n_helpers),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "epochs" => t.epochs.to_string(),
            "patience" => t.patience.to_string(),
            "clip_norm" => t.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
            "alpha" => t.weights.alpha.to_string(),
            "gamma" => t.weights.gamma.to_string(),
            "lambda" => t.weights.lambda.to_string(),
            "beta" => t.weights.beta.to_string(),
            "ablation" => t.model.ablation.to_string(),
            "train_fraction" => t.train_fraction.to_string(),
            "val_fraction" => t.val_fraction.to_string(),
            "val_k" => t.val_k.to_string(),
            "layers" => t.model.layers.to_string(),
            "layer_average" => match t.model.layer_average {
                LayerAverage::Uniform => "uniform".into(),
                LayerAverage::OneOverL => "one_over_l".into(),
            },
            "constraint_mode" => match t.model.constraint_mode {
                ConstraintMode::Hinge => "hinge".into(),
                ConstraintMode::Raw => "raw".into(),
            },
            "graph_conditioning" => t.model.vae.graph_conditioning.to_string(),
            "thread_dim" => t.model.vae.thread_dim.to_string(),
            "stage_dim" => t.model.vae.stage_dim.to_string(),
            "x_dim" => t.model.vae.x_dim.to_string(),
            "z_dim" => t.model.vae.z_dim.to_string(),
            "hidden" => t.model.vae.hidden.to_string(),
            "decoder_hidden" => t.model.vae.decoder_hidden.to_string(),
            "ks" => self.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key, one per line, in documented order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("documented key")))
            .collect()
    }
}
