//! Adam over named parameter tensors, with global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::nn::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Mat,
    v: Mat,
    /// Per-element update count, for bias correction.
    steps: ndarray::Array2<u64>,
}

/// Adam with per-element state. Entries whose gradient is exactly zero are
/// skipped entirely, so parameters outside the active graph never move.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

/// Global L2 norm over a set of gradients.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Mat>) -> f64 {
    grads
        .into_iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update. `grads` maps parameter names to gradients;
    /// names absent from the map are left untouched. Returns the gradient
    /// norm before clipping.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Mat>) -> f64 {
        let norm = global_norm(grads.values());
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.config;
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Mat::zeros(p.dim()),
                v: Mat::zeros(p.dim()),
                steps: ndarray::Array2::zeros(p.dim()),
            });
            ndarray::Zip::from(p)
                .and(grad)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(&mut st.steps)
                .for_each(|p, &g, m, v, n| {
                    if g == 0.0 {
                        return;
                    }
                    let g = g * scale;
                    *n += 1;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / (1.0 - b1.powi(*n as i32));
                    let vh = *v / (1.0 - b2.powi(*n as i32));
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = Params::new();
        params.insert("w", array![[1.0, 2.0]]);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        let grads = BTreeMap::from([("w".to_string(), array![[0.5, 0.0]])]);
        adam.step(&mut params, &grads);
        let w = params.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert_eq!(w[[0, 1]], 2.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut params = Params::new();
        params.insert("w", array![[0.0]]);
        let mut adam = Adam::new(AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        });
        let grads = BTreeMap::from([("w".to_string(), array![[100.0]])]);
        assert_eq!(adam.step(&mut params, &grads), 100.0);
        // Adam is scale-free on the first step, so only the sign survives
        assert!(params.get("w").unwrap()[[0, 0]] < 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = Params::new();
        params.insert("w", array![[3.0, -2.0]]);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let g = params.get("w").unwrap() * 2.0;
            adam.step(&mut params, &BTreeMap::from([("w".to_string(), g)]));
        }
        assert!(params.get("w").unwrap().iter().all(|v| v.abs() < 1e-2));
    }
}
