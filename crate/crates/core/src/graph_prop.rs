//! Light (linear, transform-free) propagation of time-invariant codes over
//! the symmetric-normalized seeker/helper adjacency, with layer averaging.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::{BipartiteAdjacency, PatientId, RoleIndex};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Weighting of the `L + 1` layer outputs in the final embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAverage {
    /// `1 / (L + 1)` per layer.
    #[default]
    Uniform,
    /// `1 / L` per layer, summed over `l = 0..=L` (`L = 0` uses weight 1).
    OneOverL,
}

impl LayerAverage {
    pub fn weight(self, layers: usize) -> f64 {
        match self {
            LayerAverage::Uniform => 1.0 / (layers as f64 + 1.0),
            LayerAverage::OneOverL => 1.0 / (layers.max(1) as f64),
        }
    }
}

/// `D^{-1/2} A D^{-1/2}` with `0^{-1/2} := 0`.
pub fn normalize_symmetric(a: &CsrMatrix) -> CsrMatrix {
    let inv_sqrt: Vec<f64> = a
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    a.scale_rows_cols(&inv_sqrt, &inv_sqrt)
}

pub fn normalize_adjacency(adj: &BipartiteAdjacency) -> CsrMatrix {
    normalize_symmetric(&adj.matrix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedEmbeddings {
    /// `e^(0) ..= e^(L)`.
    pub per_layer: Vec<Mat>,
    pub averaged: Mat,
}

pub fn propagate(x: &Mat, norm_adj: &CsrMatrix, layers: usize, average: LayerAverage) -> Result<PropagatedEmbeddings> {
    if norm_adj.shape() != (x.nrows(), x.nrows()) {
        return Err(Error::Shape(format!(
            "adjacency {:?} does not match {} embedding rows",
            norm_adj.shape(),
            x.nrows()
        )));
    }
    let mut per_layer = Vec::with_capacity(layers + 1);
    per_layer.push(x.clone());
    for l in 1..=layers {
        let next = norm_adj.mul_dense(&per_layer[l - 1]);
        per_layer.push(next);
    }
    let mut averaged = Mat::zeros(x.dim());
    for e in &per_layer {
        averaged += e;
    }
    averaged *= average.weight(layers);
    Ok(PropagatedEmbeddings { per_layer, averaged })
}

/// Tape version of [`propagate`], returning only the averaged embedding.
pub fn propagate_on_tape(tape: &mut Tape, x: Var, norm_adj: &Rc<CsrMatrix>, layers: usize, average: LayerAverage) -> Var {
    let mut sum = x;
    let mut cur = x;
    for _ in 0..layers {
        cur = tape.spmm(norm_adj.clone(), cur);
        sum = tape.add(sum, cur);
    }
    tape.scale(sum, average.weight(layers))
}

/// Row selections of the `2m`-row embedding for the two roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleViews {
    pub seekers: Vec<PatientId>,
    pub helpers: Vec<PatientId>,
    /// Row of each seeker in the `2m` embedding.
    pub seeker_rows: Vec<usize>,
    /// Row of each helper in the `2m` embedding.
    pub helper_rows: Vec<usize>,
}

impl RoleViews {
    pub fn new(roles: &RoleIndex) -> Self {
        let m = roles.is_seeker.len();
        let seekers = roles.seekers();
        let helpers = roles.helpers();
        let seeker_rows = seekers.iter().map(|p| p.0).collect();
        let helper_rows = helpers.iter().map(|p| m + p.0).collect();
        Self {
            seekers,
            helpers,
            seeker_rows,
            helper_rows,
        }
    }
}

/// Splits `e` (2m rows) into the seeker view `e_p` and helper view `e_q`.
pub fn split_views(e: &Mat, roles: &RoleIndex) -> (Mat, Mat) {
    let views = RoleViews::new(roles);
    let take = |rows: &[usize]| e.select(ndarray::Axis(0), rows);
    (take(&views.seeker_rows), take(&views.helper_rows))
}
