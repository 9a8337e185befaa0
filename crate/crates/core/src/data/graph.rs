use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{PatientId, ThreadId};
use crate::sparse::CsrMatrix;

/// One element of the seeker/helper pair set, with the discretized step of
/// the interaction on each side's timeline (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPair {
    pub seeker: PatientId,
    pub helper: PatientId,
    pub thread: ThreadId,
    pub timestamp: i64,
    pub seeker_step: usize,
    pub helper_step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleIndex {
    pub is_seeker: Vec<bool>,
    pub is_helper: Vec<bool>,
}

impl RoleIndex {
    pub fn from_pairs(n_patients: usize, pairs: &[SupportPair]) -> Self {
        let mut roles = RoleIndex {
            is_seeker: vec![false; n_patients],
            is_helper: vec![false; n_patients],
        };
        for p in pairs {
            roles.is_seeker[p.seeker.0] = true;
            roles.is_helper[p.helper.0] = true;
        }
        roles
    }

    pub fn seekers(&self) -> Vec<PatientId> {
        flagged(&self.is_seeker)
    }

    pub fn helpers(&self) -> Vec<PatientId> {
        flagged(&self.is_helper)
    }
}

fn flagged(flags: &[bool]) -> Vec<PatientId> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, f)| **f)
        .map(|(i, _)| PatientId(i))
        .collect()
}

/// Cumulative snapshots of seeker→helper edges. The snapshot at step `t`
/// holds every pair whose seeker-side step is below `t`, so `E_t ⊆ E_{t+1}`
/// and `E_T` contains every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicSupportGraph {
    pub n_patients: usize,
    pub steps: usize,
    /// Chronologically sorted.
    pub pairs: Vec<SupportPair>,
    pub roles: RoleIndex,
}

impl DynamicSupportGraph {
    pub fn new(n_patients: usize, steps: usize, mut pairs: Vec<SupportPair>) -> Self {
        pairs.sort_by_key(|p| (p.timestamp, p.seeker, p.helper, p.thread));
        let roles = RoleIndex::from_pairs(n_patients, &pairs);
        Self {
            n_patients,
            steps,
            pairs,
            roles,
        }
    }

    /// Sub-graph over a chronological slice of the pairs.
    pub fn restrict(&self, range: Range<usize>) -> Self {
        Self::new(self.n_patients, self.steps, self.pairs[range].to_vec())
    }

    /// Distinct `(seeker, helper)` edges of snapshot `t` (1-based).
    pub fn snapshot(&self, t: usize) -> BTreeSet<(PatientId, PatientId)> {
        assert!((1..=self.steps).contains(&t), "snapshot step {t} outside 1..={}", self.steps);
        self.pairs
            .iter()
            .filter(|p| p.seeker_step < t)
            .map(|p| (p.seeker, p.helper))
            .collect()
    }

    pub fn edges(&self) -> BTreeSet<(PatientId, PatientId)> {
        self.pairs.iter().map(|p| (p.seeker, p.helper)).collect()
    }
}

/// Block adjacency `[[0, R], [Rᵀ, 0]]` over `2m` nodes: rows `0..m` are the
/// seeker side, rows `m..2m` the helper side.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteAdjacency {
    pub n_patients: usize,
    pub interaction: CsrMatrix,
    pub matrix: CsrMatrix,
    pub degree: Vec<f64>,
}

impl BipartiteAdjacency {
    pub fn from_edges(n_patients: usize, edges: &BTreeSet<(PatientId, PatientId)>) -> Self {
        let m = n_patients;
        let r: Vec<_> = edges.iter().map(|(s, h)| (s.0, h.0, 1.0)).collect();
        let a: Vec<_> = edges
            .iter()
            .flat_map(|(s, h)| [(s.0, m + h.0, 1.0), (m + h.0, s.0, 1.0)])
            .collect();
        let interaction = CsrMatrix::from_triplets(m, m, &r);
        let matrix = CsrMatrix::from_triplets(2 * m, 2 * m, &a);
        let degree = matrix.row_sums();
        Self {
            n_patients,
            interaction,
            matrix,
            degree,
        }
    }
}

/// Adjacency of snapshot `at_step` (1-based, `1..=T`).
pub fn build_adjacency(graph: &DynamicSupportGraph, at_step: usize) -> BipartiteAdjacency {
    BipartiteAdjacency::from_edges(graph.n_patients, &graph.snapshot(at_step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(seeker: usize, helper: usize, step: usize) -> SupportPair {
        SupportPair {
            seeker: PatientId(seeker),
            helper: PatientId(helper),
            thread: ThreadId(0),
            timestamp: step as i64,
            seeker_step: step,
            helper_step: step,
        }
    }

    #[test]
    fn single_interaction_adjacency() {
        let g = DynamicSupportGraph::new(2, 1, vec![pair(0, 1, 0)]);
        let adj = build_adjacency(&g, 1);
        assert_eq!(
            adj.interaction.to_dense(),
            ndarray::array![[0.0, 1.0], [0.0, 0.0]]
        );
        let a = adj.matrix.to_dense();
        assert_eq!(a.dim(), (4, 4));
        assert_eq!(a.sum(), 2.0);
        assert_eq!(a[[0, 3]], 1.0);
        assert_eq!(a[[3, 0]], 1.0);
    }

    #[test]
    fn empty_snapshot_is_zero() {
        let g = DynamicSupportGraph::new(3, 2, vec![pair(0, 1, 1)]);
        let adj = build_adjacency(&g, 1);
        assert_eq!(adj.matrix.nnz(), 0);
        assert!(adj.degree.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn seeker_degree_counts_helpers() {
        let g = DynamicSupportGraph::new(3, 1, vec![pair(0, 1, 0), pair(0, 2, 0), pair(0, 2, 0)]);
        let adj = build_adjacency(&g, 1);
        let r = adj.interaction.to_dense();
        assert_eq!(r.row(0).to_vec(), vec![0.0, 1.0, 1.0]);
        assert_eq!(adj.degree[0], 2.0);
        assert_eq!(adj.degree[3 + 1], 1.0);
        assert_eq!(adj.degree[3 + 2], 1.0);
    }

    #[test]
    fn snapshots_are_cumulative_and_symmetric() {
        let pairs = vec![pair(0, 1, 0), pair(2, 1, 1), pair(1, 0, 2), pair(2, 0, 2)];
        let g = DynamicSupportGraph::new(3, 3, pairs);
        for t in 1..3 {
            assert!(g.snapshot(t).is_subset(&g.snapshot(t + 1)));
        }
        assert_eq!(g.snapshot(3), g.edges());
        let a = build_adjacency(&g, 3).matrix.to_dense();
        assert_eq!(a, a.t());
        assert!(g.roles.is_seeker[1] && g.roles.is_helper[1]);
    }
}
