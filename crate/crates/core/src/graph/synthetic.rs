//! Stochastic block model with Gaussian class-mean features.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GraphError, SparseGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub nodes_per_class: usize,
    pub feature_dim: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    /// Norm of each class-mean feature vector; noise is unit Gaussian.
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            nodes_per_class: 50,
            feature_dim: 32,
            intra_edge_prob: 0.1,
            inter_edge_prob: 0.01,
            signal_strength: 5.0,
            seed: 7,
        }
    }
}

/// Node `i` belongs to class `i / nodes_per_class`. Draw order is: class
/// means, node features, then edges over pairs `u < v` in row-major order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SparseGraph, GraphError> {
    if spec.num_classes == 0 || spec.nodes_per_class == 0 || spec.feature_dim == 0 {
        return Err(GraphError::Invalid(
            "synthetic graph needs at least one class, node per class and feature".into(),
        ));
    }
    let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
    if !prob_ok(spec.intra_edge_prob) || !prob_ok(spec.inter_edge_prob) {
        return Err(GraphError::Invalid("edge probabilities must lie in [0, 1]".into()));
    }
    if spec.intra_edge_prob < spec.inter_edge_prob {
        return Err(GraphError::Invalid(format!(
            "intra_edge_prob {} is below inter_edge_prob {}",
            spec.intra_edge_prob, spec.inter_edge_prob
        )));
    }
    if !(spec.signal_strength >= 0.0 && spec.signal_strength.is_finite()) {
        return Err(GraphError::Invalid(
            "signal_strength must be finite and nonnegative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let means: Vec<Array1<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
            v * (spec.signal_strength / norm)
        })
        .collect();

    let n = spec.num_classes * spec.nodes_per_class;
    let labels: Vec<usize> = (0..n).map(|u| u / spec.nodes_per_class).collect();
    let mut features = Array2::zeros((n, d));
    for (u, mut row) in features.rows_mut().into_iter().enumerate() {
        let mean = &means[labels[u]];
        for (j, x) in row.iter_mut().enumerate() {
            *x = mean[j] + rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                spec.intra_edge_prob
            } else {
                spec.inter_edge_prob
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    SparseGraph::from_edges(n, &edges, features, labels, spec.num_classes)
}
