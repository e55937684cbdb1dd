//! Immutable graph dataset: CSR topology, dense node features and labels.

mod io;
mod normalize;
mod synthetic;

use std::path::PathBuf;

use ndarray::Array2;

pub use io::{format_g17, load_dataset, save_dataset, DatasetMeta};
pub use normalize::{normalize, NormalizationKind, NormalizedAdjacency};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{}: missing file", path.display())]
    MissingFile { path: PathBuf },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// Undirected graph in CSR form with node features and integer labels.
///
/// Rows are sorted and deduplicated; self-loops are never stored here (they
/// only appear in [`NormalizedAdjacency`]).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    num_classes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from an arbitrary edge list. Edges are symmetrised and
    /// deduplicated; self-loops are dropped.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, GraphError> {
        if features.nrows() != num_nodes {
            return Err(GraphError::Invalid(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                features.nrows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(GraphError::Invalid(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(GraphError::Invalid(format!(
                "label {l} of node {i} is not below num_classes {num_classes}"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(GraphError::Invalid(format!(
                "non-finite feature at node {}",
                pos / features.ncols().max(1)
            )));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            let bad = if u >= num_nodes {
                Some(u)
            } else if v >= num_nodes {
                Some(v)
            } else {
                None
            };
            if let Some(b) = bad {
                return Err(GraphError::Invalid(format!("node index {b} out of range")));
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Ok(SparseGraph {
            num_classes,
            row_offsets,
            col_indices,
            features,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of stored directed arcs (twice the undirected edge count).
    pub fn num_arcs(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|u| self.degree(u)).collect()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Undirected edges with `u < v`, in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// Node ids of every class, in ascending order.
    pub fn nodes_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (u, &c) in self.labels.iter().enumerate() {
            by_class[c].push(u);
        }
        by_class
    }

    /// Relabels nodes so that old node `u` becomes `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(GraphError::Invalid("permutation length mismatch".into()));
        }
        let mut features = Array2::zeros(self.features.raw_dim());
        let mut labels = vec![0; n];
        for u in 0..n {
            features.row_mut(perm[u]).assign(&self.features.row(u));
            labels[perm[u]] = self.labels[u];
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        SparseGraph::from_edges(n, &edges, features, labels, self.num_classes)
    }

    /// Copy of the graph with the given undirected edges removed/added.
    pub fn with_edge_edits(&self, remove: &[(usize, usize)], add: &[(usize, usize)]) -> Result<Self, GraphError> {
        let norm = |(u, v): (usize, usize)| if u < v { (u, v) } else { (v, u) };
        let removed: std::collections::HashSet<_> = remove.iter().copied().map(norm).collect();
        let mut edges: Vec<_> = self.edges().filter(|e| !removed.contains(e)).collect();
        edges.extend_from_slice(add);
        SparseGraph::from_edges(
            self.num_nodes(),
            &edges,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SparseGraph {
        SparseGraph::from_edges(3, &[(0, 1), (1, 2)], Array2::zeros((3, 1)), vec![0, 0, 1], 2).unwrap()
    }

    #[test]
    fn path_graph_arcs_and_degrees() {
        let g = path3();
        assert_eq!(g.num_arcs(), 4);
        assert_eq!(g.degrees(), vec![1, 2, 1]);
        assert_eq!(g.row_offsets().last(), Some(&4));
    }

    #[test]
    fn duplicates_and_self_loops_are_dropped() {
        let g = SparseGraph::from_edges(
            3,
            &[(0, 1), (1, 0), (0, 1), (2, 2)],
            Array2::zeros((3, 2)),
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        assert_eq!(g.num_arcs(), 2);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn out_of_range_node_rejected() {
        let err = SparseGraph::from_edges(3, &[(0, 5)], Array2::zeros((3, 1)), vec![0; 3], 1).unwrap_err();
        assert!(err.to_string().contains("node index 5 out of range"));
    }

    #[test]
    fn bad_label_and_nan_rejected() {
        assert!(SparseGraph::from_edges(2, &[], Array2::zeros((2, 1)), vec![0, 3], 2).is_err());
        let mut x = Array2::zeros((2, 1));
        x[[1, 0]] = f64::NAN;
        assert!(SparseGraph::from_edges(2, &[], x, vec![0, 1], 2).is_err());
    }

    #[test]
    fn adjacency_is_symmetric() {
        let g = SparseGraph::from_edges(5, &[(0, 3), (4, 1), (2, 3)], Array2::zeros((5, 1)), vec![0; 5], 1).unwrap();
        for u in 0..5 {
            for &v in g.neighbors(u) {
                assert!(g.neighbors(v).contains(&u));
            }
        }
    }
}
