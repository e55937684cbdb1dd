use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::SparseGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    /// `D^{-1/2}(A+I)D^{-1/2}` with degrees counted after adding self-loops.
    Symmetric,
    /// `D^{-1}A`; isolated nodes get an all-zero row.
    RowMean,
    /// Plain `A`.
    Sum,
}

/// Weighted CSR adjacency derived from a [`SparseGraph`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    kind: NormalizationKind,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    weights: Vec<f64>,
}

/// Rows below this many stored arcs are not worth a rayon split.
#[cfg(feature = "parallel")]
const PAR_MIN_ARCS: usize = 1 << 14;

pub fn normalize(graph: &SparseGraph, kind: NormalizationKind) -> NormalizedAdjacency {
    let n = graph.num_nodes();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut weights = Vec::new();
    row_offsets.push(0);
    match kind {
        NormalizationKind::Symmetric => {
            let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / ((graph.degree(u) + 1) as f64).sqrt()).collect();
            for u in 0..n {
                let nbrs = graph.neighbors(u);
                // neighbours are sorted; splice the self-loop into place
                let split = nbrs.partition_point(|&v| v < u);
                for &v in nbrs[..split].iter().chain(std::iter::once(&u)).chain(&nbrs[split..]) {
                    col_indices.push(v);
                    weights.push(inv_sqrt[u] * inv_sqrt[v]);
                }
                row_offsets.push(col_indices.len());
            }
        }
        NormalizationKind::RowMean | NormalizationKind::Sum => {
            for u in 0..n {
                let nbrs = graph.neighbors(u);
                let w = match kind {
                    NormalizationKind::RowMean if !nbrs.is_empty() => 1.0 / nbrs.len() as f64,
                    _ => 1.0,
                };
                col_indices.extend_from_slice(nbrs);
                weights.extend(std::iter::repeat_n(w, nbrs.len()));
                row_offsets.push(col_indices.len());
            }
        }
    }
    NormalizedAdjacency {
        kind,
        row_offsets,
        col_indices,
        weights,
    }
}

impl NormalizedAdjacency {
    pub fn kind(&self) -> NormalizationKind {
        self.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn num_arcs(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(column, weight)` pairs of row `u`.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_offsets[u]..self.row_offsets[u + 1];
        self.col_indices[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Weight of arc `(u, v)`, zero when not stored.
    pub fn weight(&self, u: usize, v: usize) -> f64 {
        let r = self.row_offsets[u]..self.row_offsets[u + 1];
        match self.col_indices[r.clone()].binary_search(&v) {
            Ok(i) => self.weights[r.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut out = Array2::zeros((n, n));
        for u in 0..n {
            for (v, w) in self.row(u) {
                out[[u, v]] += w;
            }
        }
        out
    }

    /// `A · X`, parallel over rows when the `parallel` feature is on and the
    /// graph is large enough.
    pub fn matmul_dense(&self, x: ArrayView2<f64>) -> Array2<f64> {
        #[cfg(feature = "parallel")]
        if self.num_arcs() >= PAR_MIN_ARCS {
            return self.matmul_dense_parallel(x);
        }
        self.matmul_dense_sequential(x)
    }

    pub fn matmul_dense_sequential(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.num_nodes(), "sparse product row mismatch");
        let mut out = Array2::zeros((self.num_nodes(), x.ncols()));
        for (u, mut out_row) in out.rows_mut().into_iter().enumerate() {
            for (v, w) in self.row(u) {
                out_row.scaled_add(w, &x.row(v));
            }
        }
        out
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_dense_parallel(&self, x: ArrayView2<f64>) -> Array2<f64> {
        use ndarray::parallel::prelude::*;
        use ndarray::Axis;
        assert_eq!(x.nrows(), self.num_nodes(), "sparse product row mismatch");
        let mut out = Array2::zeros((self.num_nodes(), x.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(u, mut out_row)| {
                for (v, w) in self.row(u) {
                    out_row.scaled_add(w, &x.row(v));
                }
            });
        out
    }

    /// `Aᵀ · G`, used by the backward pass of the sparse product.
    pub fn transpose_matmul_dense(&self, g: ArrayView2<f64>) -> Array2<f64> {
        if self.kind != NormalizationKind::RowMean {
            // symmetric and sum weights are symmetric matrices
            return self.matmul_dense(g);
        }
        let mut out = Array2::zeros((self.num_nodes(), g.ncols()));
        for u in 0..self.num_nodes() {
            for (v, w) in self.row(u) {
                out.row_mut(v).scaled_add(w, &g.row(u));
            }
        }
        out
    }
}
