//! Message-passing encoders producing full-graph node embeddings.
//!
//! Every encoder has two propagation layers and a linear final layer, so the
//! embeddings can take either sign before the cosine head.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize, NormalizationKind, NormalizedAdjacency, SparseGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gcn,
    Sgc,
    Sage,
    Gin,
    Appnp,
    Gat,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 6] = [
        BackboneKind::Gcn,
        BackboneKind::Sgc,
        BackboneKind::Sage,
        BackboneKind::Gin,
        BackboneKind::Appnp,
        BackboneKind::Gat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Sgc => "sgc",
            BackboneKind::Sage => "sage",
            BackboneKind::Gin => "gin",
            BackboneKind::Appnp => "appnp",
            BackboneKind::Gat => "gat",
        }
    }

    /// Display name used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            BackboneKind::Gcn => "GCN",
            BackboneKind::Sgc => "SGC",
            BackboneKind::Sage => "GraphSAGE",
            BackboneKind::Gin => "GIN",
            BackboneKind::Appnp => "APPNP",
            BackboneKind::Gat => "GAT",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown backbone {s:?} (expected gcn, sgc, sage, gin, appnp or gat)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub appnp_iterations: usize,
    pub appnp_teleport: f64,
    pub gin_epsilon: f64,
    pub gat_leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 16,
            out_dim: 16,
            appnp_iterations: 10,
            appnp_teleport: 0.1,
            gin_epsilon: 0.0,
            gat_leaky_slope: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("hidden_dim and out_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.appnp_teleport) {
            return Err(Error::config("appnp_teleport must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Graph-derived inputs shared by every episode of a run: normalisations plus
/// the parameter-free first-layer inputs of SGC, GraphSAGE and GIN.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    features: Matrix,
    symmetric: NormalizedAdjacency,
    row_mean: NormalizedAdjacency,
    sum: NormalizedAdjacency,
    sgc_input: Matrix,
    sage_input: Matrix,
    gin_input: Matrix,
}

impl PreparedGraph {
    pub fn new(graph: &SparseGraph, config: &EncoderConfig) -> Self {
        let x = graph.features();
        let symmetric = normalize(graph, NormalizationKind::Symmetric);
        let row_mean = normalize(graph, NormalizationKind::RowMean);
        let sum = normalize(graph, NormalizationKind::Sum);
        let ax = symmetric.matmul_dense(x.view());
        let sgc_input = symmetric.matmul_dense(ax.view());
        let sage_input = ndarray::concatenate(ndarray::Axis(1), &[x.view(), row_mean.matmul_dense(x.view()).view()])
            .expect("same row count");
        let gin_input = x * (1.0 + config.gin_epsilon) + sum.matmul_dense(x.view());
        PreparedGraph {
            features: x.clone(),
            symmetric,
            row_mean,
            sum,
            sgc_input,
            sage_input,
            gin_input,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn symmetric(&self) -> &NormalizedAdjacency {
        &self.symmetric
    }
}

/// Parameter handles of one encoder, in the order they were registered.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub kind: BackboneKind,
    pub config: EncoderConfig,
    params: Vec<ParamId>,
}

fn linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<Vec<ParamId>> {
    let mut ids = vec![store.insert_glorot(format!("{name}.weight"), fan_in, fan_out, rng)?];
    if bias {
        ids.push(store.insert_zeros(format!("{name}.bias"), 1, fan_out)?);
    }
    Ok(ids)
}

/// Registers the encoder's parameters under the `enc.` prefix: Glorot-uniform
/// weights, zero biases.
pub fn init_params(
    kind: BackboneKind,
    feature_dim: usize,
    config: &EncoderConfig,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<Encoder> {
    if feature_dim == 0 {
        return Err(Error::config("feature_dim must be at least 1"));
    }
    config.validate()?;
    let (d, h, o) = (feature_dim, config.hidden_dim, config.out_dim);
    let mut params = Vec::new();
    match kind {
        BackboneKind::Gcn => {
            params.extend(linear(store, "enc.l1", d, h, true, rng)?);
            params.extend(linear(store, "enc.l2", h, o, true, rng)?);
        }
        BackboneKind::Sgc => {
            params.extend(linear(store, "enc.linear", d, o, false, rng)?);
        }
        BackboneKind::Sage => {
            params.extend(linear(store, "enc.l1", 2 * d, h, true, rng)?);
            params.extend(linear(store, "enc.l2", 2 * h, o, true, rng)?);
        }
        BackboneKind::Gin => {
            params.extend(linear(store, "enc.l1.mlp1", d, h, true, rng)?);
            params.extend(linear(store, "enc.l1.mlp2", h, h, true, rng)?);
            params.extend(linear(store, "enc.l2.mlp1", h, h, true, rng)?);
            params.extend(linear(store, "enc.l2.mlp2", h, o, true, rng)?);
        }
        BackboneKind::Appnp => {
            params.extend(linear(store, "enc.mlp1", d, h, true, rng)?);
            params.extend(linear(store, "enc.mlp2", h, o, true, rng)?);
        }
        BackboneKind::Gat => {
            params.push(store.insert_glorot("enc.l1.weight", d, h, rng)?);
            params.push(store.insert_glorot("enc.l1.att", 2 * h, 1, rng)?);
            params.push(store.insert_zeros("enc.l1.bias", 1, h)?);
            params.push(store.insert_glorot("enc.l2.weight", h, o, rng)?);
            params.push(store.insert_glorot("enc.l2.att", 2 * o, 1, rng)?);
            params.push(store.insert_zeros("enc.l2.bias", 1, o)?);
        }
    }
    Ok(Encoder {
        kind,
        config: config.clone(),
        params,
    })
}

impl Encoder {
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Full-graph embedding matrix (`num_nodes × out_dim`) on `tape`.
    pub fn encode<'g>(&self, tape: &mut Tape<'g>, graph: &'g PreparedGraph, store: &ParamStore) -> Result<Var> {
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|&id| tape.param(store, id))
            .collect::<std::result::Result<_, _>>()?;
        let out = match self.kind {
            BackboneKind::Gcn => {
                let xw = tape.matmul_fixed(&graph.features, p[0])?;
                let h = tape.sparse_matmul(&graph.symmetric, xw)?;
                let h = tape.add_row(h, p[1])?;
                let h = tape.relu(h)?;
                let hw = tape.matmul(h, p[2])?;
                let h = tape.sparse_matmul(&graph.symmetric, hw)?;
                tape.add_row(h, p[3])?
            }
            BackboneKind::Sgc => tape.matmul_fixed(&graph.sgc_input, p[0])?,
            BackboneKind::Sage => {
                let h = tape.matmul_fixed(&graph.sage_input, p[0])?;
                let h = tape.add_row(h, p[1])?;
                let h = tape.relu(h)?;
                let agg = tape.sparse_matmul(&graph.row_mean, h)?;
                let cat = tape.concat_cols(&[h, agg])?;
                let h = tape.matmul(cat, p[2])?;
                tape.add_row(h, p[3])?
            }
            BackboneKind::Gin => {
                let h = tape.matmul_fixed(&graph.gin_input, p[0])?;
                let h = tape.add_row(h, p[1])?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, p[2])?;
                let h = tape.add_row(h, p[3])?;
                let h = tape.relu(h)?;
                let agg = tape.sparse_matmul(&graph.sum, h)?;
                let own = tape.scale(h, 1.0 + self.config.gin_epsilon)?;
                let h = tape.add(own, agg)?;
                let h = tape.matmul(h, p[4])?;
                let h = tape.add_row(h, p[5])?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, p[6])?;
                tape.add_row(h, p[7])?
            }
            BackboneKind::Appnp => {
                let h = tape.matmul_fixed(&graph.features, p[0])?;
                let h = tape.add_row(h, p[1])?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, p[2])?;
                let z0 = tape.add_row(h, p[3])?;
                let alpha = self.config.appnp_teleport;
                let teleport = tape.scale(z0, alpha)?;
                let mut z = z0;
                for _ in 0..self.config.appnp_iterations {
                    let prop = tape.sparse_matmul(&graph.symmetric, z)?;
                    let prop = tape.scale(prop, 1.0 - alpha)?;
                    z = tape.add(prop, teleport)?;
                }
                z
            }
            BackboneKind::Gat => {
                let slope = self.config.gat_leaky_slope;
                let h = tape.matmul_fixed(&graph.features, p[0])?;
                let h = tape.graph_attention(h, p[1], &graph.symmetric, slope)?;
                let h = tape.add_row(h, p[2])?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, p[3])?;
                let h = tape.graph_attention(h, p[4], &graph.symmetric, slope)?;
                tape.add_row(h, p[5])?
            }
        };
        Ok(out)
    }
}

/// Embeddings without recording gradients, as a plain matrix.
pub fn embed(encoder: &Encoder, graph: &PreparedGraph, store: &ParamStore) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let out = encoder.encode(&mut tape, graph, store)?;
    Ok(tape.value(out).clone())
}
