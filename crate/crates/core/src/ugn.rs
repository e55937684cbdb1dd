//! Uncertainty head: per-query class graphs, a learned standard deviation per
//! (query, class) pair, and Monte-Carlo effective similarity.
//!
//! Shapes, with `Q` queries, `n` classes and `L` partitions:
//!
//! * relational features `F`: `(Q·n) × L`, row `x·n + j` holds the partitioned
//!   dot products between query `x` and prototype `j`;
//! * class graphs: `(Q·n) × n`, one row-stochastic `n × n` block per query;
//! * sigma: `Q × n`, strictly positive.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Network used to map class graphs to standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaGnn {
    Gcn,
    Gat,
}

impl fmt::Display for SigmaGnn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaGnn::Gcn => "gcn",
            SigmaGnn::Gat => "gat",
        })
    }
}

impl FromStr for SigmaGnn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(SigmaGnn::Gcn),
            "gat" => Ok(SigmaGnn::Gat),
            _ => Err(format!("unknown sigma network {s:?} (expected gcn or gat)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UgnConfig {
    /// Number of equal slices `L` the embeddings are cut into.
    pub partitions: usize,
    pub sigma_hidden: usize,
    pub sigma_floor: f64,
    pub sigma_gnn: SigmaGnn,
    pub gat_leaky_slope: f64,
}

impl Default for UgnConfig {
    fn default() -> Self {
        UgnConfig {
            partitions: 8,
            sigma_hidden: 16,
            sigma_floor: 1e-4,
            sigma_gnn: SigmaGnn::Gcn,
            gat_leaky_slope: 0.2,
        }
    }
}

impl UgnConfig {
    pub fn validate(&self, embedding_dim: usize) -> Result<()> {
        if self.partitions == 0 || !embedding_dim.is_multiple_of(self.partitions) {
            return Err(Error::config(format!(
                "partition count L={} must divide the embedding dimension {embedding_dim}",
                self.partitions
            )));
        }
        if self.sigma_hidden == 0 {
            return Err(Error::config("sigma_hidden must be positive"));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::config("sigma_floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    weight: ParamId,
    bias: ParamId,
    att: Option<(ParamId, ParamId)>,
}

/// Parameter handles of the head, registered under the `ugn.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct UgnHead {
    pub config: UgnConfig,
    phi: (ParamId, ParamId),
    phi_prime: (ParamId, ParamId),
    layers: [LayerIds; 2],
}

/// Weight, bias and (GAT only) the two attention vectors of a sigma layer.
type LayerVars = (Var, Var, Option<(Var, Var)>);

/// Head parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct UgnVars {
    phi: (Var, Var),
    phi_prime: (Var, Var),
    layers: [LayerVars; 2],
}

/// Raw pairwise scores and their row-softmax normalisation.
#[derive(Clone, Copy, Debug)]
pub struct ClassGraphs {
    pub raw: Var,
    pub normalized: Var,
}

impl UgnHead {
    pub fn init(config: &UgnConfig, embedding_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate(embedding_dim)?;
        let l = config.partitions;
        let h = config.sigma_hidden;
        let phi = (
            store.insert_glorot("ugn.phi.weight", l, l, rng)?,
            store.insert_zeros("ugn.phi.bias", 1, l)?,
        );
        let phi_prime = (
            store.insert_glorot("ugn.phi_prime.weight", l, l, rng)?,
            store.insert_zeros("ugn.phi_prime.bias", 1, l)?,
        );
        let gat = config.sigma_gnn == SigmaGnn::Gat;
        let mut layer = |name: &str, fan_in: usize, fan_out: usize| -> Result<LayerIds> {
            let weight = store.insert_glorot(format!("ugn.{name}.weight"), fan_in, fan_out, rng)?;
            let att = if gat {
                Some((
                    store.insert_glorot(format!("ugn.{name}.att_self"), fan_out, 1, rng)?,
                    store.insert_glorot(format!("ugn.{name}.att_nbr"), fan_out, 1, rng)?,
                ))
            } else {
                None
            };
            let bias = store.insert_zeros(format!("ugn.{name}.bias"), 1, fan_out)?;
            Ok(LayerIds { weight, bias, att })
        };
        let layers = [layer("sigma1", l, h)?, layer("sigma2", h, 1)?];
        Ok(UgnHead {
            config: config.clone(),
            phi,
            phi_prime,
            layers,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.phi.0, self.phi.1, self.phi_prime.0, self.phi_prime.1];
        for l in &self.layers {
            v.push(l.weight);
            if let Some((a, b)) = l.att {
                v.push(a);
                v.push(b);
            }
            v.push(l.bias);
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape<'_>, store: &ParamStore) -> Result<UgnVars> {
        let mut p = |id| tape.param(store, id);
        let phi = (p(self.phi.0)?, p(self.phi.1)?);
        let phi_prime = (p(self.phi_prime.0)?, p(self.phi_prime.1)?);
        let mut layer = |l: &LayerIds| -> Result<LayerVars> {
            let att = match l.att {
                Some((a, b)) => Some((p(a)?, p(b)?)),
                None => None,
            };
            Ok((p(l.weight)?, p(l.bias)?, att))
        };
        let layers = [layer(&self.layers[0])?, layer(&self.layers[1])?];
        Ok(UgnVars { phi, phi_prime, layers })
    }

    /// Standard deviations (`Q × n`) and effective class probabilities for a
    /// block of queries against prototypes. `mu` is the scaled cosine block.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        store: &ParamStore,
        queries: Var,
        protos: Var,
        mu: Var,
        noise: Array3<f64>,
    ) -> Result<(Var, Var)> {
        let vars = self.bind(tape, store)?;
        let way = protos.rows();
        let f = relational_features(tape, queries, protos, self.config.partitions)?;
        let graphs = edge_weights(tape, f, way, &vars)?;
        let sigma = predict_sigma(tape, graphs, f, way, &vars, &self.config)?;
        let eff = effective_similarity(tape, mu, sigma, noise)?;
        Ok((sigma, eff))
    }
}

/// Partitioned dot products: row `x·n + j`, column `l` is
/// `⟨slice_l(query_x), slice_l(proto_j)⟩` with contiguous slices of width
/// `dim / partitions`.
pub fn relational_features(tape: &mut Tape<'_>, queries: Var, protos: Var, partitions: usize) -> Result<Var> {
    let dim = queries.cols();
    if protos.cols() != dim {
        return Err(Error::config(format!(
            "query dimension {dim} differs from prototype dimension {}",
            protos.cols()
        )));
    }
    if partitions == 0 || !dim.is_multiple_of(partitions) {
        return Err(Error::config(format!(
            "partition count L={partitions} must divide the embedding dimension {dim}"
        )));
    }
    let (q, n) = (queries.rows(), protos.rows());
    let q_idx: Vec<usize> = (0..q).flat_map(|x| std::iter::repeat_n(x, n)).collect();
    let c_idx: Vec<usize> = (0..q).flat_map(|_| 0..n).collect();
    let q_rep = tape.gather_rows(queries, &q_idx)?;
    let c_rep = tape.gather_rows(protos, &c_idx)?;
    let prod = tape.mul(q_rep, c_rep)?;
    let width = dim / partitions;
    let pool = Array2::from_shape_fn((dim, partitions), |(d, l)| if d / width == l { 1.0 } else { 0.0 });
    let pool = tape.constant(pool)?;
    Ok(tape.matmul(prod, pool)?)
}

fn affine(tape: &mut Tape<'_>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    Ok(tape.add_row(h, b)?)
}

/// Pairwise class scores `φ′(F_x) φ(F_x)ᵀ` per query, then row softmax.
pub fn edge_weights(tape: &mut Tape<'_>, features: Var, way: usize, vars: &UgnVars) -> Result<ClassGraphs> {
    let left = affine(tape, features, vars.phi_prime)?;
    let right = affine(tape, features, vars.phi)?;
    let raw = tape.block_matmul_nt(left, right, way)?;
    let normalized = tape.row_softmax(raw)?;
    Ok(ClassGraphs { raw, normalized })
}

/// Attention propagation over the dense per-query class graphs, with the
/// pairwise scores added to the attention logits.
fn attention_layer(
    tape: &mut Tape<'_>,
    x: Var,
    way: usize,
    graphs: ClassGraphs,
    (w, b, att): (Var, Var, Option<(Var, Var)>),
    slope: f64,
) -> Result<Var> {
    let (a_self, a_nbr) = att.expect("attention parameters for the gat sigma network");
    let xw = tape.matmul(x, w)?;
    let s = tape.matmul(xw, a_self)?;
    let t = tape.matmul(xw, a_nbr)?;
    let ones = tape.constant(Array2::ones((x.rows(), 1)))?;
    let left = tape.concat_cols(&[s, ones])?;
    let right = tape.concat_cols(&[ones, t])?;
    let logits = tape.block_matmul_nt(left, right, way)?;
    let logits = tape.leaky_relu(logits, slope)?;
    let logits = tape.add(logits, graphs.raw)?;
    let alpha = tape.row_softmax(logits)?;
    let h = tape.block_matmul(alpha, xw, way)?;
    Ok(tape.add_row(h, b)?)
}

/// Two propagation layers over the class graphs, then
/// `softplus(·) + sigma_floor`; returns a `Q × n` block.
pub fn predict_sigma(
    tape: &mut Tape<'_>,
    graphs: ClassGraphs,
    features: Var,
    way: usize,
    vars: &UgnVars,
    config: &UgnConfig,
) -> Result<Var> {
    let raw = match config.sigma_gnn {
        SigmaGnn::Gcn => {
            let [(w1, b1, _), (w2, b2, _)] = vars.layers;
            let agg = tape.block_matmul(graphs.normalized, features, way)?;
            let h = affine(tape, agg, (w1, b1))?;
            let h = tape.relu(h)?;
            let agg = tape.block_matmul(graphs.normalized, h, way)?;
            affine(tape, agg, (w2, b2))?
        }
        SigmaGnn::Gat => {
            let h = attention_layer(tape, features, way, graphs, vars.layers[0], config.gat_leaky_slope)?;
            let h = tape.relu(h)?;
            attention_layer(tape, h, way, graphs, vars.layers[1], config.gat_leaky_slope)?
        }
    };
    let sp = tape.softplus(raw)?;
    let sigma = tape.add_scalar(sp, config.sigma_floor)?;
    Ok(tape.reshape(sigma, features.rows() / way, way)?)
}

/// Standard normal draws of shape `(rows, samples, classes)`, generated in
/// that nesting order.
pub fn sample_noise(rows: usize, samples: usize, classes: usize, rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn((rows, samples, classes), || rng.sample(StandardNormal))
}

/// Mean over samples of `softmax(mu + sigma ⊙ ε_t)`; rows sum to one.
pub fn effective_similarity(tape: &mut Tape<'_>, mu: Var, sigma: Var, noise: Array3<f64>) -> Result<Var> {
    Ok(tape.mc_softmax_mean(mu, sigma, noise)?)
}

/// Negative log of the effective probability of the true class.
pub fn ugn_loss(tape: &mut Tape<'_>, effective: Var, labels: &[usize]) -> Result<Var> {
    crate::metric::nll_loss(tape, effective, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn head(cfg: &UgnConfig, dim: usize) -> (UgnHead, ParamStore) {
        let mut store = ParamStore::new();
        let h = UgnHead::init(cfg, dim, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (h, store)
    }

    #[test]
    fn full_partition_is_entrywise_product() {
        let (q, c) = (random(2, 4, 1), random(3, 4, 2));
        let mut t = Tape::new();
        let (qv, cv) = (t.constant(q.clone()).unwrap(), t.constant(c.clone()).unwrap());
        let f = relational_features(&mut t, qv, cv, 4).unwrap();
        for x in 0..2 {
            for j in 0..3 {
                let want = &q.row(x) * &c.row(j);
                assert_eq!(t.value(f).row(x * 3 + j), want);
            }
        }
    }

    #[test]
    fn single_partition_is_dot_product() {
        let (q, c) = (random(2, 6, 3), random(3, 6, 4));
        let mut t = Tape::new();
        let (qv, cv) = (t.constant(q.clone()).unwrap(), t.constant(c.clone()).unwrap());
        let f = relational_features(&mut t, qv, cv, 1).unwrap();
        for x in 0..2 {
            for j in 0..3 {
                assert!((t.value(f)[[x * 3 + j, 0]] - q.row(x).dot(&c.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partitions_sum_to_dot_product() {
        let (q, c) = (random(3, 16, 5), random(5, 16, 6));
        let mut t = Tape::new();
        let (qv, cv) = (t.constant(q.clone()).unwrap(), t.constant(c.clone()).unwrap());
        let f = relational_features(&mut t, qv, cv, 4).unwrap();
        for x in 0..3 {
            for j in 0..5 {
                let total: f64 = t.value(f).row(x * 5 + j).sum();
                assert!((total - q.row(x).dot(&c.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_partition_count_is_config_error() {
        let mut t = Tape::new();
        let q = t.constant(random(1, 16, 0)).unwrap();
        let c = t.constant(random(2, 16, 1)).unwrap();
        assert!(matches!(relational_features(&mut t, q, c, 5), Err(Error::Config(_))));
        assert!(UgnConfig {
            partitions: 32,
            ..Default::default()
        }
        .validate(16)
        .is_err());
    }

    fn set(store: &mut ParamStore, name: &str, v: Array2<f64>) {
        let id = store.get(name).unwrap();
        *store.value_mut(id) = v;
    }

    #[test]
    fn single_class_graph_is_one() {
        let cfg = UgnConfig {
            partitions: 2,
            ..Default::default()
        };
        let (h, store) = head(&cfg, 4);
        let mut t = Tape::new();
        let vars = h.bind(&mut t, &store).unwrap();
        let f = t.constant(random(3, 2, 9)).unwrap();
        let g = edge_weights(&mut t, f, 1, &vars).unwrap();
        assert_eq!(t.value(g.normalized), &Array2::<f64>::ones((3, 1)));
    }

    #[test]
    fn identity_maps_with_orthogonal_rows() {
        let cfg = UgnConfig {
            partitions: 3,
            ..Default::default()
        };
        let (h, mut store) = head(&cfg, 3);
        set(&mut store, "ugn.phi.weight", Array2::eye(3));
        set(&mut store, "ugn.phi_prime.weight", Array2::eye(3));
        let mut t = Tape::new();
        let vars = h.bind(&mut t, &store).unwrap();
        let f = t
            .constant(array![[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
            .unwrap();
        let g = edge_weights(&mut t, f, 3, &vars).unwrap();
        assert_eq!(t.value(g.raw), &(Array2::<f64>::eye(3) * 4.0));
        let (e4, z) = (4f64.exp(), 4f64.exp() + 2.0);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { e4 / z } else { 1.0 / z };
                assert!((t.value(g.normalized)[[i, j]] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn raw_scores_match_dense_products() {
        let cfg = UgnConfig {
            partitions: 4,
            ..Default::default()
        };
        let (h, mut store) = head(&cfg, 8);
        set(&mut store, "ugn.phi.bias", random(1, 4, 10));
        set(&mut store, "ugn.phi_prime.bias", random(1, 4, 11));
        let fm = random(2 * 3, 4, 12);
        let mut t = Tape::new();
        let vars = h.bind(&mut t, &store).unwrap();
        let f = t.constant(fm.clone()).unwrap();
        let g = edge_weights(&mut t, f, 3, &vars).unwrap();
        let p = |n: &str| store.value(store.get(n).unwrap()).clone();
        for b in 0..2 {
            let fb = fm.slice(ndarray::s![b * 3..(b + 1) * 3, ..]);
            let left = fb.dot(&p("ugn.phi_prime.weight")) + p("ugn.phi_prime.bias");
            let right = fb.dot(&p("ugn.phi.weight")) + p("ugn.phi.bias");
            let want = left.dot(&right.t());
            let got = t.value(g.raw).slice(ndarray::s![b * 3..(b + 1) * 3, ..]).to_owned();
            assert!(want.iter().zip(got.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            for row in t.value(g.normalized).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_sigma_network_gives_ln2_plus_floor() {
        let cfg = UgnConfig {
            partitions: 2,
            ..Default::default()
        };
        let (h, mut store) = head(&cfg, 4);
        set(&mut store, "ugn.sigma1.weight", Array2::zeros((2, 16)));
        set(&mut store, "ugn.sigma2.weight", Array2::zeros((16, 1)));
        let mut t = Tape::new();
        let vars = h.bind(&mut t, &store).unwrap();
        let f = t.constant(random(2 * 5, 2, 3)).unwrap();
        let g = edge_weights(&mut t, f, 5, &vars).unwrap();
        let s = predict_sigma(&mut t, g, f, 5, &vars, &cfg).unwrap();
        assert_eq!(t.value(s).dim(), (2, 5));
        for v in t.value(s).iter() {
            assert!((v - (2f64.ln() + 1e-4)).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_matches_dense_two_step_propagation() {
        let cfg = UgnConfig {
            partitions: 4,
            sigma_hidden: 5,
            ..Default::default()
        };
        let (h, mut store) = head(&cfg, 8);
        set(&mut store, "ugn.sigma1.bias", random(1, 5, 20));
        set(&mut store, "ugn.sigma2.bias", random(1, 1, 21));
        let fm = random(3 * 4, 4, 22);
        let mut t = Tape::new();
        let vars = h.bind(&mut t, &store).unwrap();
        let f = t.constant(fm.clone()).unwrap();
        let g = edge_weights(&mut t, f, 4, &vars).unwrap();
        let s = predict_sigma(&mut t, g, f, 4, &vars, &cfg).unwrap();
        let p = |n: &str| store.value(store.get(n).unwrap()).clone();
        let e = t.value(g.normalized).clone();
        for b in 0..3 {
            let r = b * 4..(b + 1) * 4;
            let eb = e.slice(ndarray::s![r.clone(), ..]);
            let fb = fm.slice(ndarray::s![r, ..]);
            let h1 = (eb.dot(&fb).dot(&p("ugn.sigma1.weight")) + p("ugn.sigma1.bias")).mapv(|x| x.max(0.0));
            let raw = eb.dot(&h1).dot(&p("ugn.sigma2.weight")) + p("ugn.sigma2.bias");
            for j in 0..4 {
                let want = raw[[j, 0]].exp().ln_1p() + 1e-4;
                assert!((t.value(s)[[b, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_is_class_permutation_equivariant() {
        for gnn in [SigmaGnn::Gcn, SigmaGnn::Gat] {
            let cfg = UgnConfig {
                partitions: 2,
                sigma_gnn: gnn,
                ..Default::default()
            };
            let (h, store) = head(&cfg, 4);
            let fm = random(4, 2, 30);
            let perm = [2, 0, 3, 1];
            let permuted = fm.select(Axis(0), &perm);
            let run = |m: Array2<f64>| {
                let mut t = Tape::new();
                let vars = h.bind(&mut t, &store).unwrap();
                let f = t.constant(m).unwrap();
                let g = edge_weights(&mut t, f, 4, &vars).unwrap();
                let s = predict_sigma(&mut t, g, f, 4, &vars, &cfg).unwrap();
                t.value(s).clone()
            };
            let (a, b) = (run(fm), run(permuted));
            for (k, &p) in perm.iter().enumerate() {
                assert!((a[[0, p]] - b[[0, k]]).abs() < 1e-12, "{gnn}");
            }
        }
    }

    #[test]
    fn tiny_sigma_recovers_metric_probabilities() {
        let mu = random(6, 5, 40) * 10.0;
        let mut t = Tape::new();
        let m = t.constant(mu.clone()).unwrap();
        let s = t.constant(Array2::from_elem((6, 5), 1e-4)).unwrap();
        let noise = sample_noise(6, 50, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let eff = effective_similarity(&mut t, m, s, noise).unwrap();
        let p = t.row_softmax(m).unwrap();
        for (a, b) in t.value(eff).iter().zip(t.value(p).iter()) {
            assert!((a - b).abs() < 5e-4);
        }
    }

    #[test]
    fn exchangeable_classes_split_evenly() {
        // n = 2, mu = [0, 0], sigma = [s, s]: each class has probability 1/2
        let samples = 1_000_000;
        let mut t = Tape::new();
        let m = t.constant(Array2::zeros((1, 2))).unwrap();
        let s = t.constant(Array2::from_elem((1, 2), 1.5)).unwrap();
        let noise = sample_noise(1, samples, 2, &mut ChaCha8Rng::seed_from_u64(8));
        // brute-force standard error of the per-sample probability
        let per_sample: Vec<f64> = noise
            .index_axis(Axis(0), 0)
            .rows()
            .into_iter()
            .map(|e| 1.0 / (1.0 + (1.5 * (e[1] - e[0])).exp()))
            .collect();
        let mean = per_sample.iter().sum::<f64>() / samples as f64;
        let var = per_sample.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        let se = (var / samples as f64).sqrt();
        let eff = effective_similarity(&mut t, m, s, noise).unwrap();
        let v = t.value(eff);
        assert!((v[[0, 0]] - 0.5).abs() < 3.0 * se, "{} vs se {se}", v[[0, 0]]);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-9);
    }
}
