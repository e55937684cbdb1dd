//! Self-check suite: finite-difference gradient checks for every tape
//! primitive and for the end-to-end losses, plus structural invariants.

use std::fmt;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, param_gradient_check, GradCheckReport, ParamStore, Tape, Var};
use crate::backbones::{embed, BackboneKind, EncoderConfig, PreparedGraph};
use crate::episodes::{split_classes, Episode, EpisodeSampler, Phase};
use crate::error::Result;
use crate::exec::Execution;
use crate::graph::{generate_synthetic, normalize, NormalizationKind, NormalizedAdjacency, SparseGraph, SyntheticSpec};
use crate::model::{Model, ModelConfig};
use crate::trainer::{Experiment, RunConfig};
use crate::ugn::{sample_noise, SigmaGnn, UgnConfig};

/// Largest accepted relative error between tape and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckEntry {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckEntry {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn grad(name: impl Into<String>, report: &GradCheckReport) -> Self {
        CheckEntry::new(name, report.passed(), report.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {}: {}", if e.passed { "ok  " } else { "FAIL" }, e.name, e.detail)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.entries.len(), failed)
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Entries in `±[0.1, 1]`, away from the kinks of piecewise-linear ops.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out ⊙ W)` with a fixed random `W`, so every output entry reaches the
/// loss with a distinct weight.
fn weighted_sum(tape: &mut Tape<'_>, out: Var) -> Result<Var> {
    let w = tape.constant(random(out.rows(), out.cols(), 0xfeed))?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p)?)
}

type PrimitiveFn<'g> = Box<dyn Fn(&mut Tape<'g>, &[Var]) -> Result<Var> + 'g>;

/// The 5-node graph used by the sparse-operator checks.
fn micro_graph() -> SparseGraph {
    let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)];
    SparseGraph::from_edges(5, &edges, Array2::zeros((5, 1)), vec![0; 5], 1).expect("valid micro graph")
}

fn primitive_cases<'g>(
    adj: &'g [NormalizedAdjacency; 3],
    fixed: &'g Array2<f64>,
) -> Vec<(String, Vec<Array2<f64>>, PrimitiveFn<'g>)> {
    let mut cases: Vec<(String, Vec<Array2<f64>>, PrimitiveFn<'g>)> = Vec::new();
    let mut add = |name: &str, inputs: Vec<Array2<f64>>, f: PrimitiveFn<'g>| cases.push((name.to_string(), inputs, f));
    add(
        "matmul",
        vec![random(3, 4, 1), random(4, 2, 2)],
        Box::new(|t, v| Ok(t.matmul(v[0], v[1])?)),
    );
    add(
        "matmul_fixed",
        vec![random(4, 2, 3)],
        Box::new(move |t, v| Ok(t.matmul_fixed(fixed, v[0])?)),
    );
    for a in adj.iter() {
        add(
            &format!("sparse_matmul[{:?}]", a.kind()),
            vec![random(5, 3, 4)],
            Box::new(move |t, v| Ok(t.sparse_matmul(a, v[0])?)),
        );
    }
    add(
        "add",
        vec![random(3, 4, 5), random(3, 4, 6)],
        Box::new(|t, v| Ok(t.add(v[0], v[1])?)),
    );
    add(
        "add_row",
        vec![random(3, 4, 7), random(1, 4, 8)],
        Box::new(|t, v| Ok(t.add_row(v[0], v[1])?)),
    );
    add(
        "sub",
        vec![random(3, 4, 9), random(3, 4, 10)],
        Box::new(|t, v| Ok(t.sub(v[0], v[1])?)),
    );
    add(
        "mul",
        vec![random(3, 4, 11), random(3, 4, 12)],
        Box::new(|t, v| Ok(t.mul(v[0], v[1])?)),
    );
    add(
        "scale",
        vec![random(3, 4, 13)],
        Box::new(|t, v| Ok(t.scale(v[0], 2.5)?)),
    );
    add(
        "add_scalar",
        vec![random(3, 4, 14)],
        Box::new(|t, v| Ok(t.add_scalar(v[0], 0.7)?)),
    );
    add(
        "relu",
        vec![away_from_zero(3, 4, 15)],
        Box::new(|t, v| Ok(t.relu(v[0])?)),
    );
    add(
        "leaky_relu",
        vec![away_from_zero(3, 4, 16)],
        Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)?)),
    );
    add("exp", vec![random(3, 4, 17)], Box::new(|t, v| Ok(t.exp(v[0])?)));
    add(
        "log",
        vec![random(3, 4, 18).mapv(|x| 1.25 + 0.75 * x)],
        Box::new(|t, v| Ok(t.log(v[0])?)),
    );
    add(
        "softplus",
        vec![random(3, 4, 19) * 3.0],
        Box::new(|t, v| Ok(t.softplus(v[0])?)),
    );
    add(
        "row_softmax",
        vec![random(3, 4, 20) * 2.0],
        Box::new(|t, v| Ok(t.row_softmax(v[0])?)),
    );
    add("row_sum", vec![random(3, 4, 21)], Box::new(|t, v| Ok(t.row_sum(v[0])?)));
    add(
        "row_mean",
        vec![random(3, 4, 22)],
        Box::new(|t, v| Ok(t.row_mean(v[0])?)),
    );
    add("sum", vec![random(3, 4, 23)], Box::new(|t, v| Ok(t.sum(v[0])?)));
    add("mean", vec![random(3, 4, 24)], Box::new(|t, v| Ok(t.mean(v[0])?)));
    add(
        "column_slice",
        vec![random(3, 4, 25)],
        Box::new(|t, v| Ok(t.column_slice(v[0], 1, 3)?)),
    );
    add(
        "concat_rows",
        vec![random(2, 3, 26), random(1, 3, 27)],
        Box::new(|t, v| Ok(t.concat_rows(&[v[0], v[1], v[0]])?)),
    );
    add(
        "concat_cols",
        vec![random(3, 2, 28), random(3, 1, 29)],
        Box::new(|t, v| Ok(t.concat_cols(&[v[1], v[0]])?)),
    );
    add(
        "l2_row_normalize",
        vec![random(3, 4, 30)],
        Box::new(|t, v| Ok(t.l2_row_normalize(v[0])?)),
    );
    add(
        "transpose",
        vec![random(3, 4, 31)],
        Box::new(|t, v| Ok(t.transpose(v[0])?)),
    );
    add(
        "gather_rows",
        vec![random(3, 4, 32)],
        Box::new(|t, v| Ok(t.gather_rows(v[0], &[2, 0, 2, 1])?)),
    );
    add(
        "clamp_min",
        vec![away_from_zero(3, 4, 33).mapv(|x| x - 0.05)],
        Box::new(|t, v| Ok(t.clamp_min(v[0], -0.05)?)),
    );
    add(
        "reshape",
        vec![random(3, 4, 34)],
        Box::new(|t, v| Ok(t.reshape(v[0], 2, 6)?)),
    );
    add(
        "block_matmul_nt",
        vec![random(6, 3, 35), random(6, 3, 36)],
        Box::new(|t, v| Ok(t.block_matmul_nt(v[0], v[1], 3)?)),
    );
    add(
        "block_matmul",
        vec![random(6, 3, 37), random(6, 2, 38)],
        Box::new(|t, v| Ok(t.block_matmul(v[0], v[1], 3)?)),
    );
    let noise = sample_noise(4, 7, 3, &mut ChaCha8Rng::seed_from_u64(39));
    add(
        "mc_softmax_mean",
        vec![random(4, 3, 40) * 3.0, random(4, 3, 41).mapv(|x| 1.0 + 0.8 * x)],
        Box::new(move |t, v| Ok(t.mc_softmax_mean(v[0], v[1], noise.clone())?)),
    );
    let sym = &adj[0];
    add(
        "graph_attention",
        vec![random(5, 3, 42), random(6, 1, 43)],
        Box::new(move |t, v| Ok(t.graph_attention(v[0], v[1], sym, 0.2)?)),
    );
    cases
}

/// Gradient checks of every tape primitive through a weighted-sum loss.
pub fn primitive_gradient_checks() -> Result<Vec<CheckEntry>> {
    let g = micro_graph();
    let adj = [
        normalize(&g, NormalizationKind::Symmetric),
        normalize(&g, NormalizationKind::RowMean),
        normalize(&g, NormalizationKind::Sum),
    ];
    let fixed = random(3, 4, 99);
    let mut out = Vec::new();
    for (name, inputs, f) in primitive_cases(&adj, &fixed) {
        let report = gradient_check(
            |t, v| {
                let y = f(t, v)?;
                weighted_sum(t, y)
            },
            &inputs,
            GRAD_STEP,
            GRAD_TOLERANCE,
        )?;
        out.push(CheckEntry::grad(format!("grad {name}"), &report));
    }
    Ok(out)
}

/// A graph of at most 16 nodes with one 3-way 2-shot 3-query episode.
pub fn micro_episode(seed: u64) -> Result<(SparseGraph, Episode)> {
    let g = generate_synthetic(&SyntheticSpec {
        num_classes: 3,
        nodes_per_class: 5,
        feature_dim: 6,
        intra_edge_prob: 0.5,
        inter_edge_prob: 0.1,
        signal_strength: 2.0,
        seed,
    })?;
    let ep = EpisodeSampler::new(&g).sample(Phase::Train, &[0, 1, 2], 3, 2, 3, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((g, ep))
}

/// Model used by the end-to-end checks: hidden 6, embeddings 8, `L = 4`.
pub fn micro_model_config(backbone: BackboneKind, ugn: Option<SigmaGnn>) -> ModelConfig {
    ModelConfig {
        backbone,
        encoder: EncoderConfig {
            hidden_dim: 6,
            out_dim: 8,
            appnp_iterations: 3,
            ..EncoderConfig::default()
        },
        ugn: ugn.map(|gnn| UgnConfig {
            partitions: 4,
            sigma_hidden: 5,
            sigma_gnn: gnn,
            ..UgnConfig::default()
        }),
        temperature: 10.0,
    }
}

/// Gradient check of the episode loss with respect to every parameter, with
/// the Monte-Carlo noise held fixed.
pub fn end_to_end_check(backbone: BackboneKind, ugn: Option<SigmaGnn>, seed: u64) -> Result<GradCheckReport> {
    let (g, ep) = micro_episode(seed)?;
    let cfg = micro_model_config(backbone, ugn);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(&cfg, g.feature_dim(), &mut store, &mut rng)?;
    // non-zero biases so their gradients are exercised away from the init point
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("bias") {
            let shape = store.value(id).dim();
            *store.value_mut(id) = random(shape.0, shape.1, seed ^ id.index() as u64) * 0.1;
        }
    }
    let prepared = PreparedGraph::new(&g, &cfg.encoder);
    let noise = model.noise(&ep, 5, &mut rng);
    param_gradient_check(
        |t, s| Ok(model.forward(t, &prepared, s, &ep, noise.clone())?.loss),
        &store,
        GRAD_STEP,
        GRAD_TOLERANCE,
    )
}

/// End-to-end checks for every backbone without the head, and for GCN with
/// both sigma networks.
pub fn model_gradient_checks() -> Result<Vec<CheckEntry>> {
    let mut out = Vec::new();
    for kind in BackboneKind::ALL {
        let r = end_to_end_check(kind, None, 11)?;
        out.push(CheckEntry::grad(format!("grad loss[{}]", kind.as_str()), &r));
    }
    for gnn in [SigmaGnn::Gcn, SigmaGnn::Gat] {
        let r = end_to_end_check(BackboneKind::Gcn, Some(gnn), 12)?;
        out.push(CheckEntry::grad(format!("grad loss[ugn-{gnn} gcn]"), &r));
    }
    Ok(out)
}

/// A deliberately wrong derivative must be caught.
pub fn negative_control() -> Result<CheckEntry> {
    let r = gradient_check(
        |t, v| {
            let y = t.custom_unary(v[0], |x| x.mapv(|a| a * a * a), |x, _, g| g * &x.mapv(|a| 2.0 * a))?;
            Ok(t.sum(y)?)
        },
        &[random(2, 2, 50).mapv(|x| x + 2.0)],
        GRAD_STEP,
        GRAD_TOLERANCE,
    )?;
    Ok(CheckEntry::new(
        "negative control (wrong derivative is rejected)",
        !r.passed(),
        format!("max rel error {:.2e}", r.max_rel_error()),
    ))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Structural invariants on small synthetic data.
pub fn invariant_checks() -> Result<Vec<CheckEntry>> {
    let mut out = Vec::new();
    let g = generate_synthetic(&SyntheticSpec {
        num_classes: 6,
        nodes_per_class: 12,
        feature_dim: 8,
        intra_edge_prob: 0.3,
        inter_edge_prob: 0.05,
        ..Default::default()
    })?;

    let sym = normalize(&g, NormalizationKind::Symmetric);
    let dense = sym.to_dense();
    let asym = max_abs_diff(&dense, &dense.t().to_owned());
    out.push(CheckEntry::new(
        "symmetric normalisation is symmetric",
        asym < 1e-15,
        format!("max |A - Aᵀ| {asym:.1e}"),
    ));

    let rm = normalize(&g, NormalizationKind::RowMean).to_dense();
    let bad_rows = rm
        .rows()
        .into_iter()
        .zip(g.degrees())
        .filter(|(r, d)| *d > 0 && (r.sum() - 1.0).abs() > 1e-12)
        .count();
    out.push(CheckEntry::new(
        "row-mean rows sum to one",
        bad_rows == 0,
        format!("{bad_rows} bad rows"),
    ));

    let mut tape = Tape::new();
    let h = tape.constant(random(g.num_nodes(), 4, 60))?;
    let att = tape.constant(random(8, 1, 61))?;
    let a = tape.graph_attention(h, att, &sym, 0.2)?;
    let alpha = tape.attention_weights(a).expect("attention node keeps its weights");
    let offsets = sym.row_offsets();
    let worst = (0..g.num_nodes())
        .map(|u| (alpha[offsets[u]..offsets[u + 1]].iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(CheckEntry::new(
        "attention rows sum to one",
        worst < 1e-12,
        format!("max deviation {worst:.1e}"),
    ));

    let cfg = micro_model_config(BackboneKind::Gcn, None);
    let mut store = ParamStore::new();
    let model = Model::init(&cfg, g.feature_dim(), &mut store, &mut ChaCha8Rng::seed_from_u64(62))?;
    let base = embed(&model.encoder, &PreparedGraph::new(&g, &cfg.encoder), &store)?;
    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
    perm.reverse();
    perm.swap(0, 7);
    let pg = g.permuted(&perm)?;
    let moved = embed(&model.encoder, &PreparedGraph::new(&pg, &cfg.encoder), &store)?;
    let worst = (0..g.num_nodes())
        .map(|u| {
            base.row(u)
                .iter()
                .zip(moved.row(perm[u]))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    out.push(CheckEntry::new(
        "encoder is permutation equivariant",
        worst < 1e-10,
        format!("max deviation {worst:.1e}"),
    ));

    out.push(ugn_head_invariants(&g)?);
    out.push(sigma_floor_equivalence(2000, 63)?);
    out.push(episode_protocol(&g, 5000, 64)?);
    out.push(policy_agreement(&g)?);
    Ok(out)
}

fn ugn_head_invariants(g: &SparseGraph) -> Result<CheckEntry> {
    let cfg = micro_model_config(BackboneKind::Gcn, Some(SigmaGnn::Gcn));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let model = Model::init(&cfg, g.feature_dim(), &mut store, &mut rng)?;
    let prepared = PreparedGraph::new(g, &cfg.encoder);
    let ep = EpisodeSampler::new(g).sample(Phase::Train, &[0, 1, 2, 3, 4, 5], 4, 3, 5, &mut rng)?;
    let noise = model.noise(&ep, 50, &mut rng);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &prepared, &store, &ep, noise)?;
    let sigma = tape.value(out.sigma.expect("ugn output has sigma"));
    let min_sigma = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let worst_row = tape
        .value(out.probs)
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(CheckEntry::new(
        "sigma positive and effective rows sum to one",
        min_sigma >= 1e-4 && worst_row < 1e-12,
        format!("min sigma {min_sigma:.3e}, max row deviation {worst_row:.1e}"),
    ))
}

/// With σ at its floor the effective similarities reproduce the metric-head
/// softmax. Returns the worst entry difference and the argmax agreement over
/// `queries` random rows.
pub fn sigma_floor_agreement(queries: usize, classes: usize, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Array2::from_shape_simple_fn((queries, 16), || rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_simple_fn((classes, 16), || rng.random_range(-1.0..1.0));
    let noise: Array3<f64> = sample_noise(queries, samples, classes, &mut rng);
    let mut tape = Tape::new();
    let qv = tape.constant(q)?;
    let cv = tape.constant(c)?;
    let ids: Vec<usize> = (0..queries).collect();
    let mu = crate::metric::cosine_similarities(&mut tape, qv, cv, 10.0, &ids)?;
    let floor = UgnConfig::default().sigma_floor;
    let sigma = tape.constant(Array2::from_elem((queries, classes), floor))?;
    let eff = crate::ugn::effective_similarity(&mut tape, mu, sigma, noise)?;
    let probs = crate::metric::metric_probabilities(&mut tape, mu)?;
    let (e, p) = (tape.value(eff), tape.value(probs));
    let worst = max_abs_diff(e, p);
    let a = crate::metric::argmax_rows(e);
    let b = crate::metric::argmax_rows(p);
    let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / queries as f64;
    Ok((worst, agree))
}

fn sigma_floor_equivalence(queries: usize, seed: u64) -> Result<CheckEntry> {
    let (worst, agree) = sigma_floor_agreement(queries, 5, 100, seed)?;
    Ok(CheckEntry::new(
        "sigma floor reproduces metric probabilities",
        worst < 5e-4 && agree >= 0.99,
        format!("max |Δp| {worst:.2e}, argmax agreement {:.2}%", 100.0 * agree),
    ))
}

/// Counts protocol violations over `count` sampled episodes: support/query
/// overlaps, classes outside the phase, and wrong (n, k, m) counts.
pub fn episode_violations(g: &SparseGraph, count: usize, seed: u64) -> Result<(usize, usize, usize)> {
    let split = split_classes(
        g,
        (g.num_classes() / 2, 0, g.num_classes() - g.num_classes() / 2),
        1,
        seed,
    )?;
    let sampler = EpisodeSampler::new(g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut overlaps, mut out_of_phase, mut bad_counts) = (0, 0, 0);
    let labels = g.labels();
    for i in 0..count {
        let phase = if i % 2 == 0 { Phase::Train } else { Phase::Test };
        let classes = split.classes(phase);
        let (n, k, m) = (classes.len().min(3), 1 + i % 3, 2 + i % 4);
        let ep = sampler.sample(phase, classes, n, k, m, &mut rng)?;
        let support: std::collections::HashSet<usize> = ep.support.iter().copied().collect();
        let query: std::collections::HashSet<usize> = ep.query.iter().copied().collect();
        overlaps += support.intersection(&query).count();
        out_of_phase += ep.classes.iter().filter(|c| !classes.contains(c)).count();
        let all_in_class = ep
            .support
            .chunks(k)
            .chain(ep.query.chunks(m))
            .enumerate()
            .all(|(j, nodes)| nodes.iter().all(|&u| labels[u] == ep.classes[j % n]));
        if ep.classes.len() != n
            || ep.support.len() != n * k
            || ep.query.len() != n * m
            || support.len() != n * k
            || query.len() != n * m
            || !all_in_class
        {
            bad_counts += 1;
        }
    }
    Ok((overlaps, out_of_phase, bad_counts))
}

fn episode_protocol(g: &SparseGraph, count: usize, seed: u64) -> Result<CheckEntry> {
    let (o, p, c) = episode_violations(g, count, seed)?;
    Ok(CheckEntry::new(
        format!("episode protocol over {count} episodes"),
        o == 0 && p == 0 && c == 0,
        format!("{o} overlaps, {p} out-of-phase classes, {c} malformed episodes"),
    ))
}

fn policy_agreement(g: &SparseGraph) -> Result<CheckEntry> {
    let split = split_classes(g, (2, 2, 2), 1, 80)?;
    let exp = Experiment::new(g, &split)?;
    let cfg = RunConfig {
        n: 2,
        k: 2,
        m: 3,
        t_test: 20,
        eval_episodes: 16,
        ..Default::default()
    };
    let (model, store) = exp.init_model(&cfg)?;
    let a = exp.meta_test(&model, &store, &cfg, Execution::Sequential)?;
    let b = exp.meta_test(&model, &store, &cfg, Execution::Parallel)?;
    Ok(CheckEntry::new(
        "sequential and parallel evaluation agree",
        a == b,
        format!("accuracy {:.4} vs {:.4}", a.mean_accuracy, b.mean_accuracy),
    ))
}

/// Runs every check.
pub fn run_all() -> Result<CheckReport> {
    let mut entries = primitive_gradient_checks()?;
    entries.extend(model_gradient_checks()?);
    entries.push(negative_control()?);
    entries.extend(invariant_checks()?);
    Ok(CheckReport { entries })
}
