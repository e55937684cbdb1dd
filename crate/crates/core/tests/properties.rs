use std::collections::VecDeque;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugn_core::autodiff::{ParamStore, Tape};
use ugn_core::backbones::{embed, init_params, BackboneKind, EncoderConfig, PreparedGraph};
use ugn_core::episodes::{EpisodeSampler, Phase};
use ugn_core::graph::{
    generate_synthetic, load_dataset, normalize, save_dataset, NormalizationKind, SparseGraph, SyntheticSpec,
};
use ugn_core::metric::prototypes;

fn features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn graph_strategy() -> impl Strategy<Value = SparseGraph> {
    (2usize..18)
        .prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..40), any::<u64>()))
        .prop_map(|(n, edges, seed)| {
            let labels = (0..n).map(|u| u % 2).collect();
            SparseGraph::from_edges(n, &edges, features(n, 3, seed), labels, 2).unwrap()
        })
}

fn hops_from(g: &SparseGraph, src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 5,
        out_dim: 4,
        ..EncoderConfig::default()
    }
}

fn embeddings(kind: BackboneKind, g: &SparseGraph, seed: u64) -> Array2<f64> {
    let cfg = small_encoder();
    let mut store = ParamStore::new();
    let enc = init_params(
        kind,
        g.feature_dim(),
        &cfg,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    embed(&enc, &PreparedGraph::new(g, &cfg), &store).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjacency_is_symmetric_without_self_loops(g in graph_strategy()) {
        for u in 0..g.num_nodes() {
            prop_assert!(!g.neighbors(u).contains(&u));
            prop_assert!(g.neighbors(u).windows(2).all(|w| w[0] < w[1]));
            for &v in g.neighbors(u) {
                prop_assert!(g.neighbors(v).contains(&u));
            }
        }
        prop_assert_eq!(g.degrees().iter().sum::<usize>(), g.num_arcs());
        prop_assert_eq!(g.edges().count() * 2, g.num_arcs());
    }

    #[test]
    fn normalised_operators_satisfy_their_adjoint(g in graph_strategy(), seed in any::<u64>()) {
        let x = features(g.num_nodes(), 2, seed);
        let y = features(g.num_nodes(), 2, seed ^ 1);
        for kind in [NormalizationKind::Symmetric, NormalizationKind::RowMean, NormalizationKind::Sum] {
            let a = normalize(&g, kind);
            let ax = a.matmul_dense(x.view());
            let aty = a.transpose_matmul_dense(y.view());
            let lhs = (&ax * &y).sum();
            let rhs = (&x * &aty).sum();
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{kind:?}: {lhs} vs {rhs}");
            let dense = a.to_dense().dot(&x);
            prop_assert!(ax.iter().zip(dense.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        }
        let sym = normalize(&g, NormalizationKind::Symmetric).to_dense();
        prop_assert!(sym.iter().zip(sym.t().iter()).all(|(p, q)| (p - q).abs() < 1e-15));
    }

    #[test]
    fn every_backbone_is_permutation_equivariant(g in graph_strategy(), seed in any::<u64>(), shift in 1usize..17) {
        let n = g.num_nodes();
        let perm: Vec<usize> = (0..n).map(|u| (u * 7 + shift) % n).collect();
        let mut seen = vec![false; n];
        perm.iter().for_each(|&p| seen[p] = true);
        prop_assume!(seen.iter().all(|&s| s));
        let pg = g.permuted(&perm).unwrap();
        for kind in BackboneKind::ALL {
            let a = embeddings(kind, &g, seed);
            let b = embeddings(kind, &pg, seed);
            for u in 0..n {
                for c in 0..a.ncols() {
                    prop_assert!((a[[u, c]] - b[[perm[u], c]]).abs() < 1e-10, "{kind}");
                }
            }
        }
    }

    #[test]
    fn two_layer_encoders_only_see_two_hops(g in graph_strategy(), seed in any::<u64>()) {
        let dist = hops_from(&g, 0);
        let far: Vec<usize> = (0..g.num_nodes()).filter(|&u| dist[u] >= 3).collect();
        prop_assume!(!far.is_empty());
        let mut x = g.features().clone();
        let noise = features(far.len(), 3, seed);
        for (i, &u) in far.iter().enumerate() {
            x.row_mut(u).assign(&noise.row(i));
        }
        // rewire among far nodes too
        let extra: Vec<(usize, usize)> = far.windows(2).map(|w| (w[0], w[1])).collect();
        let moved = SparseGraph::from_edges(g.num_nodes(), &g.edges().chain(extra).collect::<Vec<_>>(), x, g.labels().to_vec(), 2).unwrap();
        for kind in [BackboneKind::Gcn, BackboneKind::Sgc, BackboneKind::Sage, BackboneKind::Gin, BackboneKind::Gat] {
            let a = embeddings(kind, &g, seed);
            let b = embeddings(kind, &moved, seed);
            for c in 0..a.ncols() {
                prop_assert!((a[[0, c]] - b[[0, c]]).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn dataset_files_reach_a_fixed_point(g in graph_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_dataset(&g, &a).unwrap();
        let back = load_dataset(&a).unwrap();
        save_dataset(&back, &b).unwrap();
        for f in ["meta.json", "edges.tsv", "features.tsv", "labels.tsv"] {
            prop_assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
        prop_assert_eq!(back.features(), g.features());
        prop_assert_eq!(back.col_indices(), g.col_indices());
    }

    #[test]
    fn sampled_episodes_respect_the_protocol(
        sizes in prop::collection::vec(1usize..12, 3..10),
        way in 1usize..4, shot in 1usize..4, queries in 1usize..4, seed in any::<u64>()
    ) {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
        let n = labels.len();
        let g = SparseGraph::from_edges(n, &[], Array2::zeros((n, 1)), labels.clone(), sizes.len()).unwrap();
        let sampler = EpisodeSampler::new(&g);
        let phase: Vec<usize> = (0..sizes.len()).step_by(2).collect();
        let eligible = sampler.eligible(&phase, shot, queries);
        let res = sampler.sample(Phase::Test, &phase, way, shot, queries, &mut ChaCha8Rng::seed_from_u64(seed));
        if eligible.len() < way {
            prop_assert!(res.is_err());
        } else {
            let ep = res.unwrap();
            prop_assert_eq!(ep.support.len(), way * shot);
            prop_assert_eq!(ep.query.len(), way * queries);
            prop_assert!(ep.classes.iter().all(|c| eligible.contains(c)));
            prop_assert!(ep.support.iter().all(|u| !ep.query.contains(u)));
            for (j, chunk) in ep.support.chunks(shot).enumerate() {
                prop_assert!(chunk.iter().all(|&u| labels[u] == ep.classes[j]));
            }
            for (j, chunk) in ep.query.chunks(queries).enumerate() {
                prop_assert!(chunk.iter().all(|&u| labels[u] == ep.classes[j]));
            }
        }
    }

    #[test]
    fn prototypes_ignore_support_order_within_a_class(seed in any::<u64>(), swap in 0usize..3) {
        let (way, shot) = (3, 3);
        let s = features(way * shot, 4, seed);
        let mut order: Vec<usize> = (0..way * shot).collect();
        order.swap(swap * shot, swap * shot + 2);
        let mut t = Tape::new();
        let a = t.constant(s.clone()).unwrap();
        let b = t.constant(s.select(ndarray::Axis(0), &order)).unwrap();
        let pa = prototypes(&mut t, a, way, shot).unwrap();
        let pb = prototypes(&mut t, b, way, shot).unwrap();
        prop_assert!(t.value(pa).iter().zip(t.value(pb).iter()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn monte_carlo_rows_are_distributions(seed in any::<u64>(), scale in 0.0f64..30.0, samples in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = features(4, 5, seed) * scale;
        let sigma = features(4, 5, seed ^ 3).mapv(|v| 1e-4 + v.abs() * scale);
        let noise = Array3::from_shape_simple_fn((4, samples, 5), || rng.sample::<f64, _>(rand_distr::StandardNormal));
        let mut t = Tape::new();
        let (m, s) = (t.constant(mu).unwrap(), t.constant(sigma).unwrap());
        let e = t.mc_softmax_mean(m, s, noise).unwrap();
        for row in t.value(e).rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn block_model_edge_counts_match_their_expectation() {
    let (classes, per_class, p_in, p_out) = (4usize, 30usize, 0.2, 0.02);
    for seed in 0..20 {
        let g = generate_synthetic(&SyntheticSpec {
            num_classes: classes,
            nodes_per_class: per_class,
            feature_dim: 2,
            intra_edge_prob: p_in,
            inter_edge_prob: p_out,
            signal_strength: 1.0,
            seed,
        })
        .unwrap();
        let mut counts = Array2::<f64>::zeros((classes, classes));
        for (u, v) in g.edges() {
            let (a, b) = (g.labels()[u], g.labels()[v]);
            counts[[a.min(b), a.max(b)]] += 1.0;
        }
        for a in 0..classes {
            for b in a..classes {
                let (pairs, p) = if a == b {
                    ((per_class * (per_class - 1) / 2) as f64, p_in)
                } else {
                    ((per_class * per_class) as f64, p_out)
                };
                let mean = pairs * p;
                let sd = (pairs * p * (1.0 - p)).sqrt();
                let z = (counts[[a, b]] - mean) / sd;
                assert!(
                    z.abs() < 5.0,
                    "seed {seed} block ({a},{b}): {} edges, expected {mean}",
                    counts[[a, b]]
                );
            }
        }
    }
}

#[test]
fn synthetic_classes_are_more_similar_within_than_across() {
    let g = generate_synthetic(&SyntheticSpec {
        num_classes: 10,
        nodes_per_class: 50,
        feature_dim: 32,
        intra_edge_prob: 0.1,
        inter_edge_prob: 0.01,
        signal_strength: 5.0,
        seed: 7,
    })
    .unwrap();
    let x = g.features();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let (mut within, mut across, mut nw, mut na) = (0.0, 0.0, 0.0, 0.0);
    for u in 0..g.num_nodes() {
        for v in u + 1..g.num_nodes() {
            let cos = x.row(u).dot(&x.row(v)) / (norms[u] * norms[v]);
            if g.labels()[u] == g.labels()[v] {
                within += cos;
                nw += 1.0;
            } else {
                across += cos;
                na += 1.0;
            }
        }
    }
    assert!(within / nw > across / na + 0.2, "{} vs {}", within / nw, across / na);
}
