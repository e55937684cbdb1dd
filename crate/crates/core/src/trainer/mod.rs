//! Episodic training, meta-test evaluation, the partition sweep and the
//! paired baseline/UGN comparison.
//!
//! Randomness is split into independent streams derived from the run seed:
//! parameter initialisation, training episodes, training noise, and one
//! stream each for validation and test episodes. Baseline and UGN runs with
//! the same seed therefore see identical episode sequences, and evaluation
//! episodes can be processed in any order.

mod adam;
mod compare;
mod report;

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig, StepOutcome, MAX_CONSECUTIVE_SKIPS};
pub use compare::{
    paired_comparison, render_comparison, sensitivity_sweep, ComparisonReport, ComparisonRow, PairedTest, SweepRow,
};
pub use report::{write_atomic, write_metrics, EPISODES_CSV_HEADER};

use crate::autodiff::{ParamStore, Tape};
use crate::backbones::{BackboneKind, EncoderConfig, PreparedGraph};
use crate::episodes::{ClassSplit, Episode, EpisodeSampler, Phase};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::graph::SparseGraph;
use crate::metric::accuracy;
use crate::model::{Model, ModelConfig};
use crate::ugn::{SigmaGnn, UgnConfig};

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TRAIN_NOISE: u64 = 3;
const STREAM_VAL: u64 = 4;
const STREAM_TEST: u64 = 5;

/// Every experimental setting of a run. Serialised verbatim into
/// `metrics.json`; missing keys take their defaults when read back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    pub ugn: bool,
    pub ugn_gnn: SigmaGnn,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub episodes: usize,
    pub t_train: usize,
    pub t_test: usize,
    /// Number of embedding partitions `L`.
    pub partitions: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub eval_episodes: usize,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let enc = EncoderConfig::default();
        RunConfig {
            backbone: BackboneKind::Gcn,
            ugn: true,
            ugn_gnn: SigmaGnn::Gcn,
            n: 5,
            k: 3,
            m: 10,
            episodes: 1000,
            t_train: 100,
            t_test: 1000,
            partitions: 8,
            hidden_dim: enc.hidden_dim,
            out_dim: enc.out_dim,
            temperature: 10.0,
            learning_rate: adam.learning_rate,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 0,
            eval_episodes: 200,
            eval_every: 50,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes),
            ("n", self.n),
            ("k", self.k),
            ("m", self.m),
            ("t_train", self.t_train),
            ("t_test", self.t_test),
            ("partitions", self.partitions),
            ("hidden_dim", self.hidden_dim),
            ("out_dim", self.out_dim),
            ("eval_episodes", self.eval_episodes),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let rates = [
            ("temperature", self.temperature),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.ugn && !self.out_dim.is_multiple_of(self.partitions) {
            return Err(Error::config(format!(
                "partition count L={} must divide out_dim {}",
                self.partitions, self.out_dim
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            encoder: EncoderConfig {
                hidden_dim: self.hidden_dim,
                out_dim: self.out_dim,
                ..EncoderConfig::default()
            },
            ugn: self.ugn.then(|| UgnConfig {
                partitions: self.partitions,
                sigma_gnn: self.ugn_gnn,
                ..UgnConfig::default()
            }),
            temperature: self.temperature,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    fn stream(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag, 0)
    }

    /// Method label in the style `GCN` / `UGN-GCN`.
    pub fn method_name(&self) -> String {
        if self.ugn {
            format!("UGN-{}", self.backbone.display_name())
        } else {
            self.backbone.display_name().to_string()
        }
    }
}

/// Validation accuracy at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of training episodes completed.
    pub episode: usize,
    pub val_accuracy: f64,
    pub val_std_error: f64,
}

/// Meta-test outcome over a stream of evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub mean_loss: f64,
    /// Per-episode accuracy, in stream order.
    pub accuracies: Vec<f64>,
    /// Mean σ per episode (UGN only).
    pub sigma_mean: Vec<f64>,
    /// Fingerprint of the class and node ids of every episode.
    pub episode_fingerprint: String,
}

/// Everything recorded about one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub format: String,
    pub config: RunConfig,
    /// Command-line flags outside [`RunConfig`], such as paths and `--jobs`.
    pub invocation: serde_json::Map<String, serde_json::Value>,
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub sigma_mean: Vec<f64>,
    pub sigma_max: Vec<f64>,
    pub eval_points: Vec<EvalPoint>,
    /// Training episodes completed when the kept parameters were saved.
    pub best_episode: usize,
    pub best_val_accuracy: Option<f64>,
    pub skipped_steps: usize,
    pub train_episode_fingerprint: String,
    pub test: Option<EvalSummary>,
    pub param_checksum: String,
    pub wall_clock_seconds: f64,
}

pub const METRICS_FORMAT: &str = "ugn-metrics/1";

/// Running FNV-1a hash over episode ids.
#[derive(Clone, Copy, Debug)]
struct Fingerprint(u64);

impl Fingerprint {
    fn new() -> Self {
        Fingerprint(0xcbf2_9ce4_8422_2325)
    }

    fn feed(&mut self, episode: &Episode) {
        let ids = episode.classes.iter().chain(&episode.support).chain(&episode.query);
        for &id in ids {
            for b in (id as u64).to_le_bytes() {
                self.0 = (self.0 ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    fn hex(self) -> String {
        format!("{:016x}", self.0)
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A prepared experiment: graph, split and sampler shared by its runs.
pub struct Experiment<'a> {
    pub graph: &'a SparseGraph,
    pub split: &'a ClassSplit,
    sampler: EpisodeSampler,
}

/// Parameters and metrics of a finished training run.
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub metrics: RunMetrics,
}

impl<'a> Experiment<'a> {
    pub fn new(graph: &'a SparseGraph, split: &'a ClassSplit) -> Result<Self> {
        split.validate(graph.num_classes(), false)?;
        Ok(Experiment {
            graph,
            split,
            sampler: EpisodeSampler::new(graph),
        })
    }

    /// The `index`-th evaluation episode of `phase` for `config`; the stream
    /// depends only on the seed and the episode shape.
    pub fn eval_episode(&self, config: &RunConfig, phase: Phase, index: usize) -> Result<Episode> {
        let tag = if phase == Phase::Test { STREAM_TEST } else { STREAM_VAL };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.stream(tag), 0, index as u64));
        Ok(self
            .sampler
            .sample(phase, self.split.classes(phase), config.n, config.k, config.m, &mut rng)?)
    }

    /// Fresh model and parameters for `config`.
    pub fn init_model(&self, config: &RunConfig) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.stream(STREAM_INIT));
        let model = Model::init(&config.model_config(), self.graph.feature_dim(), &mut store, &mut rng)?;
        Ok((model, store))
    }

    fn check_phase(&self, config: &RunConfig, phase: Phase) -> Result<()> {
        let eligible = self
            .sampler
            .eligible(self.split.classes(phase), config.k, config.m)
            .len();
        if eligible < config.n {
            return Err(crate::episodes::EpisodeError::DeficientPhase {
                phase,
                eligible,
                way: config.n,
            }
            .into());
        }
        Ok(())
    }

    /// Episodic training with model selection on validation accuracy. When the
    /// split has no validation classes the final parameters are kept.
    pub fn train(&self, config: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
        let start = Instant::now();
        let (model, mut store) = self.init_model(config)?;
        self.check_phase(config, Phase::Train)?;
        let validate = !self.split.val.is_empty();
        if validate {
            self.check_phase(config, Phase::Val)?;
        } else {
            log::warn!("no validation classes; keeping the final parameters");
        }
        let prepared = PreparedGraph::new(self.graph, &model.config.encoder);
        let mut adam = Adam::new(config.adam_config());
        let mut episode_rng = ChaCha8Rng::seed_from_u64(config.stream(STREAM_TRAIN));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.stream(STREAM_TRAIN_NOISE));
        let mut fingerprint = Fingerprint::new();
        let mut metrics = RunMetrics {
            format: METRICS_FORMAT.into(),
            config: config.clone(),
            invocation: Default::default(),
            train_loss: Vec::with_capacity(config.episodes),
            train_accuracy: Vec::with_capacity(config.episodes),
            sigma_mean: Vec::new(),
            sigma_max: Vec::new(),
            eval_points: Vec::new(),
            best_episode: config.episodes,
            best_val_accuracy: None,
            skipped_steps: 0,
            train_episode_fingerprint: String::new(),
            test: None,
            param_checksum: String::new(),
            wall_clock_seconds: 0.0,
        };
        let mut best: Option<ParamStore> = None;
        for ep in 0..config.episodes {
            let episode = self.sampler.sample(
                Phase::Train,
                &self.split.train,
                config.n,
                config.k,
                config.m,
                &mut episode_rng,
            )?;
            fingerprint.feed(&episode);
            let noise = model.noise(&episode, config.t_train, &mut noise_rng);
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &prepared, &store, &episode, noise)
                .map_err(|e| divergence(e, ep))?;
            let loss = tape.scalar(out.loss);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    episode: ep,
                    reason: format!("loss {loss:e} exceeds {DIVERGENCE_LOSS:e}"),
                });
            }
            metrics.train_loss.push(loss);
            metrics
                .train_accuracy
                .push(accuracy(tape.value(out.probs), &episode.query_labels()));
            if let Some(s) = out.sigma {
                let s = tape.value(s);
                metrics.sigma_mean.push(s.mean().unwrap_or(0.0));
                metrics
                    .sigma_max
                    .push(s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            let grads = tape.backward(out.loss)?.param_grads(&store);
            adam.step(&mut store, &grads, ep)?;
            let done = ep + 1;
            if validate && (done % config.eval_every == 0 || done == config.episodes) {
                let summary = self.evaluate(&model, &store, config, Phase::Val, config.t_train, exec)?;
                log::info!(
                    "episode {done}: loss {loss:.4}, val accuracy {:.4} ± {:.4}",
                    summary.mean_accuracy,
                    summary.std_error
                );
                metrics.eval_points.push(EvalPoint {
                    episode: done,
                    val_accuracy: summary.mean_accuracy,
                    val_std_error: summary.std_error,
                });
                if metrics.best_val_accuracy.is_none_or(|b| summary.mean_accuracy > b) {
                    metrics.best_val_accuracy = Some(summary.mean_accuracy);
                    metrics.best_episode = done;
                    best = Some(store.clone());
                }
            } else {
                log::debug!("episode {done}: loss {loss:.4}");
            }
        }
        if let Some(best) = best {
            store = best;
        }
        metrics.skipped_steps = adam.total_skips();
        metrics.train_episode_fingerprint = fingerprint.hex();
        metrics.param_checksum = format!("{:016x}", store.checksum());
        metrics.wall_clock_seconds = start.elapsed().as_secs_f64();
        Ok(TrainOutcome { model, store, metrics })
    }

    /// Accuracy over `config.eval_episodes` episodes of `phase` with frozen
    /// parameters. Embeddings are computed once and shared by all episodes.
    pub fn evaluate(
        &self,
        model: &Model,
        store: &ParamStore,
        config: &RunConfig,
        phase: Phase,
        samples: usize,
        exec: Execution,
    ) -> Result<EvalSummary> {
        self.check_phase(config, phase)?;
        let prepared = PreparedGraph::new(self.graph, &model.config.encoder);
        let emb = crate::backbones::embed(&model.encoder, &prepared, store)?;
        let episodes: Vec<Episode> = (0..config.eval_episodes)
            .map(|i| self.eval_episode(config, phase, i))
            .collect::<Result<_>>()?;
        let mut fingerprint = Fingerprint::new();
        episodes.iter().for_each(|e| fingerprint.feed(e));
        let tag = if phase == Phase::Test { STREAM_TEST } else { STREAM_VAL };
        let noise_base = derive_seed(config.stream(tag), 1, 0);
        let items: Vec<(usize, Episode)> = episodes.into_iter().enumerate().collect();
        let results = exec.map(items, |(i, episode)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_base, 0, i as u64));
            let noise = model.noise(&episode, samples, &mut rng);
            evaluate_episode(model, store, &emb, &episode, noise)
        });
        let results: Vec<(f64, f64, Option<f64>)> = results.into_iter().collect::<Result<_>>()?;
        let accuracies: Vec<f64> = results.iter().map(|r| r.0).collect();
        let (mean_accuracy, std_error) = mean_and_se(&accuracies);
        Ok(EvalSummary {
            episodes: accuracies.len(),
            mean_accuracy,
            std_error,
            mean_loss: results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64,
            accuracies,
            sigma_mean: results.iter().filter_map(|r| r.2).collect(),
            episode_fingerprint: fingerprint.hex(),
        })
    }

    /// Test-class evaluation at `t_test` samples. Parameters are read-only.
    pub fn meta_test(
        &self,
        model: &Model,
        store: &ParamStore,
        config: &RunConfig,
        exec: Execution,
    ) -> Result<EvalSummary> {
        self.evaluate(model, store, config, Phase::Test, config.t_test, exec)
    }

    /// Training followed by meta-test on the selected parameters.
    pub fn run(&self, config: &RunConfig, exec: Execution) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut out = self.train(config, exec)?;
        let test = self.meta_test(&out.model, &out.store, config, exec)?;
        log::info!(
            "{}: meta-test accuracy {:.4} ± {:.4}",
            config.method_name(),
            test.mean_accuracy,
            test.std_error
        );
        out.metrics.test = Some(test);
        out.metrics.wall_clock_seconds = start.elapsed().as_secs_f64();
        Ok(out)
    }
}

/// Settings are validated before the loop, so a failing forward pass inside
/// it means the parameters went bad (non-finite values, collapsed embeddings).
fn divergence(e: Error, episode: usize) -> Error {
    match e {
        Error::Tensor(_) | Error::Config(_) => Error::Divergence {
            episode,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// Accuracy, loss and mean σ of one episode on fixed embeddings.
fn evaluate_episode(
    model: &Model,
    store: &ParamStore,
    emb: &Array2<f64>,
    episode: &Episode,
    noise: Option<ndarray::Array3<f64>>,
) -> Result<(f64, f64, Option<f64>)> {
    let mut tape = Tape::new();
    let support = tape.constant(emb.select(ndarray::Axis(0), &episode.support))?;
    let queries = tape.constant(emb.select(ndarray::Axis(0), &episode.query))?;
    let out = model.head(&mut tape, store, support, queries, episode, noise)?;
    let acc = accuracy(tape.value(out.probs), &episode.query_labels());
    let sigma = out.sigma.map(|s| tape.value(s).mean().unwrap_or(0.0));
    Ok((acc, tape.scalar(out.loss), sigma))
}
