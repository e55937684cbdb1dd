//! Command-line grammar and the layering of defaults, `--config` files and
//! flags into a [`RunConfig`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ugn_core::backbones::BackboneKind;
use ugn_core::trainer::RunConfig;
use ugn_core::ugn::SigmaGnn;
use ugn_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "ugn",
    version,
    about = "Few-shot node classification with uncertainty graph networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset, meta-test the selected parameters and write the artifacts.
    Train(TrainArgs),
    /// Meta-test a checkpoint without updating it.
    Eval(EvalArgs),
    /// Train and meta-test one UGN model per partition count.
    Sweep(SweepArgs),
    /// Generate a synthetic stochastic-block-model dataset.
    Synth(SynthArgs),
    /// Run the gradient-check and invariant suite.
    Check,
    /// Paired baseline/UGN comparison over several seeds, rendered as a table.
    Compare(CompareArgs),
}

/// Experiment flags shared by every training command. Unset flags fall back
/// to the `--config` file, then to the built-in defaults.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    /// Dataset directory (meta.json, edges.tsv, features.tsv, labels.tsv).
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file of run settings, applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder: gcn, sgc, sage, gin, appnp or gat.
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// Enable the uncertainty head.
    #[arg(long, overrides_with = "no_ugn")]
    pub ugn: bool,
    /// Use the plain metric head.
    #[arg(long = "no-ugn", overrides_with = "ugn")]
    pub no_ugn: bool,
    /// Network mapping class graphs to standard deviations.
    #[arg(long = "ugn-gnn")]
    pub ugn_gnn: Option<SigmaGnn>,
    /// Classes per episode.
    #[arg(long)]
    pub n: Option<usize>,
    /// Support nodes per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// Query nodes per class.
    #[arg(long)]
    pub m: Option<usize>,
    /// Training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Monte-Carlo samples per training episode.
    #[arg(long = "T-train")]
    pub t_train: Option<usize>,
    /// Monte-Carlo samples per evaluation episode.
    #[arg(long = "T-test")]
    pub t_test: Option<usize>,
    /// Embedding partitions of the relational features.
    #[arg(long = "L")]
    pub partitions: Option<usize>,
    /// Hidden width of the encoder.
    #[arg(long = "hidden-dim")]
    pub hidden_dim: Option<usize>,
    /// Embedding width.
    #[arg(long = "out-dim")]
    pub out_dim: Option<usize>,
    /// Cosine-similarity temperature.
    #[arg(long)]
    pub temp: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    pub wd: Option<f64>,
    /// Seed of every random stream in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Episodes per validation or meta-test evaluation.
    #[arg(long = "eval-episodes")]
    pub eval_episodes: Option<usize>,
    /// Training episodes between validation evaluations.
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Output directory for metrics.json, episodes.csv and checkpoint.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Directory of a finished training run; its metrics.json supplies the
    /// base settings and its checkpoint.json the parameters.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Checkpoint to load instead of `<run-dir>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write the evaluation artifacts; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Partition counts to sweep.
    #[arg(long = "L-values", value_delimiter = ',', default_values_t = [4, 8, 16, 32])]
    pub l_values: Vec<usize>,
    /// Backbones to sweep; defaults to the configured backbone.
    #[arg(long, value_delimiter = ',')]
    pub backbones: Vec<BackboneKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Backbones to compare; defaults to the configured backbone.
    #[arg(long, value_delimiter = ',')]
    pub backbones: Vec<BackboneKind>,
    /// Episode settings as `n x k` pairs, e.g. `5x3,5x5`.
    #[arg(long, value_delimiter = ',', default_values = ["5x3", "5x5"], value_parser = parse_setting)]
    pub settings: Vec<(usize, usize)>,
    /// Number of paired seeds, starting at `--seed`.
    #[arg(long = "num-seeds", default_value_t = 20)]
    pub num_seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long = "per-class", default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Edge probability within a class.
    #[arg(long, default_value_t = 0.1)]
    pub intra: f64,
    /// Edge probability across classes.
    #[arg(long, default_value_t = 0.01)]
    pub inter: f64,
    /// Norm of the class mean vectors.
    #[arg(long, default_value_t = 5.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Train, validation and test class counts written to splits.json;
    /// defaults to a 50/25/25 split.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_setting(s: &str) -> std::result::Result<(usize, usize), String> {
    let (n, k) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected n x k, e.g. 5x3, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok((parse(n)?, parse(k)?))
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

impl RunFlags {
    /// `base`, overlaid with the `--config` file, overlaid with the flags.
    pub fn resolve(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        if let Some(path) = &self.config {
            let mut merged = serde_json::to_value(&cfg).expect("config serialises");
            let overlay = read_json(path)?;
            let (Some(m), serde_json::Value::Object(o)) = (merged.as_object_mut(), overlay) else {
                return Err(Error::config(format!("{}: expected a JSON object", path.display())));
            };
            m.extend(o);
            cfg = serde_json::from_value(merged).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(
            backbone => backbone, ugn_gnn => ugn_gnn, n => n, k => k, m => m, episodes => episodes,
            t_train => t_train, t_test => t_test, partitions => partitions, hidden_dim => hidden_dim,
            out_dim => out_dim, temp => temperature, lr => learning_rate, wd => weight_decay, seed => seed,
            eval_episodes => eval_episodes, eval_every => eval_every
        );
        if self.ugn {
            cfg.ugn = true;
        }
        if self.no_ugn {
            cfg.ugn = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
