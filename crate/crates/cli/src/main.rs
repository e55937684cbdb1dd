//! `ugn` command-line driver.
//!
//! Exit codes: 0 on success, 1 for configuration errors (bad flags, malformed
//! input files, infeasible episode shapes), 2 for runtime failures. Errors are
//! printed to stderr as one JSON object per line.

mod args;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};
use ugn_core::autodiff::ParamStore;
use ugn_core::episodes::{split_classes, ClassSplit};
use ugn_core::exec::Execution;
use ugn_core::graph::{generate_synthetic, load_dataset, save_dataset, SparseGraph, SyntheticSpec};
use ugn_core::trainer::{
    paired_comparison, render_comparison, sensitivity_sweep, write_atomic, write_metrics, Experiment, RunConfig,
    RunMetrics,
};
use ugn_core::{Error, Result};

use args::{Cli, Command, CompareArgs, EvalArgs, RunFlags, SweepArgs, SynthArgs, TrainArgs};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UGN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "config", "message": first}));
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let kind = if e.is_config() { "config" } else { "runtime" };
            eprintln!("{}", json!({"error": kind, "message": e.to_string()}));
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Synth(a) => synth(a),
        Command::Compare(a) => compare(a),
        Command::Check => check(),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn execution(jobs: usize) -> Execution {
    if jobs == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Class counts for a 50/25/25 split of `classes` classes.
fn default_counts(classes: usize) -> (usize, usize, usize) {
    let val = classes / 4;
    let test = classes / 4;
    (classes - val - test, val, test)
}

/// `<data>/splits.json` when present, else a default split over the classes
/// large enough for the episode shape, seeded with the run seed.
fn load_split(graph: &SparseGraph, data: &Path, cfg: &RunConfig) -> Result<(ClassSplit, bool)> {
    let path = data.join("splits.json");
    if path.exists() {
        let split = ClassSplit::load(&path)?;
        split.validate(graph.num_classes(), false)?;
        return Ok((split, false));
    }
    let min = cfg.k + cfg.m;
    let eligible = graph.nodes_by_class().iter().filter(|c| c.len() >= min).count();
    let split = split_classes(graph, default_counts(eligible), min, cfg.seed)?;
    log::warn!("{} not found; using a generated 50/25/25 class split", path.display());
    Ok((split, true))
}

fn invocation(command: &str, run: &RunFlags, extra: &[(&str, Value)]) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("data".into(), json!(run.data));
    m.insert("config".into(), json!(run.config));
    m.insert("jobs".into(), json!(run.jobs));
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn summary(m: &RunMetrics) -> Value {
    let test = m.test.as_ref();
    json!({
        "method": m.config.method_name(),
        "test_accuracy": test.map(|t| t.mean_accuracy),
        "test_std_error": test.map(|t| t.std_error),
        "best_val_accuracy": m.best_val_accuracy,
        "best_episode": m.best_episode,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.run.resolve(&RunConfig::default())?;
    let graph = load_dataset(&a.run.data)?;
    let (split, generated) = load_split(&graph, &a.run.data, &cfg)?;
    let exp = Experiment::new(&graph, &split)?;
    let exec = execution(a.run.jobs);
    let mut out = exec.with_jobs(a.run.jobs, || exp.run(&cfg, exec))?;
    out.metrics.invocation = invocation("train", &a.run, &[("out", json!(a.out))]);
    write_metrics(&out.metrics, &out.store, &a.out)?;
    if generated {
        split.save(&a.out.join("splits.json"))?;
    }
    println!("{}", summary(&out.metrics));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let metrics_path = a.run_dir.join("metrics.json");
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    let trained: RunMetrics = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: metrics_path,
        source: e,
    })?;
    let cfg = a.run.resolve(&trained.config)?;
    let graph = load_dataset(&a.run.data)?;
    let split_path = a.run_dir.join("splits.json");
    let split = if split_path.exists() {
        ClassSplit::load(&split_path)?
    } else {
        load_split(&graph, &a.run.data, &cfg)?.0
    };
    let exp = Experiment::new(&graph, &split)?;
    let (model, mut store) = exp.init_model(&cfg)?;
    let ck = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.run_dir.join("checkpoint.json"));
    store.load_values(&ParamStore::load(&ck)?)?;
    let exec = execution(a.run.jobs);
    let test = exec.with_jobs(a.run.jobs, || exp.meta_test(&model, &store, &cfg, exec))?;
    let metrics = RunMetrics {
        config: cfg,
        invocation: invocation(
            "eval",
            &a.run,
            &[
                ("run_dir", json!(a.run_dir)),
                ("checkpoint", json!(ck)),
                ("out", json!(a.out)),
            ],
        ),
        train_loss: vec![],
        train_accuracy: vec![],
        sigma_mean: vec![],
        sigma_max: vec![],
        eval_points: vec![],
        param_checksum: format!("{:016x}", store.checksum()),
        test: Some(test),
        ..trained
    };
    if let Some(out) = &a.out {
        write_metrics(&metrics, &store, out)?;
    }
    println!("{}", summary(&metrics));
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = a.run.resolve(&RunConfig::default())?;
    let graph = load_dataset(&a.run.data)?;
    let (split, _) = load_split(&graph, &a.run.data, &base)?;
    let exp = Experiment::new(&graph, &split)?;
    let exec = execution(a.run.jobs);
    let backbones = if a.backbones.is_empty() {
        vec![base.backbone]
    } else {
        a.backbones.clone()
    };
    let mut rows = Vec::new();
    for b in backbones {
        let cfg = RunConfig {
            backbone: b,
            ..base.clone()
        };
        rows.extend(exec.with_jobs(a.run.jobs, || sensitivity_sweep(&exp, &cfg, &a.l_values, exec))?);
    }
    create_dir(&a.out)?;
    write_json(
        &a.out.join("sweep.json"),
        &json!({"config": base, "invocation": invocation("sweep", &a.run, &[("out", json!(a.out))]), "rows": rows}),
    )?;
    let mut csv = String::from("backbone,L,mean_accuracy,std_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.backbone, r.partitions, r.mean_accuracy, r.std_error
        ));
    }
    write_atomic(&a.out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let base = a.run.resolve(&RunConfig::default())?;
    let graph = load_dataset(&a.run.data)?;
    let (split, _) = load_split(&graph, &a.run.data, &base)?;
    let exp = Experiment::new(&graph, &split)?;
    let exec = execution(a.run.jobs);
    let backbones = if a.backbones.is_empty() {
        vec![base.backbone]
    } else {
        a.backbones.clone()
    };
    let seeds: Vec<u64> = (0..a.num_seeds).map(|i| base.seed + i).collect();
    let report = exec.with_jobs(a.run.jobs, || {
        paired_comparison(&exp, &base, &backbones, &a.settings, &seeds, exec)
    })?;
    let table = render_comparison(&report);
    create_dir(&a.out)?;
    write_json(
        &a.out.join("comparison.json"),
        &json!({"config": base, "invocation": invocation("compare", &a.run, &[("out", json!(a.out))]), "report": report}),
    )?;
    write_atomic(&a.out.join("comparison.md"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        nodes_per_class: a.per_class,
        feature_dim: a.dim,
        intra_edge_prob: a.intra,
        inter_edge_prob: a.inter,
        signal_strength: a.signal,
        seed: a.seed,
    };
    let graph = generate_synthetic(&spec)?;
    let counts = match a.split.as_deref() {
        Some(&[tr, va, te]) => (tr, va, te),
        Some(_) => return Err(Error::config("--split takes three counts: train,val,test")),
        None => default_counts(a.classes),
    };
    let split = split_classes(&graph, counts, 1, a.seed)?;
    save_dataset(&graph, &a.out)?;
    split.save(&a.out.join("splits.json"))?;
    write_json(&a.out.join("synthetic.json"), &json!(spec))?;
    println!(
        "{}",
        json!({"out": a.out, "nodes": graph.num_nodes(), "edges": graph.num_arcs() / 2, "classes": graph.num_classes()})
    );
    Ok(())
}

fn check() -> Result<()> {
    let report = ugn_core::check::run_all()?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Divergence {
            episode: 0,
            reason: format!("{} self-checks failed", report.failures().count()),
        })
    }
}
