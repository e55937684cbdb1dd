//! Partition sweep and paired baseline/UGN comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{Experiment, RunConfig};
use crate::backbones::BackboneKind;
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Embedding width used by every sweep run, divisible by all swept `L`.
pub const SWEEP_OUT_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub backbone: BackboneKind,
    pub partitions: usize,
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub best_val_accuracy: Option<f64>,
}

/// Independent UGN runs, one per entry of `l_values`, sharing the base seed
/// and with `out_dim` forced to [`SWEEP_OUT_DIM`].
pub fn sensitivity_sweep(
    exp: &Experiment<'_>,
    base: &RunConfig,
    l_values: &[usize],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if l_values.is_empty() {
        return Err(Error::config("the sweep needs at least one partition count"));
    }
    let configs: Vec<RunConfig> = l_values
        .iter()
        .map(|&l| RunConfig {
            ugn: true,
            partitions: l,
            out_dim: SWEEP_OUT_DIM,
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let runs = exec.map(configs, |c| exp.run(&c, exec).map(|o| (c, o.metrics)));
    runs.into_iter()
        .map(|r| {
            let (c, m) = r?;
            let test = m.test.expect("run reports a meta-test");
            Ok(SweepRow {
                backbone: c.backbone,
                partitions: c.partitions,
                mean_accuracy: test.mean_accuracy,
                std_error: test.std_error,
                best_val_accuracy: m.best_val_accuracy,
            })
        })
        .collect()
}

/// One-sided paired Student t-test of `mean(ugn - baseline) > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub pairs: usize,
    pub mean_difference: f64,
    pub std_error: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

impl PairedTest {
    pub fn new(baseline: &[f64], treated: &[f64]) -> Result<Self> {
        if baseline.len() != treated.len() || baseline.len() < 2 {
            return Err(Error::config(
                "a paired test needs two equally long samples of at least 2",
            ));
        }
        let d: Vec<f64> = treated.iter().zip(baseline).map(|(t, b)| t - b).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let (t, p) = if se > 0.0 {
            let t = mean / se;
            let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
            (t, 1.0 - dist.cdf(t))
        } else if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        Ok(PairedTest {
            pairs: d.len(),
            mean_difference: mean,
            std_error: se,
            t_statistic: t,
            p_value: p,
        })
    }

    pub fn significant(&self, level: f64) -> bool {
        self.p_value < level
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub backbone: BackboneKind,
    pub n: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Meta-test accuracy per seed.
    pub baseline: Vec<f64>,
    pub ugn: Vec<f64>,
    pub test: PairedTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

/// For every backbone, `(n, k)` setting and seed, trains and meta-tests the
/// baseline and its UGN variant on identical episode streams.
pub fn paired_comparison(
    exp: &Experiment<'_>,
    base: &RunConfig,
    backbones: &[BackboneKind],
    settings: &[(usize, usize)],
    seeds: &[u64],
    exec: Execution,
) -> Result<ComparisonReport> {
    let mut jobs = Vec::new();
    for &backbone in backbones {
        for &(n, k) in settings {
            for &seed in seeds {
                for ugn in [false, true] {
                    jobs.push(RunConfig {
                        backbone,
                        n,
                        k,
                        seed,
                        ugn,
                        ..base.clone()
                    });
                }
            }
        }
    }
    for c in &jobs {
        c.validate()?;
    }
    let results = exec.map(jobs, |c| {
        exp.run(&c, exec).map(|o| {
            log::info!(
                "{} {}-way {}-shot seed {}: {:.4}",
                c.method_name(),
                c.n,
                c.k,
                c.seed,
                o.metrics.test.as_ref().map_or(0.0, |t| t.mean_accuracy)
            );
            o.metrics.test.map_or(0.0, |t| t.mean_accuracy)
        })
    });
    let accs: Vec<f64> = results.into_iter().collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut it = accs.chunks(2);
    for &backbone in backbones {
        for &(n, k) in settings {
            let (mut baseline, mut ugn) = (Vec::new(), Vec::new());
            for _ in seeds {
                let pair = it.next().expect("one result pair per seed");
                baseline.push(pair[0]);
                ugn.push(pair[1]);
            }
            let test = PairedTest::new(&baseline, &ugn)?;
            rows.push(ComparisonRow {
                backbone,
                n,
                k,
                seeds: seeds.to_vec(),
                baseline,
                ugn,
                test,
            });
        }
    }
    Ok(ComparisonReport { rows })
}

fn pct(xs: &[f64]) -> String {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * sd / n.sqrt())
}

/// Markdown table of average accuracies in percent (mean ± standard error
/// over seeds), one column per setting and a baseline/UGN row pair per
/// backbone, followed by the paired tests.
pub fn render_comparison(report: &ComparisonReport) -> String {
    let mut settings: Vec<(usize, usize)> = Vec::new();
    let mut backbones: Vec<BackboneKind> = Vec::new();
    for r in &report.rows {
        if !settings.contains(&(r.n, r.k)) {
            settings.push((r.n, r.k));
        }
        if !backbones.contains(&r.backbone) {
            backbones.push(r.backbone);
        }
    }
    let find = |b: BackboneKind, s: (usize, usize)| report.rows.iter().find(|r| r.backbone == b && (r.n, r.k) == s);
    let mut out = String::from("| Method |");
    for (n, k) in &settings {
        let _ = write!(out, " {n}-way {k}-shot |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(settings.len()));
    out.push('\n');
    for &b in &backbones {
        for ugn in [false, true] {
            let name = if ugn {
                format!("UGN-{}", b.display_name())
            } else {
                b.display_name().to_string()
            };
            let _ = write!(out, "| {name} |");
            for &s in &settings {
                let cell = find(b, s).map_or_else(|| "-".to_string(), |r| pct(if ugn { &r.ugn } else { &r.baseline }));
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
    }
    out.push_str("\nPaired one-sided t-tests (UGN minus baseline):\n\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "- {} {}-way {}-shot: mean difference {:+.2} pts over {} seeds, t = {:.3}, p = {:.4}",
            r.backbone.display_name(),
            r.n,
            r.k,
            100.0 * r.test.mean_difference,
            r.test.pairs,
            r.test.t_statistic,
            r.test.p_value
        );
    }
    out
}
