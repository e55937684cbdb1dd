//! Run artifacts: `metrics.json`, `episodes.csv` and `checkpoint.json`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::RunMetrics;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const EPISODES_CSV_HEADER: &str = "episode,loss,train_accuracy,sigma_mean,val_accuracy";

/// Writes `bytes` to a temporary sibling of `path`, then renames it over
/// `path`, so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// One row per training episode; `val_accuracy` is filled at evaluation
/// points and `sigma_mean` for UGN runs.
pub fn episodes_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from(EPISODES_CSV_HEADER);
    out.push('\n');
    let mut evals = metrics.eval_points.iter().peekable();
    for (i, loss) in metrics.train_loss.iter().enumerate() {
        let episode = i + 1;
        let acc = metrics.train_accuracy.get(i).copied().unwrap_or(f64::NAN);
        let sigma = metrics.sigma_mean.get(i).map(|s| s.to_string()).unwrap_or_default();
        let val = match evals.peek() {
            Some(p) if p.episode == episode => evals.next().map(|p| p.val_accuracy.to_string()).unwrap_or_default(),
            _ => String::new(),
        };
        let _ = writeln!(out, "{episode},{loss},{acc},{sigma},{val}");
    }
    out
}

/// Creates `out_dir` if needed and atomically replaces the three artifacts.
pub fn write_metrics(metrics: &RunMetrics, store: &ParamStore, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut json = serde_json::to_string_pretty(metrics).expect("metrics serialise");
    json.push('\n');
    write_atomic(&out_dir.join("metrics.json"), json.as_bytes())?;
    write_atomic(&out_dir.join("episodes.csv"), episodes_csv(metrics).as_bytes())?;
    store.save(&out_dir.join("checkpoint.json"))
}
