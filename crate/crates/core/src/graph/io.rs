//! Tab-separated dataset directory: `edges.tsv`, `features.tsv`, `labels.tsv`
//! and `meta.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GraphError, SparseGraph};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => GraphError::MissingFile { path: path.into() },
        _ => GraphError::Parse {
            path: path.into(),
            line: 0,
            msg: e.to_string(),
        },
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SparseGraph, GraphError> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta =
        serde_json::from_str(&read(&meta_path)?).map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    let n = meta.num_nodes;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (ln, line) in lines(&read(&edges_path)?) {
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(&edges_path, ln, "expected two node ids"));
        };
        let id = |s: &str| -> Result<usize, GraphError> {
            let v: usize = s
                .parse()
                .map_err(|_| parse_err(&edges_path, ln, format!("invalid node id {s:?}")))?;
            if v >= n {
                return Err(parse_err(&edges_path, ln, format!("node index {v} out of range")));
            }
            Ok(v)
        };
        edges.push((id(a)?, id(b)?));
    }

    let feat_path = dir.join("features.tsv");
    let mut features = Array2::zeros((n, meta.feature_dim));
    let mut rows = 0;
    for (ln, line) in read(&feat_path)?
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
    {
        if line.is_empty() && meta.feature_dim > 0 {
            continue;
        }
        if rows >= n {
            return Err(parse_err(&feat_path, ln, format!("more than {n} feature rows")));
        }
        let vals: Vec<&str> = if meta.feature_dim == 0 {
            Vec::new()
        } else {
            line.split('\t').collect()
        };
        if vals.len() != meta.feature_dim {
            return Err(parse_err(
                &feat_path,
                ln,
                format!("ragged row: {} values, expected {}", vals.len(), meta.feature_dim),
            ));
        }
        for (j, s) in vals.iter().enumerate() {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| parse_err(&feat_path, ln, format!("invalid float {s:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(&feat_path, ln, format!("non-finite value {s:?}")));
            }
            features[[rows, j]] = v;
        }
        rows += 1;
    }
    if rows != n {
        return Err(parse_err(
            &feat_path,
            rows,
            format!("{rows} feature rows, expected {n}"),
        ));
    }

    let labels_path = dir.join("labels.tsv");
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in lines(&read(&labels_path)?) {
        let c: usize = line
            .trim()
            .parse()
            .map_err(|_| parse_err(&labels_path, ln, format!("invalid label {line:?}")))?;
        if c >= meta.num_classes {
            return Err(parse_err(
                &labels_path,
                ln,
                format!("label {c} out of range for {} classes", meta.num_classes),
            ));
        }
        if labels.len() == n {
            return Err(parse_err(&labels_path, ln, format!("more than {n} labels")));
        }
        labels.push(c);
    }
    if labels.len() != n {
        return Err(parse_err(
            &labels_path,
            labels.len(),
            format!("{} labels, expected {n}", labels.len()),
        ));
    }

    SparseGraph::from_edges(n, &edges, features, labels, meta.num_classes)
}

pub fn save_dataset(graph: &SparseGraph, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    let io_err = |path: PathBuf| move |e: std::io::Error| parse_err(&path, 0, e.to_string());
    fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;

    let meta = DatasetMeta {
        num_nodes: graph.num_nodes(),
        num_classes: graph.num_classes(),
        feature_dim: graph.feature_dim(),
    };
    let mut meta_json = serde_json::to_string(&meta).expect("meta serialises");
    meta_json.push('\n');

    let mut edges = String::new();
    for (u, v) in graph.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    let mut feats = String::new();
    for row in graph.features().rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                feats.push('\t');
            }
            feats.push_str(&format_g17(*v));
        }
        feats.push('\n');
    }
    let mut labels = String::new();
    for c in graph.labels() {
        writeln!(labels, "{c}").unwrap();
    }

    for (name, body) in [
        ("meta.json", meta_json),
        ("edges.tsv", edges),
        ("features.tsv", feats),
        ("labels.tsv", labels),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(path.clone()))?;
    }
    Ok(())
}

/// Renders a float the way C's `printf("%.17g")` does.
pub fn format_g17(x: f64) -> String {
    const P: i32 = 17;
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip_zeros(mantissa), sign, exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
