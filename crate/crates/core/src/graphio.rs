//! Text file format for attributed graphs, plus a process-wide read audit.
//!
//! Format:
//!
//! ```text
//! GRAPH v1 <num_nodes> <num_edges> <d_in> <num_classes|0>
//! <num_nodes lines of d_in space-separated reals>      (features)
//! <num_nodes lines of one integer each, -1 = unlabeled> (labels)
//! <num_edges lines "u v">                               (undirected edges)
//! ```
//!
//! Splits and perturbed graphs are emitted in the same format. Every read
//! goes through [`load_graph`], which records the path in a global audit
//! log so tests can assert which files a pipeline stage touched.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::graph::AttributedGraph;
use crate::tensor::Matrix;
use crate::{RgfmError, Result};

static READ_AUDIT: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());

/// Forget previously recorded reads.
pub fn audit_clear() {
    READ_AUDIT.lock().unwrap().clear();
}

/// Paths read through [`load_graph`] since the last [`audit_clear`].
pub fn audit_snapshot() -> Vec<PathBuf> {
    READ_AUDIT.lock().unwrap().clone()
}

fn audit_record(path: &Path) {
    let canonical = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    READ_AUDIT.lock().unwrap().push(canonical);
}

/// Load and validate a graph file; the graph name is the file stem.
pub fn load_graph(path: &Path) -> Result<AttributedGraph> {
    audit_record(path);
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".to_string());
    parse_graph(&text, &name).map_err(|e| match e {
        RgfmError::Parse(msg) => RgfmError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parse graph text (see module docs for the layout).
pub fn parse_graph(text: &str, name: &str) -> Result<AttributedGraph> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| RgfmError::Parse("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "GRAPH" || fields[1] != "v1" {
        return Err(RgfmError::Parse(format!("malformed header: {header:?}")));
    }
    let num_nodes: usize = parse_field(fields[2], "num_nodes")?;
    let num_edges: usize = parse_field(fields[3], "num_edges")?;
    let d_in: usize = parse_field(fields[4], "d_in")?;
    let num_classes: usize = parse_field(fields[5], "num_classes")?;
    if d_in == 0 {
        return Err(RgfmError::Parse("d_in must be at least 1".into()));
    }

    let mut features = Matrix::zeros(num_nodes, d_in);
    for r in 0..num_nodes {
        let line = lines
            .next()
            .ok_or_else(|| RgfmError::Parse(format!("missing feature row {r}")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != d_in {
            return Err(RgfmError::Parse(format!(
                "feature row {r} has {} values, expected {d_in}",
                vals.len()
            )));
        }
        for (c, v) in vals.iter().enumerate() {
            features.set(
                r,
                c,
                v.parse::<f64>()
                    .map_err(|_| RgfmError::Parse(format!("bad real {v:?} in feature row {r}")))?,
            );
        }
    }

    let mut labels = Vec::with_capacity(num_nodes);
    for r in 0..num_nodes {
        let line = lines
            .next()
            .ok_or_else(|| RgfmError::Parse(format!("missing label row {r}")))?;
        labels.push(
            line.trim()
                .parse::<i64>()
                .map_err(|_| RgfmError::Parse(format!("bad label {line:?} at row {r}")))?,
        );
    }

    let mut edges = Vec::with_capacity(num_edges);
    for e in 0..num_edges {
        let line = lines
            .next()
            .ok_or_else(|| RgfmError::Parse(format!("missing edge line {e}")))?;
        let mut it = line.split_whitespace();
        let u: usize = it
            .next()
            .ok_or_else(|| RgfmError::Parse(format!("edge line {e} is empty")))?
            .parse()
            .map_err(|_| RgfmError::Parse(format!("bad edge endpoint on line {e}")))?;
        let v: usize = it
            .next()
            .ok_or_else(|| RgfmError::Parse(format!("edge line {e} has one endpoint")))?
            .parse()
            .map_err(|_| RgfmError::Parse(format!("bad edge endpoint on line {e}")))?;
        edges.push((u, v));
    }
    if lines.next().is_some() {
        return Err(RgfmError::Parse("trailing content after edge list".into()));
    }

    AttributedGraph::new(name, num_nodes, &edges, features, labels, num_classes)
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| RgfmError::Parse(format!("bad {what}: {s:?}")))
}

/// Serialize a graph in the text format.
pub fn format_graph(g: &AttributedGraph) -> String {
    let edges = g.undirected_edges();
    let mut out = String::new();
    out.push_str(&format!(
        "GRAPH v1 {} {} {} {}\n",
        g.num_nodes(),
        edges.len(),
        g.feature_dim(),
        g.num_classes()
    ));
    for r in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(r).iter().map(|v| format_real(*v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    for &l in g.labels_raw() {
        out.push_str(&format!("{l}\n"));
    }
    for (u, v) in edges {
        out.push_str(&format!("{u} {v}\n"));
    }
    out
}

/// Shortest decimal that round-trips the `f64` exactly.
fn format_real(v: f64) -> String {
    let mut s = format!("{v}");
    if s.parse::<f64>() != Ok(v) {
        s = format!("{v:e}");
    }
    s
}

pub fn save_graph(g: &AttributedGraph, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, format_graph(g))?;
    Ok(())
}
