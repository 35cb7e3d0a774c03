//! Attributed-graph storage, degree statistics, k-hop extraction, and
//! evaluation-time perturbations.
//!
//! Graphs are immutable after construction; every operation here is a
//! pure function over `&AttributedGraph` and an explicit seed.

use crate::rng::{mix, prng, sample_without_replacement};
use crate::tensor::Matrix;
use crate::{RgfmError, Result};

/// Undirected attributed graph in compressed adjacency form with dense
/// per-node feature rows and optional integer labels (`-1` = unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    name: String,
    num_nodes: usize,
    num_classes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    features: Matrix,
    labels: Vec<i64>,
}

/// Population statistics of the degree sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegreeStats {
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
}

/// A k-hop ego subgraph with its local-to-global node map.
///
/// `nodes[0]` is always the center; `nodes` is exactly the set of nodes
/// within BFS distance `hop` of the center, and `edges` is the full
/// induced edge set in local indices with `u < v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSample {
    pub center: usize,
    pub hop: usize,
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub features: Matrix,
}

impl SubgraphSample {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Local degrees under the induced edge set.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.nodes.len()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

impl AttributedGraph {
    /// Build a graph from an undirected edge list. Edges are symmetrized
    /// and deduplicated; endpoints must be in range and distinct.
    pub fn new(
        name: impl Into<String>,
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<i64>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(RgfmError::Parse(format!(
                "feature row count {} does not match num_nodes {num_nodes}",
                features.rows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(RgfmError::Parse(format!(
                "label count {} does not match num_nodes {num_nodes}",
                labels.len()
            )));
        }
        for &l in &labels {
            if l >= 0 && (num_classes == 0 || l as usize >= num_classes) {
                return Err(RgfmError::Parse(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
        }
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(RgfmError::Parse(format!(
                    "edge ({u}, {v}) endpoint out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(RgfmError::Parse(format!("self-loop on node {u}")));
            }
            adj[u].push(v as u32);
            adj[v].push(u as u32);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Ok(AttributedGraph {
            name: name.into(),
            num_nodes,
            num_classes,
            offsets,
            neighbors,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn neighbors(&self, u: usize) -> &[u32] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn label(&self, u: usize) -> Option<usize> {
        let l = self.labels[u];
        (l >= 0).then_some(l as usize)
    }

    pub fn labels_raw(&self) -> &[i64] {
        &self.labels
    }

    /// Node ids with a non-negative label.
    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes).filter(|&u| self.labels[u] >= 0).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }

    /// Canonical undirected edge list with `u < v`, ascending.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                let v = v as usize;
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Mean, population std and coefficient of variation of degrees.
    /// A zero mean degree (all-isolated graph) has no defined CV.
    pub fn degree_stats(&self) -> Result<DegreeStats> {
        if self.num_nodes == 0 {
            return Err(RgfmError::InvalidArgument("degree_stats of empty graph".into()));
        }
        let n = self.num_nodes as f64;
        let mean = self.neighbors.len() as f64 / n;
        let var = (0..self.num_nodes)
            .map(|u| {
                let d = self.degree(u) as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if mean == 0.0 {
            return Err(RgfmError::InvalidArgument(
                "all-isolated graph has undefined degree CV".into(),
            ));
        }
        Ok(DegreeStats { mean, std, cv: std / mean })
    }

    /// BFS-defined k-hop ego subgraph with the full induced edge set.
    pub fn k_hop_subgraph(&self, center: usize, k: usize) -> SubgraphSample {
        assert!(center < self.num_nodes, "center {center} out of range");
        let mut local = vec![usize::MAX; self.num_nodes];
        let mut nodes = vec![center];
        local[center] = 0;
        let mut frontier = vec![center];
        for _ in 0..k {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in self.neighbors(u) {
                    let v = v as usize;
                    if local[v] == usize::MAX {
                        local[v] = nodes.len();
                        nodes.push(v);
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        let mut edges = Vec::new();
        for (&g_u, lu) in nodes.iter().zip(0..) {
            for &g_v in self.neighbors(g_u) {
                let lv = local[g_v as usize];
                if lv != usize::MAX && lu < lv {
                    edges.push((lu, lv));
                }
            }
        }
        edges.sort_unstable();
        let rows: Vec<Vec<f64>> = nodes.iter().map(|&u| self.features.row(u).to_vec()).collect();
        SubgraphSample {
            center,
            hop: k,
            nodes,
            edges,
            features: Matrix::from_rows(&rows),
        }
    }

    /// Remove `floor(p * |E|)` undirected edges uniformly at random.
    /// Both directions of each sampled pair are removed together.
    pub fn perturb_edges(&self, p: f64, seed: u64) -> Result<AttributedGraph> {
        if !(0.0..=1.0).contains(&p) {
            return Err(RgfmError::InvalidArgument(format!("drop rate {p} outside [0, 1]")));
        }
        let edges = self.undirected_edges();
        let drop = (p * edges.len() as f64).floor() as usize;
        let mut rng = prng(mix(seed, 0x45444745));
        let dropped = sample_without_replacement(edges.len(), drop, &mut rng);
        let mut keep = vec![true; edges.len()];
        for i in dropped {
            keep[i] = false;
        }
        let kept: Vec<(usize, usize)> = edges
            .into_iter()
            .zip(&keep)
            .filter_map(|(e, &k)| k.then_some(e))
            .collect();
        AttributedGraph::new(
            self.name.clone(),
            self.num_nodes,
            &kept,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }

    /// Zero out `floor(r * num_nodes)` whole feature rows.
    pub fn perturb_features(&self, r: f64, seed: u64) -> Result<AttributedGraph> {
        if !(0.0..=1.0).contains(&r) {
            return Err(RgfmError::InvalidArgument(format!("mask ratio {r} outside [0, 1]")));
        }
        let masked = (r * self.num_nodes as f64).floor() as usize;
        let mut rng = prng(mix(seed, 0x4d41534b));
        let rows = sample_without_replacement(self.num_nodes, masked, &mut rng);
        let mut features = self.features.clone();
        for u in rows {
            for v in features.row_mut(u) {
                *v = 0.0;
            }
        }
        let mut out = self.clone();
        out.features = features;
        Ok(out)
    }
}
