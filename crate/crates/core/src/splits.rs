//! Deterministic few-shot and link-prediction splits.

use crate::graph::AttributedGraph;
use crate::rng::{mix, prng, shuffled, Prng};
use crate::{RgfmError, Result};
use rand::Rng;

/// Per-class support node ids plus the remaining labeled query nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub support: Vec<Vec<usize>>,
    pub query: Vec<usize>,
    pub seed: u64,
}

impl FewShotSplit {
    pub fn support_flat(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (class, nodes) in self.support.iter().enumerate() {
            for &u in nodes {
                out.push((u, class));
            }
        }
        out
    }
}

/// Train/val/test positive edges with per-bucket sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSplit {
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub train_neg: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Draw `shots` labeled support nodes per class; every other labeled node
/// becomes a query node. Deterministic under `seed`.
pub fn few_shot_split(g: &AttributedGraph, shots: usize, seed: u64) -> Result<FewShotSplit> {
    if g.num_classes() == 0 {
        return Err(RgfmError::InvalidArgument(format!(
            "graph {} has no labeled classes",
            g.name()
        )));
    }
    if shots == 0 {
        return Err(RgfmError::InvalidArgument("shots must be at least 1".into()));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
    for u in g.labeled_nodes() {
        per_class[g.label(u).unwrap()].push(u);
    }
    let mut support = Vec::with_capacity(g.num_classes());
    let mut query = Vec::new();
    for (class, nodes) in per_class.iter().enumerate() {
        if nodes.len() < shots {
            return Err(RgfmError::InvalidArgument(format!(
                "class {class} has {} labeled nodes, fewer than {shots} shots",
                nodes.len()
            )));
        }
        let mut rng = prng(mix(seed, class as u64));
        let order = shuffled(nodes.len(), &mut rng);
        support.push(order[..shots].iter().map(|&i| nodes[i]).collect());
        query.extend(order[shots..].iter().map(|&i| nodes[i]));
    }
    query.sort_unstable();
    Ok(FewShotSplit { support, query, seed })
}

/// Split undirected edges into train/val/test positives and sample one
/// negative non-edge per positive in each bucket.
pub fn link_split(
    g: &AttributedGraph,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<LinkSplit> {
    if g.num_edges() == 0 {
        return Err(RgfmError::InvalidArgument("link_split needs at least one edge".into()));
    }
    if !(0.0..=1.0).contains(&val_frac)
        || !(0.0..=1.0).contains(&test_frac)
        || val_frac + test_frac > 1.0
    {
        return Err(RgfmError::InvalidArgument(format!(
            "invalid split fractions val={val_frac} test={test_frac}"
        )));
    }
    let edges = g.undirected_edges();
    let m = edges.len();
    let mut rng = prng(mix(seed, 0x4c494e4b));
    let order = shuffled(m, &mut rng);
    let n_test = (test_frac * m as f64).floor() as usize;
    let n_val = (val_frac * m as f64).floor() as usize;
    let test_pos: Vec<_> = order[..n_test].iter().map(|&i| edges[i]).collect();
    let val_pos: Vec<_> = order[n_test..n_test + n_val].iter().map(|&i| edges[i]).collect();
    let train_pos: Vec<_> = order[n_test + n_val..].iter().map(|&i| edges[i]).collect();

    let train_neg = sample_negatives(g, train_pos.len(), &mut rng)?;
    let val_neg = sample_negatives(g, val_pos.len(), &mut rng)?;
    let test_neg = sample_negatives(g, test_pos.len(), &mut rng)?;
    Ok(LinkSplit { train_pos, val_pos, test_pos, train_neg, val_neg, test_neg, seed })
}

/// Uniform non-edges `(u, v)` with `u < v`, distinct within the sample.
fn sample_negatives(
    g: &AttributedGraph,
    count: usize,
    rng: &mut Prng,
) -> Result<Vec<(usize, usize)>> {
    let n = g.num_nodes();
    if count > 0 && n < 2 {
        return Err(RgfmError::InvalidArgument("too few nodes for negative sampling".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let max_attempts = 1000 * count.max(1);
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(RgfmError::InvalidArgument(
                "graph too dense to sample the requested negatives".into(),
            ));
        }
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if g.has_edge(pair.0, pair.1) || out.contains(&pair) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}

impl LinkSplit {
    /// Graph with only the training positives kept, so held-out edges
    /// never appear in the adjacency used for embeddings.
    pub fn train_graph(&self, g: &AttributedGraph) -> AttributedGraph {
        AttributedGraph::new(
            g.name().to_string(),
            g.num_nodes(),
            &self.train_pos,
            g.features().clone(),
            g.labels_raw().to_vec(),
            g.num_classes(),
        )
        .expect("training edges are a subset of valid edges")
    }
}
