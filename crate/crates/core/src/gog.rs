//! Per-center graph-of-graphs construction: budget-bounded hop count,
//! cosine similarity matrix, probability-weighted edge sampling without
//! replacement, symmetrization.

use crate::encoder::EncoderParams;
use crate::graph::AttributedGraph;
use crate::rng::{mix, prng};
use crate::tensor::{l2_norm, Matrix};
use crate::{RgfmError, Result};
use rand::Rng;

/// Analytic memory model standing in for physical accounting: a subgraph
/// costs `|V| * d_in * bytes_per_feature + |E| * bytes_per_edge + overhead`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostModel {
    pub bytes_per_feature: u64,
    pub bytes_per_edge: u64,
    pub overhead: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { bytes_per_feature: 8, bytes_per_edge: 16, overhead: 1024 }
    }
}

impl CostModel {
    pub fn subgraph_cost(&self, num_nodes: usize, num_edges: usize, d_in: usize) -> u64 {
        num_nodes as u64 * d_in as u64 * self.bytes_per_feature
            + num_edges as u64 * self.bytes_per_edge
            + self.overhead
    }
}

/// Hop subgraph embeddings as GoG nodes plus a similarity-sampled
/// symmetric edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOfGraphs {
    pub center: usize,
    /// `[K x d]`, row `k` is the (k+1)-hop subgraph embedding.
    pub node_embeddings: Matrix,
    /// `[K x K]` cosine similarities with unit diagonal.
    pub similarity: Matrix,
    /// Directed edge list containing both directions of every sampled pair.
    edges: Vec<(usize, usize)>,
    /// Number of undirected sampled pairs.
    pub edge_budget: usize,
}

impl GraphOfGraphs {
    pub fn k(&self) -> usize {
        self.node_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.node_embeddings.cols()
    }

    /// Both directions of every edge.
    pub fn directed_edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Unordered pairs with `i < j`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().filter(|&(u, v)| u < v).collect()
    }

    /// Neighbor lists over the K GoG nodes.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.k()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
        }
        adj
    }
}

/// Largest `K <= k_cap` whose cumulative hop-subgraph cost fits in
/// `budget`. Probes one hop at a time and rolls back on the first
/// violation; hop subgraphs saturate at the center's component.
pub fn select_max_k(
    g: &AttributedGraph,
    center: usize,
    cost_model: &CostModel,
    budget: u64,
    k_cap: usize,
) -> Result<usize> {
    if k_cap < 1 {
        return Err(RgfmError::InvalidArgument("k_cap must be at least 1".into()));
    }
    if budget == 0 {
        return Err(RgfmError::InvalidArgument("budget must be positive".into()));
    }
    let mut cumulative = 0u64;
    for k in 1..=k_cap {
        let sub = g.k_hop_subgraph(center, k);
        let cost = cost_model.subgraph_cost(sub.num_nodes(), sub.num_edges(), g.feature_dim());
        cumulative = cumulative.saturating_add(cost);
        if cumulative > budget {
            if k == 1 {
                return Err(RgfmError::InfeasibleBudget { needed: cost, budget });
            }
            return Ok(k - 1);
        }
    }
    Ok(k_cap)
}

/// `S = X X^T` over unit-normalized rows; rejects rows whose norm
/// deviates from 1 by more than `1e-6`.
pub fn similarity_matrix(x_sub: &Matrix) -> Result<Matrix> {
    for r in 0..x_sub.rows() {
        let norm = l2_norm(x_sub.row(r));
        if (norm - 1.0).abs() > 1e-6 {
            return Err(RgfmError::InvalidArgument(format!(
                "similarity_matrix row {r} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(x_sub.matmul_nt(x_sub))
}

/// Sampling distribution over unordered pairs `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDistribution {
    pub pairs: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
}

/// `Prob(i, j) = exp(S[i, j]) / sum_{u < v} exp(S[u, v])`.
pub fn edge_probabilities(similarity: &Matrix) -> Result<EdgeDistribution> {
    let k = similarity.rows();
    if k < 2 {
        return Err(RgfmError::InvalidArgument(
            "edge probabilities need at least two GoG nodes".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    let mut weights = Vec::with_capacity(pairs.capacity());
    for i in 0..k {
        for j in i + 1..k {
            pairs.push((i, j));
            weights.push(similarity.get(i, j).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    let probs = weights.into_iter().map(|w| w / total).collect();
    Ok(EdgeDistribution { pairs, probs })
}

/// Default edge budget `ceil(ratio * K(K-1)/2)`.
pub fn edge_budget(k: usize, ratio: f64) -> usize {
    ((ratio * (k * (k - 1) / 2) as f64).ceil()) as usize
}

/// Draw exactly `b_edge` distinct pairs by sequential weighted sampling
/// without replacement, renormalizing after each draw.
pub fn sample_edges(
    dist: &EdgeDistribution,
    b_edge: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if b_edge < 1 || b_edge > dist.pairs.len() {
        return Err(RgfmError::InvalidArgument(format!(
            "edge budget {b_edge} outside [1, {}]",
            dist.pairs.len()
        )));
    }
    let mut rng = prng(mix(seed, 0x474f47));
    let mut taken = vec![false; dist.pairs.len()];
    let mut remaining: f64 = dist.probs.iter().sum();
    let mut out = Vec::with_capacity(b_edge);
    for _ in 0..b_edge {
        let target = rng.random::<f64>() * remaining;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, (&p, &t)) in dist.probs.iter().zip(&taken).enumerate() {
            if t {
                continue;
            }
            acc += p;
            if target < acc {
                chosen = Some(i);
                break;
            }
        }
        // Floating-point underrun at the tail: take the last free slot.
        let idx = chosen.unwrap_or_else(|| {
            taken.iter().rposition(|&t| !t).expect("budget bounded by pair count")
        });
        taken[idx] = true;
        remaining -= dist.probs[idx];
        out.push(dist.pairs[idx]);
    }
    Ok(out)
}

/// GoG construction knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GogConfig {
    pub k_cap: usize,
    pub byte_budget: u64,
    pub cost_model: CostModel,
    /// Retained-edge ratio; 0 disables GoG edges (ablation support).
    pub edge_ratio: f64,
    pub seed: u64,
}

impl Default for GogConfig {
    fn default() -> Self {
        GogConfig {
            k_cap: 5,
            byte_budget: 8_000_000,
            cost_model: CostModel::default(),
            edge_ratio: 0.6,
            seed: 0,
        }
    }
}

/// Assemble a GoG from precomputed unit-norm hop embeddings.
pub fn build_gog_from_embeddings(
    center: usize,
    x_sub: Matrix,
    edge_ratio: f64,
    seed: u64,
) -> Result<GraphOfGraphs> {
    let k = x_sub.rows();
    let similarity = similarity_matrix(&x_sub)?;
    let budget = if k < 2 { 0 } else { edge_budget(k, edge_ratio) };
    let mut edges = Vec::new();
    if budget > 0 {
        let dist = edge_probabilities(&similarity)?;
        for (i, j) in sample_edges(&dist, budget, seed)? {
            edges.push((i, j));
            edges.push((j, i));
        }
        edges.sort_unstable();
    }
    Ok(GraphOfGraphs { center, node_embeddings: x_sub, similarity, edges, edge_budget: budget })
}

/// Full per-center construction: hop selection, 1..K subgraph encoding,
/// similarity, and seeded edge sampling (`seed = mix(cfg.seed, center)`).
pub fn build_gog(
    g: &AttributedGraph,
    center: usize,
    encoder: &EncoderParams,
    cfg: &GogConfig,
) -> Result<GraphOfGraphs> {
    let k = select_max_k(g, center, &cfg.cost_model, cfg.byte_budget, cfg.k_cap)?;
    let mut rows = Vec::with_capacity(k);
    for hop in 1..=k {
        let sub = g.k_hop_subgraph(center, hop);
        let z = encoder.encode_subgraph(&sub)?;
        rows.push(z.row(0).to_vec());
    }
    build_gog_from_embeddings(center, Matrix::from_rows(&rows), cfg.edge_ratio, mix(cfg.seed, center as u64))
}

/// Text dump: `GOG <center> <K> <b_edge>`, K embedding rows, then
/// undirected edge pairs.
pub fn format_gog_dump(gog: &GraphOfGraphs) -> String {
    let mut out = format!("GOG {} {} {}\n", gog.center, gog.k(), gog.edge_budget);
    for r in 0..gog.k() {
        let row: Vec<String> = gog.node_embeddings.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    for (i, j) in gog.undirected_edges() {
        out.push_str(&format!("{i} {j}\n"));
    }
    out
}

/// Parse a dump produced by [`format_gog_dump`]; the similarity matrix is
/// recomputed from the embedding rows.
pub fn parse_gog_dump(text: &str) -> Result<GraphOfGraphs> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| RgfmError::Parse("empty GoG dump".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "GOG" {
        return Err(RgfmError::Parse(format!("malformed GoG header: {header:?}")));
    }
    let center: usize = fields[1]
        .parse()
        .map_err(|_| RgfmError::Parse("bad GoG center".into()))?;
    let k: usize = fields[2].parse().map_err(|_| RgfmError::Parse("bad GoG K".into()))?;
    let b_edge: usize =
        fields[3].parse().map_err(|_| RgfmError::Parse("bad GoG edge budget".into()))?;
    let mut rows = Vec::with_capacity(k);
    for r in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| RgfmError::Parse(format!("missing embedding row {r}")))?;
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|v| v.parse::<f64>()).collect();
        rows.push(row.map_err(|_| RgfmError::Parse(format!("bad embedding row {r}")))?);
    }
    let mut edges = Vec::new();
    for line in lines {
        let mut it = line.split_whitespace();
        let i: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| RgfmError::Parse("bad GoG edge line".into()))?;
        let j: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| RgfmError::Parse("bad GoG edge line".into()))?;
        if i >= k || j >= k {
            return Err(RgfmError::Parse(format!("GoG edge ({i}, {j}) out of range")));
        }
        edges.push((i, j));
        edges.push((j, i));
    }
    edges.sort_unstable();
    if edges.len() / 2 != b_edge {
        return Err(RgfmError::Parse(format!(
            "GoG dump lists {} pairs but declares {b_edge}",
            edges.len() / 2
        )));
    }
    let x = Matrix::from_rows(&rows);
    let similarity = similarity_matrix(&x)?;
    Ok(GraphOfGraphs { center, node_embeddings: x, similarity, edges, edge_budget: b_edge })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_fixtures() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let s = similarity_matrix(&x).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 1.0, 1.0]);

        let x = Matrix::identity(2);
        let s = similarity_matrix(&x).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![h, h]]);
        let s = similarity_matrix(&x).unwrap();
        // Off-diagonal is the dot product 1/sqrt(2) = 0.70711 (5 d.p.).
        assert!((s.get(0, 1) - h).abs() < 1e-12);
        assert!((s.get(0, 1) - s.get(1, 0)).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_unnormalized_rows() {
        let x = Matrix::from_rows(&[vec![2.0, 0.0]]);
        assert!(similarity_matrix(&x).is_err());
    }

    #[test]
    fn probabilities_uniform_and_weighted() {
        let s = Matrix::identity(3);
        let d = edge_probabilities(&s).unwrap();
        assert_eq!(d.pairs, vec![(0, 1), (0, 2), (1, 2)]);
        for p in &d.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }

        let d2 = edge_probabilities(&Matrix::identity(2)).unwrap();
        assert_eq!(d2.probs, vec![1.0]);

        let mut s = Matrix::identity(3);
        s.set(1, 2, 2.0f64.ln());
        s.set(2, 1, 2.0f64.ln());
        let d3 = edge_probabilities(&s).unwrap();
        assert!((d3.probs[0] - 0.25).abs() < 1e-12);
        assert!((d3.probs[1] - 0.25).abs() < 1e-12);
        assert!((d3.probs[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probabilities_need_two_nodes() {
        assert!(edge_probabilities(&Matrix::identity(1)).is_err());
    }

    #[test]
    fn default_edge_budget_matches_ceil_rule() {
        assert_eq!(edge_budget(5, 0.6), 6);
        assert_eq!(edge_budget(2, 0.6), 1);
        assert_eq!(edge_budget(4, 0.6), 4); // ceil(3.6)
        assert_eq!(edge_budget(3, 0.0), 0);
    }

    #[test]
    fn saturated_budget_gives_complete_gog() {
        let dist = edge_probabilities(&Matrix::identity(4)).unwrap();
        let edges = sample_edges(&dist, 6, 1).unwrap();
        let mut sorted = edges.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        let mut s = Matrix::identity(4);
        s.set(0, 1, 0.9);
        s.set(1, 0, 0.9);
        let dist = edge_probabilities(&s).unwrap();
        let a = sample_edges(&dist, 3, 42).unwrap();
        let b = sample_edges(&dist, 3, 42).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 3);
    }

    #[test]
    fn single_draw_frequencies_match_distribution() {
        // (0.25, 0.25, 0.5) fixture, 1e5 single-edge draws.
        let mut s = Matrix::identity(3);
        s.set(1, 2, 2.0f64.ln());
        s.set(2, 1, 2.0f64.ln());
        let dist = edge_probabilities(&s).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for trial in 0..n {
            let e = sample_edges(&dist, 1, trial as u64).unwrap()[0];
            let idx = dist.pairs.iter().position(|&p| p == e).unwrap();
            counts[idx] += 1;
        }
        for (c, p) in counts.iter().zip(&dist.probs) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "freq {freq} vs prob {p}");
        }
    }

    fn budget_fixture() -> AttributedGraph {
        // Layered graph tuned so hop costs are 10, 15, 20, 35 under
        // d_in = 1, bytes_per_feature = 1, bytes_per_edge = 1, overhead 0:
        //   hop 1: 5 nodes + 5 edges   = 10 (cumulative 10)
        //   hop 2: 7 nodes + 8 edges   = 15 (cumulative 25)
        //   hop 3: 9 nodes + 11 edges  = 20 (cumulative 45)
        //   hop 4: 15 nodes + 20 edges = 35 (cumulative 80)
        let edges = vec![
            // hop-1 star around 0 plus one chord
            (0, 1),
            (0, 2),
            (0, 3),
            (0, 4),
            (1, 2),
            // hop 2: nodes 5, 6
            (1, 5),
            (2, 6),
            (5, 6),
            // hop 3: nodes 7, 8
            (5, 7),
            (6, 8),
            (7, 8),
            // hop 4: nodes 9..14, all adjacent to the hop-3 layer
            (7, 9),
            (7, 10),
            (7, 13),
            (8, 11),
            (8, 12),
            (8, 14),
            (9, 10),
            (11, 12),
            (13, 14),
        ];
        AttributedGraph::new("budget", 15, &edges, Matrix::zeros(15, 1), vec![-1; 15], 0)
            .unwrap()
    }

    #[test]
    fn select_max_k_cumulative_fixture() {
        let g = budget_fixture();
        let cm = CostModel { bytes_per_feature: 1, bytes_per_edge: 1, overhead: 0 };
        // Sanity: per-hop subgraph sizes drive the documented cost sequence.
        let costs: Vec<u64> = (1..=4)
            .map(|k| {
                let s = g.k_hop_subgraph(0, k);
                cm.subgraph_cost(s.num_nodes(), s.num_edges(), 1)
            })
            .collect();
        assert_eq!(costs, vec![10, 15, 20, 35]);

        assert_eq!(select_max_k(&g, 0, &cm, 50, 4).unwrap(), 3);
        assert_eq!(select_max_k(&g, 0, &cm, u64::MAX, 4).unwrap(), 4);
        assert!(matches!(
            select_max_k(&g, 0, &cm, 5, 4),
            Err(RgfmError::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn dump_round_trip() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
        ]);
        let gog = build_gog_from_embeddings(7, x, 0.6, 3).unwrap();
        let dump = format_gog_dump(&gog);
        let back = parse_gog_dump(&dump).unwrap();
        assert_eq!(back.center, gog.center);
        assert_eq!(back.edge_budget, gog.edge_budget);
        assert_eq!(back.undirected_edges(), gog.undirected_edges());
        assert!(back.similarity.max_abs_diff(&gog.similarity) < 1e-12);
    }

    #[test]
    fn k1_gog_has_no_edges() {
        let x = Matrix::row_vector(&[1.0, 0.0]);
        let gog = build_gog_from_embeddings(0, x, 0.6, 1).unwrap();
        assert_eq!(gog.k(), 1);
        assert_eq!(gog.edge_budget, 0);
        assert!(gog.directed_edges().is_empty());
    }
}
