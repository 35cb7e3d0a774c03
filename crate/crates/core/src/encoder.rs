//! Stage-1 subgraph encoder: augmented contrastive views, frequency-adaptive
//! message passing, pooled unit-norm subgraph embeddings.
//!
//! The layer rule is
//!
//! ```text
//! h_u <- eps * h0_u + sum_{v in N(u)} alpha_uv / sqrt(deg_u deg_v) * h_v,
//! alpha_uv = tanh(gate^T [h_u || h_v])
//! ```
//!
//! with the residual anchored at the projected input features `h0`. The
//! pooled embedding is the node mean, L2-normalized so that downstream
//! inner products are cosine similarities.

use std::path::{Path, PathBuf};

use crate::graph::{AttributedGraph, SubgraphSample};
use crate::rng::{mix, mix2, prng, sample_without_replacement, shuffled, Prng};
use crate::tensor::{nt_xent_loss, AdamConfig, BoundParams, Matrix, ParamSet, Tape, Var};
use crate::{RgfmError, Result};
use rand::Rng;

/// Architecture hyperparameters of the subgraph encoder.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d: usize,
    pub layers: usize,
    pub eps: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_in: 16, d: 64, layers: 2, eps: 0.3, dropout: 0.2 }
    }
}

/// Input projection plus per-layer gate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

pub const PROJ_NAME: &str = "encoder/proj";

pub fn gate_name(layer: usize) -> String {
    format!("encoder/gate{layer}")
}

impl EncoderParams {
    /// Xavier-uniform initialization, deterministic under `seed`.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        assert!(cfg.layers >= 1, "encoder needs at least one layer");
        let mut rng = prng(mix(seed, 0x454e43));
        let mut params = ParamSet::new();
        params.insert(PROJ_NAME, crate::tensor::xavier_uniform(cfg.d_in, cfg.d, &mut rng));
        for l in 0..cfg.layers {
            params.insert(gate_name(l), crate::tensor::xavier_uniform(2 * cfg.d, 1, &mut rng));
        }
        EncoderParams { cfg, params }
    }

    /// Rebuild from a checkpointed parameter set.
    pub fn from_params(cfg: EncoderConfig, source: &ParamSet) -> Result<Self> {
        let mut params = ParamSet::new();
        let proj = source
            .get(PROJ_NAME)
            .ok_or_else(|| RgfmError::Checkpoint("missing encoder/proj".into()))?;
        params.insert(PROJ_NAME, proj.clone());
        for l in 0..cfg.layers {
            let gate = source
                .get(&gate_name(l))
                .ok_or_else(|| RgfmError::Checkpoint(format!("missing {}", gate_name(l))))?;
            params.insert(gate_name(l), gate.clone());
        }
        Ok(EncoderParams { cfg, params })
    }

    /// Forward-only embedding of one subgraph: `[1 x d]`, unit norm.
    pub fn encode_subgraph(&self, sub: &SubgraphSample) -> Result<Matrix> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut rng = prng(0);
        let out = encode_on_tape(&tape, sub, &self.cfg, &bound, false, &mut rng)?;
        Ok(tape.value(out))
    }
}

/// Truncate or zero-pad feature columns to `d_in`.
pub fn fit_feature_dim(features: &Matrix, d_in: usize) -> Matrix {
    if features.cols() == d_in {
        return features.clone();
    }
    let mut out = Matrix::zeros(features.rows(), d_in);
    let copy = features.cols().min(d_in);
    for r in 0..features.rows() {
        out.row_mut(r)[..copy].copy_from_slice(&features.row(r)[..copy]);
    }
    out
}

/// Differentiable encoder forward on an existing tape.
pub fn encode_on_tape(
    tape: &Tape,
    sub: &SubgraphSample,
    cfg: &EncoderConfig,
    bound: &BoundParams,
    training: bool,
    rng: &mut Prng,
) -> Result<Var> {
    let gates: Vec<Var> = (0..cfg.layers).map(|l| bound.var(&gate_name(l))).collect();
    encode_with_vars(tape, sub, cfg, bound.var(PROJ_NAME), &gates, training, rng)
}

/// Encoder forward with explicit parameter handles.
pub fn encode_with_vars(
    tape: &Tape,
    sub: &SubgraphSample,
    cfg: &EncoderConfig,
    proj: Var,
    gates: &[Var],
    training: bool,
    rng: &mut Prng,
) -> Result<Var> {
    if sub.features.cols() != cfg.d_in {
        return Err(RgfmError::InvalidArgument(format!(
            "subgraph feature dim {} does not match encoder d_in {}",
            sub.features.cols(),
            cfg.d_in
        )));
    }
    assert_eq!(gates.len(), cfg.layers, "one gate vector per layer");
    let n = sub.num_nodes();
    let x = tape.constant(sub.features.clone());
    let h0 = tape.dropout(tape.matmul(x, proj), cfg.dropout, training, rng);

    // Directed edge arrays with symmetric degree normalization.
    let deg = sub.degrees();
    let mut recv = Vec::with_capacity(2 * sub.edges.len());
    let mut send = Vec::with_capacity(2 * sub.edges.len());
    let mut norm = Vec::with_capacity(2 * sub.edges.len());
    for &(u, v) in &sub.edges {
        let c = 1.0 / ((deg[u] * deg[v]) as f64).sqrt();
        recv.push(u);
        send.push(v);
        norm.push(c);
        recv.push(v);
        send.push(u);
        norm.push(c);
    }

    let mut h = tape.scale(h0, cfg.eps);
    if !recv.is_empty() {
        let norm_var = tape.constant(Matrix::col_vector(&norm));
        // First layer sees h0 itself as the node state.
        let mut state = h0;
        for &gate in gates {
            let h_recv = tape.rows_select(state, &recv);
            let h_send = tape.rows_select(state, &send);
            let gate_in = tape.concat_cols(h_recv, h_send);
            let alpha = tape.tanh(tape.matmul(gate_in, gate));
            let msgs = tape.row_scale(tape.row_scale(h_send, alpha), norm_var);
            let agg = tape.scatter_add_rows(msgs, &recv, n);
            h = tape.add(tape.scale(h0, cfg.eps), agg);
            state = h;
        }
    }
    let pooled = tape.mean_pool(h);
    // Fully-masked inputs pool to the zero vector, which carries no
    // information and no gradient; emit a fixed unit direction so the
    // output norm contract holds for any input.
    if crate::tensor::l2_norm(tape.value(pooled).row(0)) < 1e-12 {
        let mut basis = Matrix::zeros(1, cfg.d);
        basis.set(0, 0, 1.0);
        return Ok(tape.constant(basis));
    }
    Ok(tape.row_normalize(pooled))
}

/// Corruption ratios and seed for one augmented view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub node_drop_ratio: f64,
    pub edge_perturb_ratio: f64,
    pub attr_mask_ratio: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("node_drop_ratio", self.node_drop_ratio),
            ("edge_perturb_ratio", self.edge_perturb_ratio),
            ("attr_mask_ratio", self.attr_mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(RgfmError::InvalidArgument(format!("{name} {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Apply node dropping, edge dropping and attribute masking, in that
/// order. The center node survives every corruption.
pub fn augment(sub: &SubgraphSample, cfg: &AugmentConfig) -> SubgraphSample {
    cfg.validate().expect("augment ratios validated by caller");
    let mut rng = prng(mix(cfg.seed, 0x41554747));
    let n = sub.num_nodes();

    // Node dropping over the n-1 non-center nodes.
    let candidates = n.saturating_sub(1);
    let n_drop = (cfg.node_drop_ratio * candidates as f64).floor() as usize;
    let mut keep = vec![true; n];
    for i in sample_without_replacement(candidates, n_drop, &mut rng) {
        keep[i + 1] = false;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut local = vec![usize::MAX; n];
    for (new_idx, &old_idx) in kept.iter().enumerate() {
        local[old_idx] = new_idx;
    }
    let mut edges: Vec<(usize, usize)> = sub
        .edges
        .iter()
        .filter(|&&(u, v)| keep[u] && keep[v])
        .map(|&(u, v)| (local[u], local[v]))
        .collect();

    // Edge dropping on the surviving induced edges.
    let n_edge_drop = (cfg.edge_perturb_ratio * edges.len() as f64).floor() as usize;
    let dropped = sample_without_replacement(edges.len(), n_edge_drop, &mut rng);
    let mut keep_edge = vec![true; edges.len()];
    for i in dropped {
        keep_edge[i] = false;
    }
    edges = edges
        .into_iter()
        .zip(keep_edge)
        .filter_map(|(e, k)| k.then_some(e))
        .collect();

    // Attribute masking zeroes whole feature rows (center included).
    let rows: Vec<Vec<f64>> = kept.iter().map(|&i| sub.features.row(i).to_vec()).collect();
    let mut features = Matrix::from_rows(&rows);
    let n_mask = (cfg.attr_mask_ratio * kept.len() as f64).floor() as usize;
    for r in sample_without_replacement(kept.len(), n_mask, &mut rng) {
        for v in features.row_mut(r) {
            *v = 0.0;
        }
    }

    SubgraphSample {
        center: sub.center,
        hop: sub.hop,
        nodes: kept.iter().map(|&i| sub.nodes[i]).collect(),
        edges,
        features,
    }
}

/// Stage-1 training configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub node_drop_ratio: f64,
    pub edge_perturb_ratio: f64,
    pub attr_mask_ratio: f64,
    /// Draw per-view ratios uniformly from `[0, 0.3]` instead of the
    /// fixed values above.
    pub sample_ratios: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            encoder: EncoderConfig::default(),
            epochs: 100,
            batch_size: 128,
            lr: 5e-3,
            weight_decay: 2e-6,
            tau: 0.2,
            node_drop_ratio: 0.2,
            edge_perturb_ratio: 0.2,
            attr_mask_ratio: 0.2,
            sample_ratios: false,
            seed: 0,
        }
    }
}

fn view_config(cfg: &Stage1Config, seed: u64) -> AugmentConfig {
    if cfg.sample_ratios {
        let mut rng = prng(mix(seed, 0x52415449));
        AugmentConfig {
            node_drop_ratio: rng.random_range(0.0..0.3),
            edge_perturb_ratio: rng.random_range(0.0..0.3),
            attr_mask_ratio: rng.random_range(0.0..0.3),
            seed,
        }
    } else {
        AugmentConfig {
            node_drop_ratio: cfg.node_drop_ratio,
            edge_perturb_ratio: cfg.edge_perturb_ratio,
            attr_mask_ratio: cfg.attr_mask_ratio,
            seed,
        }
    }
}

/// Contrastive pretraining over a subgraph corpus. Returns the trained
/// encoder and the per-epoch mean batch loss.
pub fn pretrain_stage1(
    corpus: &[SubgraphSample],
    cfg: &Stage1Config,
) -> Result<(EncoderParams, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(RgfmError::InvalidArgument("stage-1 corpus is empty".into()));
    }
    let mut encoder = EncoderParams::init(cfg.encoder, cfg.seed);
    let mut adam = encoder.params.fresh_adam_state();
    let adam_cfg = AdamConfig::new(cfg.lr, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = prng(mix2(cfg.seed, 0x45504f43, epoch as u64));
        let order = shuffled(corpus.len(), &mut epoch_rng);
        let mut losses = Vec::new();
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(2)).enumerate() {
            // A single leftover sample has no in-batch negatives.
            if batch.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let bound = encoder.params.bind(&tape);
            let mut drop_rng = prng(mix2(cfg.seed, 0x44524f50, (epoch * 131 + batch_idx) as u64));
            let mut views_a = Vec::with_capacity(batch.len());
            let mut views_b = Vec::with_capacity(batch.len());
            for &item in batch {
                let base = mix2(cfg.seed, epoch as u64, item as u64);
                let va = augment(&corpus[item], &view_config(cfg, mix(base, 0)));
                let vb = augment(&corpus[item], &view_config(cfg, mix(base, 1)));
                views_a.push(encode_on_tape(&tape, &va, &cfg.encoder, &bound, true, &mut drop_rng)?);
                views_b.push(encode_on_tape(&tape, &vb, &cfg.encoder, &bound, true, &mut drop_rng)?);
            }
            let z1 = tape.stack_rows(&views_a);
            let z2 = tape.stack_rows(&views_b);
            let loss = nt_xent_loss(&tape, z1, z2, cfg.tau)?;
            losses.push(tape.value(loss).scalar());
            let mut grads = tape.backward(loss);
            let grad_mats: Vec<Matrix> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            encoder.params.adam_step(&grad_mats, &mut adam, &adam_cfg);
        }
        if !losses.is_empty() {
            trace.push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
    }
    Ok((encoder, trace))
}

/// On-disk cache of hop subgraphs in the graph file format, one file per
/// `(center, hop)` under a directory keyed by `(graph name, K, seed)`.
///
/// The label column of a cache file stores each node's global id in the
/// parent graph (with the id space as the declared class count), so a
/// cached entry reconstructs the full local-to-global map.
pub struct SubgraphCache {
    dir: PathBuf,
}

impl SubgraphCache {
    pub fn open(root: &Path, graph_name: &str, k_cap: usize, seed: u64) -> Result<Self> {
        let mut key = 0xcbf29ce484222325u64;
        for b in graph_name.bytes() {
            key = mix(key, b as u64);
        }
        key = mix2(key, k_cap as u64, seed);
        let dir = root.join(format!("{graph_name}-K{k_cap}-{key:016x}"));
        std::fs::create_dir_all(&dir)?;
        Ok(SubgraphCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, center: usize, hop: usize) -> PathBuf {
        self.dir.join(format!("c{center}_h{hop}.graph"))
    }

    pub fn store(&self, sub: &SubgraphSample, parent: &AttributedGraph) -> Result<PathBuf> {
        let labels: Vec<i64> = sub.nodes.iter().map(|&u| u as i64).collect();
        let g = AttributedGraph::new(
            format!("c{}_h{}", sub.center, sub.hop),
            sub.num_nodes(),
            &sub.edges,
            sub.features.clone(),
            labels,
            parent.num_nodes(),
        )?;
        let path = self.entry_path(sub.center, sub.hop);
        crate::graphio::save_graph(&g, &path)?;
        Ok(path)
    }

    pub fn load(&self, center: usize, hop: usize) -> Result<Option<SubgraphSample>> {
        let path = self.entry_path(center, hop);
        if !path.exists() {
            return Ok(None);
        }
        let g = crate::graphio::load_graph(&path)?;
        let nodes: Vec<usize> = g.labels_raw().iter().map(|&l| l as usize).collect();
        if nodes.first() != Some(&center) {
            return Err(RgfmError::Parse(format!(
                "cache entry {} does not start at center {center}",
                path.display()
            )));
        }
        Ok(Some(SubgraphSample {
            center,
            hop,
            nodes,
            edges: g.undirected_edges(),
            features: g.features().clone(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;

    fn toy_subgraph() -> SubgraphSample {
        // Center 10 with 4 neighbors in a fan; global ids arbitrary.
        SubgraphSample {
            center: 10,
            hop: 1,
            nodes: vec![10, 3, 7, 12, 20],
            edges: vec![(0, 1), (0, 2), (0, 3), (0, 4), (1, 2)],
            features: Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.5, 0.5],
                vec![-1.0, 0.3],
                vec![0.2, -0.4],
            ]),
        }
    }

    fn tiny_encoder() -> EncoderParams {
        EncoderParams::init(
            EncoderConfig { d_in: 2, d: 4, layers: 2, eps: 0.3, dropout: 0.0 },
            3,
        )
    }

    #[test]
    fn zero_ratios_are_identity() {
        let sub = toy_subgraph();
        let view = augment(
            &sub,
            &AugmentConfig {
                node_drop_ratio: 0.0,
                edge_perturb_ratio: 0.0,
                attr_mask_ratio: 0.0,
                seed: 1,
            },
        );
        assert_eq!(view, sub);
    }

    #[test]
    fn full_node_drop_keeps_only_center() {
        let sub = toy_subgraph();
        let view = augment(
            &sub,
            &AugmentConfig {
                node_drop_ratio: 1.0,
                edge_perturb_ratio: 0.0,
                attr_mask_ratio: 0.0,
                seed: 1,
            },
        );
        assert_eq!(view.nodes, vec![10]);
        assert!(view.edges.is_empty());
    }

    #[test]
    fn node_drop_uses_floor_over_non_center_nodes() {
        let sub = toy_subgraph();
        let view = augment(
            &sub,
            &AugmentConfig {
                node_drop_ratio: 0.4,
                edge_perturb_ratio: 0.0,
                attr_mask_ratio: 0.0,
                seed: 5,
            },
        );
        // floor(0.4 * 4) = 1 non-center node removed.
        assert_eq!(view.nodes.len(), 4);
        assert_eq!(view.nodes[0], 10);
    }

    #[test]
    fn augment_is_deterministic() {
        let sub = toy_subgraph();
        let cfg = AugmentConfig {
            node_drop_ratio: 0.3,
            edge_perturb_ratio: 0.4,
            attr_mask_ratio: 0.2,
            seed: 42,
        };
        assert_eq!(augment(&sub, &cfg), augment(&sub, &cfg));
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let enc = tiny_encoder();
        let z = enc.encode_subgraph(&toy_subgraph()).unwrap();
        assert!((l2_norm(z.row(0)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_node_subgraph_is_normalized_projection() {
        let enc = tiny_encoder();
        let sub = SubgraphSample {
            center: 0,
            hop: 1,
            nodes: vec![0],
            edges: vec![],
            features: Matrix::row_vector(&[0.5, -1.0]),
        };
        let z = enc.encode_subgraph(&sub).unwrap();
        let proj = sub.features.matmul(enc.params.get(PROJ_NAME).unwrap());
        // eps * projection, then normalize: eps cancels up to sign.
        let norm = l2_norm(proj.row(0));
        for (a, b) in z.row(0).iter().zip(proj.row(0)) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_kills_message_term() {
        // With gate = 0, alpha = 0, so h = eps*h0 and the pooled output is
        // the normalized mean of projected features.
        let mut enc = tiny_encoder();
        for l in 0..enc.cfg.layers {
            *enc.params.get_mut(&gate_name(l)).unwrap() = Matrix::zeros(2 * enc.cfg.d, 1);
        }
        let sub = toy_subgraph();
        let z = enc.encode_subgraph(&sub).unwrap();
        let proj = sub.features.matmul(enc.params.get(PROJ_NAME).unwrap());
        let mut mean = vec![0.0; enc.cfg.d];
        for r in 0..proj.rows() {
            for (m, v) in mean.iter_mut().zip(proj.row(r)) {
                *m += v / proj.rows() as f64;
            }
        }
        let norm = l2_norm(&mean);
        for (a, b) in z.row(0).iter().zip(&mean) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_is_permutation_invariant() {
        let enc = tiny_encoder();
        let sub = toy_subgraph();
        // Relabel local nodes (center stays local 0).
        let perm = [0usize, 2, 1, 4, 3];
        let mut inv = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let permuted = SubgraphSample {
            center: sub.center,
            hop: sub.hop,
            nodes: perm.iter().map(|&i| sub.nodes[i]).collect(),
            edges: sub
                .edges
                .iter()
                .map(|&(u, v)| {
                    let (a, b) = (inv[u], inv[v]);
                    (a.min(b), a.max(b))
                })
                .collect(),
            features: Matrix::from_rows(
                &perm.iter().map(|&i| sub.features.row(i).to_vec()).collect::<Vec<_>>(),
            ),
        };
        let z1 = enc.encode_subgraph(&sub).unwrap();
        let z2 = enc.encode_subgraph(&permuted).unwrap();
        assert!(z1.max_abs_diff(&z2) < 1e-9);
    }

    #[test]
    fn gate_coefficients_stay_in_open_unit_interval() {
        // alpha = tanh(...) by construction; verify on a forward pass by
        // recomputing the first layer by hand.
        let enc = tiny_encoder();
        let sub = toy_subgraph();
        let proj = sub.features.matmul(enc.params.get(PROJ_NAME).unwrap());
        let gate = enc.params.get(&gate_name(0)).unwrap();
        for &(u, v) in &sub.edges {
            let mut cat = proj.row(u).to_vec();
            cat.extend_from_slice(proj.row(v));
            let alpha = crate::tensor::dot(&cat, gate.data()).tanh();
            assert!(alpha > -1.0 && alpha < 1.0);
        }
    }

    #[test]
    fn pretrain_smoke_and_determinism() {
        let subs: Vec<SubgraphSample> = (0..4)
            .map(|i| {
                let mut s = toy_subgraph();
                s.center = i;
                s.features.set(0, 0, 0.3 * i as f64 + 0.1);
                s
            })
            .collect();
        let cfg = Stage1Config {
            encoder: EncoderConfig { d_in: 2, d: 4, layers: 1, eps: 0.3, dropout: 0.1 },
            epochs: 2,
            batch_size: 4,
            lr: 5e-3,
            weight_decay: 2e-6,
            tau: 0.2,
            seed: 11,
            ..Stage1Config::default()
        };
        let (enc1, trace1) = pretrain_stage1(&subs, &cfg).unwrap();
        let (enc2, trace2) = pretrain_stage1(&subs, &cfg).unwrap();
        assert_eq!(enc1.params, enc2.params, "same seed must give identical params");
        assert_eq!(trace1, trace2);
        assert!(trace1.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn identical_views_give_ntxent_floor() {
        // Zero augmentation and identical subgraphs: every similarity is 1,
        // so the loss equals log(2B - 1).
        let sub = toy_subgraph();
        let subs = [sub.clone(), sub.clone(), sub.clone(), sub];
        let enc = tiny_encoder();
        let tape = Tape::new();
        let bound = enc.params.bind(&tape);
        let mut rng = prng(0);
        let views: Vec<Var> = subs
            .iter()
            .map(|s| encode_on_tape(&tape, s, &enc.cfg, &bound, false, &mut rng).unwrap())
            .collect();
        let z1 = tape.stack_rows(&views);
        let z2 = tape.stack_rows(&views);
        let loss = nt_xent_loss(&tape, z1, z2, 0.2).unwrap();
        let expected = (2.0 * subs.len() as f64 - 1.0).ln();
        assert!((tape.value(loss).scalar() - expected).abs() < 1e-6);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = AttributedGraph::new(
            "toy",
            5,
            &[(0, 1), (1, 2), (2, 3), (3, 4)],
            Matrix::from_rows(&[
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![0.5, 0.5],
                vec![0.1, 0.9],
                vec![0.9, 0.1],
            ]),
            vec![-1; 5],
            0,
        )
        .unwrap();
        let cache = SubgraphCache::open(dir.path(), g.name(), 3, 7).unwrap();
        let sub = g.k_hop_subgraph(2, 2);
        cache.store(&sub, &g).unwrap();
        let back = cache.load(2, 2).unwrap().unwrap();
        assert_eq!(back, sub);
        assert!(cache.load(2, 1).unwrap().is_none());
    }
}
