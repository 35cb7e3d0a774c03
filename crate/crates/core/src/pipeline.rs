//! End-to-end orchestration: configuration, two-stage training over
//! multi-dataset pools, few-shot and link evaluation, robustness sweeps,
//! checkpoints and reports.
//!
//! Pretraining is leave-one-dataset-out: `run_pretrain` and `run_stage2`
//! read only the source graphs; the target file is opened exclusively by
//! the evaluation entry points (asserted by the read audit in tests).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::encoder::{
    self, EncoderConfig, EncoderParams, Stage1Config, SubgraphCache,
};
use crate::gog::{self, CostModel, GraphOfGraphs};
use crate::graph::AttributedGraph;
use crate::metrics;
use crate::moe::{self, ExpertParams, RoutingState};
use crate::rng::{mix, mix2, prng, shuffled};
use crate::splits;
use crate::tensor::{
    bce_with_logits_loss, cross_entropy, load_checkpoint, save_checkpoint, xavier_uniform,
    AdamConfig, Matrix, ParamSet, Tape, Var,
};
use crate::{RgfmError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Link,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Hyper {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for Stage1Hyper {
    fn default() -> Self {
        Stage1Hyper { epochs: 100, lr: 5e-3, weight_decay: 2e-6, batch_size: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Hyper {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lb_weight: f64,
}

impl Default for Stage2Hyper {
    fn default() -> Self {
        Stage2Hyper { epochs: 50, lr: 1e-2, weight_decay: 2e-6, batch_size: 128, lb_weight: 0.01 }
    }
}

/// Full run configuration; JSON field names match the struct fields and
/// every field except the graph paths has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
    pub d_in: usize,
    pub d: usize,
    pub k_cap: usize,
    pub byte_budget: u64,
    pub edge_ratio: f64,
    pub zeta: usize,
    pub tau: f64,
    pub stage1: Stage1Hyper,
    pub stage2: Stage2Hyper,
    pub encoder_layers: usize,
    pub encoder_eps: f64,
    pub dropout: f64,
    pub node_drop_ratio: f64,
    pub edge_perturb_ratio: f64,
    pub attr_mask_ratio: f64,
    pub sample_ratios: bool,
    pub router_hidden: usize,
    pub cost_model: CostModel,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub task: Task,
    /// Cap on training centers per source graph (0 = all).
    pub max_centers_per_graph: usize,
    /// Cap on evaluation query nodes per seed (0 = all).
    pub query_cap: usize,
    pub link_val_frac: f64,
    pub link_test_frac: f64,
    pub threads: usize,
    pub seed: u64,
    /// Subgraph cache root; disabled when empty.
    pub cache_dir: Option<PathBuf>,
    /// Downstream head fitting: steps and learning rate.
    pub head_steps: usize,
    pub head_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sources: Vec::new(),
            target: PathBuf::new(),
            d_in: 16,
            d: 64,
            k_cap: 5,
            byte_budget: 8_000_000,
            edge_ratio: 0.6,
            zeta: 5,
            tau: 0.2,
            stage1: Stage1Hyper::default(),
            stage2: Stage2Hyper::default(),
            encoder_layers: 2,
            encoder_eps: 0.3,
            dropout: 0.2,
            node_drop_ratio: 0.2,
            edge_perturb_ratio: 0.2,
            attr_mask_ratio: 0.2,
            sample_ratios: false,
            router_hidden: 32,
            cost_model: CostModel::default(),
            shots: 5,
            seeds: vec![0, 1, 2, 3, 4],
            task: Task::Node,
            max_centers_per_graph: 0,
            query_cap: 0,
            link_val_frac: 0.1,
            link_test_frac: 0.2,
            threads: 1,
            seed: 7,
            cache_dir: None,
            head_steps: 200,
            head_lr: 1e-2,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| RgfmError::Config(format!("bad config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RgfmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(RgfmError::Config("at least one source graph is required".into()));
        }
        for p in &self.sources {
            if !p.exists() {
                return Err(RgfmError::Config(format!("source {} does not exist", p.display())));
            }
        }
        if self.d_in == 0 || self.d == 0 || self.k_cap == 0 || self.zeta == 0 {
            return Err(RgfmError::Config("d_in, d, k_cap and zeta must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(RgfmError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.edge_ratio) {
            return Err(RgfmError::Config(format!(
                "edge_ratio {} outside [0, 1]",
                self.edge_ratio
            )));
        }
        if self.seeds.is_empty() {
            return Err(RgfmError::Config("at least one evaluation seed is required".into()));
        }
        if self.shots == 0 {
            return Err(RgfmError::Config("shots must be at least 1".into()));
        }
        if self.encoder_layers == 0 {
            return Err(RgfmError::Config("encoder needs at least one layer".into()));
        }
        for (name, r) in [
            ("node_drop_ratio", self.node_drop_ratio),
            ("edge_perturb_ratio", self.edge_perturb_ratio),
            ("attr_mask_ratio", self.attr_mask_ratio),
            ("dropout", self.dropout),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(RgfmError::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_in: self.d_in,
            d: self.d,
            layers: self.encoder_layers,
            eps: self.encoder_eps,
            dropout: self.dropout,
        }
    }

    fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            encoder: self.encoder_config(),
            epochs: self.stage1.epochs,
            batch_size: self.stage1.batch_size,
            lr: self.stage1.lr,
            weight_decay: self.stage1.weight_decay,
            tau: self.tau,
            node_drop_ratio: self.node_drop_ratio,
            edge_perturb_ratio: self.edge_perturb_ratio,
            attr_mask_ratio: self.attr_mask_ratio,
            sample_ratios: self.sample_ratios,
            seed: self.seed,
        }
    }

    fn gog_seed(&self, source_idx: usize) -> u64 {
        mix2(self.seed, 0x474f4753, source_idx as u64)
    }
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

const META_STAGE: &str = "meta/stage";
const META_CV: &str = "meta/cv_history";
const META_CURV: &str = "meta/curvatures";
const META_M_FLOAT: &str = "meta/m_float";
const META_M_START: &str = "meta/m_start";
const META_USAGE: &str = "meta/usage";

/// A named-parameter bundle: model weights plus routing state encoded as
/// `1 x n` meta rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Ok(Checkpoint { params: load_checkpoint(path)? })
    }

    fn meta_row(&self, name: &str) -> Result<Vec<f64>> {
        let m = self
            .params
            .get(name)
            .ok_or_else(|| RgfmError::Checkpoint(format!("missing {name}")))?;
        Ok(m.row(0).to_vec())
    }

    pub fn stage(&self) -> Result<u32> {
        Ok(self.meta_row(META_STAGE)?[0] as u32)
    }

    pub fn routing_state(&self, zeta: usize, tau: f64) -> Result<RoutingState> {
        let cv_history = self.meta_row(META_CV)?;
        let curvatures = self.meta_row(META_CURV)?;
        let m_float = self.meta_row(META_M_FLOAT)?[0];
        let m_start = self.meta_row(META_M_START)?[0] as usize;
        let usage = self.meta_row(META_USAGE)?;
        let mut state = RoutingState::new(zeta, tau);
        state.cv_history = cv_history;
        let expected = moe::candidate_set(state.score(), zeta);
        if expected != curvatures {
            return Err(RgfmError::Checkpoint(format!(
                "curvature list {curvatures:?} does not match the generation rule {expected:?} \
                 (was the checkpoint written with a different zeta?)"
            )));
        }
        state.curvatures = curvatures;
        state.m_float = m_float;
        state.m_start = m_start;
        state.usage = usage;
        Ok(state)
    }
}

fn assemble_checkpoint(
    stage: u32,
    state: &RoutingState,
    encoder: &ParamSet,
    stage2: Option<&ParamSet>,
) -> Checkpoint {
    let mut params = ParamSet::new();
    params.insert(META_STAGE, Matrix::row_vector(&[stage as f64]));
    params.insert(META_CV, Matrix::row_vector(&state.cv_history));
    params.insert(META_CURV, Matrix::row_vector(&state.curvatures));
    params.insert(META_M_FLOAT, Matrix::row_vector(&[state.m_float]));
    params.insert(META_M_START, Matrix::row_vector(&[state.m_start as f64]));
    params.insert(
        META_USAGE,
        Matrix::row_vector(if state.usage.is_empty() {
            &[0.0]
        } else {
            &state.usage
        }),
    );
    for (name, value) in encoder.iter() {
        params.insert(name, value.clone());
    }
    if let Some(extra) = stage2 {
        for (name, value) in extra.iter() {
            params.insert(name, value.clone());
        }
    }
    Checkpoint { params }
}

// ---------------------------------------------------------------------
// Reports and traces
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingEpoch {
    pub epoch: usize,
    pub conf: f64,
    pub m_effective: usize,
    pub usage: Vec<f64>,
}

/// Routing trace in CSV form: `epoch,conf,m_effective,usage_0..`.
pub fn routing_trace_csv(trace: &[RoutingEpoch]) -> String {
    let psi = trace.first().map_or(0, |r| r.usage.len());
    let mut out = String::from("epoch,conf,m_effective");
    for j in 0..psi {
        out.push_str(&format!(",usage_{j}"));
    }
    out.push('\n');
    for row in trace {
        out.push_str(&format!("{},{},{}", row.epoch, row.conf, row.m_effective));
        for u in &row.usage {
            out.push_str(&format!(",{u}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub metric: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub loss_trace: Vec<f64>,
    #[serde(default)]
    pub routing_trace: Vec<RoutingEpoch>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    fn from_values(task: &str, metric: &str, per_seed: Vec<f64>, started: Instant) -> RunReport {
        let (mean, std) = metrics::mean_std(&per_seed);
        RunReport {
            task: task.into(),
            metric: metric.into(),
            per_seed,
            mean,
            std,
            loss_trace: Vec::new(),
            routing_trace: Vec::new(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        }
    }

    /// Human-readable aligned table.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("task    {:>12}\n", self.task));
        out.push_str(&format!("metric  {:>12}\n", self.metric));
        for (i, v) in self.per_seed.iter().enumerate() {
            out.push_str(&format!("seed {i:<3}{v:>12.4}\n"));
        }
        out.push_str(&format!("mean    {:>12.4}\n", self.mean));
        out.push_str(&format!("std     {:>12.4}\n", self.std));
        out.push_str(&format!("wall    {:>11.2}s\n", self.wall_clock_secs));
        out
    }
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<f64>,
}

pub struct Stage2Output {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<f64>,
    pub routing_trace: Vec<RoutingEpoch>,
    /// Largest number of experts materialized for any single GoG.
    pub max_experts_evaluated: usize,
}

// ---------------------------------------------------------------------
// Data loading helpers
// ---------------------------------------------------------------------

fn load_adapted(path: &Path, d_in: usize) -> Result<AttributedGraph> {
    let g = crate::graphio::load_graph(path)?;
    if g.feature_dim() == d_in {
        return Ok(g);
    }
    AttributedGraph::new(
        g.name().to_string(),
        g.num_nodes(),
        &g.undirected_edges(),
        encoder::fit_feature_dim(g.features(), d_in),
        g.labels_raw().to_vec(),
        g.num_classes(),
    )
}

fn load_sources(cfg: &RunConfig) -> Result<Vec<AttributedGraph>> {
    cfg.sources.iter().map(|p| load_adapted(p, cfg.d_in)).collect()
}

fn load_target(cfg: &RunConfig) -> Result<AttributedGraph> {
    if cfg.target.as_os_str().is_empty() {
        return Err(RgfmError::Config("target graph path is required".into()));
    }
    if !cfg.target.exists() {
        return Err(RgfmError::Config(format!(
            "target {} does not exist",
            cfg.target.display()
        )));
    }
    load_adapted(&cfg.target, cfg.d_in)
}

/// Deterministically capped training centers for one source graph.
fn training_centers(cfg: &RunConfig, g: &AttributedGraph, source_idx: usize) -> Vec<usize> {
    let mut centers: Vec<usize> = match cfg.task {
        Task::Node => g.labeled_nodes(),
        Task::Link => (0..g.num_nodes()).collect(),
    };
    let cap = cfg.max_centers_per_graph;
    if cap > 0 && centers.len() > cap {
        let mut rng = prng(mix2(cfg.seed, 0x435452, source_idx as u64));
        let picked = crate::rng::sample_without_replacement(centers.len(), cap, &mut rng);
        let mut out: Vec<usize> = picked.into_iter().map(|i| centers[i]).collect();
        out.sort_unstable();
        centers = out;
    }
    centers
}

fn open_cache(cfg: &RunConfig, g: &AttributedGraph) -> Result<Option<SubgraphCache>> {
    match &cfg.cache_dir {
        Some(root) => Ok(Some(SubgraphCache::open(root, g.name(), cfg.k_cap, cfg.seed)?)),
        None => Ok(None),
    }
}

fn hop_subgraph_cached(
    g: &AttributedGraph,
    center: usize,
    hop: usize,
    cache: Option<&SubgraphCache>,
) -> Result<crate::graph::SubgraphSample> {
    if let Some(c) = cache {
        if let Some(sub) = c.load(center, hop)? {
            return Ok(sub);
        }
    }
    Ok(g.k_hop_subgraph(center, hop))
}

/// Build one center's GoG with the frozen encoder: hop selection,
/// subgraph encoding, similarity-sampled edges.
fn build_center_gog(
    g: &AttributedGraph,
    center: usize,
    enc: &EncoderParams,
    cfg: &RunConfig,
    gog_seed: u64,
    cache: Option<&SubgraphCache>,
) -> Result<GraphOfGraphs> {
    let k = gog::select_max_k(g, center, &cfg.cost_model, cfg.byte_budget, cfg.k_cap)?;
    let mut rows = Vec::with_capacity(k);
    for hop in 1..=k {
        let sub = hop_subgraph_cached(g, center, hop, cache)?;
        rows.push(enc.encode_subgraph(&sub)?.row(0).to_vec());
    }
    gog::build_gog_from_embeddings(
        center,
        Matrix::from_rows(&rows),
        cfg.edge_ratio,
        mix(gog_seed, center as u64),
    )
}

/// A GoG with its precomputed propagation matrices.
struct PreparedGog {
    gog: GraphOfGraphs,
    adj_hat: Matrix,
    neighbor_weights: Matrix,
}

fn prepare(gog: GraphOfGraphs) -> PreparedGog {
    let adj_hat = moe::sym_norm_adjacency(&gog);
    let neighbor_weights = moe::convex_neighbor_weights(&gog);
    PreparedGog { gog, adj_hat, neighbor_weights }
}

// ---------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------

/// Stage A+B: per-dataset CV accumulation in arrival order, candidate
/// expert-set determination, subgraph caching, and contrastive encoder
/// training. Reads only the source graphs.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    let sources = load_sources(cfg)?;

    let mut state = RoutingState::new(cfg.zeta, cfg.tau);
    for g in &sources {
        state.append_dataset_cv(g.degree_stats()?.cv);
    }

    let mut corpus = Vec::new();
    for (si, g) in sources.iter().enumerate() {
        let cache = open_cache(cfg, g)?;
        for center in training_centers(cfg, g, si) {
            let k = gog::select_max_k(g, center, &cfg.cost_model, cfg.byte_budget, cfg.k_cap)?;
            for hop in 1..=k {
                let sub = g.k_hop_subgraph(center, hop);
                if let Some(c) = &cache {
                    c.store(&sub, g)?;
                }
                corpus.push(sub);
            }
        }
    }

    let (enc, loss_trace) = encoder::pretrain_stage1(&corpus, &cfg.stage1_config())?;
    state.begin_stage2();
    let checkpoint = assemble_checkpoint(1, &state, &enc.params, None);
    Ok(PretrainOutput { checkpoint, loss_trace })
}

// ---------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------

fn head_w(source_idx: usize) -> String {
    format!("head/{source_idx}/w")
}

fn head_b(source_idx: usize) -> String {
    format!("head/{source_idx}/b")
}

fn expert_w(j: usize) -> String {
    format!("expert{j}/w")
}

struct NodeItem {
    source: usize,
    center: usize,
    label: usize,
}

struct LinkItem {
    source: usize,
    u: usize,
    v: usize,
    positive: bool,
}

/// One GoG's differentiable forward: routing, shortlisted expert
/// evaluation, fusion, pooled center embedding. Returns the embedding
/// var, the routing matrix value and the shortlist size.
#[allow(clippy::too_many_arguments)]
fn center_forward(
    tape: &Tape,
    prepared: &PreparedGog,
    state: &RoutingState,
    bound: &crate::tensor::BoundParams,
    m_eff: usize,
) -> Result<(Var, Matrix, usize)> {
    let x = tape.constant(prepared.gog.node_embeddings.clone());
    let adj = tape.constant(prepared.adj_hat.clone());
    let nw = tape.constant(prepared.neighbor_weights.clone());
    let alpha = moe::route_on_tape(tape, x, adj, bound.var("router/w1"), bound.var("router/w2"), state.tau);
    let alpha_values = tape.value(alpha);
    let shortlist = moe::topm_shortlist(&moe::mean_routing(&alpha_values), m_eff);
    let mut expert_outs = Vec::with_capacity(shortlist.len());
    for &j in &shortlist {
        let h = moe::expert_forward_on_tape(
            tape,
            x,
            nw,
            state.curvatures[j],
            bound.var(&expert_w(j)),
        )?;
        expert_outs.push((j, h));
    }
    let (fused, used) = moe::topm_fuse_on_tape(tape, alpha, &expert_outs, m_eff)?;
    debug_assert_eq!(used, shortlist);
    let emb = moe::fuse_center_embedding_on_tape(tape, fused);
    Ok((emb, alpha_values, shortlist.len()))
}

/// Stage C+D training: per-center GoG routing and fusion against the
/// task loss plus the weighted load-balance penalty, with the active
/// expert count updated once per epoch from routing confidence.
pub fn run_stage2(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Stage2Output> {
    cfg.validate()?;
    if ckpt.stage()? != 1 {
        return Err(RgfmError::Config(
            "stage2 requires a stage-1 checkpoint (run pretrain first)".into(),
        ));
    }
    let mut state = ckpt.routing_state(cfg.zeta, cfg.tau)?;
    state.begin_stage2();
    let enc = EncoderParams::from_params(cfg.encoder_config(), &ckpt.params)?;
    let sources = load_sources(cfg)?;
    let psi = state.psi();

    // Trainable stage-2 parameters.
    let mut rng = prng(mix(cfg.seed, 0x535447));
    let mut train = ParamSet::new();
    train.insert("router/w1", xavier_uniform(cfg.d, cfg.router_hidden, &mut rng));
    train.insert("router/w2", xavier_uniform(cfg.router_hidden, psi, &mut rng));
    for j in 0..psi {
        train.insert(expert_w(j), xavier_uniform(cfg.d, cfg.d, &mut rng));
    }
    if cfg.task == Task::Node {
        for (si, g) in sources.iter().enumerate() {
            if g.num_classes() == 0 {
                return Err(RgfmError::Config(format!(
                    "node task needs labeled sources; {} has none",
                    g.name()
                )));
            }
            train.insert(head_w(si), xavier_uniform(cfg.d, g.num_classes(), &mut rng));
            train.insert(head_b(si), Matrix::zeros(1, g.num_classes()));
        }
    }

    // Training items and the centers they touch.
    let mut node_items = Vec::new();
    let mut link_items = Vec::new();
    let mut wanted: Vec<(usize, usize)> = Vec::new();
    match cfg.task {
        Task::Node => {
            for (si, g) in sources.iter().enumerate() {
                for center in training_centers(cfg, g, si) {
                    let label = g.label(center).expect("training centers are labeled");
                    node_items.push(NodeItem { source: si, center, label });
                    wanted.push((si, center));
                }
            }
            if node_items.is_empty() {
                return Err(RgfmError::Config("no labeled training centers".into()));
            }
        }
        Task::Link => {
            for (si, g) in sources.iter().enumerate() {
                let mut pair_rng = prng(mix2(cfg.seed, 0x4c4e4b, si as u64));
                let edges = g.undirected_edges();
                if edges.is_empty() {
                    return Err(RgfmError::Config(format!("source {} has no edges", g.name())));
                }
                let cap = if cfg.max_centers_per_graph > 0 {
                    cfg.max_centers_per_graph.min(edges.len())
                } else {
                    edges.len()
                };
                let picked =
                    crate::rng::sample_without_replacement(edges.len(), cap, &mut pair_rng);
                for i in picked {
                    let (u, v) = edges[i];
                    link_items.push(LinkItem { source: si, u, v, positive: true });
                }
                let mut negs = 0;
                let mut attempts = 0;
                while negs < cap && attempts < 1000 * cap {
                    attempts += 1;
                    let u = pair_rng.random_range(0..g.num_nodes());
                    let v = pair_rng.random_range(0..g.num_nodes());
                    if u == v || g.has_edge(u, v) {
                        continue;
                    }
                    link_items.push(LinkItem { source: si, u, v, positive: false });
                    negs += 1;
                }
            }
            for item in &link_items {
                wanted.push((item.source, item.u));
                wanted.push((item.source, item.v));
            }
        }
    }
    wanted.sort_unstable();
    wanted.dedup();

    // GoGs are deterministic under the frozen encoder, so build each
    // center's GoG once up front (fanning out over the worker pool).
    let built: Vec<Result<PreparedGog>> =
        crate::parallel::ordered_map(wanted.len(), cfg.threads, |i| {
            let (si, center) = wanted[i];
            let cache = open_cache(cfg, &sources[si])?;
            build_center_gog(&sources[si], center, &enc, cfg, cfg.gog_seed(si), cache.as_ref())
                .map(prepare)
        });
    let mut gogs: BTreeMap<(usize, usize), PreparedGog> = BTreeMap::new();
    for (key, prepared) in wanted.iter().zip(built) {
        gogs.insert(*key, prepared?);
    }

    let mut adam = train.fresh_adam_state();
    let adam_cfg = AdamConfig::new(cfg.stage2.lr, cfg.stage2.weight_decay);
    let mut loss_trace = Vec::new();
    let mut routing_trace = Vec::new();
    let mut max_experts = 0usize;

    let item_count = match cfg.task {
        Task::Node => node_items.len(),
        Task::Link => link_items.len(),
    };
    for epoch in 0..cfg.stage2.epochs {
        let m_eff = state.effective_m();
        let mut epoch_rng = prng(mix2(cfg.seed, 0x53325045, epoch as u64));
        let order = shuffled(item_count, &mut epoch_rng);
        let mut conf_sum = 0.0;
        let mut conf_count = 0usize;
        let mut usage_sum = vec![0.0; psi];
        let mut losses = Vec::new();

        for batch in order.chunks(cfg.stage2.batch_size.max(1)) {
            let tape = Tape::new();
            let bound = train.bind(&tape);
            let mut task_losses: Vec<Var> = Vec::with_capacity(batch.len());
            let mut lb_losses: Vec<Var> = Vec::with_capacity(batch.len());
            let mut track = |alpha: &Matrix, shortlisted: usize| {
                conf_sum += moe::confidence(alpha);
                conf_count += 1;
                for (u, m) in usage_sum.iter_mut().zip(moe::mean_routing(alpha)) {
                    *u += m;
                }
                max_experts = max_experts.max(shortlisted);
            };
            match cfg.task {
                Task::Node => {
                    for &i in batch {
                        let item = &node_items[i];
                        let prepared = &gogs[&(item.source, item.center)];
                        let (emb, alpha, used) =
                            center_forward(&tape, prepared, &state, &bound, m_eff)?;
                        track(&alpha, used);
                        lb_losses.push(moe::load_balance_loss_on_tape(&tape, tape.constant(alpha)));
                        let logits = tape.add(
                            tape.matmul(emb, bound.var(&head_w(item.source))),
                            bound.var(&head_b(item.source)),
                        );
                        task_losses.push(cross_entropy(&tape, logits, &[item.label])?);
                    }
                }
                Task::Link => {
                    let mut scores = Vec::with_capacity(batch.len());
                    let mut targets = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let item = &link_items[i];
                        let mut embs = Vec::with_capacity(2);
                        for node in [item.u, item.v] {
                            let prepared = &gogs[&(item.source, node)];
                            let (emb, alpha, used) =
                                center_forward(&tape, prepared, &state, &bound, m_eff)?;
                            track(&alpha, used);
                            lb_losses
                                .push(moe::load_balance_loss_on_tape(&tape, tape.constant(alpha)));
                            embs.push(emb);
                        }
                        scores.push(tape.row_sum(tape.mul(embs[0], embs[1])));
                        targets.push(if item.positive { 1.0 } else { 0.0 });
                    }
                    let stacked = tape.stack_rows(&scores);
                    task_losses.push(bce_with_logits_loss(&tape, stacked, &targets)?);
                }
            }

            let task_loss = mean_of(&tape, &task_losses);
            let lb_loss = mean_of(&tape, &lb_losses);
            let total = tape.add(task_loss, tape.scale(lb_loss, cfg.stage2.lb_weight));
            losses.push(tape.value(total).scalar());
            let mut grads = tape.backward(total);
            let grad_mats: Vec<Matrix> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            train.adam_step(&grad_mats, &mut adam, &adam_cfg);
        }

        let conf = if conf_count > 0 { conf_sum / conf_count as f64 } else { 0.0 };
        for u in usage_sum.iter_mut() {
            *u /= conf_count.max(1) as f64;
        }
        state.usage = usage_sum.clone();
        routing_trace.push(RoutingEpoch { epoch, conf, m_effective: m_eff, usage: usage_sum });
        state.update_m(conf);
        if !losses.is_empty() {
            loss_trace.push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
    }

    let checkpoint = assemble_checkpoint(2, &state, &enc.params, Some(&train));
    Ok(Stage2Output { checkpoint, loss_trace, routing_trace, max_experts_evaluated: max_experts })
}

fn mean_of(tape: &Tape, items: &[Var]) -> Var {
    assert!(!items.is_empty(), "mean of no loss terms");
    let mut acc = items[0];
    for &v in &items[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, 1.0 / items.len() as f64)
}

// ---------------------------------------------------------------------
// Frozen model and evaluation
// ---------------------------------------------------------------------

/// Everything needed to embed a center with a trained checkpoint.
pub struct Model {
    pub encoder: EncoderParams,
    pub state: RoutingState,
    pub router_w1: Matrix,
    pub router_w2: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl Model {
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Model> {
        if ckpt.stage()? < 2 {
            return Err(RgfmError::Config(
                "evaluation requires a stage-2 checkpoint".into(),
            ));
        }
        let state = ckpt.routing_state(cfg.zeta, cfg.tau)?;
        let encoder = EncoderParams::from_params(cfg.encoder_config(), &ckpt.params)?;
        let get = |name: &str| -> Result<Matrix> {
            ckpt.params
                .get(name)
                .cloned()
                .ok_or_else(|| RgfmError::Checkpoint(format!("missing {name}")))
        };
        let experts = state
            .curvatures
            .iter()
            .enumerate()
            .map(|(j, &kappa)| Ok(ExpertParams { kappa, weight: get(&expert_w(j))? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            encoder,
            state,
            router_w1: get("router/w1")?,
            router_w2: get("router/w2")?,
            experts,
        })
    }

    /// Frozen end-to-end center embedding on `g`.
    pub fn embed_center(
        &self,
        g: &AttributedGraph,
        center: usize,
        cfg: &RunConfig,
        gog_seed: u64,
    ) -> Result<Matrix> {
        let gog = build_center_gog(g, center, &self.encoder, cfg, gog_seed, None)?;
        let alpha = moe::route(&gog, &self.router_w1, &self.router_w2, self.state.tau);
        let m_eff = self.state.effective_m();
        let shortlist = moe::topm_shortlist(&moe::mean_routing(&alpha), m_eff);
        let mut outputs: Vec<Option<Matrix>> = vec![None; self.experts.len()];
        for &j in &shortlist {
            outputs[j] = Some(moe::expert_forward(&gog, &self.experts[j])?);
        }
        let fused = moe::topm_fuse(&alpha, &outputs, m_eff)?;
        Ok(moe::fuse_center_embedding(&fused))
    }
}

/// Embed many centers over the worker pool, preserving order.
fn embed_centers(
    model: &Model,
    g: &AttributedGraph,
    centers: &[usize],
    cfg: &RunConfig,
    gog_seed: u64,
) -> Result<Matrix> {
    let rows: Vec<Result<Vec<f64>>> =
        crate::parallel::ordered_map(centers.len(), cfg.threads, |i| {
            Ok(model.embed_center(g, centers[i], cfg, gog_seed)?.row(0).to_vec())
        });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows))
}

/// Fit the downstream linear head on support embeddings. With at least
/// three shots one support example per class is held out for validation
/// and the best-validation iterate is returned; otherwise the final
/// iterate is used (no model selection at 1-shot).
fn fit_linear_head(
    embs: &Matrix,
    labels: &[usize],
    classes: usize,
    shots: usize,
    cfg: &RunConfig,
    seed: u64,
) -> (Matrix, Matrix) {
    let n = embs.rows();
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if shots >= 3 {
        // Hold out the last support example of each class.
        let mut seen = vec![0usize; classes];
        let mut train = Vec::new();
        let mut val = Vec::new();
        for i in 0..n {
            seen[labels[i]] += 1;
            if seen[labels[i]] == shots {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    } else {
        ((0..n).collect(), Vec::new())
    };

    let gather = |idx: &[usize]| -> (Matrix, Vec<usize>) {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| embs.row(i).to_vec()).collect();
        (Matrix::from_rows(&rows), idx.iter().map(|&i| labels[i]).collect())
    };
    let (x_train, y_train) = gather(&train_idx);

    let mut rng = prng(mix(seed, 0x48454144));
    let mut params = ParamSet::new();
    params.insert("w", xavier_uniform(embs.cols(), classes, &mut rng));
    params.insert("b", Matrix::zeros(1, classes));
    let mut adam = params.fresh_adam_state();
    let adam_cfg = AdamConfig::new(cfg.head_lr, 0.0);

    let predict = |params: &ParamSet, x: &Matrix| -> Vec<usize> {
        let logits = x.matmul(params.get("w").unwrap());
        (0..x.rows())
            .map(|r| {
                let b = params.get("b").unwrap();
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (c, x) in logits.row(r).iter().enumerate() {
                    let v = x + b.get(0, c);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    let mut best: Option<(f64, Matrix, Matrix)> = None;
    for step in 0..cfg.head_steps {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(x_train.clone());
        let logits = tape.add_row_broadcast(tape.matmul(x, bound.var("w")), bound.var("b"));
        let loss = cross_entropy(&tape, logits, &y_train).expect("labels validated");
        let mut grads = tape.backward(loss);
        let grad_mats: Vec<Matrix> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        params.adam_step(&grad_mats, &mut adam, &adam_cfg);

        if !val_idx.is_empty() && (step + 1) % 10 == 0 {
            let (x_val, y_val) = gather(&val_idx);
            let acc = metrics::accuracy(&predict(&params, &x_val), &y_val);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((
                    acc,
                    params.get("w").unwrap().clone(),
                    params.get("b").unwrap().clone(),
                ));
            }
        }
    }
    match best {
        Some((_, w, b)) => (w, b),
        None => (params.get("w").unwrap().clone(), params.get("b").unwrap().clone()),
    }
}

fn head_predict(w: &Matrix, b: &Matrix, embs: &Matrix) -> Vec<usize> {
    let logits = embs.matmul(w);
    (0..embs.rows())
        .map(|r| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..w.cols() {
                let v = logits.get(r, c) + b.get(0, c);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// K-shot node classification on an in-memory target graph.
pub fn eval_node_on_graph(
    cfg: &RunConfig,
    model: &Model,
    target: &AttributedGraph,
) -> Result<RunReport> {
    let started = Instant::now();
    if target.num_classes() == 0 {
        return Err(RgfmError::Config("node evaluation needs a labeled target".into()));
    }
    let gog_seed = mix(cfg.seed, 0x54475431);
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let split = splits::few_shot_split(target, cfg.shots, seed)?;
        let mut query = split.query.clone();
        if cfg.query_cap > 0 && query.len() > cfg.query_cap {
            let mut qrng = prng(mix2(seed, 0x515259, cfg.seed));
            let picked =
                crate::rng::sample_without_replacement(query.len(), cfg.query_cap, &mut qrng);
            let mut capped: Vec<usize> = picked.into_iter().map(|i| query[i]).collect();
            capped.sort_unstable();
            query = capped;
        }
        let support = split.support_flat();
        let support_nodes: Vec<usize> = support.iter().map(|&(u, _)| u).collect();
        let support_labels: Vec<usize> = support.iter().map(|&(_, c)| c).collect();

        let support_embs = embed_centers(model, target, &support_nodes, cfg, gog_seed)?;
        let query_embs = embed_centers(model, target, &query, cfg, gog_seed)?;
        let (w, b) = fit_linear_head(
            &support_embs,
            &support_labels,
            target.num_classes(),
            cfg.shots,
            cfg,
            mix(cfg.seed, seed),
        );
        let predicted = head_predict(&w, &b, &query_embs);
        let truth: Vec<usize> = query.iter().map(|&u| target.label(u).unwrap()).collect();
        per_seed.push(metrics::accuracy(&predicted, &truth));
    }
    Ok(RunReport::from_values("node", "accuracy", per_seed, started))
}

/// K-shot node classification on the configured target file.
pub fn eval_node(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<RunReport> {
    let model = Model::from_checkpoint(cfg, ckpt)?;
    let target = load_target(cfg)?;
    eval_node_on_graph(cfg, &model, &target)
}

/// Link prediction: AUC-ROC of sigmoid endpoint-embedding dot products
/// on held-out positives vs sampled negatives. Embeddings are computed
/// on the training adjacency only.
pub fn eval_link(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<RunReport> {
    let started = Instant::now();
    let model = Model::from_checkpoint(cfg, ckpt)?;
    let target = load_target(cfg)?;
    let gog_seed = mix(cfg.seed, 0x54475432);
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let split = splits::link_split(&target, cfg.link_val_frac, cfg.link_test_frac, seed)?;
        let train_graph = split.train_graph(&target);
        let mut nodes: Vec<usize> = split
            .test_pos
            .iter()
            .chain(&split.test_neg)
            .flat_map(|&(u, v)| [u, v])
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        let embs = embed_centers(&model, &train_graph, &nodes, cfg, gog_seed)?;
        let pos = |u: usize| nodes.binary_search(&u).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (&(u, v), is_pos) in split
            .test_pos
            .iter()
            .map(|e| (e, true))
            .chain(split.test_neg.iter().map(|e| (e, false)))
        {
            let dot = crate::tensor::dot(embs.row(pos(u)), embs.row(pos(v)));
            scores.push(1.0 / (1.0 + (-dot).exp()));
            labels.push(is_pos);
        }
        per_seed.push(metrics::auc_roc(&scores, &labels));
    }
    Ok(RunReport::from_values("link", "auc_roc", per_seed, started))
}

/// Evaluation-time perturbation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    EdgeDrop,
    NodeMask,
}

impl std::str::FromStr for PerturbKind {
    type Err = RgfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge_drop" => Ok(PerturbKind::EdgeDrop),
            "node_mask" => Ok(PerturbKind::NodeMask),
            other => Err(RgfmError::Config(format!(
                "unknown perturbation kind {other:?} (expected edge_drop or node_mask)"
            ))),
        }
    }
}

/// Evaluate node accuracy on perturbed copies of the target at each
/// level; level 0 reproduces the unperturbed metric exactly.
pub fn robustness_sweep(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    kind: PerturbKind,
    levels: &[f64],
) -> Result<Vec<(f64, RunReport)>> {
    let model = Model::from_checkpoint(cfg, ckpt)?;
    let target = load_target(cfg)?;
    let mut out = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let pert_seed = mix2(cfg.seed, 0x50455254, i as u64);
        let perturbed = match kind {
            PerturbKind::EdgeDrop => target.perturb_edges(level, pert_seed)?,
            PerturbKind::NodeMask => target.perturb_features(level, pert_seed)?,
        };
        out.push((level, eval_node_on_graph(cfg, &model, &perturbed)?));
    }
    Ok(out)
}

/// Text dump of one target center's GoG (requires at least a stage-1
/// checkpoint for the encoder).
pub fn inspect_gog(cfg: &RunConfig, ckpt: &Checkpoint, center: usize) -> Result<String> {
    if ckpt.stage()? < 1 {
        return Err(RgfmError::Config("inspect-gog needs a trained checkpoint".into()));
    }
    let enc = EncoderParams::from_params(cfg.encoder_config(), &ckpt.params)?;
    let target = load_target(cfg)?;
    if center >= target.num_nodes() {
        return Err(RgfmError::Config(format!(
            "center {center} out of range for {} nodes",
            target.num_nodes()
        )));
    }
    let gog = build_center_gog(&target, center, &enc, cfg, mix(cfg.seed, 0x54475431), None)?;
    Ok(gog::format_gog_dump(&gog))
}
