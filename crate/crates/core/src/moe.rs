//! Dynamic candidate-expert determination, confidence-aware top-m routing
//! over constant-curvature experts, fusion, and load balancing.

use crate::gog::GraphOfGraphs;
use crate::tensor::{Matrix, Tape, Var};
use crate::{RgfmError, Result};

/// Ordered curvature candidates: 0, -1, +1, -2, +2, ...
pub const CURVATURE_MASTER_LIST: [f64; 9] =
    [0.0, -1.0, 1.0, -2.0, 2.0, -3.0, 3.0, -4.0, 4.0];

/// Heterogeneity score `clamp((mean + std) / 2, 1e-3, 1)` over the CV
/// history, with population std.
pub fn heterogeneity_score(cv_history: &[f64]) -> f64 {
    assert!(!cv_history.is_empty(), "heterogeneity_score needs at least one CV");
    let (mu, sigma) = crate::metrics::mean_std(cv_history);
    ((mu + sigma) / 2.0).clamp(1e-3, 1.0)
}

/// Prefix of the master curvature list of length `ceil(score * zeta)`,
/// clamped to `[1, master list length]`.
pub fn candidate_set(score: f64, zeta: usize) -> Vec<f64> {
    assert!(zeta >= 1, "zeta must be at least 1");
    let size = ((score * zeta as f64).ceil() as usize).clamp(1, CURVATURE_MASTER_LIST.len());
    CURVATURE_MASTER_LIST[..size].to_vec()
}

/// Candidate curvature list, temperature, and the dynamic expert count.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub cv_history: Vec<f64>,
    pub zeta: usize,
    pub tau: f64,
    pub curvatures: Vec<f64>,
    pub m_float: f64,
    pub m_start: usize,
    /// Running mean routing mass per expert (diagnostics).
    pub usage: Vec<f64>,
}

impl RoutingState {
    pub fn new(zeta: usize, tau: f64) -> Self {
        RoutingState {
            cv_history: Vec::new(),
            zeta,
            tau,
            curvatures: vec![0.0],
            m_float: 1.0,
            m_start: 1,
            usage: Vec::new(),
        }
    }

    /// Record one dataset's degree CV and regrow the candidate set.
    /// The list is a prefix of the master list, so existing experts keep
    /// their positions as more datasets arrive.
    pub fn append_dataset_cv(&mut self, cv: f64) {
        self.cv_history.push(cv);
        self.curvatures = candidate_set(self.score(), self.zeta);
    }

    pub fn score(&self) -> f64 {
        heterogeneity_score(&self.cv_history)
    }

    pub fn psi(&self) -> usize {
        self.curvatures.len()
    }

    /// Freeze the candidate set and arm the top-m schedule at `m0 = psi`.
    pub fn begin_stage2(&mut self) {
        self.m_start = self.psi();
        self.m_float = self.m_start as f64;
        self.usage = vec![0.0; self.psi()];
    }

    pub fn effective_m(&self) -> usize {
        // Epsilon guard: repeated subtraction can leave m_float a few ulp
        // above an integer boundary.
        ((self.m_float - 1e-9).ceil() as usize).clamp(1, self.m_start.max(1))
    }

    /// Once-per-epoch stepwise shrink: `m <- max(1, m - conf)`.
    pub fn update_m(&mut self, conf: f64) {
        self.m_float = (self.m_float - conf).max(1.0);
    }
}

/// Symmetric-normalized adjacency with self-loops over the K GoG nodes:
/// `D^{-1/2} (A + I) D^{-1/2}`.
pub fn sym_norm_adjacency(gog: &GraphOfGraphs) -> Matrix {
    let k = gog.k();
    let mut a = Matrix::identity(k);
    for &(u, v) in gog.directed_edges() {
        a.set(u, v, 1.0);
    }
    let deg: Vec<f64> = (0..k).map(|r| a.row(r).iter().sum::<f64>()).collect();
    let mut out = Matrix::zeros(k, k);
    for r in 0..k {
        for c in 0..k {
            if a.get(r, c) != 0.0 {
                out.set(r, c, 1.0 / (deg[r] * deg[c]).sqrt());
            }
        }
    }
    out
}

/// Convex per-row aggregation weights: the symmetric-normalized rows
/// rescaled to sum to one, as required by tangent-space aggregation.
pub fn convex_neighbor_weights(gog: &GraphOfGraphs) -> Matrix {
    let mut w = sym_norm_adjacency(gog);
    for r in 0..w.rows() {
        let sum: f64 = w.row(r).iter().sum();
        for v in w.row_mut(r) {
            *v /= sum;
        }
    }
    w
}

/// Two-layer message-passing router on the tape: row-softmax at
/// temperature `tau` of per-node expert logits.
pub fn route_on_tape(
    tape: &Tape,
    x: Var,
    adj_hat: Var,
    w1: Var,
    w2: Var,
    tau: f64,
) -> Var {
    let h = tape.relu(tape.matmul(adj_hat, tape.matmul(x, w1)));
    let logits = tape.matmul(adj_hat, tape.matmul(h, w2));
    tape.softmax_rows(tape.scale(logits, 1.0 / tau))
}

/// Forward-only routing: `[K x psi]` with rows summing to one.
pub fn route(gog: &GraphOfGraphs, w1: &Matrix, w2: &Matrix, tau: f64) -> Matrix {
    let tape = Tape::new();
    let x = tape.constant(gog.node_embeddings.clone());
    let adj = tape.constant(sym_norm_adjacency(gog));
    let w1 = tape.constant(w1.clone());
    let w2 = tape.constant(w2.clone());
    let alpha = route_on_tape(&tape, x, adj, w1, w2, tau);
    tape.value(alpha)
}

/// Mean over GoG nodes of the max-over-experts routing weight.
pub fn confidence(alpha: &Matrix) -> f64 {
    assert!(alpha.rows() >= 1, "confidence of empty routing matrix");
    let mut acc = 0.0;
    for r in 0..alpha.rows() {
        acc += alpha.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    acc / alpha.rows() as f64
}

/// One curvature expert: fixed `kappa`, trainable tangent-space weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub kappa: f64,
    pub weight: Matrix,
}

/// Tangent-norm cap keeping `exp0` inside the positive-curvature chart.
fn tangent_cap(kappa: f64) -> Option<f64> {
    (kappa > 0.0).then(|| 0.9 * (std::f64::consts::FRAC_PI_2 - 1e-7) / kappa.sqrt())
}

/// Curvature-aware propagation layer on the tape:
/// lift `X W` via exp0, aggregate through the origin tangent space with
/// convex symmetric-degree weights (self term included), apply the
/// pointwise nonlinearity on the aggregated chart point, map back via
/// log0. With `kappa = 0` every map is the identity and the layer reduces
/// to `relu(W_hat X W)` exactly.
pub fn expert_forward_on_tape(
    tape: &Tape,
    x: Var,
    neighbor_weights: Var,
    kappa: f64,
    weight: Var,
) -> Result<Var> {
    let mut t = tape.matmul(x, weight);
    if let Some(cap) = tangent_cap(kappa) {
        t = tape.cap_row_norm(t, cap);
    }
    let lifted = tape.exp_map0(t, kappa)?;
    let aggregated = tape.exp_map0(tape.matmul(neighbor_weights, tape.log_map0(lifted, kappa)?), kappa)?;
    let activated = tape.relu(aggregated);
    tape.log_map0(activated, kappa)
}

/// Forward-only expert evaluation: `[K x d']`.
pub fn expert_forward(gog: &GraphOfGraphs, expert: &ExpertParams) -> Result<Matrix> {
    let tape = Tape::new();
    let x = tape.constant(gog.node_embeddings.clone());
    let w = tape.constant(expert.weight.clone());
    let nw = tape.constant(convex_neighbor_weights(gog));
    let h = expert_forward_on_tape(&tape, x, nw, expert.kappa, w)?;
    Ok(tape.value(h))
}

/// Plain flat message-passing layer `relu(W_hat X W)`; the reference the
/// Euclidean expert must reproduce bit-for-bit.
pub fn flat_expert_forward(gog: &GraphOfGraphs, weight: &Matrix) -> Matrix {
    convex_neighbor_weights(gog)
        .matmul(&gog.node_embeddings.matmul(weight))
        .map(|v| v.max(0.0))
}

/// Top-m shortlist of the node-mean routing vector; ties go to the lower
/// expert index.
pub fn topm_shortlist(alpha_bar: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alpha_bar.len()).collect();
    idx.sort_by(|&a, &b| {
        alpha_bar[b]
            .partial_cmp(&alpha_bar[a])
            .expect("routing weights are finite")
            .then(a.cmp(&b))
    });
    let mut short = idx[..m.min(idx.len())].to_vec();
    short.sort_unstable();
    short
}

/// Mask-and-renormalize the node-mean routing vector to the top-m experts.
pub fn topm_weights(alpha_bar: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(RgfmError::InvalidArgument("top-m needs m >= 1".into()));
    }
    if m > alpha_bar.len() {
        return Err(RgfmError::InvalidArgument(format!(
            "top-m m={m} exceeds expert count {}",
            alpha_bar.len()
        )));
    }
    let shortlist = topm_shortlist(alpha_bar, m);
    let mass: f64 = shortlist.iter().map(|&j| alpha_bar[j]).sum();
    let mut out = vec![0.0; alpha_bar.len()];
    for &j in &shortlist {
        out[j] = alpha_bar[j] / mass;
    }
    Ok(out)
}

/// Node-mean routing vector (column means of `alpha`).
pub fn mean_routing(alpha: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; alpha.cols()];
    for r in 0..alpha.rows() {
        for (o, v) in out.iter_mut().zip(alpha.row(r)) {
            *o += v / alpha.rows() as f64;
        }
    }
    out
}

/// Fuse shortlisted expert outputs with masked-renormalized weights.
/// `expert_outputs[j]` may be `None` for experts outside the shortlist.
pub fn topm_fuse(
    alpha: &Matrix,
    expert_outputs: &[Option<Matrix>],
    m: usize,
) -> Result<Matrix> {
    let psi = alpha.cols();
    if expert_outputs.len() != psi {
        return Err(RgfmError::InvalidArgument(format!(
            "expected {psi} expert output slots, got {}",
            expert_outputs.len()
        )));
    }
    let weights = topm_weights(&mean_routing(alpha), m)?;
    let mut fused: Option<Matrix> = None;
    for (j, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let h = expert_outputs[j].as_ref().ok_or_else(|| {
            RgfmError::InvalidArgument(format!("shortlisted expert {j} has no materialized output"))
        })?;
        let scaled = h.map(|v| v * w);
        match &mut fused {
            Some(acc) => acc.add_assign(&scaled),
            slot @ None => *slot = Some(scaled),
        }
    }
    fused.ok_or_else(|| RgfmError::InvalidArgument("empty shortlist".into()))
}

/// Differentiable fusion on the tape. The shortlist is decided from the
/// current routing values (a discrete choice); gradients flow through the
/// renormalized weights and the expert outputs. Returns the fused `[K x d]`
/// node matrix and the shortlist.
pub fn topm_fuse_on_tape(
    tape: &Tape,
    alpha: Var,
    expert_outputs: &[(usize, Var)],
    m: usize,
) -> Result<(Var, Vec<usize>)> {
    let (_, psi) = tape.shape(alpha);
    let alpha_bar = tape.mean_pool(alpha);
    let bar_values = tape.value(alpha_bar);
    let shortlist = topm_shortlist(bar_values.row(0), m.min(psi));
    let mask = {
        let mut m = Matrix::zeros(1, psi);
        for &j in &shortlist {
            m.set(0, j, 1.0);
        }
        tape.constant(m)
    };
    let masked = tape.mul(alpha_bar, mask);
    let mass = tape.row_sum(masked);
    let renorm = tape.row_div(masked, mass);
    // Gather shortlist weights as [1 x m] and stack expert maps as rows.
    let renorm_col = tape.reshape(renorm, psi, 1);
    let picked = tape.reshape(tape.rows_select(renorm_col, &shortlist), 1, shortlist.len());
    let mut flat_rows = Vec::with_capacity(shortlist.len());
    for &j in &shortlist {
        let (_, h) = expert_outputs
            .iter()
            .find(|(idx, _)| *idx == j)
            .ok_or_else(|| {
                RgfmError::InvalidArgument(format!("expert {j} shortlisted but not evaluated"))
            })?;
        let (k, d) = tape.shape(*h);
        flat_rows.push(tape.reshape(*h, 1, k * d));
    }
    let stacked = tape.stack_rows(&flat_rows);
    let (k_times_d, _) = (tape.shape(stacked).1, ());
    let fused_flat = tape.matmul(picked, stacked);
    let (k, d) = {
        let (k, d) = tape.shape(expert_outputs[0].1);
        (k, d)
    };
    debug_assert_eq!(k * d, k_times_d);
    Ok((tape.reshape(fused_flat, k, d), shortlist))
}

/// Squared distance between the mean routing mass and uniform usage.
pub fn load_balance_loss(alpha: &Matrix) -> f64 {
    let psi = alpha.cols() as f64;
    mean_routing(alpha)
        .iter()
        .map(|u| {
            let d = u - 1.0 / psi;
            d * d
        })
        .sum()
}

/// Same load-balance penalty as a tape node.
pub fn load_balance_loss_on_tape(tape: &Tape, alpha: Var) -> Var {
    let (_, psi) = tape.shape(alpha);
    let u = tape.mean_pool(alpha);
    let centered = tape.add_scalar(u, -1.0 / psi as f64);
    tape.sum_all(tape.mul(centered, centered))
}

/// Mean over the K hop rows, L2-normalized: the center's fused embedding.
pub fn fuse_center_embedding(fused: &Matrix) -> Matrix {
    assert!(fused.rows() >= 1, "fuse_center_embedding needs at least one row");
    let tape = Tape::new();
    let f = tape.constant(fused.clone());
    let out = tape.row_normalize(tape.mean_pool(f));
    tape.value(out)
}

/// Tape version of [`fuse_center_embedding`].
pub fn fuse_center_embedding_on_tape(tape: &Tape, fused: Var) -> Var {
    tape.row_normalize(tape.mean_pool(fused))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gog::build_gog_from_embeddings;
    use crate::rng::{normal, prng};

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = prng(seed);
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let v: Vec<f64> = (0..cols).map(|_| normal(&mut rng)).collect();
            let n = crate::tensor::l2_norm(&v);
            for (c, x) in v.iter().enumerate() {
                m.set(r, c, x / n);
            }
        }
        m
    }

    fn fixture_gog(k: usize, d: usize, seed: u64) -> GraphOfGraphs {
        build_gog_from_embeddings(0, unit_rows(k, d, seed), 0.6, seed).unwrap()
    }

    #[test]
    fn score_fixtures() {
        assert!((heterogeneity_score(&[1.0]) - 0.5).abs() < 1e-12);
        assert_eq!(heterogeneity_score(&[0.0, 0.0]), 1e-3);
        assert_eq!(heterogeneity_score(&[1.0, 3.0]), 1.0);
    }

    #[test]
    fn candidate_list_order() {
        assert_eq!(candidate_set(0.1, 1), vec![0.0]);
        assert_eq!(candidate_set(0.8, 5), vec![0.0, -1.0, 1.0, -2.0]);
        assert_eq!(candidate_set(1.0, 5), vec![0.0, -1.0, 1.0, -2.0, 2.0]);
        // Master list cap.
        assert_eq!(candidate_set(1.0, 50).len(), CURVATURE_MASTER_LIST.len());
    }

    #[test]
    fn psi_grows_with_score() {
        let mut state = RoutingState::new(5, 0.2);
        let mut last_psi = 0;
        for cv in [0.2, 0.5, 0.9, 1.4] {
            state.append_dataset_cv(cv);
            assert!(state.psi() >= last_psi, "psi shrank");
            last_psi = state.psi();
        }
        assert_eq!(&state.curvatures[..1], &[0.0]);
    }

    #[test]
    fn routing_rows_are_distributions() {
        let gog = fixture_gog(4, 8, 3);
        let mut rng = prng(5);
        let w1 = Matrix::from_vec(8, 6, (0..48).map(|_| normal(&mut rng) * 0.3).collect());
        let w2 = Matrix::from_vec(6, 3, (0..18).map(|_| normal(&mut rng) * 0.3).collect());
        let alpha = route(&gog, &w1, &w2, 0.2);
        assert_eq!(alpha.shape(), (4, 3));
        for r in 0..alpha.rows() {
            let sum: f64 = alpha.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(alpha.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zero_router_weights_give_uniform_rows() {
        let gog = fixture_gog(3, 4, 9);
        let alpha = route(&gog, &Matrix::zeros(4, 4), &Matrix::zeros(4, 2), 0.2);
        for r in 0..alpha.rows() {
            for &v in alpha.row(r) {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_expert_routes_to_ones() {
        let gog = fixture_gog(3, 4, 1);
        let alpha = route(&gog, &Matrix::zeros(4, 4), &Matrix::zeros(4, 1), 0.2);
        assert!(alpha.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn confidence_limits_and_fixture() {
        let one_hot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(confidence(&one_hot), 1.0);
        let uniform = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(confidence(&uniform), 0.5);
        let mixed = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]);
        assert!((confidence(&mixed) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn update_m_schedule() {
        let mut state = RoutingState::new(5, 0.2);
        state.append_dataset_cv(1.0);
        state.append_dataset_cv(2.0);
        state.curvatures = candidate_set(1.0, 5);
        state.begin_stage2();
        assert_eq!(state.m_start, 5);
        state.m_float = 3.0;
        state.update_m(0.5);
        assert_eq!(state.m_float, 2.5);
        assert_eq!(state.effective_m(), 3);
        state.m_float = 1.2;
        state.update_m(1.0);
        assert_eq!(state.m_float, 1.0);
        assert_eq!(state.effective_m(), 1);
        let before = state.m_float;
        state.update_m(0.0);
        assert_eq!(state.m_float, before);
    }

    #[test]
    fn m_reaches_floor_within_bound() {
        // With conf >= conf_min every epoch, m hits 1 after at most
        // ceil((m0 - 1) / conf_min) epochs.
        let conf_min = 0.3;
        let m0 = 5usize;
        let mut state = RoutingState::new(5, 0.2);
        state.curvatures = candidate_set(1.0, 5);
        state.begin_stage2();
        assert_eq!(state.effective_m(), m0);
        let bound = ((m0 as f64 - 1.0) / conf_min).ceil() as usize;
        let mut prev = state.effective_m();
        let mut reached = None;
        for epoch in 1..=bound {
            state.update_m(conf_min);
            let m = state.effective_m();
            assert!(m <= prev && m >= 1, "m must be non-increasing and >= 1");
            prev = m;
            if m == 1 && reached.is_none() {
                reached = Some(epoch);
            }
        }
        assert_eq!(state.effective_m(), 1);
        assert!(reached.unwrap_or(bound) <= bound);
    }

    #[test]
    fn euclidean_expert_matches_flat_layer() {
        let gog = fixture_gog(3, 6, 21);
        let mut rng = prng(2);
        let w = Matrix::from_vec(6, 6, (0..36).map(|_| normal(&mut rng) * 0.4).collect());
        let expert = ExpertParams { kappa: 0.0, weight: w.clone() };
        let h = expert_forward(&gog, &expert).unwrap();
        let flat = flat_expert_forward(&gog, &w);
        assert!(h.max_abs_diff(&flat) < 1e-12);
    }

    #[test]
    fn curved_experts_differ_from_flat() {
        let gog = fixture_gog(3, 6, 22);
        let mut rng = prng(3);
        let w = Matrix::from_vec(6, 6, (0..36).map(|_| normal(&mut rng) * 0.4).collect());
        let flat = flat_expert_forward(&gog, &w);
        for kappa in [-1.0, 1.0, -2.0] {
            let h = expert_forward(&gog, &ExpertParams { kappa, weight: w.clone() }).unwrap();
            assert!(h.max_abs_diff(&flat) > 1e-6, "kappa {kappa} collapsed to flat");
        }
    }

    #[test]
    fn k1_gog_expert_is_self_term_only() {
        let x = unit_rows(1, 4, 7);
        let gog = build_gog_from_embeddings(0, x.clone(), 0.6, 0).unwrap();
        let w = Matrix::identity(4);
        let h = expert_forward(&gog, &ExpertParams { kappa: -1.0, weight: w }).unwrap();
        // Aggregation weight matrix is [[1]]: H = log0(relu(exp0(x))).
        let man = crate::manifold::Manifold::new(-1.0);
        let lifted = man.exp0(x.row(0)).unwrap();
        let act: Vec<f64> = lifted.iter().map(|v| v.max(0.0)).collect();
        let expect = man.log0(&act).unwrap();
        for (a, b) in h.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_curved_fixture() {
        // K = 3 complete GoG, identity weights: check one output row
        // against a step-by-step evaluation of the composition.
        let x = unit_rows(3, 3, 13);
        let gog = build_gog_from_embeddings(0, x.clone(), 1.0, 5).unwrap();
        assert_eq!(gog.undirected_edges().len(), 3);
        let kappa = -2.0;
        let h = expert_forward(&gog, &ExpertParams { kappa, weight: Matrix::identity(3) })
            .unwrap();

        let man = crate::manifold::Manifold::new(kappa);
        let weights = convex_neighbor_weights(&gog);
        let lifted: Vec<Vec<f64>> = (0..3).map(|r| man.exp0(x.row(r)).unwrap()).collect();
        for k in 0..3 {
            let agg = man.tangent_aggregate(&lifted, weights.row(k)).unwrap();
            let act: Vec<f64> = agg.iter().map(|v| v.max(0.0)).collect();
            let expect = man.log0(&act).unwrap();
            for (a, b) in h.row(k).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9, "row {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn positive_curvature_cap_keeps_chart_valid() {
        let gog = fixture_gog(3, 4, 31);
        // Large weights would overflow the kappa > 0 chart without the cap.
        let w = Matrix::filled(4, 4, 2.0);
        let h = expert_forward(&gog, &ExpertParams { kappa: 4.0, weight: w });
        assert!(h.is_ok());
        assert!(h.unwrap().is_finite());
    }

    #[test]
    fn topm_weights_fixture_and_limits() {
        let w = topm_weights(&[0.5, 0.3, 0.2], 2).unwrap();
        assert!((w[0] - 0.625).abs() < 1e-12);
        assert!((w[1] - 0.375).abs() < 1e-12);
        assert_eq!(w[2], 0.0);

        // m = psi keeps the full softmax weights.
        let full = topm_weights(&[0.5, 0.3, 0.2], 3).unwrap();
        assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((full[0] - 0.5).abs() < 1e-12);

        assert!(topm_weights(&[0.5, 0.5], 0).is_err());
        assert!(topm_weights(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn topm_ties_break_to_lower_index() {
        let short = topm_shortlist(&[0.4, 0.4, 0.2], 1);
        assert_eq!(short, vec![0]);
    }

    #[test]
    fn top1_fusion_returns_single_expert_output() {
        let alpha = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.6, 0.4]]);
        let h0 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let fused = topm_fuse(&alpha, &[Some(h0.clone()), None], 1).unwrap();
        assert_eq!(fused, h0);
    }

    #[test]
    fn fusion_is_invariant_to_expert_permutation() {
        let alpha = Matrix::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.4, 0.35, 0.25]]);
        let hs: Vec<Option<Matrix>> = (0..3)
            .map(|j| Some(Matrix::filled(2, 2, (j + 1) as f64)))
            .collect();
        let fused = topm_fuse(&alpha, &hs, 2).unwrap();

        // Permute experts (columns of alpha and the output list) together.
        let perm = [2usize, 0, 1];
        let mut alpha_p = Matrix::zeros(2, 3);
        for r in 0..2 {
            for (new_j, &old_j) in perm.iter().enumerate() {
                alpha_p.set(r, new_j, alpha.get(r, old_j));
            }
        }
        let hs_p: Vec<Option<Matrix>> = perm.iter().map(|&j| hs[j].clone()).collect();
        let fused_p = topm_fuse(&alpha_p, &hs_p, 2).unwrap();
        assert!(fused.max_abs_diff(&fused_p) < 1e-12);
    }

    #[test]
    fn temperature_change_preserves_shortlist() {
        let gog = fixture_gog(4, 8, 17);
        let mut rng = prng(23);
        let w1 = Matrix::from_vec(8, 6, (0..48).map(|_| normal(&mut rng) * 0.5).collect());
        let w2 = Matrix::from_vec(6, 4, (0..24).map(|_| normal(&mut rng) * 0.5).collect());
        let short_a = topm_shortlist(&mean_routing(&route(&gog, &w1, &w2, 0.2)), 2);
        let short_b = topm_shortlist(&mean_routing(&route(&gog, &w1, &w2, 0.05)), 2);
        assert_eq!(short_a, short_b);
    }

    #[test]
    fn load_balance_fixtures() {
        let uniform = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(load_balance_loss(&uniform), 0.0);
        let collapsed = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((load_balance_loss(&collapsed) - 0.5).abs() < 1e-12);
        // Nonnegative in general.
        let a = Matrix::from_rows(&[vec![0.8, 0.2], vec![0.1, 0.9]]);
        assert!(load_balance_loss(&a) >= 0.0);
    }

    #[test]
    fn center_fusion_fixtures() {
        let single = Matrix::row_vector(&[3.0, 4.0]);
        let out = fuse_center_embedding(&single);
        assert!((out.get(0, 0) - 0.6).abs() < 1e-12);

        let two = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = fuse_center_embedding(&two);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.get(0, 0) - h).abs() < 1e-12);
        assert!((out.get(0, 1) - h).abs() < 1e-12);
    }

    #[test]
    fn gog_edges_change_expert_outputs() {
        // Same embeddings, same weights: stripping the sampled edges must
        // change the expert aggregation (self term only vs mixed hops).
        let x = unit_rows(4, 6, 55);
        let with_edges = build_gog_from_embeddings(0, x.clone(), 1.0, 9).unwrap();
        let without = build_gog_from_embeddings(0, x, 0.0, 9).unwrap();
        let mut rng = prng(4);
        let w = Matrix::from_vec(6, 6, (0..36).map(|_| normal(&mut rng) * 0.4).collect());
        for kappa in [0.0, -1.0] {
            let a = expert_forward(&with_edges, &ExpertParams { kappa, weight: w.clone() })
                .unwrap();
            let b = expert_forward(&without, &ExpertParams { kappa, weight: w.clone() }).unwrap();
            assert!(a.max_abs_diff(&b) > 1e-9, "edges had no effect at kappa {kappa}");
        }
    }

    #[test]
    fn tape_fusion_matches_plain_fusion() {
        let alpha_m = Matrix::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3]]);
        let hs: Vec<Matrix> = (0..3)
            .map(|j| Matrix::from_rows(&[vec![j as f64, 1.0], vec![2.0, -(j as f64)]]))
            .collect();
        let plain = topm_fuse(
            &alpha_m,
            &hs.iter().cloned().map(Some).collect::<Vec<_>>(),
            2,
        )
        .unwrap();

        let tape = Tape::new();
        let alpha = tape.constant(alpha_m);
        let outs: Vec<(usize, Var)> =
            hs.iter().enumerate().map(|(j, h)| (j, tape.constant(h.clone()))).collect();
        let (fused, shortlist) = topm_fuse_on_tape(&tape, alpha, &outs, 2).unwrap();
        assert_eq!(shortlist.len(), 2);
        assert!(tape.value(fused).max_abs_diff(&plain) < 1e-12);
    }
}
