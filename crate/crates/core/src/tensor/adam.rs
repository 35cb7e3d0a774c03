//! Named parameter sets and the Adam optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use crate::tensor::{Matrix, Tape, Var};

/// Adam hyperparameters. `beta1/beta2/eps` use the standard defaults.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First/second moment accumulators, one slot per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Ordered, named collection of trainable matrices.
///
/// Insertion order is the canonical order for tape binding, gradient
/// application, and checkpoint serialization, so identical construction
/// sequences give bit-identical checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).copied().map(move |i| &mut self.values[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Register every parameter as a grad-requiring leaf, in order.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self.values.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    pub fn fresh_adam_state(&self) -> AdamState {
        AdamState {
            m: self.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: self.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    /// One Adam update with decoupled weight decay:
    /// `p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p`.
    pub fn adam_step(&mut self, grads: &[Matrix], state: &mut AdamState, cfg: &AdamConfig) {
        assert_eq!(grads.len(), self.values.len(), "gradient count mismatch");
        assert_eq!(state.m.len(), self.values.len(), "optimizer state mismatch");
        state.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
        for ((p, g), (m, v)) in self
            .values
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps) + cfg.lr * cfg.weight_decay * pd[i];
            }
        }
    }
}

/// Tape handles for a bound [`ParamSet`], aligned with its order.
pub struct BoundParams {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[1.0, -2.0]));
        let mut state = params.fresh_adam_state();
        let before = params.get("w").unwrap().clone();
        params.adam_step(
            &[Matrix::zeros(1, 2)],
            &mut state,
            &AdamConfig::new(0.1, 0.0),
        );
        assert_eq!(params.get("w").unwrap(), &before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[1.0]));
        let mut state = params.fresh_adam_state();
        params.adam_step(
            &[Matrix::row_vector(&[1.0])],
            &mut state,
            &AdamConfig::new(0.1, 0.0),
        );
        let w = params.get("w").unwrap().get(0, 0);
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn identical_params_and_grads_update_identically() {
        let mut params = ParamSet::new();
        params.insert("a", Matrix::row_vector(&[0.5]));
        params.insert("b", Matrix::row_vector(&[0.5]));
        let mut state = params.fresh_adam_state();
        let g = Matrix::row_vector(&[0.3]);
        params.adam_step(&[g.clone(), g], &mut state, &AdamConfig::new(0.01, 1e-4));
        assert_eq!(params.get("a"), params.get("b"));
    }
}
