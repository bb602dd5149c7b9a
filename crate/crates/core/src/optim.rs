//! AdamW with three learning-rate groups.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Learning-rate multipliers for the lower, middle and upper groups.
pub const GROUP_FACTORS: [f64; 3] = [1.0, 1.75, 3.5];
pub const DEFAULT_BASE_LR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Group of a parameter by name: embeddings and the lower third of layers
/// are group 0, the middle third group 1, the upper third and every head
/// group 2.
pub fn group_of(name: &str, n_layers: usize) -> usize {
    if name.starts_with("embeddings.") {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("layers.") {
        let layer: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        return (3 * layer / n_layers.max(1)).min(2);
    }
    2
}

/// Per-parameter learning rates derived from a base rate and three factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LrGroupPlan {
    pub base_lr: f64,
    pub factors: [f64; 3],
    /// Group index of each parameter, in declared order.
    pub assignment: Vec<usize>,
}

impl LrGroupPlan {
    pub fn new(base_lr: f64, names: &[String], n_layers: usize) -> Result<Self> {
        Self::with_factors(base_lr, GROUP_FACTORS, names, n_layers)
    }

    pub fn with_factors(
        base_lr: f64,
        factors: [f64; 3],
        names: &[String],
        n_layers: usize,
    ) -> Result<Self> {
        if !(base_lr >= 0.0) || factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config(format!(
                "learning rate {base_lr} with factors {factors:?}"
            )));
        }
        Ok(Self {
            base_lr,
            factors,
            assignment: names.iter().map(|n| group_of(n, n_layers)).collect(),
        })
    }

    pub fn for_config(base_lr: f64, config: &EncoderConfig, names: &[String]) -> Result<Self> {
        Self::new(base_lr, names, config.n_layers)
    }

    /// Effective learning rate of each group.
    pub fn group_lrs(&self) -> [f64; 3] {
        self.factors.map(|f| self.base_lr * f)
    }

    pub fn lr_of(&self, param: usize) -> f64 {
        self.base_lr * self.factors[self.assignment[param]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update over every parameter. Nothing is modified when any
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    names: &[String],
    state: &mut OptimizerState,
    plan: &LrGroupPlan,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || plan.assignment.len() != n {
        return Err(Error::Shape(format!(
            "{n} parameters, {} gradients, {} moment slots, {} group assignments",
            grads.len(),
            state.m.len(),
            plan.assignment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(Error::Shape(format!("gradient {i} has {} values for {}", g.len(), p.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let lr = plan.lr_of(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decay = 1.0 - lr * weight_decay;
        for j in 0..p.len() {
            let g = grads[i][j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}
