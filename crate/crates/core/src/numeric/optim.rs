use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure(&mut self, params: &ParamStore) {
        if self.m.len() != params.len() {
            self.m = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub state: OptimizerState,
}

impl Default for Adam {
    /// The schedule-driven transformer setting: β1 = 0.9, β2 = 0.98, ε = 1e-9.
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            state: OptimizerState::new(beta1, beta2, eps),
        }
    }

    pub fn from_state(state: OptimizerState) -> Self {
        Self { state }
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        for id in params.ids() {
            if let Some(g) = &params.get(id).grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence(params.name(id).to_string()));
                }
            }
        }
        self.state.ensure(params);
        let st = &mut self.state;
        st.t += 1;
        let bc1 = 1.0 - st.beta1.powi(st.t as i32);
        let bc2 = 1.0 - st.beta2.powi(st.t as i32);
        for id in params.ids() {
            let i = id.0;
            let t = params.get_mut(id);
            let grad = t.grad.take();
            let (m, v) = (&mut st.m[i], &mut st.v[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
                v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
                let mh = m[j] / bc1;
                if mh == 0.0 {
                    continue;
                }
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + st.eps);
            }
        }
        Ok(())
    }
}

/// Warmup-then-inverse-square-root schedule of the original transformer:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}
