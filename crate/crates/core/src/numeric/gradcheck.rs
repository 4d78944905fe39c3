//! Central finite-difference checks of reverse-mode gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Step for the five-point stencil, whose truncation error is O(h^4).
pub const DEFAULT_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates left out because a step of `h` crossed a ReLU kink.
    pub skipped: usize,
    /// `(input or parameter index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    fn observe(&mut self, err: f64, at: (usize, usize)) {
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(at);
        }
    }
}

/// Five-point central difference of `f` at `x0`, or `None` when any probe
/// lands on a different ReLU piece than `pattern`.
fn central_difference<F>(mut f: F, x0: f64, h: f64, pattern: &[bool]) -> Result<Option<f64>>
where
    F: FnMut(f64) -> Result<(f64, Vec<bool>)>,
{
    let mut vals = [0.0; 4];
    for (slot, k) in vals.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
        let (v, p) = f(x0 + k * h)?;
        if p != pattern {
            return Ok(None);
        }
        *slot = v;
    }
    let [p2, p1, m1, m2] = vals;
    Ok(Some((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)))
}

/// Reduces an arbitrary-shape output to a scalar with fixed random weights,
/// so every output entry influences the checked loss.
pub fn random_projection(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weighted = g.mul_const(out, &Tensor::new(&shape, w)?)?;
    Ok(g.sum(weighted))
}

/// Checks `d f / d inputs` for every element of every input. `graph` makes
/// each fresh graph, so a seeded training graph keeps dropout masks fixed.
pub fn check_inputs<F>(inputs: &[Tensor], graph: impl Fn() -> Graph, f: F, h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = graph();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.data(loss)[0], g.kink_pattern()))
    };

    let mut g = graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let pattern = g.kink_pattern();
    g.backward(loss)?;

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            let numeric = central_difference(
                |x| {
                    work[k].data_mut()[j] = x;
                    eval(&work)
                },
                x0,
                h,
                &pattern,
            )?;
            work[k].data_mut()[j] = x0;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic.get(j).copied().unwrap_or(0.0);
            report.observe(rel_err(a, numeric), (k, j));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of `f` at the given `(parameter, element)`
/// coordinates.
pub fn check_params<F>(store: &ParamStore, f: F, coords: &[(ParamId, usize)], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let pattern = g.kink_pattern();
    g.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate(&g, 1.0);

    let eval = |work: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let l = f(&mut g, work)?;
        Ok((g.data(l)[0], g.kink_pattern()))
    };
    let mut work = store.clone();
    let mut report = GradReport::default();
    for &(id, j) in coords {
        let x0 = store.get(id).data()[j];
        let numeric = central_difference(
            |x| {
                work.get_mut(id).data_mut()[j] = x;
                eval(&work)
            },
            x0,
            h,
            &pattern,
        )?;
        work.get_mut(id).data_mut()[j] = x0;
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        let analytic = grads.get(id).grad.as_ref().map_or(0.0, |g| g[j]);
        report.observe(rel_err(analytic, numeric), (id.0, j));
    }
    Ok(report)
}
