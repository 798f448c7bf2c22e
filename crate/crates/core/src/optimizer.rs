//! First-order optimization of packed parameter vectors: Adam with bias
//! correction, per-group learning-rate scaling, and best-iterate tracking.
//!
//! Raw Adam iterates are not monotone, so [`run_optimization`] returns the
//! best-objective iterate visited rather than the last one; acceptance
//! thresholds then do not depend on where in an oscillation the budget
//! runs out.

use serde::{Deserialize, Serialize};

use crate::engine::CalibProblem;
use crate::error::{Error, Result};
use crate::objective::{value_and_gradient, ParamGradient, ParamGroup, ParamVector};

/// Learning-rate multipliers per parameter group. Depth grids carry many
/// weak-signal parameters and default to a larger multiplier; a zero
/// freezes a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupLrScale {
    pub intrinsics: f64,
    pub twists: f64,
    pub grids: f64,
}

impl Default for GroupLrScale {
    fn default() -> Self {
        GroupLrScale {
            intrinsics: 1.0,
            twists: 1.0,
            grids: 5.0,
        }
    }
}

impl GroupLrScale {
    fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Intrinsics => self.intrinsics,
            ParamGroup::Twists => self.twists,
            ParamGroup::Grids => self.grids,
        }
    }
}

/// Adam hyperparameters and stopping rules.
///
/// The default step size 1e-3 suits direct optimization of normalized
/// parameters; 1e-4 is the customary rate when the same objective trains
/// network weights instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    /// Stop when the gradient max-norm falls to or below this.
    pub grad_tol: f64,
    pub group_scale: GroupLrScale,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 400,
            grad_tol: 1e-8,
            group_scale: GroupLrScale::default(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Domain(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Domain("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Moment estimates; shapes match the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update with bias correction and per-group learning-rate
/// scaling; returns the new parameters and state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grad: &ParamGradient,
    cfg: &AdamConfig,
) -> Result<(ParamVector, AdamState)> {
    cfg.validate()?;
    let n = params.data().len();
    if state.m.len() != n || grad.data().len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam state {} / grad {} / params {}",
            state.m.len(),
            grad.data().len(),
            n
        )));
    }
    let mut next = params.clone();
    let mut st = state.clone();
    st.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
    let layout = *params.layout();
    for i in 0..n {
        let g = grad.data()[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        let scale = cfg.group_scale.of(layout.group_of(i));
        next.data_mut()[i] -= cfg.lr * scale * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok((next, st))
}

/// Why an optimization run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    IterationLimit,
    GradientTolerance,
    /// The objective or gradient became non-finite (or unevaluable) at
    /// this iteration; the best earlier iterate was kept.
    Diverged { iteration: usize },
}

/// Result of an optimization run. `history` holds the objective at every
/// visited iterate, in order.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best_params: ParamVector,
    pub best_objective: f64,
    pub history: Vec<f64>,
    pub stop_reason: StopReason,
}

fn finite(grad: &ParamGradient) -> bool {
    grad.data().iter().all(|g| g.is_finite())
}

/// Iterates [`adam_step`] on the calibration objective until the
/// iteration budget, the gradient tolerance, or a non-finite evaluation.
/// Returns the best iterate visited. Fully deterministic given inputs.
///
/// An evaluation failure at the first iterate is an input error and
/// propagates; later failures report as [`StopReason::Diverged`] with the
/// iteration index so partial histories survive into reports.
pub fn run_optimization(
    problem: &CalibProblem,
    init: &ParamVector,
    cfg: &AdamConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut params = init.clone();
    let mut state = AdamState::new(init.data().len());
    let mut history = Vec::new();
    let mut best_params = init.clone();
    let mut best_objective = f64::NAN;
    let mut stop = StopReason::IterationLimit;
    for iter in 0..cfg.max_iters {
        let (value, grad) = match value_and_gradient(problem, &params) {
            Ok(vg) => vg,
            Err(e) if iter == 0 => return Err(e),
            Err(_) => {
                stop = StopReason::Diverged { iteration: iter };
                break;
            }
        };
        if !value.is_finite() || !finite(&grad) {
            stop = StopReason::Diverged { iteration: iter };
            break;
        }
        history.push(value);
        if best_objective.is_nan() || value < best_objective {
            best_objective = value;
            best_params = params.clone();
        }
        let gmax = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= cfg.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        let (next, st) = adam_step(&state, &params, &grad, cfg)?;
        params = next;
        state = st;
    }
    Ok(RunOutcome {
        best_params,
        best_objective,
        history,
        stop_reason: stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ParamLayout;

    fn plain_layout() -> ParamLayout {
        // 4 intrinsics + 6 twist = 10 components, no grids
        ParamLayout { n_pairs: 1, n_targets: 0, grid_h: 2, grid_w: 2 }
    }

    fn uniform_cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            group_scale: GroupLrScale { intrinsics: 1.0, twists: 1.0, grids: 1.0 },
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let layout = plain_layout();
        let params = ParamVector::from_data(layout, (0..10).map(|i| i as f64).collect()).unwrap();
        let grad = ParamVector::zeros(layout);
        let state = AdamState::new(10);
        let (next, st) = adam_step(&state, &params, &grad, &uniform_cfg(1e-3)).unwrap();
        assert_eq!(next.data(), params.data());
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_has_closed_form() {
        let layout = plain_layout();
        let params = ParamVector::zeros(layout);
        let mut grad = ParamVector::zeros(layout);
        grad.data_mut()[0] = 1.0;
        let (next, _) = adam_step(&AdamState::new(10), &params, &grad, &uniform_cfg(1e-3)).unwrap();
        // m_hat = g, v_hat = g^2: step = -lr * g / (|g| + eps)
        assert!((next.data()[0] + 1e-3).abs() < 1e-6 * 1e-3 + 1e-9);
        assert!(next.data()[1..].iter().all(|&v| v == 0.0));
    }

    /// Reference scalar Adam, written independently of `adam_step`.
    fn reference_adam_path(x0: f64, lr: f64, steps: usize, df: impl Fn(f64) -> f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        for t in 1..=steps {
            let g = df(x);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn adam_matches_reference_on_scalar_quadratic() {
        let layout = plain_layout();
        let df = |x: f64| 2.0 * (x - 2.0);
        let cfg = uniform_cfg(0.1);
        let mut params = ParamVector::zeros(layout);
        let mut state = AdamState::new(10);
        for _ in 0..100 {
            let mut grad = ParamVector::zeros(layout);
            grad.data_mut()[0] = df(params.data()[0]);
            let (p, s) = adam_step(&state, &params, &grad, &cfg).unwrap();
            params = p;
            state = s;
        }
        let reference = reference_adam_path(0.0, 0.1, 100, df);
        assert_eq!(params.data()[0], reference);
        assert!((params.data()[0] - 2.0).abs() < 0.05);
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let layout = plain_layout();
        let params = ParamVector::zeros(layout);
        let mut grad = ParamVector::zeros(layout);
        for g in grad.data_mut().iter_mut() {
            *g = 1.0;
        }
        let cfg = AdamConfig {
            group_scale: GroupLrScale { intrinsics: 0.0, twists: 1.0, grids: 1.0 },
            ..AdamConfig::default()
        };
        let (next, _) = adam_step(&AdamState::new(10), &params, &grad, &cfg).unwrap();
        assert!(next.data()[..4].iter().all(|&v| v == 0.0));
        assert!(next.data()[4..].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn separable_quadratic_reaches_tight_gradient_norm() {
        // f(x) = sum c_i (x_i - a_i)^2 in 10 variables
        let layout = plain_layout();
        let c: Vec<f64> = (0..10).map(|i| 0.5 + 0.3 * i as f64).collect();
        let a: Vec<f64> = (0..10).map(|i| (i as f64) - 4.5).collect();
        let cfg = uniform_cfg(0.05);
        let mut params = ParamVector::zeros(layout);
        let mut state = AdamState::new(10);
        let mut reached = None;
        for iter in 0..5000 {
            let mut grad = ParamVector::zeros(layout);
            let mut gmax = 0.0f64;
            for i in 0..10 {
                let g = 2.0 * c[i] * (params.data()[i] - a[i]);
                grad.data_mut()[i] = g;
                gmax = gmax.max(g.abs());
            }
            if gmax < 1e-6 {
                reached = Some(iter);
                break;
            }
            let (p, s) = adam_step(&state, &params, &grad, &cfg).unwrap();
            params = p;
            state = s;
        }
        assert!(reached.is_some(), "did not converge in 5000 iterations");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let layout = plain_layout();
        let params = ParamVector::zeros(layout);
        let grad = ParamVector::zeros(layout);
        let state = AdamState::new(7);
        assert!(matches!(
            adam_step(&state, &params, &grad, &AdamConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
