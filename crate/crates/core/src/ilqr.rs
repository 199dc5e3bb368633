//! Open-loop trajectory optimization by iterative LQR.
//!
//! Each iteration linearizes the dynamics along the current nominal (with
//! exact or sampled Jacobians), runs a regularized Riccati-style backward
//! pass, and line-searches the resulting affine control update. The cost is
//!
//! ```text
//! J = Σ_t ½ q_run ‖Φ_t − Φ_goal‖² + ½ r_ctrl ‖U_t‖²  +  ½ q_term ‖Φ_T − Φ_goal‖²
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::grid::PhaseField;
use crate::jacobian::{estimate_jacobians, GramMode, LlsCdConfig, DEFAULT_SIGMA};
use crate::scalar::Scalar;
use crate::seed;
use crate::sysid::LtvModel;

/// Quadratic tracking cost towards a goal state.
#[derive(Debug, Clone, PartialEq)]
pub struct CostParams<T> {
    goal: DVector<T>,
    q_run: T,
    r_ctrl: T,
    q_term: T,
}

impl<T: Scalar> CostParams<T> {
    pub fn new(goal: DVector<T>, q_run: T, r_ctrl: T, q_term: T) -> Result<Self> {
        if !(q_run.finite() && q_run >= T::zero()) || !(q_term.finite() && q_term >= T::zero()) {
            return Err(Error::Config(format!(
                "state weights must be >= 0, got q_run={q_run}, q_term={q_term}"
            )));
        }
        if !(r_ctrl.finite() && r_ctrl > T::zero()) {
            return Err(Error::Config(format!("r_ctrl must be > 0, got {r_ctrl}")));
        }
        Ok(Self {
            goal,
            q_run,
            r_ctrl,
            q_term,
        })
    }

    pub fn for_goal(goal: &PhaseField<T>, q_run: T, r_ctrl: T, q_term: T) -> Result<Self> {
        Self::new(goal.to_vector(), q_run, r_ctrl, q_term)
    }

    #[inline]
    pub fn goal(&self) -> &DVector<T> {
        &self.goal
    }
    #[inline]
    pub fn q_run(&self) -> T {
        self.q_run
    }
    #[inline]
    pub fn r_ctrl(&self) -> T {
        self.r_ctrl
    }
    #[inline]
    pub fn q_term(&self) -> T {
        self.q_term
    }

    /// Same goal with all weights multiplied by `c`.
    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.goal.clone(), self.q_run * c, self.r_ctrl * c, self.q_term * c)
    }

    pub fn running(&self, x: &DVector<T>, u: &DVector<T>) -> T {
        let half = T::of(0.5);
        half * self.q_run * (x - &self.goal).norm_squared() + half * self.r_ctrl * u.norm_squared()
    }

    pub fn terminal(&self, x: &DVector<T>) -> T {
        T::of(0.5) * self.q_term * (x - &self.goal).norm_squared()
    }
}

/// States `Φ_0..Φ_T`, controls `U_0..U_{T−1}` and their costs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<DVector<T>>,
    pub controls: Vec<DVector<T>>,
    pub per_step_costs: Vec<T>,
    pub terminal_cost: T,
    pub total_cost: T,
}

impl<T: Scalar> Trajectory<T> {
    /// Assembles a trajectory and fills in its costs.
    pub fn from_parts(states: Vec<DVector<T>>, controls: Vec<DVector<T>>, cost: &CostParams<T>) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::Config(format!(
                "trajectory needs one more state than controls, got {} states and {} controls",
                states.len(),
                controls.len()
            )));
        }
        let per_step_costs: Vec<T> = states
            .iter()
            .zip(&controls)
            .map(|(x, u)| cost.running(x, u))
            .collect();
        let terminal_cost = cost.terminal(states.last().expect("at least one state"));
        let total_cost = per_step_costs.iter().fold(T::zero(), |a, &c| a + c) + terminal_cost;
        Ok(Self {
            states,
            controls,
            per_step_costs,
            terminal_cost,
            total_cost,
        })
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn initial_state(&self) -> &DVector<T> {
        &self.states[0]
    }

    pub fn final_state(&self) -> &DVector<T> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Cost recomputed from states and controls.
    pub fn recompute_cost(&self, cost: &CostParams<T>) -> T {
        self.states
            .iter()
            .zip(&self.controls)
            .fold(T::zero(), |a, (x, u)| a + cost.running(x, u))
            + cost.terminal(self.final_state())
    }

    /// Largest absolute control entry over the whole trajectory.
    pub fn max_abs_control(&self) -> T {
        self.controls
            .iter()
            .map(|u| u.amax())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// Number of open-loop decision variables, `horizon × control_dim`.
    pub fn decision_variables(&self) -> usize {
        self.controls.iter().map(|u| u.len()).sum()
    }
}

/// Forward simulation from `initial` under `controls` (clipped to the plant's bounds).
pub fn rollout<T: Scalar, D: Dynamics<T> + ?Sized>(
    dynamics: &D,
    initial: &DVector<T>,
    controls: &[DVector<T>],
    cost: &CostParams<T>,
) -> Result<Trajectory<T>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut applied = Vec::with_capacity(controls.len());
    states.push(initial.clone());
    for (t, u) in controls.iter().enumerate() {
        let mut u = u.clone();
        dynamics.clip(&mut u);
        let next = dynamics
            .step_at(t, &states[t], &u)
            .map_err(|e| e.at_step(t))?;
        states.push(next);
        applied.push(u);
    }
    Trajectory::from_parts(states, applied, cost)
}

/// Where ILQR gets its per-step Jacobians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum JacobianSource {
    /// Model-free central-difference least squares.
    LlsCd {
        sigma: f64,
        /// Defaults to `2 (n_Φ + n_U)` when absent.
        n_samples: Option<usize>,
        #[serde(default)]
        gram: GramMode,
    },
    /// Exact derivatives supplied by the model.
    Analytic,
}

impl Default for JacobianSource {
    fn default() -> Self {
        JacobianSource::LlsCd {
            sigma: DEFAULT_SIGMA,
            n_samples: None,
            gram: GramMode::Exact,
        }
    }
}

impl JacobianSource {
    pub fn lls_config(&self, state_dim: usize, control_dim: usize, seed: u64) -> Option<LlsCdConfig> {
        match *self {
            JacobianSource::LlsCd {
                sigma,
                n_samples,
                gram,
            } => Some(LlsCdConfig {
                sigma,
                n_samples: n_samples.unwrap_or(2 * (state_dim + control_dim)),
                seed,
                gram,
            }),
            JacobianSource::Analytic => None,
        }
    }
}

/// Linearizes `dynamics` along `traj`; step `t` uses seed `derive(seed, 0, t)`.
pub fn linearize<T: Scalar, D: Dynamics<T> + ?Sized>(
    traj: &Trajectory<T>,
    dynamics: &D,
    source: &JacobianSource,
    seed: u64,
) -> Result<LtvModel<T>> {
    let nx = dynamics.state_dim();
    let nu = dynamics.control_dim();
    let pairs: Vec<(DMatrix<T>, DMatrix<T>)> = (0..traj.horizon())
        .into_par_iter()
        .map(|t| {
            let (x, u) = (&traj.states[t], &traj.controls[t]);
            match source.lls_config(nx, nu, seed::derive(seed, 0, t as u64)) {
                Some(cfg) => estimate_jacobians(|x, u| dynamics.step_at(t, x, u), x, u, &cfg)
                    .map_err(|e| e.at_step(t)),
                None => dynamics.jacobians_at(t, x, u).unwrap_or_else(|| {
                    Err(Error::Config(
                        "analytic Jacobians requested but the model does not provide them".into(),
                    ))
                }),
            }
        })
        .collect::<Result<_>>()?;
    let (a, b) = pairs.into_iter().unzip();
    LtvModel::new(a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlqrOptions {
    pub max_iters: usize,
    /// Stop once an accepted pass improves the cost by less than this fraction.
    pub eps_converge: f64,
    pub mu_init: f64,
    pub mu_factor: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub alpha_schedule: Vec<f64>,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for IlqrOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            eps_converge: 1e-3,
            mu_init: 1e-6,
            mu_factor: 10.0,
            mu_min: 1e-9,
            mu_max: 1e10,
            alpha_schedule: (0..=10).map(|k| 0.5f64.powi(k)).collect(),
            horizon: 10,
            seed: 0,
        }
    }
}

impl IlqrOptions {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_schedule.first() != Some(&1.0) {
            return Err(Error::Config("alpha schedule must start at 1.0".into()));
        }
        if self
            .alpha_schedule
            .windows(2)
            .any(|w| !(w[1] < w[0] && w[1] > 0.0))
        {
            return Err(Error::Config(
                "alpha schedule must be strictly decreasing within (0, 1]".into(),
            ));
        }
        if !(self.mu_factor > 1.0) {
            return Err(Error::Config(format!("mu_factor must be > 1, got {}", self.mu_factor)));
        }
        if !(self.mu_init >= 0.0 && self.mu_min >= 0.0 && self.mu_max > self.mu_init) {
            return Err(Error::Config("invalid regularization schedule".into()));
        }
        if !(self.eps_converge > 0.0) {
            return Err(Error::Config("eps_converge must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of [`backward_pass`].
#[derive(Debug, Clone)]
pub struct Gains<T> {
    pub feedforward: Vec<DVector<T>>,
    pub feedback: Vec<DMatrix<T>>,
    pub success: bool,
    /// `Σ kᵀQ_u` and `Σ kᵀQ_uu k`; the model predicts `ΔJ(α) = α d1 + ½ α² d2`.
    pub expected: (T, T),
}

impl<T: Scalar> Gains<T> {
    /// Predicted cost decrease for step size `alpha` (positive means improvement).
    pub fn predicted_reduction(&self, alpha: T) -> T {
        -(alpha * self.expected.0 + T::of(0.5) * alpha * alpha * self.expected.1)
    }

    fn failed(horizon: usize) -> Self {
        Self {
            feedforward: Vec::with_capacity(horizon),
            feedback: Vec::new(),
            success: false,
            expected: (T::zero(), T::zero()),
        }
    }
}

fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let half = T::of(0.5);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = half * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Regularized value-function recursion; `Q_uu + μI` must be positive definite at every step.
pub fn backward_pass<T: Scalar>(
    traj: &Trajectory<T>,
    lin: &LtvModel<T>,
    cost: &CostParams<T>,
    mu: T,
) -> Gains<T> {
    let horizon = traj.horizon();
    assert_eq!(lin.horizon(), horizon, "linearization horizon mismatch");
    let nx = traj.states[0].len();
    let mut v_x = (traj.final_state() - cost.goal()) * cost.q_term();
    let mut v_xx = DMatrix::<T>::identity(nx, nx) * cost.q_term();
    let mut feedforward = vec![DVector::zeros(0); horizon];
    let mut feedback = vec![DMatrix::zeros(0, 0); horizon];
    let (mut d1, mut d2) = (T::zero(), T::zero());

    for t in (0..horizon).rev() {
        let a = &lin.a()[t];
        let b = &lin.b()[t];
        let x = &traj.states[t];
        let u = &traj.controls[t];
        let nu = u.len();

        let l_x = (x - cost.goal()) * cost.q_run();
        let l_u = u * cost.r_ctrl();
        let bt_vxx = b.transpose() * &v_xx;
        let q_x = l_x + a.transpose() * &v_x;
        let q_u = l_u + b.transpose() * &v_x;
        let mut q_xx = a.transpose() * &v_xx * a;
        for i in 0..nx {
            q_xx[(i, i)] += cost.q_run();
        }
        let mut q_uu = &bt_vxx * b;
        for i in 0..nu {
            q_uu[(i, i)] += cost.r_ctrl();
        }
        symmetrize(&mut q_uu);
        let q_ux = &bt_vxx * a;

        let mut q_uu_reg = q_uu.clone();
        for i in 0..nu {
            q_uu_reg[(i, i)] += mu;
        }
        let Some(chol) = Cholesky::new(q_uu_reg) else {
            return Gains::failed(horizon);
        };
        let k = -chol.solve(&q_u);
        let big_k = -chol.solve(&q_ux);

        d1 += k.dot(&q_u);
        d2 += k.dot(&(&q_uu * &k));

        let kt_quu = big_k.transpose() * &q_uu;
        v_x = &q_x + &kt_quu * &k + big_k.transpose() * &q_u + q_ux.transpose() * &k;
        v_xx = q_xx + &kt_quu * &big_k + big_k.transpose() * &q_ux + q_ux.transpose() * &big_k;
        symmetrize(&mut v_xx);

        feedforward[t] = k;
        feedback[t] = big_k;
    }
    Gains {
        feedforward,
        feedback,
        success: true,
        expected: (d1, d2),
    }
}

/// Simulates `U_t = Ū_t + α k_t + K_t (Φ_t − Φ̄_t)`, clipped to the bounds.
///
/// Returns the candidate and whether it strictly lowers the cost. A blowup
/// yields the unchanged nominal and `false`.
pub fn forward_pass<T: Scalar, D: Dynamics<T> + ?Sized>(
    traj: &Trajectory<T>,
    gains: &Gains<T>,
    alpha: T,
    dynamics: &D,
    cost: &CostParams<T>,
) -> (Trajectory<T>, bool) {
    let horizon = traj.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(traj.states[0].clone());
    for t in 0..horizon {
        let dx = &states[t] - &traj.states[t];
        let mut u = &traj.controls[t] + &gains.feedforward[t] * alpha + &gains.feedback[t] * dx;
        dynamics.clip(&mut u);
        match dynamics.step_at(t, &states[t], &u) {
            Ok(next) => states.push(next),
            Err(_) => return (traj.clone(), false),
        }
        controls.push(u);
    }
    match Trajectory::from_parts(states, controls, cost) {
        Ok(candidate) if candidate.total_cost.finite() => {
            let accepted = candidate.total_cost < traj.total_cost;
            (candidate, accepted)
        }
        _ => (traj.clone(), false),
    }
}

/// One entry of the optimizer's convergence history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub mu: f64,
    /// Step size of the accepted pass; 0 when nothing was accepted.
    pub alpha: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult<T> {
    pub trajectory: Trajectory<T>,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
}

impl<T> OptimizeResult<T> {
    /// Costs of the initial guess and every accepted iteration.
    pub fn cost_curve(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.accepted || r.iteration == 0)
            .map(|r| r.cost)
            .collect()
    }
}

/// Iterates backward/forward passes from `initial_controls` (zeros when `None`).
pub fn optimize_open_loop<T: Scalar, D: Dynamics<T> + ?Sized>(
    initial: &DVector<T>,
    dynamics: &D,
    cost: &CostParams<T>,
    opts: &IlqrOptions,
    source: &JacobianSource,
    initial_controls: Option<Vec<DVector<T>>>,
) -> Result<OptimizeResult<T>> {
    opts.validate()?;
    let controls = match initial_controls {
        Some(c) => {
            if c.len() != opts.horizon {
                return Err(Error::Config(format!(
                    "initial control guess has {} steps, horizon is {}",
                    c.len(),
                    opts.horizon
                )));
            }
            c
        }
        None => vec![DVector::zeros(dynamics.control_dim()); opts.horizon],
    };
    let mut traj = rollout(dynamics, initial, &controls, cost)?;
    let mut mu = opts.mu_init;
    let mut history = vec![IterationRecord {
        iteration: 0,
        cost: traj.total_cost.as_f64(),
        mu,
        alpha: 0.0,
        accepted: false,
    }];
    if opts.horizon == 0 {
        return Ok(OptimizeResult {
            trajectory: traj,
            history,
            converged: true,
        });
    }

    let mut lin: Option<LtvModel<T>> = None;
    let mut any_accepted = false;
    let mut converged = false;
    for iteration in 1..=opts.max_iters {
        if lin.is_none() {
            lin = Some(linearize(&traj, dynamics, source, seed::derive(opts.seed, iteration as u64, 0))?);
        }
        let model = lin.as_ref().expect("linearization present");
        let gains = backward_pass(&traj, model, cost, T::of(mu));
        if !gains.success {
            mu = (mu * opts.mu_factor).max(opts.mu_min);
            history.push(IterationRecord {
                iteration,
                cost: traj.total_cost.as_f64(),
                mu,
                alpha: 0.0,
                accepted: false,
            });
            if mu > opts.mu_max {
                break;
            }
            continue;
        }
        let scale = traj.total_cost.abs().as_f64().max(f64::MIN_POSITIVE);
        if gains.predicted_reduction(T::one()).as_f64() <= 1e-12 * scale {
            converged = true;
            break;
        }

        let mut accepted = None;
        for &alpha in &opts.alpha_schedule {
            let (candidate, ok) = forward_pass(&traj, &gains, T::of(alpha), dynamics, cost);
            if ok {
                accepted = Some((candidate, alpha));
                break;
            }
        }
        match accepted {
            Some((candidate, alpha)) => {
                let old = traj.total_cost.as_f64();
                let new = candidate.total_cost.as_f64();
                traj = candidate;
                lin = None;
                any_accepted = true;
                mu = (mu / 2.0).max(opts.mu_min);
                history.push(IterationRecord {
                    iteration,
                    cost: new,
                    mu,
                    alpha,
                    accepted: true,
                });
                if (old - new) / old.abs().max(f64::MIN_POSITIVE) < opts.eps_converge {
                    converged = true;
                    break;
                }
            }
            None => {
                mu = (mu * opts.mu_factor).max(opts.mu_min);
                history.push(IterationRecord {
                    iteration,
                    cost: traj.total_cost.as_f64(),
                    mu,
                    alpha: 0.0,
                    accepted: false,
                });
                if mu > opts.mu_max {
                    converged = any_accepted;
                    break;
                }
            }
        }
    }
    if !any_accepted && !converged {
        return Err(Error::Stalled {
            history: history.iter().map(|r| r.cost).collect(),
        });
    }
    Ok(OptimizeResult {
        trajectory: traj,
        history,
        converged,
    })
}
