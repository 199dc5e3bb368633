//! Control strategies built on the optimizer: D2C design, open- and
//! closed-loop replay, shrinking-horizon MPC and the time-invariant baseline.
//!
//! Noisy rollouts apply `clip(U_t + ε w_t)` to the true nonlinear plant, where
//! `w_t` is standard normal per channel and `ε = level × reference`. Costs are
//! charged on the commanded control `U_t`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, ModelParams};
use crate::error::{Error, Result};
use crate::grid::{ControlField, PhaseField};
use crate::ilqr::{
    optimize_open_loop, CostParams, IlqrOptions, IterationRecord, JacobianSource, Trajectory,
};
use crate::lqr::{riccati, FeedbackPolicy, DEFAULT_MAX_STATES};
use crate::scalar::Scalar;
use crate::seed;
use crate::sysid::{identify_ltv, LtvModel, SysIdConfig};

/// Additive Gaussian noise on the control channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation as a fraction of the reference control magnitude.
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(level: f64, seed: u64) -> Result<Self> {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::Config(format!("noise level must be >= 0, got {level}")));
        }
        Ok(Self { level, seed })
    }

    pub fn none() -> Self {
        Self { level: 0.0, seed: 0 }
    }
}

struct NoiseStream {
    rng: ChaCha8Rng,
    std: f64,
}

impl NoiseStream {
    fn new(spec: &NoiseSpec, reference: f64) -> Self {
        Self {
            rng: seed::rng(spec.seed),
            std: spec.level * reference,
        }
    }

    /// Adds one draw per channel; a zero level leaves `u` untouched.
    fn perturb<T: Scalar>(&mut self, u: &DVector<T>) -> DVector<T> {
        if self.std == 0.0 {
            return u.clone();
        }
        u.map(|v| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            v + T::of(self.std * z)
        })
    }
}

/// Shifts the time index of a plant, so a re-plan at step `k` sees `t + k`.
struct Offset<'a, D: ?Sized> {
    inner: &'a D,
    offset: usize,
}

impl<T: Scalar, D: Dynamics<T> + ?Sized> Dynamics<T> for Offset<'_, D> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        self.inner.step_at(self.offset, x, u)
    }
    fn step_at(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        self.inner.step_at(t + self.offset, x, u)
    }
    fn jacobians_at(&self, t: usize, x: &DVector<T>, u: &DVector<T>) -> Option<Result<(DMatrix<T>, DMatrix<T>)>> {
        self.inner.jacobians_at(t + self.offset, x, u)
    }
    fn clip(&self, u: &mut DVector<T>) {
        self.inner.clip(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcOptions {
    /// ILQR iteration cap for each re-solve.
    pub inner_iters: usize,
    pub jacobians: JacobianSource,
}

impl Default for MpcOptions {
    fn default() -> Self {
        Self {
            inner_iters: 10,
            jacobians: JacobianSource::Analytic,
        }
    }
}

/// Everything needed to design and evaluate controllers for one scenario.
#[derive(Debug, Clone)]
pub struct Problem<T: Scalar> {
    pub params: ModelParams<T>,
    pub initial: PhaseField<T>,
    pub goal: PhaseField<T>,
    pub cost: CostParams<T>,
    pub ilqr: IlqrOptions,
    pub jacobians: JacobianSource,
    pub sysid: SysIdConfig,
    pub mpc: MpcOptions,
    /// Dense Riccati state-dimension cap.
    pub max_states: usize,
}

impl<T: Scalar> Problem<T> {
    /// Default weights `q_run = 1`, `r_ctrl = 1e-3`, `q_term = 100`, horizon 10.
    pub fn new(params: ModelParams<T>, initial: PhaseField<T>, goal: PhaseField<T>) -> Result<Self> {
        let grid = params.grid();
        for (what, f) in [("initial", &initial), ("goal", &goal)] {
            if f.spec().n() != grid.n() {
                return Err(Error::Config(format!(
                    "{what} field is {}×{0}, model grid is {}×{1}",
                    f.spec().n(),
                    grid.n()
                )));
            }
        }
        let cost = CostParams::for_goal(&goal, T::one(), T::of(1e-3), T::of(100.0))?;
        Ok(Self {
            params,
            initial,
            goal,
            cost,
            ilqr: IlqrOptions::default(),
            jacobians: JacobianSource::default(),
            sysid: SysIdConfig::default(),
            mpc: MpcOptions::default(),
            max_states: DEFAULT_MAX_STATES,
        })
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.ilqr.horizon
    }

    /// Open-loop decision variables: `horizon × 2n²`.
    pub fn decision_variables(&self) -> usize {
        self.horizon() * self.params.grid().control_len()
    }
}

/// Result of the three design steps.
#[derive(Debug, Clone)]
pub struct Design<T: Scalar> {
    pub policy: FeedbackPolicy<T>,
    pub model: LtvModel<T>,
    pub history: Vec<IterationRecord>,
    pub decision_variables: usize,
}

/// Open-loop ILQR, LTV identification about the plan, then Riccati feedback.
pub fn d2c_design<T: Scalar>(problem: &Problem<T>) -> Result<Design<T>> {
    if problem.horizon() == 0 {
        return Err(Error::Config("horizon is 0: nothing to design".into()));
    }
    let x0 = problem.initial.to_vector();
    let opt = optimize_open_loop(
        &x0,
        &problem.params,
        &problem.cost,
        &problem.ilqr,
        &problem.jacobians,
        None,
    )?;
    let model = identify_ltv(&opt.trajectory, &problem.params, &problem.sysid)?;
    let gains = riccati(&model, &problem.cost, problem.max_states)?.gains;
    let decision_variables = opt.trajectory.decision_variables();
    Ok(Design {
        policy: FeedbackPolicy::new(opt.trajectory, gains)?,
        model,
        history: opt.history,
        decision_variables,
    })
}

fn policy_rollout<T: Scalar, D: Dynamics<T> + ?Sized>(
    policy: &FeedbackPolicy<T>,
    dynamics: &D,
    cost: &CostParams<T>,
    noise: &NoiseSpec,
    reference: f64,
    feedback: bool,
) -> Result<Trajectory<T>> {
    let horizon = policy.horizon();
    let mut stream = NoiseStream::new(noise, reference);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(policy.nominal.states[0].clone());
    for t in 0..horizon {
        let mut u = if feedback {
            policy.control(t, &states[t])
        } else {
            policy.nominal.controls[t].clone()
        };
        dynamics.clip(&mut u);
        let mut applied = stream.perturb(&u);
        dynamics.clip(&mut applied);
        let next = dynamics.step_at(t, &states[t], &applied).map_err(|e| e.at_step(t))?;
        states.push(next);
        controls.push(u);
    }
    Trajectory::from_parts(states, controls, cost)
}

/// `U_t = Ū*_t + K_t δΦ_t` under control noise. Noise std is `level × reference`.
pub fn closed_loop_rollout<T: Scalar, D: Dynamics<T> + ?Sized>(
    policy: &FeedbackPolicy<T>,
    dynamics: &D,
    cost: &CostParams<T>,
    noise: &NoiseSpec,
    reference: f64,
) -> Result<Trajectory<T>> {
    policy_rollout(policy, dynamics, cost, noise, reference, true)
}

/// Replays `Ū*` without feedback.
pub fn open_loop_rollout<T: Scalar, D: Dynamics<T> + ?Sized>(
    policy: &FeedbackPolicy<T>,
    dynamics: &D,
    cost: &CostParams<T>,
    noise: &NoiseSpec,
    reference: f64,
) -> Result<Trajectory<T>> {
    policy_rollout(policy, dynamics, cost, noise, reference, false)
}

/// Shrinking-horizon MPC: re-plan from the realized state, apply the first
/// control, repeat. Each re-solve is warm-started from the previous plan's
/// tail (or `warm_start` for the first one).
#[allow(clippy::too_many_arguments)]
pub fn mpc_rollout<T: Scalar, D: Dynamics<T> + ?Sized>(
    initial: &DVector<T>,
    dynamics: &D,
    cost: &CostParams<T>,
    opts: &IlqrOptions,
    mpc: &MpcOptions,
    warm_start: Option<&[DVector<T>]>,
    noise: &NoiseSpec,
    reference: f64,
) -> Result<Trajectory<T>> {
    let horizon = opts.horizon;
    let mut stream = NoiseStream::new(noise, reference);
    let mut states = vec![initial.clone()];
    let mut controls = Vec::with_capacity(horizon);
    let mut plan: Vec<DVector<T>> = match warm_start {
        Some(w) if w.len() == horizon => w.to_vec(),
        _ => vec![DVector::zeros(dynamics.control_dim()); horizon],
    };
    for k in 0..horizon {
        let remaining = horizon - k;
        let shifted = Offset {
            inner: dynamics,
            offset: k,
        };
        let inner_opts = IlqrOptions {
            horizon: remaining,
            max_iters: mpc.inner_iters,
            seed: seed::derive(opts.seed, 2, k as u64),
            ..opts.clone()
        };
        let solved = optimize_open_loop(&states[k], &shifted, cost, &inner_opts, &mpc.jacobians, Some(plan.clone()));
        plan = match solved {
            Ok(r) => r.trajectory.controls,
            // no improving pass: the warm start is kept as the plan
            Err(Error::Stalled { .. }) => plan,
            Err(e) => return Err(Error::Replan { step: k, inner: Box::new(e) }),
        };
        let mut u = plan[0].clone();
        dynamics.clip(&mut u);
        let mut applied = stream.perturb(&u);
        dynamics.clip(&mut applied);
        let next = dynamics.step_at(k, &states[k], &applied).map_err(|e| e.at_step(k))?;
        states.push(next);
        controls.push(u);
        plan.remove(0);
    }
    Trajectory::from_parts(states, controls, cost)
}

/// Time-invariant control that makes the goal a stationary point of the
/// local reaction term: `T̄ = −8φ⁴/(1+4φ²)`, `h̄ = −4φ³/(1+4φ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineControl<T: Scalar> {
    pub t_bar: Vec<T>,
    pub h_bar: Vec<T>,
    field: ControlField<T>,
}

impl<T: Scalar> BaselineControl<T> {
    pub fn control_field(&self) -> &ControlField<T> {
        &self.field
    }

    pub fn to_vector(&self) -> DVector<T> {
        self.field.to_vector()
    }

    /// Largest `|4φ³ + 2φT̄ + h̄|` over the cells of `goal`.
    pub fn residual(&self, goal: &PhaseField<T>) -> T {
        let four = T::of(4.0);
        let two = T::of(2.0);
        goal.values()
            .iter()
            .zip(self.t_bar.iter().zip(&self.h_bar))
            .map(|(&p, (&t, &h))| (four * p * p * p + two * p * t + h).abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }
}

pub fn baseline_control<T: Scalar>(goal: &PhaseField<T>) -> BaselineControl<T> {
    let one = T::one();
    let four = T::of(4.0);
    let (mut t_bar, mut h_bar) = (Vec::with_capacity(goal.values().len()), Vec::with_capacity(goal.values().len()));
    for &p in goal.values() {
        let p2 = p * p;
        let den = one + four * p2;
        t_bar.push(-T::of(8.0) * p2 * p2 / den);
        h_bar.push(-four * p2 * p / den);
    }
    let field = ControlField::new(goal.spec(), t_bar.clone(), h_bar.clone())
        .expect("finite goal gives finite baseline control");
    BaselineControl { t_bar, h_bar, field }
}

/// Applies the baseline control for `steps` steps through the full model.
pub fn baseline_rollout<T: Scalar>(
    initial: &PhaseField<T>,
    goal: &PhaseField<T>,
    params: &ModelParams<T>,
    cost: &CostParams<T>,
    steps: usize,
    noise: &NoiseSpec,
    reference: f64,
) -> Result<Trajectory<T>> {
    let mut u = baseline_control(goal).to_vector();
    params.clip(&mut u);
    let mut stream = NoiseStream::new(noise, reference);
    let mut states = vec![initial.to_vector()];
    for t in 0..steps {
        let mut applied = stream.perturb(&u);
        params.clip(&mut applied);
        let next = params.step(&states[t], &applied).map_err(|e| e.at_step(t))?;
        states.push(next);
    }
    Trajectory::from_parts(states, vec![u; steps], cost)
}

/// Per-cell mean squared distance between the final state and `goal`.
pub fn terminal_mse<T: Scalar>(traj: &Trajectory<T>, goal: &DVector<T>) -> f64 {
    (traj.final_state() - goal).norm_squared().as_f64() / goal.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlBounds, Pde, TimeStep};
    use crate::grid::{make_goal, GoalKind, GridSpec};
    use crate::ilqr::rollout;

    fn small_problem(n: usize, bands: usize) -> Problem<f64> {
        let grid = GridSpec::new(n, 1.0).unwrap();
        let params = ModelParams::new(
            Pde::AllenCahn,
            grid,
            1.0,
            0.01,
            TimeStep::Auto,
            ControlBounds::new(5.0, 5.0).unwrap(),
        )
        .unwrap();
        let goal = make_goal(grid, GoalKind::Banded, bands).unwrap().into_field();
        let mut p = Problem::new(params, PhaseField::zeros(grid), goal).unwrap();
        p.jacobians = JacobianSource::Analytic;
        p.sysid.mode = crate::sysid::SysIdMode::AnalyticOracle;
        p
    }

    #[test]
    fn baseline_formulas() {
        let grid = GridSpec::new(3, 1.0).unwrap();
        let goal = PhaseField::new(grid, vec![0.0f64, 1.0, -1.0, 0.5, -0.3, 0.9, 1.0, 1.0, -1.0]).unwrap();
        let b = baseline_control(&goal);
        assert_eq!((b.t_bar[0], b.h_bar[0]), (0.0, 0.0));
        assert!((b.t_bar[1] + 1.6).abs() < 1e-15 && (b.h_bar[1] + 0.8).abs() < 1e-15);
        assert!((b.t_bar[2] + 1.6).abs() < 1e-15 && (b.h_bar[2] - 0.8).abs() < 1e-15);
        assert!(b.residual(&goal) < 1e-12);
    }

    #[test]
    fn zero_horizon_design_is_error() {
        let mut p = small_problem(4, 2);
        p.ilqr.horizon = 0;
        assert!(matches!(d2c_design(&p), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_rollouts_reproduce_nominal() {
        let p = small_problem(4, 2);
        let d = d2c_design(&p).unwrap();
        assert_eq!(d.decision_variables, 10 * 32);
        let nominal = &d.policy.nominal;
        let reference = d.policy.max_nominal_control().as_f64();
        let none = NoiseSpec::new(0.0, 99).unwrap();
        let cl = closed_loop_rollout(&d.policy, &p.params, &p.cost, &none, reference).unwrap();
        let ol = open_loop_rollout(&d.policy, &p.params, &p.cost, &none, reference).unwrap();
        assert_eq!(cl.total_cost, nominal.total_cost);
        assert_eq!(ol.total_cost, nominal.total_cost);
        assert_eq!(cl.states, nominal.states);
        let zeroed = FeedbackPolicy::open_loop(nominal.clone());
        let noisy = NoiseSpec::new(0.3, 5).unwrap();
        assert_eq!(
            closed_loop_rollout(&zeroed, &p.params, &p.cost, &noisy, reference).unwrap(),
            open_loop_rollout(&d.policy, &p.params, &p.cost, &noisy, reference).unwrap()
        );
    }

    #[test]
    fn noiseless_mpc_matches_one_shot() {
        let p = small_problem(4, 2);
        let d = d2c_design(&p).unwrap();
        let one_shot = d.policy.nominal.total_cost;
        let m = mpc_rollout(
            &p.initial.to_vector(),
            &p.params,
            &p.cost,
            &p.ilqr,
            &p.mpc,
            Some(&d.policy.nominal.controls),
            &NoiseSpec::none(),
            1.0,
        )
        .unwrap();
        let rel = (m.total_cost - one_shot).abs() / one_shot;
        assert!(rel < 10.0 * p.ilqr.eps_converge, "{rel}");
    }

    #[test]
    fn mpc_horizon_one() {
        let mut p = small_problem(4, 2);
        p.ilqr.horizon = 1;
        p.mpc.inner_iters = p.ilqr.max_iters;
        let m = mpc_rollout(&p.initial.to_vector(), &p.params, &p.cost, &p.ilqr, &p.mpc, None, &NoiseSpec::none(), 1.0)
            .unwrap();
        assert_eq!(m.horizon(), 1);
        let direct = optimize_open_loop(&p.initial.to_vector(), &p.params, &p.cost, &p.ilqr, &p.mpc.jacobians, None)
            .unwrap();
        assert_eq!(m.controls[0], direct.trajectory.controls[0]);
    }

    #[test]
    fn open_loop_two_by_two_single_step() {
        // γ = 0 so cells decouple; φ₀ = 0, U = (T, h) = (0, 1) on every cell:
        // φ₁ = −MΔt·h = −dt; running ½·q·4 + ½·r·4, terminal ½·q_T·4·(1 − dt)² towards goal −1.
        let grid = GridSpec::new(2, 1.0).unwrap();
        let params = ModelParams::new(
            Pde::AllenCahn,
            grid,
            1.0,
            0.0,
            TimeStep::Fixed(0.01),
            ControlBounds::new(5.0, 5.0).unwrap(),
        )
        .unwrap();
        let goal = DVector::from_element(4, -1.0);
        let cost = CostParams::new(goal, 1.0, 0.5, 10.0).unwrap();
        let u = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let nominal = rollout(&params, &DVector::zeros(4), &[u], &cost).unwrap();
        let policy = FeedbackPolicy::open_loop(nominal);
        let t = open_loop_rollout(&policy, &params, &cost, &NoiseSpec::none(), 1.0).unwrap();
        let expected = 0.5 * 4.0 + 0.5 * 0.5 * 4.0 + 0.5 * 10.0 * 4.0 * (1.0f64 - 0.01).powi(2);
        assert!((t.total_cost - expected).abs() < 1e-12, "{} vs {expected}", t.total_cost);
    }

    #[test]
    fn baseline_converges_from_near_goal_without_diffusion() {
        let grid = GridSpec::new(6, 1.0).unwrap();
        let params = ModelParams::new(
            Pde::AllenCahn,
            grid,
            1.0,
            0.0,
            TimeStep::Auto,
            ControlBounds::new(5.0, 5.0).unwrap(),
        )
        .unwrap();
        let goal = make_goal::<f64>(grid, GoalKind::Checkerboard, 2).unwrap().into_field();
        let initial = PhaseField::from_fn(grid, |i, j| goal.get(i, j) * (0.85 + 0.02 * ((i + j) % 3) as f64)).unwrap();
        let cost = CostParams::for_goal(&goal, 1.0, 1e-3, 100.0).unwrap();
        let t = baseline_rollout(&initial, &goal, &params, &cost, 400, &NoiseSpec::none(), 1.0).unwrap();
        assert!(terminal_mse(&t, &goal.to_vector()) < 1e-4);
    }

    #[test]
    fn common_random_numbers_across_seeds() {
        let p = small_problem(4, 2);
        let d = d2c_design(&p).unwrap();
        let n1 = NoiseSpec::new(0.2, 1).unwrap();
        let a = open_loop_rollout(&d.policy, &p.params, &p.cost, &n1, 1.0).unwrap();
        let b = open_loop_rollout(&d.policy, &p.params, &p.cost, &n1, 1.0).unwrap();
        assert_eq!(a, b);
        let c = open_loop_rollout(&d.policy, &p.params, &p.cost, &NoiseSpec::new(0.2, 2).unwrap(), 1.0).unwrap();
        assert_ne!(a.total_cost, c.total_cost);
    }
}
