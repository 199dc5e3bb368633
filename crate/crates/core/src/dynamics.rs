//! Explicit finite-difference steppers for the controlled Allen-Cahn and
//! Cahn-Hilliard equations on a periodic grid.
//!
//! With the energy density `F(φ; T, h) = φ⁴ + Tφ² + hφ` and the five-point
//! Laplacian `Lφ`, one forward-Euler step reads
//!
//! ```text
//! Allen-Cahn:     φ' = φ − MΔt (4φ³ + 2Tφ + h − γ Lφ)
//! Cahn-Hilliard:  μ  = −(4φ³ + 2Tφ + h − γ Lφ),   φ' = φ − MΔt Lμ
//! ```
//!
//! Both maps are affine in the control, `Φ' = f(Φ) + g(Φ) U`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ControlField, GridSpec, PhaseField};
use crate::scalar::{clamp, Scalar};

/// Fraction of the stability bound used when the time step is `auto`.
pub const AUTO_DT_FRACTION: f64 = 0.8;
/// Largest `|φ|` the stability margin is sized for.
pub const STABILITY_PHI_MAX: f64 = 2.0;
/// Biharmonic safety factor in the Cahn-Hilliard guard.
pub const CH_STABILITY_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pde {
    AllenCahn,
    CahnHilliard,
}

impl std::str::FromStr for Pde {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "allen-cahn" | "ac" => Ok(Pde::AllenCahn),
            "cahn-hilliard" | "ch" => Ok(Pde::CahnHilliard),
            other => Err(Error::Config(format!(
                "unknown pde '{other}' (expected allen-cahn or cahn-hilliard)"
            ))),
        }
    }
}

impl std::fmt::Display for Pde {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pde::AllenCahn => "allen-cahn",
            Pde::CahnHilliard => "cahn-hilliard",
        })
    }
}

/// Time integrator. Forward Euler is the literal scheme; Heun is opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    ForwardEuler,
    Heun,
}

/// Symmetric box bounds on the two control channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBounds<T> {
    t_max: T,
    h_max: T,
}

impl<T: Scalar> ControlBounds<T> {
    pub fn new(t_max: T, h_max: T) -> Result<Self> {
        if !(t_max.finite() && t_max > T::zero() && h_max.finite() && h_max > T::zero()) {
            return Err(Error::Config(format!(
                "control bounds must be positive, got t_max={t_max}, h_max={h_max}"
            )));
        }
        Ok(Self { t_max, h_max })
    }

    #[inline]
    pub fn t_max(&self) -> T {
        self.t_max
    }

    #[inline]
    pub fn h_max(&self) -> T {
        self.h_max
    }

    /// Clips an interleaved `[T, h, T, h, ...]` control vector in place.
    pub fn clip(&self, u: &mut [T]) {
        for pair in u.chunks_exact_mut(2) {
            pair[0] = clamp(pair[0], -self.t_max, self.t_max);
            pair[1] = clamp(pair[1], -self.h_max, self.h_max);
        }
    }

    pub fn contains(&self, u: &[T]) -> bool {
        u.chunks_exact(2)
            .all(|p| p[0].abs() <= self.t_max && p[1].abs() <= self.h_max)
    }
}

/// Time-step choice: resolved from the stability guard or fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep<T> {
    Auto,
    Fixed(T),
}

/// Physical and numerical parameters of one phase-field model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pde: Pde,
    mobility: T,
    gamma: T,
    dt: T,
    grid: GridSpec,
    bounds: ControlBounds<T>,
    integrator: Integrator,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(
        pde: Pde,
        grid: GridSpec,
        mobility: T,
        gamma: T,
        dt: TimeStep<T>,
        bounds: ControlBounds<T>,
    ) -> Result<Self> {
        if !(mobility.finite() && mobility > T::zero()) {
            return Err(Error::Config(format!("mobility must be > 0, got {mobility}")));
        }
        if !(gamma.finite() && gamma >= T::zero()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
        }
        let dt_max = stability_dt_limit(pde, grid, mobility, gamma, &bounds);
        let dt = match dt {
            TimeStep::Auto => dt_max * T::of(AUTO_DT_FRACTION),
            TimeStep::Fixed(dt) => {
                if !(dt.finite() && dt > T::zero()) {
                    return Err(Error::Config(format!("dt must be > 0, got {dt}")));
                }
                if dt > dt_max {
                    return Err(Error::Config(format!(
                        "dt={dt} violates the {pde} explicit stability guard (dt <= {dt_max} for M={mobility}, gamma={gamma}, dx={}, t_max={})",
                        grid.dx(),
                        bounds.t_max()
                    )));
                }
                dt
            }
        };
        Ok(Self {
            pde,
            mobility,
            gamma,
            dt,
            grid,
            bounds,
            integrator: Integrator::ForwardEuler,
        })
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    #[inline]
    pub fn pde(&self) -> Pde {
        self.pde
    }
    #[inline]
    pub fn mobility(&self) -> T {
        self.mobility
    }
    #[inline]
    pub fn gamma(&self) -> T {
        self.gamma
    }
    #[inline]
    pub fn dt(&self) -> T {
        self.dt
    }
    #[inline]
    pub fn grid(&self) -> GridSpec {
        self.grid
    }
    #[inline]
    pub fn bounds(&self) -> &ControlBounds<T> {
        &self.bounds
    }
    #[inline]
    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    /// Largest stable time step for these parameters.
    pub fn dt_limit(&self) -> T {
        stability_dt_limit(self.pde, self.grid, self.mobility, self.gamma, &self.bounds)
    }

    fn inv_dx2(&self) -> T {
        T::one() / T::of(self.grid.dx() * self.grid.dx())
    }
}

/// Largest `Δt` satisfying the explicit stability guard.
///
/// Allen-Cahn: `MΔt (4γ/Δx² + 12φ_max² + 2 t_max) ≤ 1`.
/// Cahn-Hilliard: `MΔt (8/Δx²)(12φ_max² + 2 t_max) + MΔt γ (16/Δx⁴)·4 ≤ 1`.
pub fn stability_dt_limit<T: Scalar>(
    pde: Pde,
    grid: GridSpec,
    mobility: T,
    gamma: T,
    bounds: &ControlBounds<T>,
) -> T {
    let inv_dx2 = T::one() / T::of(grid.dx() * grid.dx());
    let stiffness = T::of(12.0 * STABILITY_PHI_MAX * STABILITY_PHI_MAX) + T::of(2.0) * bounds.t_max();
    let rate = match pde {
        Pde::AllenCahn => T::of(4.0) * gamma * inv_dx2 + stiffness,
        Pde::CahnHilliard => {
            T::of(8.0) * inv_dx2 * stiffness
                + gamma * T::of(16.0) * inv_dx2 * inv_dx2 * T::of(CH_STABILITY_FACTOR)
        }
    };
    T::one() / (mobility * rate)
}

/// `F(φ; T, h) = φ⁴ + Tφ² + hφ`.
#[inline]
pub fn energy_density<T: Scalar>(phi: T, t: T, h: T) -> T {
    let p2 = phi * phi;
    p2 * p2 + t * p2 + h * phi
}

#[inline]
fn neighbor_sum<T: Scalar>(grid: &GridSpec, v: &[T], i: usize, j: usize) -> T {
    let [a, b, c, d] = grid.neighbors(i, j);
    v[a] + v[b] + v[c] + v[d]
}

fn laplacian_into<T: Scalar>(grid: &GridSpec, v: &[T], inv_dx2: T, out: &mut [T]) {
    let n = grid.n();
    let four = T::of(4.0);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            out[k] = (neighbor_sum(grid, v, i, j) - four * v[k]) * inv_dx2;
        }
    }
}

/// Five-point periodic Laplacian.
pub fn laplacian<T: Scalar>(field: &PhaseField<T>) -> PhaseField<T> {
    let spec = field.spec();
    let mut out = vec![T::zero(); spec.cells()];
    laplacian_into(&spec, field.values(), T::of(1.0 / (spec.dx() * spec.dx())), &mut out);
    PhaseField::new(spec, out).expect("laplacian of a finite field is finite")
}

fn check_finite<T: Scalar>(grid: &GridSpec, v: &[T]) -> Result<()> {
    match v.iter().position(|x| !x.finite()) {
        Some(k) => {
            let (row, col) = grid.unflatten(k);
            Err(Error::Blowup {
                row,
                col,
                step: None,
            })
        }
        None => Ok(()),
    }
}

/// One forward-Euler step on flat buffers; `u` is interleaved `[T, h]`.
fn euler_flat<T: Scalar>(p: &ModelParams<T>, phi: &[T], u: &[T], out: &mut [T]) {
    let grid = p.grid;
    let n = grid.n();
    let inv_dx2 = p.inv_dx2();
    let m_dt = p.mobility * p.dt;
    let (two, four) = (T::of(2.0), T::of(4.0));
    match p.pde {
        Pde::AllenCahn => {
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    let f = phi[k];
                    let lap = (neighbor_sum(&grid, phi, i, j) - four * f) * inv_dx2;
                    let state_term = four * f * f * f - p.gamma * lap;
                    let control_term = two * f * u[2 * k] + u[2 * k + 1];
                    out[k] = f - m_dt * state_term - m_dt * control_term;
                }
            }
        }
        Pde::CahnHilliard => {
            let mut mu = vec![T::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    let f = phi[k];
                    let lap = (neighbor_sum(&grid, phi, i, j) - four * f) * inv_dx2;
                    mu[k] = -(four * f * f * f + two * u[2 * k] * f + u[2 * k + 1] - p.gamma * lap);
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let k = i * n + j;
                    let lap_mu = (neighbor_sum(&grid, &mu, i, j) - four * mu[k]) * inv_dx2;
                    out[k] = phi[k] - m_dt * lap_mu;
                }
            }
        }
    }
}

/// One step of the configured integrator on flat buffers.
pub fn step_flat<T: Scalar>(p: &ModelParams<T>, phi: &[T], u: &[T]) -> Result<Vec<T>> {
    debug_assert_eq!(phi.len(), p.grid.cells());
    debug_assert_eq!(u.len(), p.grid.control_len());
    let mut out = vec![T::zero(); phi.len()];
    euler_flat(p, phi, u, &mut out);
    if p.integrator == Integrator::Heun {
        check_finite(&p.grid, &out)?;
        let mut second = vec![T::zero(); phi.len()];
        euler_flat(p, &out, u, &mut second);
        let half = T::of(0.5);
        for (o, (&a, &b)) in out.iter_mut().zip(phi.iter().zip(&second)) {
            *o = half * (a + b);
        }
    }
    check_finite(&p.grid, &out)?;
    Ok(out)
}

fn check_shapes<T: Scalar>(
    state: &PhaseField<T>,
    control: &ControlField<T>,
    params: &ModelParams<T>,
) -> Result<()> {
    if state.spec() != params.grid || control.spec() != params.grid {
        return Err(Error::Config(format!(
            "shape mismatch: state {}x{}, control {}x{}, model {}x{}",
            state.spec().n(),
            state.spec().n(),
            control.spec().n(),
            control.spec().n(),
            params.grid.n(),
            params.grid.n()
        )));
    }
    Ok(())
}

fn step_with<T: Scalar>(
    pde: Pde,
    state: &PhaseField<T>,
    control: &ControlField<T>,
    params: &ModelParams<T>,
) -> Result<PhaseField<T>> {
    check_shapes(state, control, params)?;
    let mut p = params.clone();
    p.pde = pde;
    let out = step_flat(&p, state.values(), control.to_vector().as_slice())?;
    PhaseField::new(params.grid, out)
}

pub fn step_allen_cahn<T: Scalar>(
    state: &PhaseField<T>,
    control: &ControlField<T>,
    params: &ModelParams<T>,
) -> Result<PhaseField<T>> {
    step_with(Pde::AllenCahn, state, control, params)
}

pub fn step_cahn_hilliard<T: Scalar>(
    state: &PhaseField<T>,
    control: &ControlField<T>,
    params: &ModelParams<T>,
) -> Result<PhaseField<T>> {
    step_with(Pde::CahnHilliard, state, control, params)
}

/// Steps whichever equation `params` selects.
pub fn step<T: Scalar>(
    state: &PhaseField<T>,
    control: &ControlField<T>,
    params: &ModelParams<T>,
) -> Result<PhaseField<T>> {
    step_with(params.pde, state, control, params)
}

/// Weighted five-point stencil of row `k` of the Laplacian matrix.
fn stencil<T: Scalar>(grid: &GridSpec, k: usize, inv_dx2: T) -> [(usize, T); 5] {
    let (i, j) = grid.unflatten(k);
    let [a, b, c, d] = grid.neighbors(i, j);
    [
        (k, -T::of(4.0) * inv_dx2),
        (a, inv_dx2),
        (b, inv_dx2),
        (c, inv_dx2),
        (d, inv_dx2),
    ]
}

/// Dense discrete Laplacian matrix (`n² × n²`).
pub fn laplacian_matrix<T: Scalar>(grid: &GridSpec) -> DMatrix<T> {
    let cells = grid.cells();
    let inv_dx2 = T::of(1.0 / (grid.dx() * grid.dx()));
    let mut l = DMatrix::zeros(cells, cells);
    for r in 0..cells {
        for (c, w) in stencil(grid, r, inv_dx2) {
            l[(r, c)] += w;
        }
    }
    l
}

/// Control-gain matrix `g(Φ)` of the Euler map, `n² × 2n²`.
fn control_gain<T: Scalar>(p: &ModelParams<T>, phi: &[T]) -> DMatrix<T> {
    let grid = p.grid;
    let cells = grid.cells();
    let m_dt = p.mobility * p.dt;
    let two = T::of(2.0);
    let mut g = DMatrix::zeros(cells, 2 * cells);
    match p.pde {
        Pde::AllenCahn => {
            for k in 0..cells {
                g[(k, 2 * k)] = -m_dt * two * phi[k];
                g[(k, 2 * k + 1)] = -m_dt;
            }
        }
        Pde::CahnHilliard => {
            let inv_dx2 = p.inv_dx2();
            for r in 0..cells {
                for (c, w) in stencil(&grid, r, inv_dx2) {
                    g[(r, 2 * c)] += m_dt * w * two * phi[c];
                    g[(r, 2 * c + 1)] += m_dt * w;
                }
            }
        }
    }
    g
}

/// State Jacobian of the Euler map.
fn state_jacobian<T: Scalar>(p: &ModelParams<T>, phi: &[T], u: &[T]) -> DMatrix<T> {
    let grid = p.grid;
    let cells = grid.cells();
    let inv_dx2 = p.inv_dx2();
    let m_dt = p.mobility * p.dt;
    // local curvature 12φ² + 2T of the energy density
    let curv: Vec<T> = (0..cells)
        .map(|k| T::of(12.0) * phi[k] * phi[k] + T::of(2.0) * u[2 * k])
        .collect();
    let mut a = DMatrix::identity(cells, cells);
    match p.pde {
        Pde::AllenCahn => {
            // A = I − MΔt (diag(curv) − γ L)
            for r in 0..cells {
                a[(r, r)] -= m_dt * curv[r];
                for (c, w) in stencil(&grid, r, inv_dx2) {
                    a[(r, c)] += m_dt * p.gamma * w;
                }
            }
        }
        Pde::CahnHilliard => {
            // A = I + MΔt L (diag(curv) − γ L)
            for r in 0..cells {
                for (mid, w1) in stencil(&grid, r, inv_dx2) {
                    a[(r, mid)] += m_dt * w1 * curv[mid];
                    for (c, w2) in stencil(&grid, mid, inv_dx2) {
                        a[(r, c)] -= m_dt * p.gamma * w1 * w2;
                    }
                }
            }
        }
    }
    a
}

/// Drift `f(Φ)` and gain `g(Φ)` such that `step(Φ, U) = f(Φ) + g(Φ) U`.
///
/// Only the forward-Euler map is affine in the control; Heun is rejected.
pub fn split_affine<T: Scalar>(
    state: &PhaseField<T>,
    params: &ModelParams<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    if params.integrator != Integrator::ForwardEuler {
        return Err(Error::Config(
            "the Heun map is not affine in the control; split_affine needs forward Euler".into(),
        ));
    }
    let zero = vec![T::zero(); params.grid.control_len()];
    let drift = step_flat(params, state.values(), &zero)?;
    Ok((
        DVector::from_vec(drift),
        control_gain(params, state.values()),
    ))
}

/// Exact one-step Jacobians `(∂Φ'/∂Φ, ∂Φ'/∂U)` on flat vectors.
pub fn jacobians_flat<T: Scalar>(
    p: &ModelParams<T>,
    phi: &[T],
    u: &[T],
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let a = state_jacobian(p, phi, u);
    let b = control_gain(p, phi);
    match p.integrator {
        Integrator::ForwardEuler => Ok((a, b)),
        Integrator::Heun => {
            // H(φ) = ½(φ + E(E(φ))) with E the Euler map.
            let mut euler = p.clone();
            euler.integrator = Integrator::ForwardEuler;
            let mid = step_flat(&euler, phi, u)?;
            let a_mid = state_jacobian(p, &mid, u);
            let b_mid = control_gain(p, &mid);
            let half = T::of(0.5);
            let eye = DMatrix::<T>::identity(a.nrows(), a.ncols());
            let a_h = (&eye + &a_mid * &a) * half;
            let b_h = (&a_mid * &b + b_mid) * half;
            Ok((a_h, b_h))
        }
    }
}

pub fn analytic_jacobians<T: Scalar>(
    state: &PhaseField<T>,
    control: &ControlField<T>,
    params: &ModelParams<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    check_shapes(state, control, params)?;
    jacobians_flat(params, state.values(), control.to_vector().as_slice())
}

/// Discrete-time control-affine system on flat state/control vectors.
pub trait Dynamics<T: Scalar>: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// One noise-free step of the plant.
    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>>;

    /// Exact Jacobians when the model can provide them.
    fn jacobians(&self, _x: &DVector<T>, _u: &DVector<T>) -> Option<Result<(DMatrix<T>, DMatrix<T>)>> {
        None
    }

    /// Step at time index `t`; time-invariant plants ignore `t`.
    fn step_at(&self, _t: usize, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        self.step(x, u)
    }

    fn jacobians_at(
        &self,
        _t: usize,
        x: &DVector<T>,
        u: &DVector<T>,
    ) -> Option<Result<(DMatrix<T>, DMatrix<T>)>> {
        self.jacobians(x, u)
    }

    /// Projects a control onto the admissible set. Default: unconstrained.
    fn clip(&self, _u: &mut DVector<T>) {}
}

impl<T: Scalar> Dynamics<T> for ModelParams<T> {
    fn state_dim(&self) -> usize {
        self.grid.cells()
    }

    fn control_dim(&self) -> usize {
        self.grid.control_len()
    }

    fn step(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        step_flat(self, x.as_slice(), u.as_slice()).map(DVector::from_vec)
    }

    fn jacobians(&self, x: &DVector<T>, u: &DVector<T>) -> Option<Result<(DMatrix<T>, DMatrix<T>)>> {
        Some(jacobians_flat(self, x.as_slice(), u.as_slice()))
    }

    fn clip(&self, u: &mut DVector<T>) {
        self.bounds.clip(u.as_mut_slice());
    }
}
