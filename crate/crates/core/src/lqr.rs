//! Finite-horizon time-varying LQR over an identified LTV model.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::field_io::{read_f64s, read_header, FIELD_VERSION};
use crate::ilqr::{CostParams, Trajectory};
use crate::scalar::Scalar;
use crate::sysid::{push_row_major, read_u32s, to_t, trailing_check, LtvModel};

/// Largest state dimension accepted by the dense Riccati path by default.
pub const DEFAULT_MAX_STATES: usize = 1024;

pub const POLICY_MAGIC: &[u8; 4] = b"PPOL";

/// Gains plus the cost-to-go matrices of the recursion.
#[derive(Debug, Clone)]
pub struct RiccatiSolution<T: Scalar> {
    /// Already negated: apply `U_t = Ū_t + K_t δΦ_t`.
    pub gains: Vec<DMatrix<T>>,
    /// `P_0..P_T`.
    pub cost_to_go: Vec<DMatrix<T>>,
    /// Largest relative asymmetry of any `P_t` before symmetrization.
    pub max_asymmetry: f64,
}

/// Runs the recursion
/// `K_t = (rI + BᵀP B)⁻¹ BᵀP A`, `P_t = qI + AᵀP (A − B K_t)` from `P_T = q_term I`.
pub fn riccati<T: Scalar>(model: &LtvModel<T>, cost: &CostParams<T>, max_states: usize) -> Result<RiccatiSolution<T>> {
    let horizon = model.horizon();
    if horizon == 0 {
        return Err(Error::Config("riccati recursion needs a horizon of at least 1".into()));
    }
    let nx = model.state_dim();
    let nu = model.control_dim();
    if nx > max_states {
        return Err(Error::Config(format!(
            "state dimension {nx} exceeds the dense Riccati limit of {max_states}"
        )));
    }
    let mut p = DMatrix::<T>::identity(nx, nx) * cost.q_term();
    let mut cost_to_go = vec![p.clone()];
    let mut gains = vec![DMatrix::zeros(nu, nx); horizon];
    let mut max_asymmetry = 0.0f64;
    for t in (0..horizon).rev() {
        let a = &model.a()[t];
        let b = &model.b()[t];
        let bt_p = b.transpose() * &p;
        let mut s = &bt_p * b;
        for i in 0..nu {
            s[(i, i)] += cost.r_ctrl();
        }
        let chol = Cholesky::new(s).ok_or_else(|| Error::Riccati {
            step: t,
            message: "r I + Bᵀ P B is not positive definite".into(),
        })?;
        let k = chol.solve(&(&bt_p * a));
        let mut p_next = a.transpose() * &p * (a - b * &k);
        for i in 0..nx {
            p_next[(i, i)] += cost.q_run();
        }
        let scale = p_next.amax().as_f64();
        if scale > 0.0 {
            let asym = (&p_next - p_next.transpose()).amax().as_f64() / scale;
            max_asymmetry = max_asymmetry.max(asym);
        }
        p = (&p_next + p_next.transpose()) * T::of(0.5);
        if p.iter().any(|v| !v.finite()) {
            return Err(Error::Riccati {
                step: t,
                message: "non-finite cost-to-go".into(),
            });
        }
        gains[t] = -k;
        cost_to_go.push(p.clone());
    }
    cost_to_go.reverse();
    Ok(RiccatiSolution {
        gains,
        cost_to_go,
        max_asymmetry,
    })
}

/// Feedback gains with the default state-dimension cap.
pub fn riccati_gains<T: Scalar>(model: &LtvModel<T>, cost: &CostParams<T>) -> Result<Vec<DMatrix<T>>> {
    riccati(model, cost, DEFAULT_MAX_STATES).map(|s| s.gains)
}

/// Nominal trajectory plus time-varying feedback, `U_t = Ū_t + K_t (Φ_t − Φ̄_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy<T: Scalar> {
    pub nominal: Trajectory<T>,
    pub gains: Vec<DMatrix<T>>,
}

impl<T: Scalar> FeedbackPolicy<T> {
    pub fn new(nominal: Trajectory<T>, gains: Vec<DMatrix<T>>) -> Result<Self> {
        if gains.len() != nominal.horizon() {
            return Err(Error::Config(format!(
                "policy has {} gains for a horizon of {}",
                gains.len(),
                nominal.horizon()
            )));
        }
        let (nx, nu) = (nominal.states[0].len(), nominal.controls.first().map_or(0, |u| u.len()));
        if gains.iter().any(|k| k.shape() != (nu, nx)) {
            return Err(Error::Config(format!("gain matrices must be {nu}×{nx}")));
        }
        Ok(Self { nominal, gains })
    }

    /// Same nominal, all gains zero.
    pub fn open_loop(nominal: Trajectory<T>) -> Self {
        let (nx, nu) = (nominal.states[0].len(), nominal.controls.first().map_or(0, |u| u.len()));
        let gains = vec![DMatrix::zeros(nu, nx); nominal.horizon()];
        Self { nominal, gains }
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn control(&self, t: usize, state: &DVector<T>) -> DVector<T> {
        &self.nominal.controls[t] + &self.gains[t] * (state - &self.nominal.states[t])
    }

    /// Largest `|Ū*|` over all steps and channels.
    pub fn max_nominal_control(&self) -> T {
        self.nominal.max_abs_control()
    }

    /// `PPOL`, version byte, `u32` horizon, n_Φ, n_U; then states, controls,
    /// per-step costs, terminal cost and gains, all little-endian `f64` row-major.
    pub fn encode(&self) -> Vec<u8> {
        let nx = self.nominal.states[0].len();
        let nu = self.nominal.controls.first().map_or(0, |u| u.len());
        let mut out = Vec::new();
        out.extend_from_slice(POLICY_MAGIC);
        out.push(FIELD_VERSION);
        for v in [self.horizon(), nx, nu] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let vals = self
            .nominal
            .states
            .iter()
            .chain(&self.nominal.controls)
            .flat_map(|v| v.iter().copied())
            .chain(self.nominal.per_step_costs.iter().copied())
            .chain(std::iter::once(self.nominal.terminal_cost));
        for v in vals {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        for k in &self.gains {
            push_row_major(&mut out, k);
        }
        out
    }

    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let horizon = read_header(bytes, POLICY_MAGIC, name)? as usize;
        let dims = read_u32s(bytes, 9, 2, name)?;
        let (nx, nu) = (dims[0], dims[1]);
        let mut offset = 17;
        let mut take = |count: usize| -> Result<Vec<T>> {
            let v = read_f64s(bytes, offset, count, name)?;
            offset += 8 * count;
            Ok(to_t(v))
        };
        let states = (0..=horizon)
            .map(|_| take(nx).map(DVector::from_vec))
            .collect::<Result<Vec<_>>>()?;
        let controls = (0..horizon)
            .map(|_| take(nu).map(DVector::from_vec))
            .collect::<Result<Vec<_>>>()?;
        let per_step_costs = take(horizon)?;
        let terminal_cost = take(1)?[0];
        let gains = (0..horizon)
            .map(|_| take(nu * nx).map(|v| DMatrix::from_row_slice(nu, nx, &v)))
            .collect::<Result<Vec<_>>>()?;
        trailing_check(bytes, offset, name)?;
        let total_cost = per_step_costs.iter().fold(T::zero(), |a, &c| a + c) + terminal_cost;
        Self::new(
            Trajectory {
                states,
                controls,
                per_step_costs,
                terminal_cost,
                total_cost,
            },
            gains,
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}
