//! Identification of the time-varying perturbation model
//! `δΦ_{t+1} = A_t δΦ_t + B_t δU_t` around a nominal trajectory.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::field_io::{read_f64s, read_header, FIELD_VERSION};
use crate::ilqr::Trajectory;
use crate::jacobian::{estimate_jacobians, GramMode, LlsCdConfig, DEFAULT_SIGMA};
use crate::scalar::Scalar;
use crate::seed;

pub const LTV_MAGIC: &[u8; 4] = b"LTVM";

/// Per-step linearization `(A_t, B_t)`, `t = 0..horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel<T: Scalar> {
    a: Vec<DMatrix<T>>,
    b: Vec<DMatrix<T>>,
}

impl<T: Scalar> LtvModel<T> {
    pub fn new(a: Vec<DMatrix<T>>, b: Vec<DMatrix<T>>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "LTV model has {} A matrices but {} B matrices",
                a.len(),
                b.len()
            )));
        }
        if let (Some(a0), Some(b0)) = (a.first(), b.first()) {
            let (nx, nu) = (a0.nrows(), b0.ncols());
            for (t, (at, bt)) in a.iter().zip(&b).enumerate() {
                if at.shape() != (nx, nx) || bt.shape() != (nx, nu) {
                    return Err(Error::Config(format!(
                        "LTV step {t}: A is {:?}, B is {:?}, expected ({nx}, {nx}) and ({nx}, {nu})",
                        at.shape(),
                        bt.shape()
                    )));
                }
                if at.iter().chain(bt.iter()).any(|v| !v.finite()) {
                    return Err(Error::Identification {
                        step: t,
                        message: "non-finite entry in identified matrices".into(),
                    });
                }
            }
        }
        Ok(Self { a, b })
    }

    pub fn empty() -> Self {
        Self {
            a: Vec::new(),
            b: Vec::new(),
        }
    }

    #[inline]
    pub fn horizon(&self) -> usize {
        self.a.len()
    }
    #[inline]
    pub fn a(&self) -> &[DMatrix<T>] {
        &self.a
    }
    #[inline]
    pub fn b(&self) -> &[DMatrix<T>] {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.first().map_or(0, |m| m.nrows())
    }

    pub fn control_dim(&self) -> usize {
        self.b.first().map_or(0, |m| m.ncols())
    }

    /// `A_t δx + B_t δu`.
    pub fn predict(&self, t: usize, dx: &DVector<T>, du: &DVector<T>) -> DVector<T> {
        &self.a[t] * dx + &self.b[t] * du
    }

    /// `LTVM`, version byte, `u32` horizon, `u32` n_Φ, `u32` n_U, then each
    /// step's A and B as row-major little-endian `f64`.
    pub fn encode(&self) -> Vec<u8> {
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let mut out = Vec::with_capacity(17 + 8 * self.horizon() * nx * (nx + nu));
        out.extend_from_slice(LTV_MAGIC);
        out.push(FIELD_VERSION);
        for v in [self.horizon(), nx, nu] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (a, b) in self.a.iter().zip(&self.b) {
            push_row_major(&mut out, a);
            push_row_major(&mut out, b);
        }
        out
    }

    pub fn decode(bytes: &[u8], name: &str) -> Result<Self> {
        let horizon = read_header(bytes, LTV_MAGIC, name)? as usize;
        let dims = read_u32s(bytes, 9, 2, name)?;
        let (nx, nu) = (dims[0], dims[1]);
        let mut offset = 17;
        let mut a = Vec::with_capacity(horizon);
        let mut b = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            a.push(DMatrix::from_row_slice(nx, nx, &to_t::<T>(read_f64s(bytes, offset, nx * nx, name)?)));
            offset += 8 * nx * nx;
            b.push(DMatrix::from_row_slice(nx, nu, &to_t::<T>(read_f64s(bytes, offset, nx * nu, name)?)));
            offset += 8 * nx * nu;
        }
        trailing_check(bytes, offset, name)?;
        Self::new(a, b)
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

pub(crate) fn push_row_major<T: Scalar>(out: &mut Vec<u8>, m: &DMatrix<T>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].as_f64().to_le_bytes());
        }
    }
}

pub(crate) fn to_t<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}

pub(crate) fn read_u32s(bytes: &[u8], offset: usize, count: usize, name: &str) -> Result<Vec<usize>> {
    let end = offset + 4 * count;
    if bytes.len() < end {
        return Err(Error::Parse {
            source_name: name.to_string(),
            location: format!("byte {}", bytes.len()),
            message: format!("truncated header: need {end} bytes"),
        });
    }
    Ok(bytes[offset..end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect())
}

pub(crate) fn trailing_check(bytes: &[u8], offset: usize, name: &str) -> Result<()> {
    if bytes.len() != offset {
        return Err(Error::Parse {
            source_name: name.to_string(),
            location: format!("byte {offset}"),
            message: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SysIdMode {
    /// One-sided perturbation rollouts regressed by ordinary least squares.
    SimulationLeastSquares,
    /// Central-difference least squares from the jacobian module.
    #[default]
    LlsCdReuse,
    /// Exact Jacobians along the nominal.
    AnalyticOracle,
}

impl std::str::FromStr for SysIdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulation-least-squares" | "sls" => Ok(Self::SimulationLeastSquares),
            "lls-cd-reuse" | "lls-cd" => Ok(Self::LlsCdReuse),
            "analytic-oracle" | "analytic" => Ok(Self::AnalyticOracle),
            other => Err(Error::Config(format!(
                "unknown sysid mode '{other}' (expected simulation-least-squares, lls-cd-reuse or analytic-oracle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SysIdConfig {
    pub sigma: f64,
    /// Rollouts per step; `2 (n_Φ + n_U)` when absent.
    pub n_rollouts: Option<usize>,
    pub seed: u64,
    pub mode: SysIdMode,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            n_rollouts: None,
            seed: 0,
            mode: SysIdMode::default(),
        }
    }
}

impl SysIdConfig {
    pub fn rollouts_for(&self, state_dim: usize, control_dim: usize) -> usize {
        self.n_rollouts.unwrap_or(2 * (state_dim + control_dim))
    }

    pub fn validate(&self, state_dim: usize, control_dim: usize) -> Result<()> {
        if self.mode == SysIdMode::AnalyticOracle {
            return Ok(());
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sysid sigma must be > 0, got {}", self.sigma)));
        }
        let n = self.rollouts_for(state_dim, control_dim);
        if n < state_dim + control_dim {
            return Err(Error::Config(format!(
                "sysid needs n_rollouts >= state_dim + control_dim = {}, got {n}",
                state_dim + control_dim
            )));
        }
        Ok(())
    }
}

/// Regresses `[Â | B̂] = Y Xᵀ (X Xᵀ)⁻¹` from one-sided perturbation rollouts at step `t`.
fn simulation_least_squares<T: Scalar, D: Dynamics<T> + ?Sized>(
    t: usize,
    nominal: &Trajectory<T>,
    dynamics: &D,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let x_bar = &nominal.states[t];
    let u_bar = &nominal.controls[t];
    let next_bar = &nominal.states[t + 1];
    let (nx, nu) = (x_bar.len(), u_bar.len());
    let dim = nx + nu;
    let mut rng = seed::rng(seed);
    let mut x = DMatrix::<T>::zeros(dim, n);
    for s in 0..n {
        for r in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(r, s)] = T::of(sigma * z);
        }
    }
    let cols: Vec<DVector<T>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let dy = x.column(s);
            let next = dynamics
                .step_at(t, &(x_bar + dy.rows(0, nx)), &(u_bar + dy.rows(nx, nu)))
                .map_err(|e| e.at_step(t))?;
            Ok(next - next_bar)
        })
        .collect::<Result<_>>()?;
    let y = DMatrix::from_columns(&cols);
    let chol = Cholesky::new(&x * x.transpose()).ok_or_else(|| Error::Identification {
        step: t,
        message: format!("regressor Gram matrix is rank deficient with N = {n} in dimension {dim}; increase n_rollouts"),
    })?;
    let j = chol.solve(&(&x * y.transpose())).transpose();
    Ok((j.columns(0, nx).into_owned(), j.columns(nx, nu).into_owned()))
}

/// Identifies `(A_t, B_t)` for every step of `nominal`; step `t` draws from
/// seed `derive(cfg.seed, 1, t)`.
pub fn identify_ltv<T: Scalar, D: Dynamics<T> + ?Sized>(
    nominal: &Trajectory<T>,
    dynamics: &D,
    cfg: &SysIdConfig,
) -> Result<LtvModel<T>> {
    let (nx, nu) = (dynamics.state_dim(), dynamics.control_dim());
    cfg.validate(nx, nu)?;
    let n = cfg.rollouts_for(nx, nu);
    let pairs: Vec<(DMatrix<T>, DMatrix<T>)> = (0..nominal.horizon())
        .into_par_iter()
        .map(|t| {
            let step_seed = seed::derive(cfg.seed, 1, t as u64);
            match cfg.mode {
                SysIdMode::SimulationLeastSquares => {
                    simulation_least_squares(t, nominal, dynamics, cfg.sigma, n, step_seed)
                }
                SysIdMode::LlsCdReuse => {
                    let lls = LlsCdConfig {
                        sigma: cfg.sigma,
                        n_samples: n,
                        seed: step_seed,
                        gram: GramMode::Exact,
                    };
                    estimate_jacobians(
                        |x, u| dynamics.step_at(t, x, u),
                        &nominal.states[t],
                        &nominal.controls[t],
                        &lls,
                    )
                    .map_err(|e| match e {
                        Error::Estimation(message) => Error::Identification { step: t, message },
                        other => other.at_step(t),
                    })
                }
                SysIdMode::AnalyticOracle => dynamics
                    .jacobians_at(t, &nominal.states[t], &nominal.controls[t])
                    .unwrap_or_else(|| {
                        Err(Error::Config("model provides no analytic Jacobians".into()))
                    }),
            }
        })
        .collect::<Result<_>>()?;
    let (a, b) = pairs.into_iter().unzip();
    LtvModel::new(a, b)
}
