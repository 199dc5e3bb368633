//! Black-box Jacobian estimation by least squares over central differences.
//!
//! For `n_s` Gaussian perturbations `δyᵢ = (δΦᵢ, δUᵢ)` with standard deviation
//! `σ`, each paired evaluation gives
//! `h(ȳ + δyᵢ) − h(ȳ − δyᵢ) = 2 [h_Φ h_U] δyᵢ + O(‖δyᵢ‖³)`.
//! Stacking the differences as columns of `H` and the perturbations as
//! columns of `δY` yields `[h_Φ h_U] = ½ H δYᵀ (δY δYᵀ)⁻¹`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

/// Default perturbation scale.
pub const DEFAULT_SIGMA: f64 = 1e-4;

/// How the Gram matrix `δY δYᵀ` is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramMode {
    /// Form and factor the Gram matrix.
    #[default]
    Exact,
    /// Replace it by `σ²(n_s − 1) I`.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlsCdConfig {
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub gram: GramMode,
}

impl LlsCdConfig {
    /// `σ = 1e-4`, `n_s = 2 (n_Φ + n_U)`, exact Gram solve.
    pub fn for_dims(state_dim: usize, control_dim: usize, seed: u64) -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            n_samples: 2 * (state_dim + control_dim),
            seed,
            gram: GramMode::Exact,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, state_dim: usize, control_dim: usize) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("LLS-CD sigma must be > 0, got {}", self.sigma)));
        }
        let dim = state_dim + control_dim;
        if self.n_samples < dim {
            return Err(Error::Config(format!(
                "LLS-CD needs n_samples >= state_dim + control_dim = {dim}, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// Draws the `dim × n_samples` perturbation matrix `δY` for `cfg`.
pub fn draw_perturbations<T: Scalar>(cfg: &LlsCdConfig, dim: usize) -> DMatrix<T> {
    let mut rng = seed::rng(cfg.seed);
    let mut y = DMatrix::zeros(dim, cfg.n_samples);
    for s in 0..cfg.n_samples {
        for r in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            y[(r, s)] = T::of(cfg.sigma * z);
        }
    }
    y
}

/// Solves `J δY = ½ H` in the least-squares sense; returns `J` (`nx × dim`).
pub(crate) fn solve_least_squares<T: Scalar>(
    perturbations: &DMatrix<T>,
    diffs: &DMatrix<T>,
    mode: GramMode,
    sigma: f64,
) -> Result<DMatrix<T>> {
    let half = T::of(0.5);
    match mode {
        GramMode::Exact => {
            let gram = perturbations * perturbations.transpose();
            let rhs = perturbations * diffs.transpose();
            let chol = Cholesky::new(gram).ok_or_else(|| {
                Error::Estimation(format!(
                    "Gram matrix of {} perturbation samples in dimension {} is singular; increase n_samples",
                    perturbations.ncols(),
                    perturbations.nrows()
                ))
            })?;
            Ok(chol.solve(&rhs).transpose() * half)
        }
        GramMode::Diagonal => {
            let ns = perturbations.ncols();
            if ns < 2 {
                return Err(Error::Estimation(
                    "diagonal Gram approximation needs at least 2 samples".into(),
                ));
            }
            let scale = T::of(1.0 / (sigma * sigma * (ns as f64 - 1.0)));
            Ok(diffs * perturbations.transpose() * (scale * half))
        }
    }
}

/// Estimates `(∂h/∂Φ, ∂h/∂U)` of a black-box one-step map at `(x̄, ū)`.
///
/// The `2 n_s` evaluations may run concurrently; they are collected in sample
/// order so the estimate depends only on `cfg.seed`.
pub fn estimate_jacobians<T, F>(
    step: F,
    x_nom: &DVector<T>,
    u_nom: &DVector<T>,
    cfg: &LlsCdConfig,
) -> Result<(DMatrix<T>, DMatrix<T>)>
where
    T: Scalar,
    F: Fn(&DVector<T>, &DVector<T>) -> Result<DVector<T>> + Sync,
{
    let nx = x_nom.len();
    let nu = u_nom.len();
    cfg.validate(nx, nu)?;
    let dim = nx + nu;
    let y = draw_perturbations::<T>(cfg, dim);

    let columns: Vec<DVector<T>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| {
            let dy = y.column(s);
            let dx = dy.rows(0, nx);
            let du = dy.rows(nx, nu);
            let plus = step(&(x_nom + dx), &(u_nom + du))?;
            let minus = step(&(x_nom - dx), &(u_nom - du))?;
            Ok(plus - minus)
        })
        .collect::<Result<_>>()?;
    if let Some(col) = columns.first() {
        if col.len() != nx {
            return Err(Error::Estimation(format!(
                "dynamics returned a state of length {}, expected {nx}",
                col.len()
            )));
        }
    }
    let diffs = DMatrix::from_columns(&columns);
    let j = solve_least_squares(&y, &diffs, cfg.gram, cfg.sigma)?;
    Ok((j.columns(0, nx).into_owned(), j.columns(nx, nu).into_owned()))
}
