//! Shared helpers for unit tests: random inputs and finite-difference oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::Dynamics;
use crate::grid::{GridSpec, PhaseField};

pub fn random_field<R: Rng>(rng: &mut R, spec: GridSpec, amp: f64) -> PhaseField<f64> {
    PhaseField::from_fn(spec, |_, _| rng.random_range(-amp..amp)).unwrap()
}

pub fn random_control<R: Rng>(rng: &mut R, spec: GridSpec, amp: f64) -> DVector<f64> {
    DVector::from_fn(spec.control_len(), |_, _| rng.random_range(-amp..amp))
}

/// Column-by-column central differences of `dynamics.step`.
pub fn central_difference_jacobians<D: Dynamics<f64>>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = x.len();
    let nu = u.len();
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    for c in 0..nx {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[c] += h;
        xm[c] -= h;
        let d = (dynamics.step(&xp, u).unwrap() - dynamics.step(&xm, u).unwrap()) / (2.0 * h);
        a.set_column(c, &d);
    }
    for c in 0..nu {
        let (mut up, mut um) = (u.clone(), u.clone());
        up[c] += h;
        um[c] -= h;
        let d = (dynamics.step(x, &up).unwrap() - dynamics.step(x, &um).unwrap()) / (2.0 * h);
        b.set_column(c, &d);
    }
    (a, b)
}

/// Linear (optionally time-varying) plant `x' = A_t x + B_t u`.
pub struct LinearPlant {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl LinearPlant {
    pub fn lti(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        Self { a: vec![a], b: vec![b] }
    }

    fn at(&self, t: usize) -> (&DMatrix<f64>, &DMatrix<f64>) {
        let k = t.min(self.a.len() - 1);
        (&self.a[k], &self.b[k])
    }
}

impl Dynamics<f64> for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> crate::Result<DVector<f64>> {
        self.step_at(0, x, u)
    }

    fn step_at(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> crate::Result<DVector<f64>> {
        let (a, b) = self.at(t);
        Ok(a * x + b * u)
    }

    fn jacobians_at(
        &self,
        t: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Option<crate::Result<(DMatrix<f64>, DMatrix<f64>)>> {
        let (a, b) = self.at(t);
        Some(Ok((a.clone(), b.clone())))
    }
}
