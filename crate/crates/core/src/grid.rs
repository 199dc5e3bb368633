//! Grid geometry, state and control containers, and goal patterns.
//!
//! Storage is row-major: cell `(i, j)` lives at flat index `i * n + j`.
//! Stacked control vectors interleave the two channels per cell as
//! `[T_0, h_0, T_1, h_1, ...]`, so control `k` of cell `c` sits at `2 * c + k`.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Overshoot threshold for [`PhaseField::overshoots`].
pub const OVERSHOOT_LIMIT: f64 = 2.0;

/// Square periodic grid with `n` cells per axis and spacing `dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
    dx: f64,
}

impl GridSpec {
    pub fn new(n: usize, dx: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("grid size n must be >= 2, got {n}")));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::Config(format!("grid spacing dx must be > 0, got {dx}")));
        }
        Ok(Self { n, dx })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Number of cells, `n²`.
    #[inline]
    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// Length of the stacked control vector, `2n²`.
    #[inline]
    pub fn control_len(&self) -> usize {
        2 * self.cells()
    }

    #[inline]
    pub fn flatten(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        i * self.n + j
    }

    #[inline]
    pub fn unflatten(&self, k: usize) -> (usize, usize) {
        (k / self.n, k % self.n)
    }

    /// Index of `i + offset` on the periodic axis.
    #[inline]
    pub fn wrap(&self, i: usize, offset: isize) -> usize {
        let n = self.n as isize;
        ((i as isize + offset).rem_euclid(n)) as usize
    }

    /// Flat indices of the four periodic neighbours of `(i, j)`: down, up, right, left.
    #[inline]
    pub fn neighbors(&self, i: usize, j: usize) -> [usize; 4] {
        [
            self.flatten(self.wrap(i, 1), j),
            self.flatten(self.wrap(i, -1), j),
            self.flatten(i, self.wrap(j, 1)),
            self.flatten(i, self.wrap(j, -1)),
        ]
    }
}

fn first_non_finite<T: Scalar>(values: &[T]) -> Option<usize> {
    values.iter().position(|v| !v.finite())
}

/// Order-parameter field on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField<T> {
    spec: GridSpec,
    values: Vec<T>,
}

impl<T: Scalar> PhaseField<T> {
    pub fn new(spec: GridSpec, values: Vec<T>) -> Result<Self> {
        if values.len() != spec.cells() {
            return Err(Error::Config(format!(
                "field has {} values, grid {}x{} needs {}",
                values.len(),
                spec.n(),
                spec.n(),
                spec.cells()
            )));
        }
        if let Some(k) = first_non_finite(&values) {
            let (row, col) = spec.unflatten(k);
            return Err(Error::Blowup {
                row,
                col,
                step: None,
            });
        }
        Ok(Self { spec, values })
    }

    pub fn uniform(spec: GridSpec, value: T) -> Self {
        Self {
            spec,
            values: vec![value; spec.cells()],
        }
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self::uniform(spec, T::zero())
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let n = spec.n();
        let values = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self::new(spec, values)
    }

    pub fn from_vector(spec: GridSpec, v: &DVector<T>) -> Result<Self> {
        Self::new(spec, v.as_slice().to_vec())
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[self.spec.flatten(i, j)]
    }

    pub fn to_vector(&self) -> DVector<T> {
        DVector::from_column_slice(&self.values)
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_usize(self.values.len())
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Diagnostic: true when any `|φ|` exceeds [`OVERSHOOT_LIMIT`].
    pub fn overshoots(&self) -> bool {
        self.max_abs() > T::of(OVERSHOOT_LIMIT)
    }

    /// Mean squared difference to `other`.
    pub fn mse(&self, other: &PhaseField<T>) -> T {
        assert_eq!(self.spec.n(), other.spec.n(), "grid mismatch");
        let total = self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        total / T::of_usize(self.values.len())
    }

    /// Periodic translation: `out[i + di, j + dj] = self[i, j]`.
    pub fn shifted(&self, di: isize, dj: isize) -> Self {
        let s = self.spec;
        let mut values = vec![T::zero(); s.cells()];
        for i in 0..s.n() {
            for j in 0..s.n() {
                values[s.flatten(s.wrap(i, di), s.wrap(j, dj))] = self.get(i, j);
            }
        }
        Self { spec: s, values }
    }

    /// Converts the scalar type, e.g. `f64` fields to `f32`.
    pub fn cast<U: Scalar>(&self) -> PhaseField<U> {
        PhaseField {
            spec: self.spec,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Per-cell actuation `(T, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField<T> {
    spec: GridSpec,
    t_vals: Vec<T>,
    h_vals: Vec<T>,
}

impl<T: Scalar> ControlField<T> {
    pub fn new(spec: GridSpec, t_vals: Vec<T>, h_vals: Vec<T>) -> Result<Self> {
        for (name, vals) in [("T", &t_vals), ("h", &h_vals)] {
            if vals.len() != spec.cells() {
                return Err(Error::Config(format!(
                    "control channel {name} has {} values, grid needs {}",
                    vals.len(),
                    spec.cells()
                )));
            }
            if let Some(k) = first_non_finite(vals) {
                return Err(Error::Config(format!(
                    "control channel {name} is non-finite at cell {:?}",
                    spec.unflatten(k)
                )));
            }
        }
        Ok(Self {
            spec,
            t_vals,
            h_vals,
        })
    }

    pub fn uniform(spec: GridSpec, t: T, h: T) -> Self {
        Self {
            spec,
            t_vals: vec![t; spec.cells()],
            h_vals: vec![h; spec.cells()],
        }
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self::uniform(spec, T::zero(), T::zero())
    }

    /// Builds a control field from an interleaved `[T_k, h_k]` vector of length `2n²`.
    pub fn from_vector(spec: GridSpec, u: &DVector<T>) -> Result<Self> {
        if u.len() != spec.control_len() {
            return Err(Error::Config(format!(
                "control vector has length {}, grid needs {}",
                u.len(),
                spec.control_len()
            )));
        }
        let t_vals = (0..spec.cells()).map(|k| u[2 * k]).collect();
        let h_vals = (0..spec.cells()).map(|k| u[2 * k + 1]).collect();
        Self::new(spec, t_vals, h_vals)
    }

    pub fn to_vector(&self) -> DVector<T> {
        DVector::from_fn(self.spec.control_len(), |r, _| {
            if r % 2 == 0 {
                self.t_vals[r / 2]
            } else {
                self.h_vals[r / 2]
            }
        })
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn t_vals(&self) -> &[T] {
        &self.t_vals
    }

    #[inline]
    pub fn h_vals(&self) -> &[T] {
        &self.h_vals
    }

    pub fn shifted(&self, di: isize, dj: isize) -> Self {
        let t = PhaseField {
            spec: self.spec,
            values: self.t_vals.clone(),
        }
        .shifted(di, dj);
        let h = PhaseField {
            spec: self.spec,
            values: self.h_vals.clone(),
        }
        .shifted(di, dj);
        Self {
            spec: self.spec,
            t_vals: t.values,
            h_vals: h.values,
        }
    }
}

/// Which goal geometry a [`GoalPattern`] was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalKind {
    Banded,
    Checkerboard,
    Custom,
}

impl fmt::Display for GoalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoalKind::Banded => "banded",
            GoalKind::Checkerboard => "checkerboard",
            GoalKind::Custom => "custom",
        })
    }
}

impl std::str::FromStr for GoalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "banded" => Ok(GoalKind::Banded),
            "checkerboard" => Ok(GoalKind::Checkerboard),
            "custom" => Ok(GoalKind::Custom),
            other => Err(Error::Config(format!(
                "unknown goal kind '{other}' (expected banded, checkerboard or custom)"
            ))),
        }
    }
}

/// Target phase distribution with entries exactly `±1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalPattern<T> {
    kind: GoalKind,
    field: PhaseField<T>,
}

impl<T: Scalar> GoalPattern<T> {
    /// Wraps an arbitrary `±1` field, typically loaded from a file.
    pub fn custom(field: PhaseField<T>) -> Result<Self> {
        let spec = field.spec();
        if let Some(k) = field
            .values()
            .iter()
            .position(|&v| v != T::one() && v != -T::one())
        {
            return Err(Error::Config(format!(
                "goal field entry at cell {:?} is {}, expected exactly +1 or -1",
                spec.unflatten(k),
                field.values()[k]
            )));
        }
        Ok(Self {
            kind: GoalKind::Custom,
            field,
        })
    }

    #[inline]
    pub fn kind(&self) -> GoalKind {
        self.kind
    }

    #[inline]
    pub fn field(&self) -> &PhaseField<T> {
        &self.field
    }

    pub fn into_field(self) -> PhaseField<T> {
        self.field
    }
}

/// Builds a banded or checkerboard goal with `partitions` stripes/blocks per axis.
pub fn make_goal<T: Scalar>(
    spec: GridSpec,
    kind: GoalKind,
    partitions: usize,
) -> Result<GoalPattern<T>> {
    let n = spec.n();
    if partitions == 0 || n % partitions != 0 {
        return Err(Error::Config(format!(
            "partition count {partitions} does not divide grid size {n}"
        )));
    }
    let width = n / partitions;
    let sign = |parity: usize| if parity % 2 == 0 { T::one() } else { -T::one() };
    let field = match kind {
        GoalKind::Banded => PhaseField::from_fn(spec, |i, _| sign(i / width))?,
        GoalKind::Checkerboard => PhaseField::from_fn(spec, |i, j| sign(i / width + j / width))?,
        GoalKind::Custom => {
            return Err(Error::Config(
                "custom goals are loaded from a field file, not generated".into(),
            ))
        }
    };
    Ok(GoalPattern { kind, field })
}
