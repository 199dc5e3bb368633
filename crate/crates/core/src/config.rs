//! Flat `key = value` run configuration.
//!
//! ```toml
//! # grid and model
//! n = 10
//! pde = "allen-cahn"
//! dt = "auto"
//! # goal
//! goal = "banded"
//! partitions = 2
//! ```
//!
//! Every key is optional; unknown keys are rejected with their location.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlBounds, Integrator, ModelParams, Pde, TimeStep};
use crate::error::{Error, Result};
use crate::field_io::read_field;
use crate::grid::{make_goal, GoalKind, GoalPattern, GridSpec, PhaseField};
use crate::harness::{Strategy, SweepConfig};
use crate::ilqr::{CostParams, IlqrOptions, JacobianSource};
use crate::jacobian::{GramMode, DEFAULT_SIGMA};
use crate::lqr::DEFAULT_MAX_STATES;
use crate::pipeline::{MpcOptions, Problem};
use crate::scalar::Scalar;
use crate::sysid::{SysIdConfig, SysIdMode};

/// Either `"auto"` or an explicit step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DtSetting {
    Value(f64),
    Keyword(String),
}

impl Default for DtSetting {
    fn default() -> Self {
        DtSetting::Keyword("auto".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianKind {
    #[default]
    LlsCd,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub dx: f64,

    pub pde: String,
    pub mobility: f64,
    pub gamma: f64,
    pub dt: DtSetting,
    pub t_max: f64,
    pub h_max: f64,
    pub integrator: String,

    pub goal: GoalKind,
    pub partitions: usize,
    pub goal_file: Option<PathBuf>,
    /// Uniform initial value, used when `initial_file` is absent.
    pub initial_value: f64,
    pub initial_file: Option<PathBuf>,

    pub q_run: f64,
    pub r_ctrl: f64,
    pub q_term: f64,

    pub horizon: usize,
    pub max_iters: usize,
    pub eps_converge: f64,
    pub mu_init: f64,
    pub mu_factor: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub jacobians: JacobianKind,
    pub lls_sigma: f64,
    pub lls_samples: Option<usize>,
    pub gram: GramMode,

    pub sysid_mode: SysIdMode,
    pub sysid_sigma: f64,
    pub sysid_rollouts: Option<usize>,

    pub mpc_inner_iters: usize,
    pub mpc_jacobians: JacobianKind,
    pub max_states: usize,

    pub noise_levels: Vec<f64>,
    pub rollouts: usize,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub dump_raw: bool,

    pub snapshot_stride: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ilqr = IlqrOptions::default();
        let sweep = SweepConfig::default();
        Self {
            n: 10,
            dx: 1.0,
            pde: "allen-cahn".into(),
            mobility: 1.0,
            gamma: 0.01,
            dt: DtSetting::default(),
            t_max: 5.0,
            h_max: 5.0,
            integrator: "forward-euler".into(),
            goal: GoalKind::Banded,
            partitions: 2,
            goal_file: None,
            initial_value: 0.0,
            initial_file: None,
            q_run: 1.0,
            r_ctrl: 1e-3,
            q_term: 100.0,
            horizon: ilqr.horizon,
            max_iters: ilqr.max_iters,
            eps_converge: ilqr.eps_converge,
            mu_init: ilqr.mu_init,
            mu_factor: ilqr.mu_factor,
            mu_min: ilqr.mu_min,
            mu_max: ilqr.mu_max,
            jacobians: JacobianKind::LlsCd,
            lls_sigma: DEFAULT_SIGMA,
            lls_samples: None,
            gram: GramMode::Exact,
            sysid_mode: SysIdMode::default(),
            sysid_sigma: DEFAULT_SIGMA,
            sysid_rollouts: None,
            mpc_inner_iters: 10,
            mpc_jacobians: JacobianKind::Analytic,
            max_states: DEFAULT_MAX_STATES,
            noise_levels: sweep.noise_levels,
            rollouts: sweep.rollouts_per_level,
            strategies: sweep.strategies,
            seed: 0,
            dump_raw: false,
            snapshot_stride: 10,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

fn invalid(key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {message}"))
}

impl RunConfig {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("line {line}, column {col}")
                }
                None => "unknown location".into(),
            };
            Error::Parse {
                source_name: source_name.to_string(),
                location,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative field paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.goal_file, &mut cfg.initial_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid("n", format!("must be >= 2, got {}", self.n)));
        }
        for (key, v) in [("dx", self.dx), ("mobility", self.mobility), ("t_max", self.t_max), ("h_max", self.h_max)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(key, format!("must be > 0, got {v}")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(invalid("gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        self.pde_kind()?;
        self.integrator_kind()?;
        self.time_step::<f64>()?;
        self.model_params::<f64>()?;
        if self.goal == GoalKind::Custom && self.goal_file.is_none() {
            return Err(invalid("goal_file", "required when goal = \"custom\""));
        }
        if self.goal != GoalKind::Custom && (self.partitions == 0 || self.n % self.partitions != 0) {
            return Err(invalid(
                "partitions",
                format!("{} does not divide n = {}", self.partitions, self.n),
            ));
        }
        for (key, v) in [("q_run", self.q_run), ("q_term", self.q_term)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.r_ctrl.is_finite() && self.r_ctrl > 0.0) {
            return Err(invalid("r_ctrl", format!("must be > 0, got {}", self.r_ctrl)));
        }
        self.ilqr_options().validate()?;
        for (key, v) in [("lls_sigma", self.lls_sigma), ("sysid_sigma", self.sysid_sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(key, format!("must be > 0, got {v}")));
            }
        }
        let (nx, nu) = (self.n * self.n, 2 * self.n * self.n);
        if let Some(s) = self.lls_samples {
            if s < nx + nu {
                return Err(invalid("lls_samples", format!("must be >= {} for n = {}, got {s}", nx + nu, self.n)));
            }
        }
        self.sysid_config().validate(nx, nu)?;
        if self.mpc_inner_iters == 0 {
            return Err(invalid("mpc_inner_iters", "must be >= 1"));
        }
        self.sweep_config().validate()?;
        if self.snapshot_stride == 0 {
            return Err(invalid("snapshot_stride", "must be >= 1"));
        }
        Ok(())
    }

    pub fn pde_kind(&self) -> Result<Pde> {
        self.pde.parse().map_err(|e: Error| invalid("pde", e))
    }

    pub fn integrator_kind(&self) -> Result<Integrator> {
        match self.integrator.as_str() {
            "forward-euler" | "euler" => Ok(Integrator::ForwardEuler),
            "heun" => Ok(Integrator::Heun),
            other => Err(invalid("integrator", format!("unknown integrator '{other}' (forward-euler or heun)"))),
        }
    }

    pub fn time_step<T: Scalar>(&self) -> Result<TimeStep<T>> {
        match &self.dt {
            DtSetting::Keyword(k) if k == "auto" => Ok(TimeStep::Auto),
            DtSetting::Keyword(k) => Err(invalid("dt", format!("expected a number or \"auto\", got \"{k}\""))),
            DtSetting::Value(v) => Ok(TimeStep::Fixed(T::of(*v))),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.n, self.dx)
    }

    pub fn model_params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        Ok(ModelParams::new(
            self.pde_kind()?,
            self.grid()?,
            T::of(self.mobility),
            T::of(self.gamma),
            self.time_step()?,
            ControlBounds::new(T::of(self.t_max), T::of(self.h_max))?,
        )?
        .with_integrator(self.integrator_kind()?))
    }

    pub fn goal_pattern<T: Scalar>(&self) -> Result<GoalPattern<T>> {
        let grid = self.grid()?;
        match (&self.goal, &self.goal_file) {
            (GoalKind::Custom, Some(path)) => {
                let field = read_field(path, self.dx)?;
                if field.spec().n() != self.n {
                    return Err(invalid(
                        "goal_file",
                        format!("{} holds a {}×{0} field but n = {}", path.display(), field.spec().n(), self.n),
                    ));
                }
                GoalPattern::custom(field)
            }
            (GoalKind::Custom, None) => Err(invalid("goal_file", "required when goal = \"custom\"")),
            (kind, _) => make_goal(grid, *kind, self.partitions),
        }
    }

    pub fn initial_field<T: Scalar>(&self) -> Result<PhaseField<T>> {
        match &self.initial_file {
            Some(path) => {
                let field = read_field(path, self.dx)?;
                if field.spec().n() != self.n {
                    return Err(invalid("initial_file", format!("field is {}×{0} but n = {}", field.spec().n(), self.n)));
                }
                Ok(field)
            }
            None => Ok(PhaseField::uniform(self.grid()?, T::of(self.initial_value))),
        }
    }

    fn source(kind: JacobianKind, sigma: f64, n_samples: Option<usize>, gram: GramMode) -> JacobianSource {
        match kind {
            JacobianKind::LlsCd => JacobianSource::LlsCd { sigma, n_samples, gram },
            JacobianKind::Analytic => JacobianSource::Analytic,
        }
    }

    pub fn jacobian_source(&self) -> JacobianSource {
        Self::source(self.jacobians, self.lls_sigma, self.lls_samples, self.gram)
    }

    pub fn ilqr_options(&self) -> IlqrOptions {
        IlqrOptions {
            max_iters: self.max_iters,
            eps_converge: self.eps_converge,
            mu_init: self.mu_init,
            mu_factor: self.mu_factor,
            mu_min: self.mu_min,
            mu_max: self.mu_max,
            horizon: self.horizon,
            seed: self.seed,
            ..IlqrOptions::default()
        }
    }

    pub fn sysid_config(&self) -> SysIdConfig {
        SysIdConfig {
            sigma: self.sysid_sigma,
            n_rollouts: self.sysid_rollouts,
            seed: self.seed,
            mode: self.sysid_mode,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            noise_levels: self.noise_levels.clone(),
            rollouts_per_level: self.rollouts,
            strategies: self.strategies.clone(),
            base_seed: self.seed,
            dump_raw: self.dump_raw,
        }
    }

    pub fn problem<T: Scalar>(&self) -> Result<Problem<T>> {
        let params = self.model_params()?;
        let goal = self.goal_pattern()?.into_field();
        let mut problem = Problem::new(params, self.initial_field()?, goal)?;
        problem.cost = CostParams::for_goal(&problem.goal, T::of(self.q_run), T::of(self.r_ctrl), T::of(self.q_term))?;
        problem.ilqr = self.ilqr_options();
        problem.jacobians = self.jacobian_source();
        problem.sysid = self.sysid_config();
        problem.mpc = MpcOptions {
            inner_iters: self.mpc_inner_iters,
            jacobians: Self::source(self.mpc_jacobians, self.lls_sigma, self.lls_samples, self.gram),
        };
        problem.max_states = self.max_states;
        Ok(problem)
    }

    /// Serialized as the same flat key/value text the loader reads.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_auto_dt() {
        let cfg = RunConfig::parse("", "empty").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let p = cfg.model_params::<f64>().unwrap();
        assert!((p.dt() - 0.8 * p.dt_limit()).abs() < 1e-15);
    }

    #[test]
    fn explicit_values() {
        let cfg = RunConfig::parse(
            "# a comment\nn = 20\ngoal = \"checkerboard\"\npartitions = 4\ndt = 0.001\njacobians = \"analytic\"\nstrategies = [\"mpc\"]\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.n, 20);
        assert_eq!(cfg.model_params::<f64>().unwrap().dt(), 0.001);
        assert_eq!(cfg.jacobian_source(), JacobianSource::Analytic);
        let p = cfg.problem::<f64>().unwrap();
        assert_eq!(p.decision_variables(), 8000);
    }

    #[test]
    fn unknown_key_reports_location() {
        let err = RunConfig::parse("n = 10\nbogus = 1\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("n = 1", "n"),
            ("partitions = 3", "partitions"),
            ("dt = \"soon\"", "dt"),
            ("r_ctrl = 0.0", "r_ctrl"),
            ("pde = \"navier-stokes\"", "pde"),
            ("goal = \"custom\"", "goal_file"),
        ] {
            let msg = RunConfig::parse(text, "t").unwrap_err().to_string();
            assert!(msg.contains(key), "{text}: {msg}");
        }
        let msg = RunConfig::parse("dt = 10.0", "t").unwrap_err().to_string();
        assert!(msg.contains("stability"), "{msg}");
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.dt = DtSetting::Value(0.005);
        cfg.lls_samples = Some(700);
        cfg.goal_file = Some(PathBuf::from("g.csv"));
        let back = RunConfig::parse(&cfg.to_toml(), "echo").unwrap();
        assert_eq!(back, cfg);
    }
}
