//! Monte-Carlo noise sweeps over control strategies, and result persistence.
//!
//! Rollout `r` at level index `l` uses noise seed `base_seed ⊕ hash(l, r)`
//! for every strategy, so strategies see common random numbers and results do
//! not depend on the worker count.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field_io::{write_field, FieldFormat};
use crate::grid::PhaseField;
use crate::ilqr::IterationRecord;
use crate::pipeline::{
    baseline_control, baseline_rollout, closed_loop_rollout, mpc_rollout, open_loop_rollout, Design, NoiseSpec,
    Problem,
};
use crate::scalar::Scalar;
use crate::seed;

/// Version of the CSV and manifest layouts written by [`write_results`].
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    OpenLoop,
    ClosedLoop,
    Mpc,
    Baseline,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::OpenLoop, Strategy::ClosedLoop, Strategy::Mpc, Strategy::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OpenLoop => "open-loop",
            Strategy::ClosedLoop => "closed-loop",
            Strategy::Mpc => "mpc",
            Strategy::Baseline => "baseline",
        }
    }

    pub fn needs_design(self) -> bool {
        !matches!(self, Strategy::Baseline)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}' (expected open-loop, closed-loop, mpc or baseline)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub noise_levels: Vec<f64>,
    pub rollouts_per_level: usize,
    pub strategies: Vec<Strategy>,
    pub base_seed: u64,
    /// Also write every rollout's cost to `raw_costs.csv`.
    pub dump_raw: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            noise_levels: (0..=10).map(|k| k as f64 / 10.0).collect(),
            rollouts_per_level: 100,
            strategies: vec![Strategy::OpenLoop, Strategy::ClosedLoop],
            base_seed: 0,
            dump_raw: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts_per_level == 0 {
            return Err(Error::Config("rollouts: must be >= 1".into()));
        }
        if let Some(l) = self.noise_levels.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Config(format!("noise_levels: levels must be >= 0, got {l}")));
        }
        Ok(())
    }

    pub fn rollout_seed(&self, level_idx: usize, rollout_idx: usize) -> u64 {
        seed::derive(self.base_seed, level_idx as u64, rollout_idx as u64)
    }
}

/// Aggregate over the rollouts of one (strategy, level) cell. Failed rollouts
/// are excluded from the moments and counted in `n_failed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub strategy: Strategy,
    pub noise_level: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
    pub n_failed: usize,
}

impl CellStats {
    /// Sample statistics of the finite entries; `None` marks a failed rollout.
    pub fn from_costs(strategy: Strategy, noise_level: f64, costs: &[Option<f64>]) -> Self {
        let ok: Vec<f64> = costs.iter().flatten().copied().collect();
        let n_failed = costs.len() - ok.len();
        if ok.is_empty() {
            return Self {
                strategy,
                noise_level,
                mean_cost: f64::INFINITY,
                std_cost: 0.0,
                min: f64::INFINITY,
                max: f64::INFINITY,
                n: costs.len(),
                n_failed,
            };
        }
        let k = ok.len() as f64;
        let mean = ok.iter().sum::<f64>() / k;
        let var = if ok.len() > 1 {
            ok.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self {
            strategy,
            noise_level,
            mean_cost: mean,
            std_cost: var.sqrt(),
            min: ok.iter().copied().fold(f64::INFINITY, f64::min),
            max: ok.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: costs.len(),
            n_failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCost {
    pub strategy: Strategy,
    pub level_index: usize,
    pub noise_level: f64,
    pub rollout: usize,
    pub seed: u64,
    /// Empty when the rollout failed.
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub stats: Vec<CellStats>,
    pub raw: Vec<RawCost>,
    /// Noise std per unit level (largest nominal control magnitude).
    pub noise_reference: f64,
}

impl SweepResult {
    pub fn get(&self, strategy: Strategy, noise_level: f64) -> Option<&CellStats> {
        self.stats
            .iter()
            .find(|s| s.strategy == strategy && s.noise_level == noise_level)
    }
}

/// Runs every (strategy × level × rollout) cell. Open-loop, closed-loop and
/// MPC need `design`; a rollout that fails numerically is recorded, not raised.
pub fn run_sweep<T: Scalar>(problem: &Problem<T>, design: Option<&Design<T>>, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if design.is_none() {
        if let Some(s) = cfg.strategies.iter().find(|s| s.needs_design()) {
            return Err(Error::Config(format!("strategy {s} needs a designed policy")));
        }
    }
    let noise_reference = match design {
        Some(d) => d.policy.max_nominal_control().as_f64(),
        None => {
            let mut u = baseline_control(&problem.goal).to_vector();
            crate::dynamics::Dynamics::clip(&problem.params, &mut u);
            u.amax().as_f64()
        }
    };

    let mut cells = Vec::new();
    for &strategy in &cfg.strategies {
        for (l, &level) in cfg.noise_levels.iter().enumerate() {
            for r in 0..cfg.rollouts_per_level {
                cells.push((strategy, l, level, r));
            }
        }
    }
    let x0 = problem.initial.to_vector();
    let raw: Vec<RawCost> = cells
        .into_par_iter()
        .map(|(strategy, l, level, r)| {
            let seed = cfg.rollout_seed(l, r);
            let noise = NoiseSpec { level, seed };
            let traj = match strategy {
                Strategy::OpenLoop => open_loop_rollout(
                    &design.expect("checked").policy,
                    &problem.params,
                    &problem.cost,
                    &noise,
                    noise_reference,
                ),
                Strategy::ClosedLoop => closed_loop_rollout(
                    &design.expect("checked").policy,
                    &problem.params,
                    &problem.cost,
                    &noise,
                    noise_reference,
                ),
                Strategy::Mpc => mpc_rollout(
                    &x0,
                    &problem.params,
                    &problem.cost,
                    &problem.ilqr,
                    &problem.mpc,
                    Some(&design.expect("checked").policy.nominal.controls),
                    &noise,
                    noise_reference,
                ),
                Strategy::Baseline => baseline_rollout(
                    &problem.initial,
                    &problem.goal,
                    &problem.params,
                    &problem.cost,
                    problem.horizon(),
                    &noise,
                    noise_reference,
                ),
            };
            RawCost {
                strategy,
                level_index: l,
                noise_level: level,
                rollout: r,
                seed,
                cost: traj.ok().map(|t| t.total_cost.as_f64()).filter(|c| c.is_finite()),
            }
        })
        .collect();

    let per_cell = cfg.rollouts_per_level;
    let stats = raw
        .chunks(per_cell)
        .map(|chunk| {
            let costs: Vec<Option<f64>> = chunk.iter().map(|c| c.cost).collect();
            CellStats::from_costs(chunk[0].strategy, chunk[0].noise_level, &costs)
        })
        .collect();
    Ok(SweepResult {
        stats,
        raw,
        noise_reference,
    })
}

/// Everything needed to rerun a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub config: RunConfig,
    pub resolved_dt: f64,
    pub noise_reference: Option<f64>,
    pub seed_rule: String,
    pub rollout_seeds: Vec<Vec<u64>>,
}

impl Manifest {
    pub fn new(config: &RunConfig, resolved_dt: f64, sweep: Option<&SweepConfig>, noise_reference: Option<f64>) -> Self {
        let rollout_seeds = sweep
            .map(|s| {
                (0..s.noise_levels.len())
                    .map(|l| (0..s.rollouts_per_level).map(|r| s.rollout_seed(l, r)).collect())
                    .collect()
            })
            .unwrap_or_default();
        Self {
            tool: "phasectl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            resolved_dt,
            noise_reference,
            seed_rule: "seed(level, rollout) = base_seed XOR splitmix64(splitmix64(level) XOR rotl32(rollout))".into(),
            rollout_seeds,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            source_name: path.display().to_string(),
            location: "csv".into(),
            message: format!("{other:?}"),
        },
    }
}

pub fn write_sweep_csv(stats: &[CellStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if stats.is_empty() {
        w.write_record(["strategy", "noise_level", "mean_cost", "std_cost", "min", "max", "n", "n_failed"])
            .map_err(|e| csv_err(path, e))?;
    }
    for s in stats {
        w.serialize(s).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<CellStats>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_convergence_csv(history: &[IterationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["iteration", "cost", "mu", "alpha", "accepted"])
        .map_err(|e| csv_err(path, e))?;
    for h in history {
        w.write_record([
            h.iteration.to_string(),
            format!("{:?}", h.cost),
            format!("{:?}", h.mu),
            format!("{:?}", h.alpha),
            h.accepted.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `sweep.csv`, `manifest.json`, the goal and nominal fields, and when
/// available `convergence.csv` and `raw_costs.csv`. Returns the written paths.
pub fn write_results<T: Scalar>(
    result: &SweepResult,
    manifest: &Manifest,
    problem: &Problem<T>,
    design: Option<&Design<T>>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let manifest_path = dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    written.push(manifest_path);

    let sweep_path = dir.join("sweep.csv");
    write_sweep_csv(&result.stats, &sweep_path)?;
    written.push(sweep_path);

    if manifest.config.dump_raw {
        let raw_path = dir.join("raw_costs.csv");
        let mut w = csv::Writer::from_path(&raw_path).map_err(|e| csv_err(&raw_path, e))?;
        for r in &result.raw {
            w.serialize(r).map_err(|e| csv_err(&raw_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&raw_path, e))?;
        written.push(raw_path);
    }

    let goal_path = dir.join("goal.pfld");
    write_field(&problem.goal, &goal_path, FieldFormat::Binary)?;
    written.push(goal_path);

    if let Some(d) = design {
        let conv = dir.join("convergence.csv");
        write_convergence_csv(&d.history, &conv)?;
        written.push(conv);
        let fin = dir.join("nominal_final.pfld");
        write_field(
            &PhaseField::from_vector(problem.goal.spec(), d.policy.nominal.final_state())?,
            &fin,
            FieldFormat::Binary,
        )?;
        written.push(fin);
    }
    Ok(written)
}

/// Builds the problem from `config`, designs a policy when a strategy needs
/// one, runs the sweep and writes everything under `out_dir`.
pub fn sweep_from_config(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<(SweepResult, Vec<PathBuf>)> {
    config.validate()?;
    let problem = config.problem::<f64>()?;
    let sweep = config.sweep_config();
    let design = if sweep.strategies.iter().any(|s| s.needs_design()) {
        Some(crate::pipeline::d2c_design(&problem)?)
    } else {
        None
    };
    let result = run_sweep(&problem, design.as_ref(), &sweep)?;
    let manifest = Manifest::new(config, problem.params.dt(), Some(&sweep), Some(result.noise_reference));
    let written = write_results(&result, &manifest, &problem, design.as_ref(), out_dir)?;
    Ok((result, written))
}

/// Reruns the sweep recorded in a manifest.
pub fn replay_manifest(manifest: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<(SweepResult, Vec<PathBuf>)> {
    let m = Manifest::read(manifest)?;
    sweep_from_config(&m.config, out_dir)
}
