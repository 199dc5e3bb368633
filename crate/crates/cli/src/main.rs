use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use phasectl_core::config::RunConfig;
use phasectl_core::field_io::{write_field, FieldFormat};
use phasectl_core::harness::{replay_manifest, sweep_from_config, write_convergence_csv, Manifest, Strategy};
use phasectl_core::ilqr::CostParams;
use phasectl_core::pipeline::{
    baseline_control, baseline_rollout, closed_loop_rollout, d2c_design, mpc_rollout, open_loop_rollout,
    terminal_mse, NoiseSpec,
};
use phasectl_core::{Dynamics, Error, FeedbackPolicy, GoalKind, PhaseField, Result, Trajectory};

/// Phase-field control toolkit: simulate, design, roll out and sweep.
#[derive(Debug, Parser)]
#[command(name = "phasectl", version, about)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "PHASECTL_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the model under a fixed control and write snapshots.
    Simulate(SimulateArgs),
    /// Run the D2C design and write the policy and identified model.
    Design(DesignArgs),
    /// Evaluate one strategy for a single noisy rollout.
    Rollout(RolloutArgs),
    /// Noise sweep over strategies and levels.
    Sweep(SweepArgs),
    /// Rerun a sweep from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Goal field file; overrides the configured goal.
    #[arg(long)]
    goal: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(g) = &self.goal {
            if !g.exists() {
                return Err(Error::Config(format!("goal file {} does not exist", g.display())));
            }
            cfg.goal = GoalKind::Custom;
            cfg.goal_file = Some(g.clone());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,

    #[arg(long, default_value_t = 100)]
    steps: usize,

    /// `zero`, `baseline`, or a text file with 2n² values (T block then h block).
    #[arg(long, default_value = "zero")]
    control: String,

    /// Snapshot every this many steps; falls back to the configured stride.
    #[arg(long)]
    stride: Option<usize>,

    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DesignArgs {
    #[command(flatten)]
    config: ConfigArg,

    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[command(flatten)]
    config: ConfigArg,

    /// Policy written by `design`; not needed for the baseline strategy.
    #[arg(long)]
    policy: Option<PathBuf>,

    #[arg(long, default_value = "closed-loop")]
    strategy: Strategy,

    /// Noise level as a fraction of the nominal control magnitude.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Optional path for the final state.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,

    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,

    #[arg(long)]
    rollouts: Option<usize>,

    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,

    #[arg(long)]
    seed: Option<u64>,

    /// Also write per-rollout costs.
    #[arg(long)]
    raw: bool,

    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,

    #[arg(long, short)]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_control(path: &Path, len: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                location: format!("token '{s}'"),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != len {
        return Err(Error::Config(format!(
            "control file {} has {} values, expected {len}",
            path.display(),
            values.len()
        )));
    }
    Ok(values)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let problem = cfg.problem::<f64>()?;
    let grid = problem.params.grid();
    let mut u: DVector<f64> = match args.control.as_str() {
        "zero" => DVector::zeros(grid.control_len()),
        "baseline" => baseline_control(&problem.goal).to_vector(),
        path => read_control(Path::new(path), grid.control_len())?.into(),
    };
    problem.params.clip(&mut u);
    let stride = args.stride.unwrap_or(cfg.snapshot_stride).max(1);
    create_dir(&args.out)?;
    let mut x = problem.initial.to_vector();
    let snap = |k: usize, x: &DVector<f64>| -> Result<()> {
        let field = PhaseField::from_vector(grid, x)?;
        write_field(&field, args.out.join(format!("step_{k:06}.pfld")), FieldFormat::Binary)
    };
    snap(0, &x)?;
    for k in 1..=args.steps {
        x = problem.params.step(&x, &u).map_err(|e| e.at_step(k - 1))?;
        if k % stride == 0 || k == args.steps {
            snap(k, &x)?;
        }
    }
    let field = PhaseField::from_vector(grid, &x)?;
    println!(
        "simulated {} steps (dt {:.6e}), mean {:.6e}, terminal MSE to goal {:.6e}",
        args.steps,
        problem.params.dt(),
        field.mean(),
        field.mse(&problem.goal)
    );
    Ok(())
}

fn design(args: &DesignArgs) -> Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let problem = cfg.problem::<f64>()?;
    println!("decision variables: {}", problem.decision_variables());
    let d = d2c_design(&problem)?;
    create_dir(&args.out)?;
    d.policy.write(args.out.join("policy.ppol"))?;
    d.model.write(args.out.join("model.ltvm"))?;
    write_convergence_csv(&d.history, args.out.join("convergence.csv"))?;
    write_field(&problem.goal, args.out.join("goal.pfld"), FieldFormat::Binary)?;
    let fin = PhaseField::from_vector(problem.params.grid(), d.policy.nominal.final_state())?;
    write_field(&fin, args.out.join("nominal_final.pfld"), FieldFormat::Binary)?;
    Manifest::new(&cfg, problem.params.dt(), None, None).write(args.out.join("manifest.json"))?;
    println!(
        "nominal cost {:.6e}, terminal MSE {:.6e}, {} iterations",
        d.policy.nominal.total_cost,
        terminal_mse(&d.policy.nominal, &problem.goal.to_vector()),
        d.history.iter().filter(|h| h.accepted).count()
    );
    Ok(())
}

fn rollout(args: &RolloutArgs) -> Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let problem = cfg.problem::<f64>()?;
    let noise = NoiseSpec::new(args.noise, args.seed)?;
    let cost: &CostParams<f64> = &problem.cost;
    let traj: Trajectory<f64> = if args.strategy == Strategy::Baseline {
        let mut u = baseline_control(&problem.goal).to_vector();
        problem.params.clip(&mut u);
        let reference = u.amax();
        baseline_rollout(&problem.initial, &problem.goal, &problem.params, cost, problem.horizon(), &noise, reference)?
    } else {
        let path = args
            .policy
            .as_ref()
            .ok_or_else(|| Error::Config(format!("--policy is required for strategy {}", args.strategy)))?;
        let policy = FeedbackPolicy::<f64>::read(path)?;
        if policy.nominal.initial_state().len() != problem.params.state_dim() {
            return Err(Error::Config(format!(
                "policy state dimension {} does not match the configured grid ({})",
                policy.nominal.initial_state().len(),
                problem.params.state_dim()
            )));
        }
        let reference = policy.max_nominal_control();
        match args.strategy {
            Strategy::OpenLoop => open_loop_rollout(&policy, &problem.params, cost, &noise, reference)?,
            Strategy::ClosedLoop => closed_loop_rollout(&policy, &problem.params, cost, &noise, reference)?,
            Strategy::Mpc => {
                let opts = phasectl_core::IlqrOptions {
                    horizon: policy.horizon(),
                    ..problem.ilqr.clone()
                };
                mpc_rollout(
                    policy.nominal.initial_state(),
                    &problem.params,
                    cost,
                    &opts,
                    &problem.mpc,
                    Some(&policy.nominal.controls),
                    &noise,
                    reference,
                )?
            }
            Strategy::Baseline => unreachable!(),
        }
    };
    let mse = terminal_mse(&traj, &problem.goal.to_vector());
    println!("strategy {} noise {} seed {}", args.strategy, args.noise, args.seed);
    println!("cost {:.6e}", traj.total_cost);
    println!("terminal MSE {mse:.6e}");
    if let Some(out) = &args.out {
        let fin = PhaseField::from_vector(problem.params.grid(), traj.final_state())?;
        write_field(&fin, out, FieldFormat::from_path(out))?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(l) = &args.levels {
        cfg.noise_levels = l.clone();
    }
    if let Some(r) = args.rollouts {
        cfg.rollouts = r;
    }
    if let Some(s) = &args.strategies {
        cfg.strategies = s.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.dump_raw |= args.raw;
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    let out = cfg.out_dir.clone();
    let (result, written) = sweep_from_config(&cfg, &out)?;
    print_stats(&result.stats);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let (result, written) = replay_manifest(&args.manifest, &args.out)?;
    print_stats(&result.stats);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn print_stats(stats: &[phasectl_core::harness::CellStats]) {
    println!("{:<12} {:>6} {:>14} {:>14} {:>5} {:>7}", "strategy", "level", "mean", "std", "n", "failed");
    for s in stats {
        println!(
            "{:<12} {:>6.2} {:>14.6e} {:>14.6e} {:>5} {:>7}",
            s.strategy.name(),
            s.noise_level,
            s.mean_cost,
            s.std_cost,
            s.n,
            s.n_failed
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Design(a) => design(a),
        Command::Rollout(a) => rollout(a),
        Command::Sweep(a) => sweep(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
