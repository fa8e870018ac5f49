//! `brwre`: sample random environments, solve constrained Green's functions
//! and effective conductances, simulate critical snakes, and run the
//! verification experiments.
//!
//! Exit status: 0 when all enabled assertions pass, 1 when an experiment
//! verdict fails (the failing verdicts are listed on stderr), 2 for
//! configuration or runtime errors (machine-readable JSON on stderr).

mod commands;
mod config;
mod output;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use config::ConfigFile;
use std::path::PathBuf;
use std::process::ExitCode;

use brwre::environment::{DistributionSpec, EnvSpec};
use brwre::genealogy::OffspringLaw;

#[derive(Parser)]
#[command(name = "brwre", version, about = "Critical snakes in random environments: solvers and Monte Carlo verification")]
struct Cli {
    /// Flat `key = value` config file; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, save, load and verify environment files.
    Env {
        #[command(subcommand)]
        action: EnvAction,
    },
    /// Constrained Green's function columns as CSV.
    Green(GreenArgs),
    /// Heat-kernel diagonal and transience partial sums as CSV.
    Series(SeriesArgs),
    /// Per-replicate snake local-time samples as CSV.
    Snake(SnakeArgs),
    /// Effective conductance across box sizes as CSV.
    Conductance(ConductanceArgs),
    /// Monte Carlo experiments with pass/fail verdicts.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCmd,
    },
    /// Sample a snake decomposition and re-root it along the spine.
    RerootDemo(RerootArgs),
}

#[derive(Subcommand)]
enum EnvAction {
    /// Sample an environment; print a summary and optionally save it.
    Sample(EnvSampleArgs),
    /// Load an environment file (verifies stored arrays when present).
    Load {
        #[arg(long)]
        file: PathBuf,
    },
    /// Re-derive from provenance and compare stored arrays bit-exactly.
    Verify {
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
pub struct EnvArgs {
    /// Lattice dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Interior box radius M (weights are stored on Λ_{M+1}).
    #[arg(long = "box-radius", visible_alias = "M")]
    box_radius: Option<i64>,
    /// homogeneous | conductances | traps | mixed (alias: constant).
    #[arg(long)]
    kind: Option<String>,
    /// constant | uniform | log-uniform | two-point.
    #[arg(long = "edge-dist")]
    edge_dist: Option<String>,
    #[arg(long = "edge-a")]
    edge_a: Option<f64>,
    #[arg(long = "edge-b")]
    edge_b: Option<f64>,
    #[arg(long = "edge-p")]
    edge_p: Option<f64>,
    /// constant | uniform | two-point.
    #[arg(long = "trap-dist")]
    trap_dist: Option<String>,
    #[arg(long = "trap-a")]
    trap_a: Option<f64>,
    #[arg(long = "trap-b")]
    trap_b: Option<f64>,
    #[arg(long = "trap-p")]
    trap_p: Option<f64>,
    /// Seed for the environment draw.
    #[arg(long = "env-seed", visible_alias = "seed")]
    env_seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct McArgs {
    #[arg(long)]
    replicates: Option<u64>,
    #[arg(long = "master-seed")]
    master_seed: Option<u64>,
    /// Particle budget per replicate; exceeding it censors the replicate.
    #[arg(long = "node-cap")]
    node_cap: Option<u64>,
    /// binary | geometric | probs:q0,q1,... (critical).
    #[arg(long)]
    law: Option<String>,
}

#[derive(Args, Clone, Default)]
pub struct OutArgs {
    /// JSON artifact path (reports, summaries).
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV artifact path (stdout when omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EnvSampleArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Write the environment container here.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Store explicit weight arrays in the file (verified on load).
    #[arg(long = "explicit-arrays", default_value_t = false)]
    explicit_arrays: bool,
}

#[derive(Args)]
struct GreenArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Constraint radius (default: the box radius).
    #[arg(long)]
    m: Option<i64>,
    /// Source sites, e.g. "0,0,0;2,0,0".
    #[arg(long)]
    sources: Option<String>,
}

#[derive(Args)]
struct SeriesArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long = "n-max")]
    n_max: Option<u64>,
}

#[derive(Args)]
struct SnakeArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    mc: McArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    m: Option<i64>,
    /// Also kill on the deep-trap set {π(x) ≥ R·|x|²} with this R.
    #[arg(long = "trap-threshold")]
    trap_threshold: Option<f64>,
}

#[derive(Args)]
struct ConductanceArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Box radii, e.g. "4,8,16".
    #[arg(long = "m-grid")]
    m_grid: Option<String>,
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Quenched E[L_m] against the exact solver value.
    FirstMoment {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        m: Option<i64>,
        /// Also kill on the deep-trap set with this threshold; the oracle
        /// switches to the masked solver.
        #[arg(long = "trap-threshold")]
        trap_threshold: Option<f64>,
    },
    /// Annealed E[L_m] across a grid with the d-appropriate fit.
    Scaling {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long = "m-grid")]
        m_grid: Option<String>,
        /// Fix one environment per box size instead of resampling.
        #[arg(long, default_value_t = false)]
        quenched: bool,
        /// Scale the trap-killed local time instead (annealed only).
        #[arg(long = "trap-threshold")]
        trap_threshold: Option<f64>,
    },
    /// E[L²]/E[L]² boundedness with double sampling per environment.
    SecondMoment {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long = "m-grid")]
        m_grid: Option<String>,
    },
    /// Pair-moment inequality for a single finite snake.
    ManyToTwo {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        m: Option<i64>,
        /// Start site, e.g. "2,0,0".
        #[arg(long)]
        site: Option<String>,
    },
    /// Conditional variance split against the spine occupation.
    Variance {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        m: Option<i64>,
    },
    /// Hitting frequencies of an unconditioned snake at several targets.
    Hitting {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Targets, e.g. "4,0,0,0,0;8,0,0,0,0".
        #[arg(long)]
        targets: Option<String>,
        /// Two (or more) truncation radii, e.g. "12,16".
        #[arg(long = "m-bounds")]
        m_bounds: Option<String>,
    },
}

#[derive(Args)]
struct RerootArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    mc: McArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    m: Option<i64>,
    /// Number of re-rooting steps to apply.
    #[arg(long)]
    steps: Option<u64>,
}

/// Environment resolved from flags, config file and defaults.
pub struct ResolvedEnv {
    pub d: usize,
    pub box_radius: i64,
    pub spec: EnvSpec,
    pub seed: u64,
    pub kind_name: String,
}

fn build_dist(
    name: &str,
    a: Option<f64>,
    b: Option<f64>,
    p: Option<f64>,
    what: &str,
) -> Result<DistributionSpec> {
    let need = |v: Option<f64>, field: &str| {
        v.ok_or_else(|| anyhow!("{what} distribution {name:?} needs --{what}-{field}"))
    };
    match name {
        "constant" => Ok(DistributionSpec::constant(need(a, "a")?)),
        "uniform" => Ok(DistributionSpec::uniform(need(a, "a")?, need(b, "b")?)),
        "log-uniform" | "log_uniform" => {
            Ok(DistributionSpec::log_uniform(need(a, "a")?, need(b, "b")?))
        }
        "two-point" | "two_point" => {
            Ok(DistributionSpec::two_point(need(a, "a")?, need(b, "b")?, need(p, "p")?))
        }
        other => bail!("unknown {what} distribution {other:?}"),
    }
}

impl EnvArgs {
    pub fn resolve(&self, cfg: &ConfigFile) -> Result<ResolvedEnv> {
        let d = cfg.resolve_or(self.d, "d", 3usize)?;
        let box_radius = cfg.resolve_or(self.box_radius, "box_radius", 6i64)?;
        let kind = cfg
            .resolve(self.kind.clone(), "kind")?
            .unwrap_or_else(|| "homogeneous".to_string());
        let edge_dist = cfg.resolve(self.edge_dist.clone(), "edge_dist")?;
        let edge_a = cfg.resolve(self.edge_a, "edge_a")?;
        let edge_b = cfg.resolve(self.edge_b, "edge_b")?;
        let edge_p = cfg.resolve(self.edge_p, "edge_p")?;
        let trap_dist = cfg.resolve(self.trap_dist.clone(), "trap_dist")?;
        let trap_a = cfg.resolve(self.trap_a, "trap_a")?;
        let trap_b = cfg.resolve(self.trap_b, "trap_b")?;
        let trap_p = cfg.resolve(self.trap_p, "trap_p")?;
        let seed = cfg.resolve_or(self.env_seed, "env_seed", 0u64)?;

        let edge = || -> Result<DistributionSpec> {
            match &edge_dist {
                Some(name) => build_dist(name, edge_a, edge_b, edge_p, "edge"),
                None => Ok(DistributionSpec::uniform(0.5, 2.0)),
            }
        };
        let trap = || -> Result<DistributionSpec> {
            match &trap_dist {
                Some(name) => build_dist(name, trap_a, trap_b, trap_p, "trap"),
                None => Ok(DistributionSpec::uniform(0.0, 0.9)),
            }
        };
        let spec = match kind.as_str() {
            "homogeneous" | "constant" => EnvSpec::homogeneous(),
            "conductances" => EnvSpec::conductances(edge()?),
            "traps" => EnvSpec::traps(trap()?),
            "mixed" => EnvSpec::mixed(edge()?, trap()?),
            other => bail!("unknown environment kind {other:?}"),
        };
        spec.validate().map_err(|e| anyhow!("invalid environment spec: {e}"))?;
        Ok(ResolvedEnv { d, box_radius, spec, seed, kind_name: kind })
    }
}

impl McArgs {
    pub fn resolve(&self, cfg: &ConfigFile, default_reps: u64) -> Result<(brwre::experiments::McParams, OffspringLaw, String)> {
        let replicates = cfg.resolve_or(self.replicates, "replicates", default_reps)?;
        let master_seed = cfg.resolve_or(self.master_seed, "master_seed", 0u64)?;
        let node_cap = cfg.resolve_or(self.node_cap, "node_cap", 10_000_000u64)?;
        let law_name = cfg.resolve(self.law.clone(), "law")?.unwrap_or_else(|| "binary".into());
        let law = match law_name.as_str() {
            "binary" => OffspringLaw::binary(),
            "geometric" => OffspringLaw::geometric_half(),
            other => {
                let Some(list) = other.strip_prefix("probs:") else {
                    bail!("unknown offspring law {other:?} (binary | geometric | probs:q0,q1,...)");
                };
                let probs: Vec<f64> = list
                    .split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|e| anyhow!("bad probability {x:?}: {e}")))
                    .collect::<Result<_>>()?;
                OffspringLaw::from_probs(&probs).map_err(|e| anyhow!("invalid offspring law: {e}"))?
            }
        };
        Ok((
            brwre::experiments::McParams { replicates, master_seed, node_cap },
            law,
            law_name,
        ))
    }
}

impl OutArgs {
    pub fn resolve(&self, cfg: &ConfigFile) -> Result<(Option<PathBuf>, Option<PathBuf>)> {
        let out = match &self.out {
            Some(p) => Some(p.clone()),
            None => cfg.get_string("out").map(PathBuf::from),
        };
        let csv = match &self.csv {
            Some(p) => Some(p.clone()),
            None => cfg.get_string("csv").map(PathBuf::from),
        };
        Ok((out, csv))
    }
}

fn init_workers() {
    if let Ok(raw) = std::env::var("BRWRE_WORKERS") {
        if let Ok(n) = raw.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match ConfigFile::load(path) {
            Ok(c) => c,
            Err(e) => return config_error(e),
        },
        None => ConfigFile::empty(),
    };
    match dispatch(&cli.command, &cfg) {
        Ok(commands::Outcome::Pass) => ExitCode::SUCCESS,
        Ok(commands::Outcome::AssertionsFailed(failed)) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": "assertions", "failed_verdicts": failed })
            );
            ExitCode::from(1)
        }
        Err(e) => config_error(e),
    }
}

fn config_error(e: anyhow::Error) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": "config", "message": format!("{e:#}") }));
    ExitCode::from(2)
}

fn dispatch(cmd: &Command, cfg: &ConfigFile) -> Result<commands::Outcome> {
    match cmd {
        Command::Env { action } => match action {
            EnvAction::Sample(args) => {
                commands::env_sample(cfg, &args.env, &args.out, args.save.as_deref(), args.explicit_arrays)
            }
            EnvAction::Load { file } => commands::env_load(file),
            EnvAction::Verify { file } => commands::env_verify(file),
        },
        Command::Green(args) => {
            commands::green(cfg, &args.env, &args.out, args.m, args.sources.clone())
        }
        Command::Series(args) => commands::series(cfg, &args.env, &args.out, args.n_max),
        Command::Snake(args) => {
            commands::snake(cfg, &args.env, &args.mc, &args.out, args.m, args.trap_threshold)
        }
        Command::Conductance(args) => {
            commands::conductance(cfg, &args.env, &args.out, args.m_grid.clone())
        }
        Command::Experiment { which } => match which {
            ExperimentCmd::FirstMoment { env, mc, out, m, trap_threshold } => {
                commands::exp_first_moment(cfg, env, mc, out, *m, *trap_threshold)
            }
            ExperimentCmd::Scaling { env, mc, out, m_grid, quenched, trap_threshold } => {
                commands::exp_scaling(cfg, env, mc, out, m_grid.clone(), *quenched, *trap_threshold)
            }
            ExperimentCmd::SecondMoment { env, mc, out, m_grid } => {
                commands::exp_second_moment(cfg, env, mc, out, m_grid.clone())
            }
            ExperimentCmd::ManyToTwo { env, mc, out, m, site } => {
                commands::exp_many_to_two(cfg, env, mc, out, *m, site.clone())
            }
            ExperimentCmd::Variance { env, mc, out, m } => {
                commands::exp_variance(cfg, env, mc, out, *m)
            }
            ExperimentCmd::Hitting { env, mc, out, targets, m_bounds } => {
                commands::exp_hitting(cfg, env, mc, out, targets.clone(), m_bounds.clone())
            }
        },
        Command::RerootDemo(args) => {
            commands::reroot_demo(cfg, &args.env, &args.mc, &args.out, args.m, args.steps)
        }
    }
}
