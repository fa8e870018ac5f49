//! Subcommand implementations.

use crate::config::{parse_grid, parse_sites, ConfigFile};
use crate::output::{f64_field, write_json, CsvWriter, ResolvedConfig};
use crate::{EnvArgs, McArgs, OutArgs, ResolvedEnv};
use anyhow::{anyhow, bail, Context, Result};
use std::path::Path;

use brwre::dirichlet::effective_conductance;
use brwre::environment::{format, Environment};
use brwre::experiments::{
    self, EnvSampling, McParams,
};
use brwre::kernel::{transience_series, GreenTable};
use brwre::report::ExperimentReport;
use brwre::rng::{replicate_rng, stream};
use brwre::snake::{sample_decomposition, sample_local_time, KillRule};

pub enum Outcome {
    Pass,
    AssertionsFailed(Vec<String>),
}

fn base_config(subcommand: &str, env: &ResolvedEnv) -> ResolvedConfig {
    let mut rc = ResolvedConfig::new(subcommand);
    rc.set("d", env.d);
    rc.set("box_radius", env.box_radius);
    rc.set("kind", &env.kind_name);
    rc.set("env_seed", env.seed);
    rc.set("spec", serde_json::to_string(&env.spec).unwrap());
    rc
}

fn add_mc(rc: &mut ResolvedConfig, params: &McParams, law_name: &str) {
    rc.set("replicates", params.replicates);
    rc.set("master_seed", params.master_seed);
    rc.set("node_cap", params.node_cap);
    rc.set("law", law_name);
}

fn sample_env(env: &ResolvedEnv) -> Result<Environment> {
    env.spec
        .sample(env.d, env.box_radius, env.seed)
        .map_err(|e| anyhow!("environment construction failed: {e}"))
}

fn env_summary(env: &Environment) -> serde_json::Value {
    let origin = vec![0i64; env.d()];
    serde_json::json!({
        "d": env.d(),
        "box_radius": env.interior().radius(),
        "kind": serde_json::to_value(env.kind()).unwrap(),
        "spec": serde_json::to_value(env.spec()).unwrap(),
        "seed": env.seed(),
        "shift": env.shift_offset(),
        "pi_origin": env.pi(&origin).unwrap(),
        "mean_pi_analytic": env.spec().mean_pi(env.d()),
        "sites": env.interior().len(),
    })
}

pub fn env_sample(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    out_args: &OutArgs,
    save: Option<&Path>,
    explicit_arrays: bool,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (out, _) = out_args.resolve(cfg)?;
    let env = sample_env(&resolved)?;
    let save = match save {
        Some(p) => Some(p.to_path_buf()),
        None => cfg.get_string("save").map(std::path::PathBuf::from),
    };
    if let Some(path) = &save {
        format::save(&env, path, explicit_arrays)
            .with_context(|| format!("saving environment to {}", path.display()))?;
    }
    let mut rc = base_config("env_sample", &resolved);
    rc.set("explicit_arrays", explicit_arrays);
    if let Some(p) = &save {
        rc.set("save", p.display());
    }
    write_json(
        out.as_deref(),
        &serde_json::json!({ "config": rc.to_json(), "environment": env_summary(&env) }),
    )?;
    Ok(Outcome::Pass)
}

pub fn env_load(file: &Path) -> Result<Outcome> {
    let env = format::load(file).with_context(|| format!("loading {}", file.display()))?;
    write_json(None, &serde_json::json!({ "loaded": file.display().to_string(), "environment": env_summary(&env) }))?;
    Ok(Outcome::Pass)
}

pub fn env_verify(file: &Path) -> Result<Outcome> {
    format::verify(file).with_context(|| format!("verifying {}", file.display()))?;
    write_json(None, &serde_json::json!({ "verified": file.display().to_string() }))?;
    Ok(Outcome::Pass)
}

pub fn green(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    out_args: &OutArgs,
    m: Option<i64>,
    sources: Option<String>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (_, csv) = out_args.resolve(cfg)?;
    let m = cfg.resolve_or(m, "m", resolved.box_radius)?;
    let env = sample_env(&resolved)?;
    let sources_raw = match sources {
        Some(s) => s,
        None => cfg
            .get_string("sources")
            .unwrap_or_else(|| vec!["0"; resolved.d].join(",")),
    };
    let source_sites = parse_sites(&sources_raw, resolved.d)?;
    let table = GreenTable::compute(&env, m, &source_sites)
        .map_err(|e| anyhow!("green solve failed: {e}"))?;

    let mut rc = base_config("green", &resolved);
    rc.set("m", m);
    rc.set("sources", &sources_raw);
    let d = resolved.d;
    let mut cols: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    cols.extend((1..=d).map(|k| format!("y{k}")));
    cols.push("g_value".into());
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut w = CsvWriter::create(csv.as_deref(), &rc, &col_refs)?;
    for column in &table.columns {
        let mut row_prefix: Vec<String> = column.source.iter().map(|c| c.to_string()).collect();
        row_prefix.resize(d, String::new());
        let box_m = column.box_m.clone();
        let mut err = None;
        box_m.for_each_site(|i, y| {
            if err.is_some() {
                return;
            }
            let mut row = row_prefix.clone();
            row.extend(y.iter().map(|c| c.to_string()));
            row.push(f64_field(column.values[i]));
            if let Err(e) = w.row(&row) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    w.finish()?;
    Ok(Outcome::Pass)
}

pub fn series(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    out_args: &OutArgs,
    n_max: Option<u64>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (_, csv) = out_args.resolve(cfg)?;
    let n_max = cfg.resolve_or(n_max, "n_max", 256u64)?;
    let env = sample_env(&resolved)?;
    let s = transience_series(&env, n_max).map_err(|e| anyhow!("series failed: {e}"))?;
    let mut rc = base_config("series", &resolved);
    rc.set("n_max", n_max);
    rc.set("contamination_free_up_to", s.contamination_free_up_to);
    let mut w = CsvWriter::create(csv.as_deref(), &rc, &["n", "p_diag", "partial_sum", "escaped_mass"])?;
    for n in 0..=n_max as usize {
        w.row(&[
            n.to_string(),
            f64_field(s.diagonal[n]),
            f64_field(s.partial_sums[n]),
            f64_field(s.escaped_mass[n]),
        ])?;
    }
    w.finish()?;
    Ok(Outcome::Pass)
}

pub fn snake(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m: Option<i64>,
    trap_threshold: Option<f64>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 10_000)?;
    let (_, csv) = out_args.resolve(cfg)?;
    let m = cfg.resolve_or(m, "m", resolved.box_radius)?;
    let trap_threshold = cfg.resolve(trap_threshold, "trap_threshold")?;
    let env = sample_env(&resolved)?;
    let rule = match trap_threshold {
        Some(threshold) => KillRule::BoxAndTraps { m, threshold },
        None => KillRule::Box { m },
    };
    let mut rc = base_config("snake", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m", m);
    if let Some(t) = trap_threshold {
        rc.set("trap_threshold", t);
    }
    let mut w = CsvWriter::create(
        csv.as_deref(),
        &rc,
        &["replicate", "value", "particle_count", "spine_exit_step", "censored"],
    )?;
    for rep in 0..params.replicates {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, rep);
        let s = sample_local_time(&env, &law, rule, &mut rng, params.node_cap)
            .map_err(|e| anyhow!("snake replicate {rep} failed: {e}"))?;
        w.row(&[
            rep.to_string(),
            f64_field(s.value),
            s.particle_count.to_string(),
            s.spine_exit_step.to_string(),
            s.censored.to_string(),
        ])?;
    }
    w.finish()?;
    Ok(Outcome::Pass)
}

pub fn conductance(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    out_args: &OutArgs,
    m_grid: Option<String>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (_, csv) = out_args.resolve(cfg)?;
    let grid_raw = match m_grid {
        Some(g) => g,
        None => cfg.get_string("m_grid").unwrap_or_else(|| "4,8,16".into()),
    };
    let grid = parse_grid(&grid_raw)?;
    let env = sample_env(&resolved)?;
    let mut rc = base_config("conductance", &resolved);
    rc.set("m_grid", &grid_raw);
    let mut w = CsvWriter::create(csv.as_deref(), &rc, &["m", "c_value", "residual"])?;
    for &m in &grid {
        let c = effective_conductance(&env, m).map_err(|e| anyhow!("conductance solve failed: {e}"))?;
        w.row(&[m.to_string(), f64_field(c.value), f64_field(c.info.residual)])?;
    }
    w.finish()?;
    Ok(Outcome::Pass)
}

/// Writes the report artifact (JSON + optional CSV) and converts verdicts to
/// the exit outcome.
fn emit_report(
    report: &ExperimentReport,
    rc: &ResolvedConfig,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<Outcome> {
    write_json(
        out,
        &serde_json::json!({ "config": rc.to_json(), "report": report }),
    )?;
    if let Some(path) = csv {
        let mut w = CsvWriter::create(Some(path), rc, &["experiment", "m", "statistic", "value"])?;
        for line in report.to_long_csv().lines().skip(1) {
            w.row(&line.split(',').map(String::from).collect::<Vec<_>>())?;
        }
        w.finish()?;
    }
    if report.passed() {
        Ok(Outcome::Pass)
    } else {
        let mut failed: Vec<String> =
            report.verdicts.iter().filter(|v| !v.pass).map(|v| v.name.clone()).collect();
        if !report.valid {
            failed.push("report_invalid".into());
        }
        Ok(Outcome::AssertionsFailed(failed))
    }
}

pub fn exp_first_moment(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m: Option<i64>,
    trap_threshold: Option<f64>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 100_000)?;
    let (out, csv) = out_args.resolve(cfg)?;
    let m = cfg.resolve_or(m, "m", resolved.box_radius)?;
    let trap_threshold = cfg.resolve(trap_threshold, "trap_threshold")?;
    let env = sample_env(&resolved)?;
    let report = match trap_threshold {
        Some(threshold) => experiments::trap_first_moment_check(&env, m, threshold, &law, &params)?,
        None => experiments::first_moment_check(&env, m, &law, &params)?,
    };
    let mut rc = base_config("experiment_first_moment", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m", m);
    if let Some(t) = trap_threshold {
        rc.set("trap_threshold", t);
    }
    emit_report(&report, &rc, out.as_deref(), csv.as_deref())
}

pub fn exp_scaling(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m_grid: Option<String>,
    quenched: bool,
    trap_threshold: Option<f64>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 2_500)?;
    let (out, csv) = out_args.resolve(cfg)?;
    let grid_raw = match m_grid {
        Some(g) => g,
        None => cfg.get_string("m_grid").unwrap_or_else(|| {
            if resolved.d == 5 { "4,8,16".into() } else { "4,8,16,32".into() }
        }),
    };
    let quenched = quenched || cfg.get::<bool>("quenched")?.unwrap_or(false);
    let trap_threshold = cfg.resolve(trap_threshold, "trap_threshold")?;
    let grid = parse_grid(&grid_raw)?;
    let report = match trap_threshold {
        Some(threshold) => {
            if quenched {
                anyhow::bail!("trap-killed scaling is annealed only");
            }
            experiments::trap_scaling_study(&resolved.spec, resolved.d, &law, &grid, threshold, &params)?
        }
        None => {
            let mode = if quenched { EnvSampling::Quenched } else { EnvSampling::Annealed };
            experiments::scaling_study(&resolved.spec, resolved.d, &law, &grid, &params, mode)?
        }
    };
    let mut rc = base_config("experiment_scaling", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m_grid", &grid_raw);
    rc.set("quenched", quenched);
    if let Some(t) = trap_threshold {
        rc.set("trap_threshold", t);
    }
    emit_report(&report, &rc, out.as_deref(), csv.as_deref())
}

pub fn exp_second_moment(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m_grid: Option<String>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 3_000)?;
    let (out, csv) = out_args.resolve(cfg)?;
    let grid_raw = match m_grid {
        Some(g) => g,
        None => cfg.get_string("m_grid").unwrap_or_else(|| "4,8,16".into()),
    };
    let grid = parse_grid(&grid_raw)?;
    let report =
        experiments::second_moment_ratio(&resolved.spec, resolved.d, &law, &grid, &params)?;
    let mut rc = base_config("experiment_second_moment", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m_grid", &grid_raw);
    emit_report(&report, &rc, out.as_deref(), csv.as_deref())
}

pub fn exp_many_to_two(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m: Option<i64>,
    site: Option<String>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 100_000)?;
    let (out, csv) = out_args.resolve(cfg)?;
    let m = cfg.resolve_or(m, "m", resolved.box_radius)?;
    let site_raw = match site {
        Some(s) => s,
        None => cfg.get_string("site").unwrap_or_else(|| {
            let mut v = vec!["0".to_string(); resolved.d];
            v[0] = "2".into();
            v.join(",")
        }),
    };
    let x = parse_sites(&site_raw, resolved.d)?
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("empty site"))?;
    let env = sample_env(&resolved)?;
    let report = experiments::many_to_two_check(&env, m, &x, &law, &params)?;
    let mut rc = base_config("experiment_many_to_two", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m", m);
    rc.set("site", &site_raw);
    emit_report(&report, &rc, out.as_deref(), csv.as_deref())
}

pub fn exp_variance(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m: Option<i64>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 20_000)?;
    let (out, csv) = out_args.resolve(cfg)?;
    let m = cfg.resolve_or(m, "m", resolved.box_radius)?;
    let env = sample_env(&resolved)?;
    let report = experiments::variance_decomposition(&env, m, &law, &params)?;
    let mut rc = base_config("experiment_variance", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m", m);
    emit_report(&report, &rc, out.as_deref(), csv.as_deref())
}

pub fn exp_hitting(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    targets: Option<String>,
    m_bounds: Option<String>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 1_000_000)?;
    let (out, csv) = out_args.resolve(cfg)?;
    let targets_raw = match targets {
        Some(t) => t,
        None => cfg.get_string("targets").ok_or_else(|| anyhow!("--targets is required"))?,
    };
    let bounds_raw = match m_bounds {
        Some(b) => b,
        None => cfg.get_string("m_bounds").unwrap_or_else(|| "12,16".into()),
    };
    let target_sites = parse_sites(&targets_raw, resolved.d)?;
    let bounds = parse_grid(&bounds_raw)?;
    let report = experiments::hitting_study(
        &resolved.spec,
        resolved.d,
        &law,
        &target_sites,
        &bounds,
        &params,
    )?;
    let mut rc = base_config("experiment_hitting", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("targets", &targets_raw);
    rc.set("m_bounds", &bounds_raw);
    emit_report(&report, &rc, out.as_deref(), csv.as_deref())
}

pub fn reroot_demo(
    cfg: &ConfigFile,
    env_args: &EnvArgs,
    mc_args: &McArgs,
    out_args: &OutArgs,
    m: Option<i64>,
    steps: Option<u64>,
) -> Result<Outcome> {
    let resolved = env_args.resolve(cfg)?;
    let (params, law, law_name) = mc_args.resolve(cfg, 1)?;
    let (out, _) = out_args.resolve(cfg)?;
    let m = cfg.resolve_or(m, "m", (resolved.box_radius - 2).max(0))?;
    let steps = cfg.resolve_or(steps, "steps", 2u64)?;
    let env = sample_env(&resolved)?;

    // Walk seeds until the spine is long enough to apply every step.
    let mut demo = None;
    for idx in 0..1_000u64 {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, idx);
        let d = sample_decomposition(&env, &law, KillRule::Box { m }, &mut rng, params.node_cap)
            .map_err(|e| anyhow!("decomposition failed: {e}"))?;
        if d.spine.len() as u64 > steps {
            demo = Some((idx, d));
            break;
        }
    }
    let (replicate, mut decomp) =
        demo.ok_or_else(|| anyhow!("no replicate with spine length > {steps}; increase m"))?;

    let mut stages = Vec::new();
    let origin = vec![0i64; resolved.d];
    for step in 0..=steps {
        stages.push(serde_json::json!({
            "step": step,
            "spine_len": decomp.spine.len(),
            "spine_head": decomp.spine.iter().take(4).collect::<Vec<_>>(),
            "trees": decomp.trees.len(),
            "visits_origin": decomp.visits(&origin),
            "env_radius": decomp.env.interior().radius(),
        }));
        if step < steps {
            // Invariant: re-rooting drops the head and shifts everything by
            // the old second spine position.
            let expect_head = decomp.spine[1].clone();
            decomp = decomp.reroot().map_err(|e| anyhow!("re-rooting failed: {e}"))?;
            for (tree, spine_pos) in decomp.trees.iter().zip(&decomp.spine) {
                if &tree.labels[0] != spine_pos {
                    bail!("tree root label diverged from spine position after re-rooting");
                }
            }
            let shifted_origin: Vec<i64> = expect_head.iter().map(|c| -c).collect();
            let _ = shifted_origin;
            if decomp.spine[0] != origin {
                bail!("re-rooted spine must start at the origin");
            }
        }
    }

    let mut rc = base_config("reroot_demo", &resolved);
    add_mc(&mut rc, &params, &law_name);
    rc.set("m", m);
    rc.set("steps", steps);
    rc.set("replicate", replicate);
    write_json(
        out.as_deref(),
        &serde_json::json!({ "config": rc.to_json(), "stages": stages }),
    )?;
    Ok(Outcome::Pass)
}
