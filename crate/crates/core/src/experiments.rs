//! Monte Carlo harnesses checking the snake's moment identities, scaling
//! laws and inequalities against exact values from the kernel module.
//!
//! Annealed quantities resample the environment per replicate; quenched
//! harnesses take a fixed environment. Per-replicate seeds derive from the
//! master seed and the replicate index, and aggregation runs in replicate
//! order, so results never depend on worker count.

use crate::environment::{EnvError, EnvSpec, Environment};
use crate::genealogy::{OffspringLaw, RootLaw};
use crate::kernel::{green_constrained, KernelError};
use crate::lattice::norm_sq;
use crate::report::{linear_fit, summarize, ExperimentReport, MStat, Verdict};
use crate::rng::{derive_seed, replicate_rng, stream};
use crate::snake::{
    finite_snake_hits, sample_branch_local_time, sample_local_time, sample_local_time_multi,
    spine_local_times, KillRule, SnakeError,
};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("m grid must be increasing and have at least {need} entries for this mode, got {got:?}")]
    BadGrid { need: usize, got: Vec<i64> },
    #[error("scaling modes are defined for d in {{3,4,5}}, got d = {0}")]
    BadDimension(usize),
    #[error("hitting studies need at least two targets and two box bounds")]
    BadHittingSetup,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Snake(#[from] SnakeError),
}

/// Common Monte Carlo knobs.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct McParams {
    pub replicates: u64,
    pub master_seed: u64,
    pub node_cap: u64,
}

impl Default for McParams {
    fn default() -> Self {
        McParams { replicates: 100_000, master_seed: 0, node_cap: 10_000_000 }
    }
}

impl McParams {
    pub fn new(replicates: u64, master_seed: u64) -> Self {
        McParams { replicates, master_seed, node_cap: 10_000_000 }
    }
}

/// Deterministic parallel map: results come back in index order regardless
/// of scheduling.
pub fn par_map_indexed<T: Send, E: Send>(
    n: u64,
    f: impl Fn(u64) -> Result<T, E> + Sync + Send,
) -> Result<Vec<T>, E> {
    (0..n).into_par_iter().map(f).collect()
}

/// The exact quenched first moment of the constrained local time,
/// `σ² Σ_{x∈Λ_m} π_ω(x) g^m(0,x)² + (1−σ²) g^m(0,0)`.
///
/// Each attached tree's generation-0 node contributes with weight 1 while
/// all later generations carry the shifted-law mean `σ²`; the trailing term
/// accounts for that and vanishes exactly when `σ² = 1`.
pub fn quenched_first_moment_oracle(
    env: &Environment,
    m: i64,
    law: &OffspringLaw,
) -> Result<f64, KernelError> {
    let origin = vec![0i64; env.d()];
    let col = green_constrained(env, m, &origin)?;
    let mut sum = 0.0;
    col.box_m.clone().for_each_site(|i, x| {
        let pi = env.pi_idx(env.storage().index(x).unwrap());
        sum += pi * col.values[i] * col.values[i];
    });
    let g00 = col.value_at(&origin).unwrap();
    Ok(law.sigma2() * sum + (1.0 - law.sigma2()) * g00)
}

/// The exact mean visit count at `target` of one finite snake from `start`
/// with the shifted root law:
/// `σ² π(target) g^m(start, target) + (1−σ²) 1{start = target}`.
pub fn branch_mean_oracle(
    env: &Environment,
    green_from_target: &crate::kernel::GreenColumn,
    start: &[i64],
    target: &[i64],
    sigma2: f64,
) -> Result<f64, KernelError> {
    let g = green_from_target
        .value_at(start)
        .ok_or(KernelError::OutsideBox { site: start.to_vec(), m: green_from_target.m })?;
    let pi_t = env.pi(target)?;
    let same = if start == target { 1.0 } else { 0.0 };
    Ok(sigma2 * pi_t * g + (1.0 - sigma2) * same)
}

fn z_score(mean: f64, oracle: f64, se: f64) -> f64 {
    if se == 0.0 {
        if (mean - oracle).abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (mean - oracle) / se
    }
}

fn mstat_with_oracle(m: i64, values: &[f64], censored: u64, oracle: Option<f64>) -> MStat {
    let (mean, var, se) = summarize(values);
    let z = oracle.map(|o| z_score(mean, o, se));
    MStat {
        m,
        n: values.len() as u64,
        mean,
        variance: var,
        std_error: se,
        censored_rate: censored as f64 / values.len().max(1) as f64,
        oracle,
        z_score: z,
    }
}

/// Quenched first-moment identity: the Monte Carlo mean of the constrained
/// local time against the exact `σ² Σ π g²` from one linear solve.
pub fn first_moment_check(
    env: &Environment,
    m: i64,
    law: &OffspringLaw,
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "first_moment",
        serde_json::json!({
            "d": env.d(), "m": m, "spec": env.spec(), "env_seed": env.seed(),
            "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );
    let oracle = quenched_first_moment_oracle(env, m, law)?;
    let rule = KillRule::Box { m };
    let samples = par_map_indexed(params.replicates, |rep| {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, rep);
        sample_local_time(env, law, rule, &mut rng, params.node_cap)
    })?;
    let censored = samples.iter().filter(|s| s.censored).count() as u64;
    let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let stat = mstat_with_oracle(m, &values, censored, Some(oracle));
    let z = stat.z_score.unwrap();
    let censored_rate = stat.censored_rate;
    report.per_m.push(stat);
    report.verdicts.push(Verdict::le(
        "first_moment_z_score",
        z.abs(),
        3.0,
        format!("MC mean vs exact {oracle:.6}"),
    ));
    if censored_rate > 0.01 {
        report.valid = false;
        report.notes.push(format!("censoring rate {censored_rate} exceeds 1%: report invalid"));
    }
    Ok(report)
}

/// The exact quenched first moment of the trap-killed local time: same as
/// [`quenched_first_moment_oracle`] but with the walk killed on the
/// deep-trap set as well, using the masked Green's function.
pub fn trap_killed_first_moment_oracle(
    env: &Environment,
    m: i64,
    threshold: f64,
    law: &OffspringLaw,
) -> Result<f64, KernelError> {
    let origin = vec![0i64; env.d()];
    let col = crate::kernel::green_constrained_trap_killed(env, m, threshold, &origin)?;
    let mut sum = 0.0;
    col.box_m.clone().for_each_site(|i, x| {
        let pi = env.pi_idx(env.storage().index(x).unwrap());
        sum += pi * col.values[i] * col.values[i];
    });
    let g00 = col.value_at(&origin).unwrap();
    Ok(law.sigma2() * sum + (1.0 - law.sigma2()) * g00)
}

/// Quenched first-moment identity for the trap-killed snake: Monte Carlo
/// under the box-and-traps kill rule against the masked-solver value.
pub fn trap_first_moment_check(
    env: &Environment,
    m: i64,
    threshold: f64,
    law: &OffspringLaw,
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "trap_first_moment",
        serde_json::json!({
            "d": env.d(), "m": m, "threshold": threshold, "spec": env.spec(),
            "env_seed": env.seed(), "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );
    let oracle = trap_killed_first_moment_oracle(env, m, threshold, law)?;
    let rule = KillRule::BoxAndTraps { m, threshold };
    let samples = par_map_indexed(params.replicates, |rep| {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, rep);
        sample_local_time(env, law, rule, &mut rng, params.node_cap)
    })?;
    let censored = samples.iter().filter(|s| s.censored).count() as u64;
    let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let stat = mstat_with_oracle(m, &values, censored, Some(oracle));
    let z = stat.z_score.unwrap();
    report.per_m.push(stat);
    report.notes.push(format!(
        "deep-trap fraction of the box: {:.6}",
        env.trap_set_fraction(m, threshold)?
    ));
    report.verdicts.push(Verdict::le(
        "trap_first_moment_z_score",
        z.abs(),
        3.0,
        format!("MC mean vs masked-solver exact {oracle:.6}"),
    ));
    Ok(report)
}

/// Annealed scaling of the trap-killed local time across a grid, with the
/// deep-trap fraction of each box reported (it must shrink as the box
/// grows for integrable trap laws) and the growth fit of the dimension.
pub fn trap_scaling_study(
    spec: &EnvSpec,
    d: usize,
    law: &OffspringLaw,
    m_grid: &[i64],
    threshold: f64,
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    if !(3..=5).contains(&d) {
        return Err(ExperimentError::BadDimension(d));
    }
    let needed = if d == 5 { 2 } else { 4 };
    if m_grid.len() < needed || m_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ExperimentError::BadGrid { need: needed, got: m_grid.to_vec() });
    }
    spec.validate()?;
    let mut report = ExperimentReport::new(
        "trap_scaling",
        serde_json::json!({
            "d": d, "spec": spec, "m_grid": m_grid, "threshold": threshold,
            "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );

    let mut means = Vec::new();
    let mut ratios = Vec::new();
    let mut fractions = Vec::new();
    for (m_idx, &m) in m_grid.iter().enumerate() {
        let rule = KillRule::BoxAndTraps { m, threshold };
        let rows = par_map_indexed(params.replicates, |rep| {
            let idx = (m_idx as u64) << 40 | rep;
            let seed = derive_seed(params.master_seed, stream::ENVIRONMENT, idx);
            let env = spec.sample(d, m, seed)?;
            let mut rng = replicate_rng(params.master_seed, stream::SNAKE, idx);
            let s = sample_local_time(&env, law, rule, &mut rng, params.node_cap)?;
            let fraction = env.trap_set_fraction(m, threshold)?;
            Ok::<_, ExperimentError>((s.value, fraction, s.censored))
        })?;
        let censored = rows.iter().filter(|r| r.2).count() as u64;
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mean_fraction = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        let (mean, _var, _se) = summarize(&values);
        let mean_sq = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
        means.push(mean);
        ratios.push(mean_sq / (mean * mean));
        fractions.push(mean_fraction);
        report.per_m.push(mstat_with_oracle(m, &values, censored, None));
        report.notes.push(format!(
            "m={m}: deep-trap fraction {mean_fraction:.6}, E[Z^2]/E[Z]^2 = {:.4}",
            mean_sq / (mean * mean)
        ));
    }

    report.verdicts.push(Verdict::le(
        "trap_fraction_vanishes",
        fractions[fractions.len() - 1],
        fractions[0] + 1e-12,
        format!("fractions over the grid: {fractions:?}"),
    ));
    let max_ratio = ratios.iter().cloned().fold(f64::MIN, f64::max);
    report.verdicts.push(Verdict::le(
        "trap_second_moment_ratio_bounded",
        max_ratio,
        10.0 * ratios[0],
        format!("ratios across the grid: {ratios:?}"),
    ));
    match d {
        3 => {
            let xs: Vec<f64> = m_grid.iter().map(|&m| m as f64).collect();
            let mut fit = linear_fit(&xs, &means);
            fit.model = "mean trap-killed local time vs m".into();
            report.verdicts.push(Verdict::ge("trap_linear_fit_r_squared", fit.r_squared, 0.9, ""));
            report.verdicts.push(Verdict::ge("trap_fit_slope_positive", fit.slope, 0.0, ""));
            report.fits.push(fit);
        }
        4 => {
            let xs: Vec<f64> = m_grid.iter().map(|&m| (m as f64).ln()).collect();
            let mut fit = linear_fit(&xs, &means);
            fit.model = "mean trap-killed local time vs log m".into();
            report.verdicts.push(Verdict::ge("trap_log_fit_r_squared", fit.r_squared, 0.9, ""));
            report.fits.push(fit);
        }
        _ => {
            let last = means[means.len() - 1];
            let prev = means[means.len() - 2];
            report.verdicts.push(Verdict::le("trap_bounded_growth_ratio", last / prev, 1.2, ""));
        }
    }
    Ok(report)
}

/// How an annealed study draws its environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSampling {
    /// Fresh environment every replicate (annealed mean).
    Annealed,
    /// One environment per box size, shared by all replicates.
    Quenched,
}

/// Samples one local time in a per-replicate environment.
fn annealed_sample(
    spec: &EnvSpec,
    d: usize,
    m: i64,
    m_idx: usize,
    rep: u64,
    law: &OffspringLaw,
    params: &McParams,
    mode: EnvSampling,
    shared: Option<&Environment>,
) -> Result<crate::snake::LocalTimeSample, ExperimentError> {
    let mut rng = replicate_rng(params.master_seed, stream::SNAKE, (m_idx as u64) << 40 | rep);
    match shared {
        Some(env) => Ok(sample_local_time(env, law, KillRule::Box { m }, &mut rng, params.node_cap)?),
        None => {
            debug_assert_eq!(mode, EnvSampling::Annealed);
            let seed = derive_seed(params.master_seed, stream::ENVIRONMENT, (m_idx as u64) << 40 | rep);
            let env = spec.sample(d, m, seed)?;
            Ok(sample_local_time(&env, law, KillRule::Box { m }, &mut rng, params.node_cap)?)
        }
    }
}

fn shared_env_for(
    spec: &EnvSpec,
    d: usize,
    m: i64,
    m_idx: usize,
    master_seed: u64,
    mode: EnvSampling,
) -> Result<Option<Environment>, EnvError> {
    if mode == EnvSampling::Quenched || spec.is_deterministic() {
        let seed = derive_seed(master_seed, stream::ENVIRONMENT, m_idx as u64);
        Ok(Some(spec.sample(d, m, seed)?))
    } else {
        Ok(None)
    }
}

/// Annealed mean of the constrained local time across a grid of box sizes,
/// with the decay-law fit appropriate to the dimension: linear in `m` for
/// `d = 3`, linear in `log m` for `d = 4`, bounded-ratio for `d = 5`.
pub fn scaling_study(
    spec: &EnvSpec,
    d: usize,
    law: &OffspringLaw,
    m_grid: &[i64],
    params: &McParams,
    mode: EnvSampling,
) -> Result<ExperimentReport, ExperimentError> {
    if !(3..=5).contains(&d) {
        return Err(ExperimentError::BadDimension(d));
    }
    let needed = if d == 5 { 2 } else { 4 };
    if m_grid.len() < needed || m_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ExperimentError::BadGrid { need: needed, got: m_grid.to_vec() });
    }
    spec.validate()?;
    let mut report = ExperimentReport::new(
        "scaling",
        serde_json::json!({
            "d": d, "spec": spec, "m_grid": m_grid, "mode": mode,
            "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );

    let mut means = Vec::new();
    for (m_idx, &m) in m_grid.iter().enumerate() {
        let shared = shared_env_for(spec, d, m, m_idx, params.master_seed, mode)?;
        let samples = par_map_indexed(params.replicates, |rep| {
            annealed_sample(spec, d, m, m_idx, rep, law, params, mode, shared.as_ref())
        })?;
        let censored = samples.iter().filter(|s| s.censored).count() as u64;
        let values: Vec<f64> = samples.iter().map(|s| s.value).collect();
        // With a fixed environment the exact quenched value is available.
        let oracle = match &shared {
            Some(env) => Some(quenched_first_moment_oracle(env, m, law)?),
            None => None,
        };
        let stat = mstat_with_oracle(m, &values, censored, oracle);
        means.push(stat.mean);
        report.per_m.push(stat);
    }

    for s in &report.per_m {
        if let Some(z) = s.z_score {
            report.verdicts.push(Verdict::le(
                &format!("quenched_oracle_z_m{}", s.m),
                z.abs(),
                3.0,
                "fixed-environment exact first moment",
            ));
        }
    }

    match d {
        3 => {
            let xs: Vec<f64> = m_grid.iter().map(|&m| m as f64).collect();
            let mut fit = linear_fit(&xs, &means);
            fit.model = "mean local time vs m".into();
            report.verdicts.push(Verdict::ge("linear_fit_r_squared", fit.r_squared, 0.95, ""));
            report.verdicts.push(Verdict::ge("linear_fit_slope_positive", fit.slope, 0.0, ""));
            report.fits.push(fit);
        }
        4 => {
            let xs: Vec<f64> = m_grid.iter().map(|&m| (m as f64).ln()).collect();
            let mut fit = linear_fit(&xs, &means);
            fit.model = "mean local time vs log m".into();
            report.verdicts.push(Verdict::ge("log_fit_r_squared", fit.r_squared, 0.9, ""));
            report.verdicts.push(Verdict::ge("log_fit_slope_positive", fit.slope, 0.0, ""));
            report.fits.push(fit);
        }
        _ => {
            let last = means[means.len() - 1];
            let prev = means[means.len() - 2];
            report.verdicts.push(Verdict::le(
                "bounded_growth_ratio",
                last / prev,
                1.2,
                format!("E at m={} over m={}", m_grid[m_grid.len() - 1], m_grid[m_grid.len() - 2]),
            ));
        }
    }
    Ok(report)
}

/// Second-moment ratio `E[L²]/E[L]²` across a grid, with the intermediate
/// quantity `E[E^ω[L]²]` estimated from two independent snakes per sampled
/// environment, plus a Paley–Zygmund companion bound.
pub fn second_moment_ratio(
    spec: &EnvSpec,
    d: usize,
    law: &OffspringLaw,
    m_grid: &[i64],
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    if m_grid.len() < 2 || m_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ExperimentError::BadGrid { need: 2, got: m_grid.to_vec() });
    }
    spec.validate()?;
    let mut report = ExperimentReport::new(
        "second_moment",
        serde_json::json!({
            "d": d, "spec": spec, "m_grid": m_grid, "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );

    let mut ratios = Vec::new();
    for (m_idx, &m) in m_grid.iter().enumerate() {
        let shared = if spec.is_deterministic() {
            Some(spec.sample(d, m, derive_seed(params.master_seed, stream::ENVIRONMENT, m_idx as u64))?)
        } else {
            None
        };
        let pairs = par_map_indexed(params.replicates, |rep| {
            let idx = (m_idx as u64) << 40 | rep;
            let mut rng = replicate_rng(params.master_seed, stream::PAIR, idx);
            let local_env;
            let env = match &shared {
                Some(e) => e,
                None => {
                    let seed = derive_seed(params.master_seed, stream::ENVIRONMENT, idx);
                    local_env = spec.sample(d, m, seed)?;
                    &local_env
                }
            };
            let a = sample_local_time(env, law, KillRule::Box { m }, &mut rng, params.node_cap)?;
            let b = sample_local_time(env, law, KillRule::Box { m }, &mut rng, params.node_cap)?;
            Ok::<_, ExperimentError>((a.value, b.value, a.censored || b.censored))
        })?;
        let censored = pairs.iter().filter(|p| p.2).count() as u64;
        let values: Vec<f64> = pairs.iter().flat_map(|p| [p.0, p.1]).collect();
        let (mean, var, _se) = summarize(&values);
        let n = values.len() as f64;
        let mean_sq = values.iter().map(|v| v * v).sum::<f64>() / n;
        let cross = pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / pairs.len() as f64;
        let ratio = mean_sq / (mean * mean);
        let ratio_mid = cross / (mean * mean);
        ratios.push(ratio);

        // Paley–Zygmund with θ = 1/2: P(L ≥ E[L]/2) ≥ (1/4)·E[L]²/E[L²].
        let freq = values.iter().filter(|&&v| v >= 0.5 * mean).count() as f64 / n;
        let freq_se = (freq * (1.0 - freq) / n).sqrt();
        let pz_bound = 0.25 * mean * mean / mean_sq;
        report.verdicts.push(Verdict::ge(
            &format!("paley_zygmund_m{m}"),
            freq + 3.0 * freq_se,
            pz_bound,
            format!("P(L >= E/2) = {freq:.4} vs bound {pz_bound:.4}"),
        ));

        // Heavy-tail note from the excess kurtosis.
        let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let kurt = m4 / (var * var) - 3.0;
        if kurt > 100.0 {
            report.notes.push(format!(
                "m={m}: excess kurtosis {kurt:.1}; standard errors may be unreliable"
            ));
        }

        let mut stat = mstat_with_oracle(m, &values, censored, None);
        stat.z_score = None;
        report.per_m.push(stat);
        report.notes.push(format!(
            "m={m}: E[L^2]/E[L]^2 = {ratio:.4}, E[E_omega[L]^2]/E[L]^2 = {ratio_mid:.4}"
        ));
    }

    let max_ratio = ratios.iter().cloned().fold(f64::MIN, f64::max);
    report.verdicts.push(Verdict::le(
        "second_moment_ratio_bounded",
        max_ratio,
        10.0 * ratios[0],
        format!("ratios across the grid: {ratios:?}"),
    ));
    Ok(report)
}

/// The pair-moment inequality for a single finite snake: the Monte Carlo
/// `E^ω[(L¹_{x,0})²]` must be dominated by
/// `c · Σ_y g^m(x,y) g^m(y,0)² π(y) π(0)²` with
/// `c = 3·max(σ²+1, Σ k³ q_k)`.
pub fn many_to_two_check(
    env: &Environment,
    m: i64,
    x: &[i64],
    law: &OffspringLaw,
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "many_to_two",
        serde_json::json!({
            "d": env.d(), "m": m, "x": x, "spec": env.spec(), "env_seed": env.seed(),
            "sigma2": law.sigma2(), "third_moment": law.third_moment(), "params": params,
        }),
        params.master_seed,
    );
    let origin = vec![0i64; env.d()];
    let col_x = green_constrained(env, m, x)?;
    let col_0 = green_constrained(env, m, &origin)?;
    let pi0 = env.pi(&origin)?;
    let mut rhs_sum = 0.0;
    col_x.box_m.clone().for_each_site(|i, y| {
        let pi_y = env.pi_idx(env.storage().index(y).unwrap());
        rhs_sum += col_x.values[i] * col_0.values[i] * col_0.values[i] * pi_y * pi0 * pi0;
    });
    let c = 3.0 * (law.sigma2() + 1.0).max(law.third_moment());
    let bound = c * rhs_sum;

    let rule = KillRule::Box { m };
    let samples = par_map_indexed(params.replicates, |rep| {
        let mut rng = replicate_rng(params.master_seed, stream::TREE, rep);
        sample_branch_local_time(env, law, rule, x, RootLaw::Shifted, &origin, &mut rng, params.node_cap)
    })?;
    let censored = samples.iter().filter(|s| s.censored).count() as u64;
    let squares: Vec<f64> = samples.iter().map(|s| (s.visits * s.visits) as f64).collect();
    let stat = mstat_with_oracle(m, &squares, censored, Some(bound));
    let lhs = stat.mean;
    let censored_rate = stat.censored_rate;
    report.per_m.push(stat);
    report.verdicts.push(Verdict::le(
        "many_to_two_inequality",
        lhs,
        bound,
        format!("c = {c:.3}, raw ratio LHS/(c·RHS) = {:.4}", lhs / bound),
    ));
    if censored_rate > 0.01 {
        report.valid = false;
        report.notes.push(format!("censoring rate {censored_rate} exceeds 1%: report invalid"));
    }
    Ok(report)
}

/// Splits the quenched variance of the local time into the tree-fluctuation
/// part (`E[(L − M(ℓ))²]` with `M(ℓ) = σ² Σ_i g^m(X_i, 0)` read off the
/// spine occupation) and the spine part (`Var M(ℓ)`), and checks the two
/// estimates add up to the total variance within Monte Carlo error.
pub fn variance_decomposition(
    env: &Environment,
    m: i64,
    law: &OffspringLaw,
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "variance_decomposition",
        serde_json::json!({
            "d": env.d(), "m": m, "spec": env.spec(), "env_seed": env.seed(),
            "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );
    let origin = vec![0i64; env.d()];
    let col_0 = green_constrained(env, m, &origin)?;
    let g_by_storage: Vec<(usize, f64)> = {
        let mut v = Vec::with_capacity(col_0.values.len());
        col_0.box_m.clone().for_each_site(|i, y| {
            v.push((env.storage().index(y).unwrap(), col_0.values[i]));
        });
        v
    };
    let mut g_lookup = std::collections::HashMap::new();
    for (idx, g) in g_by_storage {
        g_lookup.insert(idx, g);
    }
    let sigma2 = law.sigma2();
    let origin_idx = env.storage().index(&origin).unwrap();
    let pi0 = env.pi(&origin)?;

    let rule = KillRule::Box { m };
    let rows = par_map_indexed(params.replicates, |rep| {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, rep);
        let out = sample_local_time_multi(env, law, &[rule], &mut rng, params.node_cap, true)?;
        let s = out.samples[0];
        let path = out.spine_path.unwrap();
        // E[L | spine] sums the exact per-tree means along the occupation:
        // σ² g(x,0) plus the generation-0 correction at the origin.
        let cond_mean: f64 = path
            .iter()
            .map(|idx| {
                let g = g_lookup.get(idx).copied().unwrap_or(0.0);
                sigma2 * g + if *idx == origin_idx { (1.0 - sigma2) / pi0 } else { 0.0 }
            })
            .sum();
        Ok::<_, ExperimentError>((s.value, cond_mean, s.censored))
    })?;
    let censored = rows.iter().filter(|r| r.2).count() as u64;
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let cond_means: Vec<f64> = rows.iter().map(|r| r.1).collect();

    let (_, total_var, _) = summarize(&values);
    let (_, spine_var, _) = summarize(&cond_means);
    let residuals_sq: Vec<f64> =
        rows.iter().map(|r| (r.0 - r.1) * (r.0 - r.1)).collect();
    let (tree_var, _, _) = summarize(&residuals_sq);

    report.per_m.push(mstat_with_oracle(m, &values, censored, None));
    report.notes.push(format!(
        "total Var = {total_var:.5}, tree part = {tree_var:.5}, spine part = {spine_var:.5}"
    ));
    report.verdicts.push(Verdict::ge("spine_part_nonnegative", spine_var, 0.0, ""));
    report.verdicts.push(Verdict::ge("tree_part_nonnegative", tree_var, 0.0, ""));

    // Batch t-test that tree part + spine part − total vanishes in mean.
    let batches = 50usize.min(values.len().max(1));
    let batch_len = values.len() / batches.max(1);
    if batch_len >= 2 {
        let mut ts = Vec::with_capacity(batches);
        for b in 0..batches {
            let lo = b * batch_len;
            let hi = lo + batch_len;
            let (_, v_tot, _) = summarize(&values[lo..hi]);
            let (_, v_spine, _) = summarize(&cond_means[lo..hi]);
            let (y, _, _) = summarize(&residuals_sq[lo..hi]);
            ts.push(y + v_spine - v_tot);
        }
        let (t_mean, _, t_se) = summarize(&ts);
        let z = z_score(t_mean, 0.0, t_se);
        report.verdicts.push(Verdict::le(
            "parts_sum_to_total_z",
            z.abs(),
            3.0,
            format!("batch mean {t_mean:.5} over {batches} batches"),
        ));
    } else {
        report.verdicts.push(Verdict::boolean(
            "parts_sum_to_total_z",
            (tree_var + spine_var - total_var).abs() <= 1e-12,
            "degenerate batching: direct comparison",
        ));
    }
    Ok(report)
}

/// Spine-marginal identity `E^ω[ℓ^m(x)] = π_ω(x) g^m(0,x)` at chosen sites.
pub fn spine_marginal_check(
    env: &Environment,
    m: i64,
    sites: &[Vec<i64>],
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "spine_marginal",
        serde_json::json!({
            "d": env.d(), "m": m, "spec": env.spec(), "env_seed": env.seed(),
            "sites": sites, "params": params,
        }),
        params.master_seed,
    );
    let origin = vec![0i64; env.d()];
    let col = green_constrained(env, m, &origin)?;
    let counts = par_map_indexed(params.replicates, |rep| {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, rep);
        Ok::<_, ExperimentError>(spine_local_times(env, m, sites, &mut rng)?.0)
    })?;
    for (si, site) in sites.iter().enumerate() {
        let values: Vec<f64> = counts.iter().map(|c| c[si] as f64).collect();
        let oracle = env.pi(site)? * col.value_at(site).unwrap();
        let stat = mstat_with_oracle(m, &values, 0, Some(oracle));
        report.verdicts.push(Verdict::le(
            &format!("spine_marginal_z_{site:?}"),
            stat.z_score.unwrap().abs(),
            3.0,
            format!("MC {:.5} vs πg {oracle:.5}", stat.mean),
        ));
        report.per_m.push(stat);
    }
    Ok(report)
}

/// Branch-marginal identity `E^ω[L¹_{x,0}] = σ² π_ω(0) g^m(x,0)` for single
/// finite snakes with the shifted root law.
pub fn branch_marginal_check(
    env: &Environment,
    m: i64,
    law: &OffspringLaw,
    sites: &[Vec<i64>],
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "branch_marginal",
        serde_json::json!({
            "d": env.d(), "m": m, "spec": env.spec(), "env_seed": env.seed(),
            "sites": sites, "sigma2": law.sigma2(), "params": params,
        }),
        params.master_seed,
    );
    let origin = vec![0i64; env.d()];
    let col = green_constrained(env, m, &origin)?;
    let rule = KillRule::Box { m };
    for (si, site) in sites.iter().enumerate() {
        let samples = par_map_indexed(params.replicates, |rep| {
            let mut rng =
                replicate_rng(params.master_seed, stream::TREE, (si as u64) << 40 | rep);
            sample_branch_local_time(env, law, rule, site, RootLaw::Shifted, &origin, &mut rng, params.node_cap)
        })?;
        let censored = samples.iter().filter(|s| s.censored).count() as u64;
        let values: Vec<f64> = samples.iter().map(|s| s.visits as f64).collect();
        let oracle = branch_mean_oracle(env, &col, site, &origin, law.sigma2())?;
        let stat = mstat_with_oracle(m, &values, censored, Some(oracle));
        report.verdicts.push(Verdict::le(
            &format!("branch_marginal_z_{site:?}"),
            stat.z_score.unwrap().abs(),
            3.0,
            format!("MC {:.5} vs σ²πg {oracle:.5}", stat.mean),
        ));
        report.per_m.push(stat);
    }
    Ok(report)
}

/// Hitting frequencies of a plain (unconditioned) critical snake at several
/// targets, run at two box bounds so the truncation effect is visible. For
/// `d ≥ 5` and exactly two targets, checks the `|x|^{−(d−2)}` ratio within
/// a factor 1.5 (a plausibility check against a lower-bound-only claim).
pub fn hitting_study(
    spec: &EnvSpec,
    d: usize,
    law: &OffspringLaw,
    targets: &[Vec<i64>],
    m_bounds: &[i64],
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    if targets.len() < 2 || m_bounds.len() < 2 {
        return Err(ExperimentError::BadHittingSetup);
    }
    spec.validate()?;
    let mut report = ExperimentReport::new(
        "hitting",
        serde_json::json!({
            "d": d, "spec": spec, "targets": targets, "m_bounds": m_bounds, "params": params,
        }),
        params.master_seed,
    );

    // The plausibility ratio is judged at the largest (least truncated)
    // bound; the other bounds exist to expose the truncation effect.
    let main_bi =
        m_bounds.iter().enumerate().max_by_key(|(_, &m)| m).map(|(i, _)| i).unwrap_or(0);
    let mut freqs_main: Vec<f64> = Vec::new();
    for (bi, &m_bound) in m_bounds.iter().enumerate() {
        let shared = shared_env_for(spec, d, m_bound, bi, params.master_seed, EnvSampling::Annealed)?;
        for (ti, target) in targets.iter().enumerate() {
            let hits = par_map_indexed(params.replicates, |rep| {
                let idx = ((bi * targets.len() + ti) as u64) << 40 | rep;
                let mut rng = replicate_rng(params.master_seed, stream::TREE, idx);
                let local_env;
                let env = match &shared {
                    Some(e) => e,
                    None => {
                        let seed = derive_seed(params.master_seed, stream::ENVIRONMENT, idx);
                        local_env = spec.sample(d, m_bound, seed)?;
                        &local_env
                    }
                };
                Ok::<_, ExperimentError>(finite_snake_hits(env, law, m_bound, target, &mut rng, params.node_cap)?)
            })?;
            let censored = hits.iter().filter(|h| h.censored).count() as u64;
            let values: Vec<f64> =
                hits.iter().map(|h| if h.visits > 0 { 1.0 } else { 0.0 }).collect();
            let stat = mstat_with_oracle(m_bound, &values, censored, None);
            report.notes.push(format!(
                "m_bound={m_bound}, target={target:?}: hit frequency {:.6} ± {:.6}",
                stat.mean, stat.std_error
            ));
            if bi == main_bi {
                freqs_main.push(stat.mean);
            }
            report.per_m.push(stat);
        }
    }

    if d >= 5 && targets.len() == 2 {
        let r1 = (norm_sq(&targets[0]) as f64).sqrt();
        let r2 = (norm_sq(&targets[1]) as f64).sqrt();
        let expected = (r1 / r2).powf(-(d as f64 - 2.0));
        let observed = freqs_main[0] / freqs_main[1];
        let factor = (observed / expected).max(expected / observed);
        report.verdicts.push(Verdict::le(
            "hitting_ratio_plausible",
            factor,
            1.5,
            format!("observed ratio {observed:.3} vs |x|^(2-d) prediction {expected:.3}"),
        ));
    }

    // Truncation effect between the two box bounds at the first target.
    let per_bound: Vec<f64> = (0..m_bounds.len())
        .map(|bi| report.per_m[bi * targets.len()].mean)
        .collect();
    report.notes.push(format!(
        "truncation effect at target {:?}: frequencies by m_bound = {per_bound:?}",
        targets[0]
    ));
    Ok(report)
}

/// Coupled monotonicity across kill rules: `L_m ≤ L_{m'}` for `m ≤ m'` and
/// the trap-killed local time never exceeds the box-killed one, pathwise
/// under shared seeds.
pub fn coupled_monotonicity_check(
    env: &Environment,
    law: &OffspringLaw,
    m_small: i64,
    m_large: i64,
    trap_threshold: f64,
    params: &McParams,
) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(
        "coupled_monotonicity",
        serde_json::json!({
            "d": env.d(), "m_small": m_small, "m_large": m_large,
            "trap_threshold": trap_threshold, "spec": env.spec(), "env_seed": env.seed(),
            "params": params,
        }),
        params.master_seed,
    );
    let rules = [
        KillRule::Box { m: m_small },
        KillRule::Box { m: m_large },
        KillRule::BoxAndTraps { m: m_large, threshold: trap_threshold },
    ];
    let violations = par_map_indexed(params.replicates, |rep| {
        let mut rng = replicate_rng(params.master_seed, stream::SNAKE, rep);
        let out = sample_local_time_multi(env, law, &rules, &mut rng, params.node_cap, false)?;
        let box_mono = out.samples[0].visits <= out.samples[1].visits;
        let trap_mono = out.samples[2].visits <= out.samples[1].visits;
        Ok::<_, ExperimentError>((!box_mono as u64, !trap_mono as u64))
    })?;
    let box_viol: u64 = violations.iter().map(|v| v.0).sum();
    let trap_viol: u64 = violations.iter().map(|v| v.1).sum();
    report.verdicts.push(Verdict::le("box_monotonicity_violations", box_viol as f64, 0.0, ""));
    report.verdicts.push(Verdict::le("trap_monotonicity_violations", trap_viol as f64, 0.0, ""));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::DistributionSpec;

    fn fast_params(replicates: u64, seed: u64) -> McParams {
        McParams { replicates, master_seed: seed, node_cap: 1_000_000 }
    }

    #[test]
    fn first_moment_identity_small_boxes() {
        // d=3 homogeneous, m=3: exact oracle from one solve.
        let env = Environment::homogeneous(3, 3).unwrap();
        let law = OffspringLaw::binary();
        let r = first_moment_check(&env, 3, &law, &fast_params(20_000, 1)).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);

        // Random conductances, quenched.
        let env = EnvSpec::conductances(DistributionSpec::uniform(0.5, 2.0)).sample(3, 3, 5).unwrap();
        let r = first_moment_check(&env, 3, &OffspringLaw::geometric_half(), &fast_params(20_000, 2))
            .unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);

        // Traps: g^m matches the homogeneous table, so the trap oracle is the
        // homogeneous one with the trap π factors; the identity still holds.
        let traps = EnvSpec::traps(DistributionSpec::uniform(0.0, 0.8)).sample(3, 3, 6).unwrap();
        let r = first_moment_check(&traps, 3, &law, &fast_params(20_000, 15)).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
        let hom_col = crate::kernel::green_constrained(&Environment::homogeneous(3, 3).unwrap(), 3, &[0, 0, 0]).unwrap();
        let mut alt_oracle = 0.0;
        hom_col.box_m.clone().for_each_site(|i, x| {
            let pi = traps.pi(x).unwrap();
            alt_oracle += pi * hom_col.values[i] * hom_col.values[i];
        });
        assert!(
            (alt_oracle - r.per_m[0].oracle.unwrap()).abs() <= 1e-9,
            "trap oracle must equal the homogeneous-g, trap-π assembly"
        );
    }

    #[test]
    fn first_moment_m0_is_deterministic() {
        let env = Environment::homogeneous(2, 2).unwrap();
        let law = OffspringLaw::binary();
        let r = first_moment_check(&env, 0, &law, &fast_params(200, 3)).unwrap();
        assert!(r.passed());
        let s = &r.per_m[0];
        assert!(s.variance == 0.0 && (s.mean - s.oracle.unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn spine_and_branch_marginals() {
        let env = EnvSpec::traps(DistributionSpec::uniform(0.0, 0.7)).sample(3, 4, 9).unwrap();
        let sites = vec![vec![0, 0, 0], vec![1, 0, 0], vec![2, -1, 0]];
        let r = spine_marginal_check(&env, 4, &sites, &fast_params(20_000, 4)).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);

        let r = branch_marginal_check(
            &env,
            4,
            &OffspringLaw::binary(),
            &sites,
            &fast_params(20_000, 5),
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn many_to_two_holds_with_headroom() {
        let env = Environment::homogeneous(3, 4).unwrap();
        let law = OffspringLaw::binary();
        let r = many_to_two_check(&env, 4, &[2, 0, 0], &law, &fast_params(20_000, 6)).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
        // m=0 from the origin: LHS = 1 and the bound is at least c ≥ 3.
        let r0 = many_to_two_check(&env, 0, &[0, 0, 0], &law, &fast_params(100, 7)).unwrap();
        assert!(r0.passed());
        assert!((r0.per_m[0].mean - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn many_to_two_ratio_invariant_under_conductance_scaling() {
        let spec = EnvSpec::conductances(DistributionSpec::uniform(0.5, 2.0));
        let env = spec.sample(3, 3, 11).unwrap();
        let scaled = env.scaled_conductances(2.0).unwrap();
        let law = OffspringLaw::binary();
        let p = fast_params(5_000, 8);
        let a = many_to_two_check(&env, 3, &[1, 0, 0], &law, &p).unwrap();
        let b = many_to_two_check(&scaled, 3, &[1, 0, 0], &law, &p).unwrap();
        // Same seeds, same walk law: identical raw visits; the bound's π and
        // g factors cancel, so both the LHS and the RHS match exactly.
        assert!((a.per_m[0].mean - b.per_m[0].mean).abs() <= 1e-12);
        assert!((a.per_m[0].oracle.unwrap() - b.per_m[0].oracle.unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn variance_decomposition_consistency() {
        let env = Environment::homogeneous(3, 3).unwrap();
        let law = OffspringLaw::geometric_half();
        let r = variance_decomposition(&env, 3, &law, &fast_params(20_000, 9)).unwrap();
        assert!(r.passed(), "{:?} {:?}", r.verdicts, r.notes);
    }

    #[test]
    fn variance_decomposition_m0_trivial() {
        let env = Environment::homogeneous(2, 2).unwrap();
        let law = OffspringLaw::binary();
        let r = variance_decomposition(&env, 0, &law, &fast_params(500, 10)).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn scaling_rejects_bad_grids_and_dimensions() {
        let law = OffspringLaw::binary();
        let p = fast_params(10, 0);
        assert!(matches!(
            scaling_study(&EnvSpec::homogeneous(), 3, &law, &[4, 8, 16], &p, EnvSampling::Annealed),
            Err(ExperimentError::BadGrid { .. })
        ));
        assert!(matches!(
            scaling_study(&EnvSpec::homogeneous(), 2, &law, &[2, 4, 6, 8], &p, EnvSampling::Annealed),
            Err(ExperimentError::BadDimension(2))
        ));
        assert!(matches!(
            scaling_study(&EnvSpec::homogeneous(), 5, &law, &[4], &p, EnvSampling::Annealed),
            Err(ExperimentError::BadGrid { .. })
        ));
    }

    #[test]
    fn second_moment_small_grid() {
        let r = second_moment_ratio(
            &EnvSpec::homogeneous(),
            3,
            &OffspringLaw::binary(),
            &[2, 4],
            &fast_params(4_000, 11),
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn second_moment_m0_ratio_is_one() {
        // L_0 is deterministic without self-loops, so E[L²]/E[L]² = 1.
        let r = second_moment_ratio(
            &EnvSpec::homogeneous(),
            3,
            &OffspringLaw::binary(),
            &[0, 1],
            &fast_params(300, 16),
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
        assert!(r.notes.iter().any(|n| n.starts_with("m=0") && n.contains("= 1.0000")), "{:?}", r.notes);
    }

    #[test]
    fn trap_killed_first_moment_identity() {
        // The masked solver is the oracle for the trap-killed snake. A low
        // threshold makes the kill set bite.
        let env = EnvSpec::traps(DistributionSpec::uniform(0.0, 1.0 - 1e-9)).sample(3, 4, 31).unwrap();
        let law = OffspringLaw::binary();
        let threshold = 5.0;
        assert!(env.trap_set_fraction(4, threshold).unwrap() > 0.0);
        let r = trap_first_moment_check(&env, 4, threshold, &law, &fast_params(20_000, 17)).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
        // Extra killing strictly lowers the oracle here.
        let full = quenched_first_moment_oracle(&env, 4, &law).unwrap();
        let trapped = trap_killed_first_moment_oracle(&env, 4, threshold, &law).unwrap();
        assert!(trapped < full);
    }

    #[test]
    fn trap_scaling_smoke() {
        let spec = EnvSpec::traps(DistributionSpec::uniform(0.0, 1.0 - 1e-9));
        let r = trap_scaling_study(
            &spec,
            3,
            &OffspringLaw::binary(),
            &[2, 4, 6, 8],
            100.0,
            &fast_params(2_000, 18),
        )
        .unwrap();
        assert!(r.passed(), "{:?} {:?}", r.verdicts, r.notes);
    }

    #[test]
    fn coupled_monotonicity_small() {
        let env = EnvSpec::traps(DistributionSpec::uniform(0.0, 1.0 - 1e-9)).sample(3, 6, 13).unwrap();
        let r = coupled_monotonicity_check(
            &env,
            &OffspringLaw::binary(),
            3,
            6,
            50.0,
            &fast_params(500, 12),
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn annealed_quenched_consistency() {
        // Averaging quenched means over resampled environments agrees with
        // the annealed estimator within combined error.
        let spec = EnvSpec::traps(DistributionSpec::uniform(0.0, 0.5));
        let law = OffspringLaw::binary();
        let d = 3;
        let m = 2i64;
        let p_annealed = fast_params(20_000, 13);
        let annealed =
            scaling_study(&spec, d, &law, &[1, 2, 3, 4], &p_annealed, EnvSampling::Annealed)
                .unwrap();
        // Hand-rolled two-stage estimator: 100 environments × 200 snakes.
        let mut means = Vec::new();
        for e in 0..100u64 {
            let env = spec.sample(d, m, derive_seed(99, stream::ENVIRONMENT, e)).unwrap();
            let vals: Vec<f64> = (0..200u64)
                .map(|r| {
                    let mut rng = replicate_rng(99, stream::SNAKE, e << 20 | r);
                    sample_local_time(&env, &law, KillRule::Box { m }, &mut rng, 1_000_000)
                        .unwrap()
                        .value
                })
                .collect();
            means.push(summarize(&vals).0);
        }
        let (two_stage_mean, _, two_stage_se) = summarize(&means);
        let a_stat = &annealed.per_m[1];
        assert_eq!(a_stat.m, m);
        let combined = (a_stat.std_error.powi(2) + two_stage_se.powi(2)).sqrt();
        assert!(
            (a_stat.mean - two_stage_mean).abs() <= 3.0 * combined,
            "annealed {} vs two-stage {} (se {})",
            a_stat.mean,
            two_stage_mean,
            combined
        );
    }

    #[test]
    fn reports_are_deterministic_across_worker_counts() {
        let env = Environment::homogeneous(3, 3).unwrap();
        let law = OffspringLaw::binary();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                first_moment_check(&env, 3, &law, &fast_params(2_000, 14))
                    .unwrap()
                    .deterministic_json()
            })
        };
        assert_eq!(run(1), run(4));
    }
}
