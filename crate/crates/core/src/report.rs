//! Experiment reports: aggregated statistics, fits and pass/fail verdicts.

use serde::{Deserialize, Serialize};

/// Per-box-size Monte Carlo statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MStat {
    pub m: i64,
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub censored_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub z_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// What was regressed on what, e.g. "mean vs m" or "log mean vs log n".
    pub model: String,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub observed: f64,
    pub threshold: f64,
    /// "<=", ">=" or "in" — how `observed` relates to `threshold` on pass.
    pub relation: String,
    pub detail: String,
}

impl Verdict {
    pub fn le(name: &str, observed: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            pass: observed <= threshold,
            observed,
            threshold,
            relation: "<=".into(),
            detail: detail.into(),
        }
    }

    pub fn ge(name: &str, observed: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            pass: observed >= threshold,
            observed,
            threshold,
            relation: ">=".into(),
            detail: detail.into(),
        }
    }

    pub fn boolean(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            pass,
            observed: if pass { 1.0 } else { 0.0 },
            threshold: 1.0,
            relation: "==".into(),
            detail: detail.into(),
        }
    }
}

/// Aggregated output of one experiment run. Everything needed to re-check
/// the verdicts is stored; `wall_clock_seconds` is the only field that is
/// not reproducible bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub params: serde_json::Value,
    pub master_seed: u64,
    pub per_m: Vec<MStat>,
    pub fits: Vec<FitResult>,
    pub verdicts: Vec<Verdict>,
    /// Non-fatal observations (heavy-tail warnings, truncation effects).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub valid: bool,
    pub wall_clock_seconds: f64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl ExperimentReport {
    pub fn new(experiment: &str, params: serde_json::Value, master_seed: u64) -> Self {
        ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: experiment.into(),
            params,
            master_seed,
            per_m: Vec::new(),
            fits: Vec::new(),
            verdicts: Vec::new(),
            notes: Vec::new(),
            valid: true,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.valid && self.verdicts.iter().all(|v| v.pass)
    }

    /// JSON with the wall clock zeroed; this is the deterministic artifact.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_seconds = 0.0;
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }

    /// Long-format CSV companion: one row per (m, statistic).
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("experiment,m,statistic,value\n");
        for s in &self.per_m {
            let mut push = |stat: &str, v: f64| {
                out.push_str(&format!("{},{},{},{}\n", self.experiment, s.m, stat, v));
            };
            push("n", s.n as f64);
            push("mean", s.mean);
            push("variance", s.variance);
            push("std_error", s.std_error);
            push("censored_rate", s.censored_rate);
            if let Some(o) = s.oracle {
                push("oracle", o);
            }
            if let Some(z) = s.z_score {
                push("z_score", z);
            }
        }
        out
    }
}

/// Sample mean, variance and standard error (two-pass).
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var, (var / n).sqrt())
}

/// Ordinary least squares `y = a + b x` with the coefficient of
/// determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> FitResult {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (intercept + slope * a)).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    FitResult { model: String::new(), slope, intercept, r_squared, points: x.len() }
}
