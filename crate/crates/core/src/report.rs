//! CSV and JSON emitters for runs and batches.
//!
//! Floats are printed with six significant digits in the style of C's `%g`.
//! Missing values are written as `nan`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::closed_loop::RunRecord;
use crate::montecarlo::{BatchReport, Calibration, DisturbanceChannel, DisturbanceSpec, Experiment, RunSummary};
use crate::robot::Scenario;

pub const SUMMARY_HEADER: &str = "architecture,safe_rate,reach_rate,success_rate,avg_reach_time_s,peak_jerk_mean,peak_jerk_max,n_runs,seed";
pub const ENVELOPE_HEADER: &str = "architecture,obstacle,step,t_s,mean,min,max,count";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Trace header for a scenario with `n_obstacles` obstacles.
pub fn trace_header(n_obstacles: usize) -> String {
    let mut h = String::from("step,t_s,h_min");
    for i in 1..=n_obstacles {
        let _ = write!(h, ",dist_obs{i}");
    }
    h.push_str(",ee_x,ee_y,u1,u2,u3,intervened");
    h
}

/// Six significant digits; exponent form outside `[1e-4, 1e6)`.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), sig6)
}

pub fn summary_csv(report: &BatchReport) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in &report.stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.architecture,
            sig6(s.safe_rate),
            sig6(s.reach_rate),
            sig6(s.success_rate),
            opt(s.avg_reach_time_s),
            sig6(s.peak_jerk_mean),
            sig6(s.peak_jerk_max),
            s.n_runs,
            report.spec.seed
        );
    }
    out
}

pub fn trace_csv(record: &RunRecord, scenario: &Scenario) -> String {
    let ts = scenario.arm.ts;
    let mut out = trace_header(scenario.obstacles.len());
    out.push('\n');
    for s in &record.steps {
        let q = &s.state.as_slice()[..3];
        let ee = scenario.arm.end_effector(q);
        let _ = write!(out, "{},{},{}", s.step, sig6(s.step as f64 * ts), sig6(s.h));
        for d in scenario.obstacle_distances(&s.state) {
            let _ = write!(out, ",{}", sig6(d));
        }
        let _ = write!(out, ",{},{}", sig6(ee[0]), sig6(ee[1]));
        for u in s.u_applied.iter() {
            let _ = write!(out, ",{}", sig6(*u));
        }
        let _ = writeln!(out, ",{}", u8::from(s.intervened));
    }
    out
}

/// One row per architecture, obstacle and step; `obstacle` counts from 1.
pub fn envelope_csv(report: &BatchReport, ts: f64) -> String {
    let mut out = String::from(ENVELOPE_HEADER);
    out.push('\n');
    for env in &report.envelopes {
        let arch = env.architecture.map_or_else(String::new, |a| a.to_string());
        for k in 0..env.mean.len() {
            let _ = writeln!(
                out,
                "{arch},{},{k},{},{},{},{},{}",
                env.obstacle + 1,
                sig6(k as f64 * ts),
                sig6(env.mean[k]),
                sig6(env.min[k]),
                sig6(env.max[k]),
                env.count[k]
            );
        }
    }
    out
}

/// Lipschitz estimates used for the tolerances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzEstimates {
    pub l_h: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub u_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunMetadata<'a> {
    pub version: &'static str,
    pub experiment: &'a Experiment,
    pub disturbance: DisturbanceSpec,
    pub channel: DisturbanceChannel,
    pub lipschitz: LipschitzEstimates,
    pub calibration: Option<&'a Calibration>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunJson<'a> {
    #[serde(flatten)]
    pub meta: RunMetadata<'a>,
    pub summary: &'a RunSummary,
    pub violation_step: Option<usize>,
    pub waypoint_steps: &'a [usize],
    pub max_prediction_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BatchJson<'a> {
    #[serde(flatten)]
    pub meta: RunMetadata<'a>,
    pub n_runs: usize,
    pub run_seeds: Vec<u64>,
    pub stats: &'a [crate::montecarlo::ArchitectureStats],
    pub runs: &'a [RunSummary],
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}
