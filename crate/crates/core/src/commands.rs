//! Drivers behind the `run`, `batch` and `bounds` subcommands. Each one
//! writes its files and returns the text to print.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bounds::{ToleranceInputs, ToleranceTable};
use crate::closed_loop::{run, Architecture};
use crate::config::ScenarioFile;
use crate::error::Result;
use crate::montecarlo::{run_batch_with, run_seed, Calibration, Experiment, Plant, RunSummary};
use crate::report::{self, BatchJson, LipschitzEstimates, RunJson, RunMetadata};

/// Experiment, plant and (when a robust architecture is requested)
/// calibration for a scenario file.
pub struct Prepared {
    pub file: ScenarioFile,
    pub experiment: Experiment,
    pub plant: Plant,
    pub calibration: Option<Calibration>,
}

impl Prepared {
    pub fn new(file: ScenarioFile, architectures: &[Architecture]) -> Result<Self> {
        let experiment = file.experiment()?;
        let plant = experiment.plant()?;
        let calibration = if architectures.iter().any(|a| a.is_robust()) {
            Some(experiment.calibrate(&plant, file.disturbance.seed)?)
        } else {
            None
        };
        Ok(Self {
            file,
            experiment,
            plant,
            calibration,
        })
    }

    fn lipschitz(&self) -> LipschitzEstimates {
        LipschitzEstimates {
            l_h: self.plant.l_h(),
            l_f: self.plant.model.lipschitz_f,
            l_g: self.plant.model.lipschitz_g,
            u_max: self.plant.model.u_max,
        }
    }

    fn metadata(&self) -> Result<RunMetadata<'_>> {
        Ok(RunMetadata {
            version: report::VERSION,
            experiment: &self.experiment,
            disturbance: self.file.disturbance_spec()?,
            channel: self.experiment.channel,
            lipschitz: self.lipschitz(),
            calibration: self.calibration.as_ref(),
        })
    }
}

/// One closed-loop run with the disturbance stream `seed` (the file's seed
/// when `None`). Writes `trace.csv` and `summary.json` into `out`.
pub fn cmd_run(file: ScenarioFile, arch: Architecture, seed: Option<u64>, out: &Path) -> Result<String> {
    let prep = Prepared::new(file, &[arch])?;
    let spec = prep.file.disturbance_spec()?;
    let spec = spec.with_seed(seed.unwrap_or(spec.seed));
    let setup = prep.experiment.setup(&prep.plant, prep.calibration.as_ref())?;
    let mut d = prep.experiment.disturbance(&prep.plant, spec);
    let rec = run(arch, &setup, &mut d)?;
    let summary = RunSummary::from_record(&rec, 0, spec.seed, prep.experiment.scenario.arm.ts);

    fs::create_dir_all(out)?;
    fs::write(out.join("trace.csv"), report::trace_csv(&rec, &prep.experiment.scenario))?;
    let mut meta = prep.metadata()?;
    meta.disturbance = spec;
    let json = RunJson {
        meta,
        summary: &summary,
        violation_step: rec.violation_step,
        waypoint_steps: &rec.waypoint_steps,
        max_prediction_error: rec.max_prediction_error,
    };
    fs::write(out.join("summary.json"), report::to_json(&json))?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{arch}: steps {} safe {} reached {} reach_time_s {} peak_jerk {} min_h {}",
        summary.steps,
        summary.safe,
        summary.reached,
        summary.reach_time_s.map_or_else(|| "nan".into(), report::sig6),
        report::sig6(summary.peak_jerk),
        report::sig6(summary.min_h)
    );
    if let Some(a) = &summary.aborted {
        let _ = writeln!(text, "aborted: {a}");
    }
    Ok(text)
}

/// The configured batch. Writes `summary.csv`, `envelope.csv`,
/// `summary.json` and, with `traces`, one `traces/<arch>_<run>.csv` per run.
pub fn cmd_batch(file: ScenarioFile, out: &Path, traces: bool) -> Result<String> {
    let archs = file.run.architectures.clone();
    let n_runs = file.run.n_runs;
    let prep = Prepared::new(file, &archs)?;
    let spec = prep.file.disturbance_spec()?;
    let trace_dir = out.join("traces");
    fs::create_dir_all(out)?;
    if traces {
        fs::create_dir_all(&trace_dir)?;
    }
    let scenario = &prep.experiment.scenario;
    let rep = run_batch_with(&prep.experiment, &prep.plant, prep.calibration.as_ref(), &archs, spec, n_runs, |s, rec| {
        if traces {
            let path = trace_dir.join(format!("{}_{:03}.csv", s.architecture, s.run_index));
            fs::write(path, report::trace_csv(rec, scenario))?;
        }
        Ok(())
    })?;

    let summary = report::summary_csv(&rep);
    fs::write(out.join("summary.csv"), &summary)?;
    fs::write(out.join("envelope.csv"), report::envelope_csv(&rep, scenario.arm.ts))?;
    let json = BatchJson {
        meta: prep.metadata()?,
        n_runs,
        run_seeds: (0..n_runs).map(|i| run_seed(spec.seed, i)).collect(),
        stats: &rep.stats,
        runs: &rep.runs,
    };
    fs::write(out.join("summary.json"), report::to_json(&json))?;

    let mut text = String::new();
    if let Some(c) = &prep.calibration {
        let _ = writeln!(
            text,
            "calibration: w_bar_l {} w_bar_r {} (eta_l {}, eta_r {}), input margin {}",
            report::sig6(c.w_bar_l),
            report::sig6(c.w_bar_r),
            report::sig6(c.eta_local),
            report::sig6(c.eta_remote),
            report::sig6(c.input_margin)
        );
    }
    text.push_str(&summary);
    Ok(text)
}

/// Tolerance table with the three comparison clauses.
pub fn cmd_bounds(inputs: &ToleranceInputs) -> Result<String> {
    inputs.validate()?;
    Ok(bounds_text(&ToleranceTable::new(inputs)))
}

pub fn bounds_text(t: &ToleranceTable) -> String {
    let i = &t.inputs;
    let pass = |b: bool| if b { "PASS" } else { "FAIL" };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "h = {}  gamma = {}  L_h = {}  L_f = {}  L_g = {}  u_max = {}  tau = {}  N = {}  L_d = {}",
        report::sig6(i.h_value),
        report::sig6(i.gamma),
        report::sig6(i.l_h),
        report::sig6(i.l_f),
        report::sig6(i.l_g),
        report::sig6(i.u_max),
        i.tau,
        i.horizon,
        report::sig6(t.l_d)
    );
    let _ = writeln!(s, "w_bar_l          {}", report::sig6(t.local));
    for (l, w) in t.remote.iter().enumerate() {
        let _ = writeln!(s, "w_bar_r(l={:<2})    {}", l + 1, report::sig6(*w));
    }
    let _ = writeln!(s, "w_bar_r binding  {}", report::sig6(t.binding));
    let p = &t.proposition;
    let _ = writeln!(s, "clause1 w_bar_r(0,1) == w_bar_l        {}", pass(p.equal_without_delay));
    let _ = writeln!(s, "clause2 w_bar_r(0,l) <= w_bar_l        {}", pass(p.remote_below_local));
    let _ = writeln!(s, "clause3 w_bar_r(tau,l) < w_bar_r(0,l)  {}", pass(p.delay_strictly_shrinks));
    s
}
