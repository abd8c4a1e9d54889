//! Batch experiments on the arm scenario: disturbance sampling, tolerance
//! calibration from disturbance-free runs, and multi-run statistics.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierSet;
use crate::bounds::{local_tolerance, remote_tolerance_horizon, ToleranceInputs};
use crate::closed_loop::{run, Architecture, Disturbance, LoopSetup, NoDisturbance, RunRecord, Task};
use crate::dynamics::{InputSet, State, SystemModel};
use crate::error::{Error, Result};
use crate::mpc::{MpcConfig, RobustSpec, StateBox, DEFAULT_SLACK_WEIGHT};
use crate::robot::{ReachTask, ReachWeights, Scenario};
use crate::safety::FilterConfig;

pub const LOW_CLIP: f64 = 0.002;
pub const HIGH_CLIP: f64 = 0.004;
/// Environment variable overriding the number of batch worker threads.
pub const WORKERS_ENV: &str = "CBF_PLACEMENT_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceMode {
    Low,
    High,
    Custom,
}

/// Where the sampled disturbance enters the plant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceChannel {
    /// `w ∈ ℝ⁶` added to the joint state.
    #[default]
    State,
    /// `τ_d ∈ ℝ³` added to the torque, i.e. `w = g(x)·τ_d`.
    Torque,
}

/// Zero-mean Gaussian components with standard deviation `sigma`, then
/// norm-clipped at `clip`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub sigma: f64,
    pub clip: f64,
    pub mode: DisturbanceMode,
    pub seed: u64,
}

impl DisturbanceSpec {
    pub fn new(sigma: f64, clip: f64, mode: DisturbanceMode, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) || !(clip >= 0.0 && clip.is_finite()) {
            return Err(Error::InvalidParameter(format!("disturbance needs finite sigma ≥ 0 and clip ≥ 0 (got {sigma}, {clip})")));
        }
        Ok(Self { sigma, clip, mode, seed })
    }

    /// `σ = clip/2`.
    pub fn with_clip(clip: f64, mode: DisturbanceMode, seed: u64) -> Result<Self> {
        Self::new(clip / 2.0, clip, mode, seed)
    }

    pub fn low(seed: u64) -> Self {
        Self::with_clip(LOW_CLIP, DisturbanceMode::Low, seed).expect("valid constant")
    }

    pub fn high(seed: u64) -> Self {
        Self::with_clip(HIGH_CLIP, DisturbanceMode::High, seed).expect("valid constant")
    }

    pub fn zero(seed: u64) -> Self {
        Self::new(0.0, 0.0, DisturbanceMode::Custom, seed).expect("valid constant")
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Draw number `index` of the stream selected by `spec.seed`.
pub fn sample_disturbance(spec: &DisturbanceSpec, dim: usize, index: u64) -> DVector<f64> {
    if spec.sigma == 0.0 || spec.clip == 0.0 {
        return DVector::zeros(dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let normal = Normal::new(0.0, spec.sigma).expect("finite sigma");
    let mut w = DVector::from_fn(dim, |_, _| normal.sample(&mut rng));
    let n = w.norm();
    if n > spec.clip {
        w *= spec.clip / n;
    }
    w
}

/// Per-run seed derived from the batch seed (SplitMix64 finalizer).
pub fn run_seed(base: u64, run_index: usize) -> u64 {
    let mut z = base.wrapping_add((run_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Step-indexed sampled disturbance through the chosen channel.
pub struct SampledDisturbance {
    spec: DisturbanceSpec,
    channel: DisturbanceChannel,
    model: SystemModel,
}

impl SampledDisturbance {
    pub fn new(spec: DisturbanceSpec, channel: DisturbanceChannel, model: SystemModel) -> Self {
        Self { spec, channel, model }
    }
}

impl Disturbance for SampledDisturbance {
    fn sample(&mut self, k: usize, x: &State) -> State {
        match self.channel {
            DisturbanceChannel::State => sample_disturbance(&self.spec, self.model.state_dim(), k as u64),
            DisturbanceChannel::Torque => {
                let tau_d = sample_disturbance(&self.spec, self.model.input_dim(), k as u64);
                self.model.input_map(x) * tau_d
            }
        }
    }
}

/// Controller and network parameters around a [`Scenario`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub scenario: Scenario,
    pub tau: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub weights: ReachWeights,
    /// ρ of the slack penalty.
    pub slack_weight: f64,
    /// Penalty weight of the soft joint-velocity box.
    pub velocity_box_weight: f64,
    pub channel: DisturbanceChannel,
    pub lipschitz_samples: usize,
    pub lipschitz_seed: u64,
    /// Runs (at disturbance level `w̄_l`) used to size the input tightening.
    pub calibration_runs: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            tau: 7,
            horizon: 5,
            gamma: 0.5,
            weights: ReachWeights {
                position: 100.0,
                velocity: 1.0,
                input: 0.1,
            },
            slack_weight: DEFAULT_SLACK_WEIGHT,
            velocity_box_weight: 10.0,
            channel: DisturbanceChannel::State,
            lipschitz_samples: 2000,
            lipschitz_seed: 7,
            calibration_runs: 4,
        }
    }
}

/// Model, barriers and task built once per experiment.
#[derive(Clone, Debug)]
pub struct Plant {
    pub model: SystemModel,
    pub barriers: BarrierSet,
    pub input_set: InputSet,
    pub task: Arc<ReachTask>,
}

impl Plant {
    pub fn l_h(&self) -> f64 {
        self.barriers.lipschitz()
    }

    /// Tolerance inputs at margin `eta`.
    pub fn tolerance_inputs(&self, exp: &Experiment, eta: f64) -> Result<ToleranceInputs> {
        ToleranceInputs::new(
            eta,
            exp.gamma,
            self.l_h(),
            self.model.lipschitz_f,
            self.model.lipschitz_g,
            self.model.u_max,
            exp.tau,
            exp.horizon,
        )
    }
}

/// Disturbance tolerances and input tightening from disturbance-free runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Minimum margin of the disturbance-free local-filter run.
    pub eta_local: f64,
    /// Minimum margin of the disturbance-free MPC-CBF run.
    pub eta_remote: f64,
    pub w_bar_l: f64,
    pub w_bar_r: f64,
    /// Radius of the ball removed from the remote input set.
    pub input_margin: f64,
    /// Largest local correction seen in the calibration batch.
    pub max_correction: f64,
    pub l_h: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub u_max: f64,
}

impl Calibration {
    pub fn ratio(&self) -> f64 {
        self.w_bar_l / self.w_bar_r
    }
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.horizon == 0 {
            return Err(Error::Scenario("MPC horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Scenario(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        let w = self.weights;
        if !(w.position >= 0.0 && w.velocity >= 0.0 && w.input >= 0.0) || !(self.slack_weight >= 0.0) || !(self.velocity_box_weight >= 0.0) {
            return Err(Error::Scenario("cost weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<Plant> {
        self.validate()?;
        let sc = &self.scenario;
        let model = sc
            .arm
            .system_model(sc.input_limit, sc.joint_vel_limit, self.lipschitz_samples, self.lipschitz_seed)?;
        Ok(Plant {
            barriers: sc.build_barriers(self.gamma)?,
            input_set: sc.input_set()?,
            task: Arc::new(ReachTask {
                scenario: sc.clone(),
                weights: self.weights,
            }),
            model,
        })
    }

    /// Loop setup; the robust stages need a calibration.
    pub fn setup(&self, plant: &Plant, calibration: Option<&Calibration>) -> Result<LoopSetup> {
        let sc = &self.scenario;
        let v = sc.joint_vel_limit;
        let inf = f64::INFINITY;
        let vel_box = StateBox::new(
            DVector::from_column_slice(&[-inf, -inf, -inf, -v, -v, -v]),
            DVector::from_column_slice(&[inf, inf, inf, v, v, v]),
            self.velocity_box_weight,
        )?;
        let mut mpc = MpcConfig::new(plant.model.clone(), self.horizon, plant.task.stage_cost(0), plant.input_set.clone())?
            .with_barriers(plant.barriers.clone())
            .with_state_box(vel_box)?;
        let mut filter = FilterConfig::new(plant.model.clone(), plant.barriers.clone(), plant.input_set.clone())?;
        let x0 = sc.initial_state();
        if let Some(c) = calibration {
            mpc = mpc.with_robust(RobustSpec::new(c.w_bar_r, c.w_bar_l, self.slack_weight, c.input_margin)?);
            filter = filter.with_robust_tolerance(c.w_bar_l, &x0)?;
        }
        Ok(LoopSetup {
            model: plant.model.clone(),
            tau: self.tau,
            max_steps: sc.sim_horizon_steps,
            ts: sc.arm.ts,
            x0,
            standby: DVector::zeros(plant.model.input_dim()),
            filter,
            mpc,
            task: Some(plant.task.clone() as Arc<dyn Task>),
        })
    }

    pub fn disturbance(&self, plant: &Plant, spec: DisturbanceSpec) -> SampledDisturbance {
        SampledDisturbance::new(spec, self.channel, plant.model.clone())
    }

    /// Margins from disturbance-free local-filter and MPC-CBF runs, the
    /// tolerances evaluated there, and the input tightening sized by the
    /// largest robust-filter correction at disturbance level `w̄_l`.
    pub fn calibrate(&self, plant: &Plant, seed: u64) -> Result<Calibration> {
        let setup = self.setup(plant, None)?;
        let dim = plant.model.state_dim();
        let margin = |arch: Architecture| -> Result<f64> {
            let rec = run(arch, &setup, &mut NoDisturbance::new(dim))?;
            if rec.safety_violated || !(rec.min_h > 0.0) {
                return Err(Error::Calibration(format!(
                    "disturbance-free {arch} run is unsafe (min h = {:e}{})",
                    rec.min_h,
                    rec.aborted.as_deref().map(|a| format!(", {a}")).unwrap_or_default()
                )));
            }
            Ok(rec.min_h)
        };
        let eta_local = margin(Architecture::LocalCBF)?;
        let eta_remote = margin(Architecture::RemoteMPCCBF)?;
        let w_bar_l = local_tolerance(&plant.tolerance_inputs(self, eta_local)?);
        let w_bar_r = remote_tolerance_horizon(&plant.tolerance_inputs(self, eta_remote)?);
        if !(w_bar_r <= w_bar_l) {
            return Err(Error::Calibration(format!("remote tolerance {w_bar_r:e} exceeds local tolerance {w_bar_l:e}")));
        }
        let mut cal = Calibration {
            eta_local,
            eta_remote,
            w_bar_l,
            w_bar_r,
            input_margin: 0.0,
            max_correction: 0.0,
            l_h: plant.l_h(),
            l_f: plant.model.lipschitz_f,
            l_g: plant.model.lipschitz_g,
            u_max: plant.model.u_max,
        };
        let probe = self.setup(plant, Some(&cal))?;
        let spec = DisturbanceSpec::with_clip(w_bar_l, DisturbanceMode::Custom, seed)?;
        let corrections = parallel_map(self.calibration_runs, |i| {
            let mut d = self.disturbance(plant, spec.with_seed(run_seed(seed, i)));
            let rec = run(Architecture::RobustLocalCBF, &probe, &mut d)?;
            Ok(rec
                .steps
                .iter()
                .map(|s| (&s.u_applied - &s.u_remote).norm())
                .fold(0.0, f64::max))
        })?;
        cal.max_correction = corrections.into_iter().fold(0.0, f64::max);
        // The tightened box must keep a nonempty interior.
        let cap = 0.5 * plant.input_set.half_width().min();
        cal.input_margin = (1.5 * cal.max_correction).min(cap);
        Ok(cal)
    }
}

/// Summary of one run, small enough to keep for every run of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub architecture: Architecture,
    pub run_index: usize,
    pub seed: u64,
    pub safe: bool,
    pub reached: bool,
    pub reach_time_s: Option<f64>,
    pub peak_jerk: f64,
    pub min_h: f64,
    pub interventions: usize,
    pub steps: usize,
    pub aborted: Option<String>,
}

impl RunSummary {
    pub fn from_record(rec: &RunRecord, run_index: usize, seed: u64, ts: f64) -> Self {
        Self {
            architecture: rec.architecture,
            run_index,
            seed,
            safe: !rec.safety_violated,
            reached: rec.reached_all && rec.aborted.is_none(),
            reach_time_s: rec.reach_time(ts),
            peak_jerk: rec.peak_jerk,
            min_h: rec.min_h,
            interventions: rec.interventions,
            steps: rec.steps.len(),
            aborted: rec.aborted.clone(),
        }
    }

    pub fn success(&self) -> bool {
        self.safe && self.reached
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureStats {
    pub architecture: Architecture,
    pub n_runs: usize,
    pub safe_rate: f64,
    pub reach_rate: f64,
    pub success_rate: f64,
    /// Mean reach time of the safe runs that reached every waypoint.
    pub avg_reach_time_s: Option<f64>,
    pub peak_jerk_mean: f64,
    pub peak_jerk_max: f64,
    pub aborted: usize,
    pub min_h: f64,
}

impl ArchitectureStats {
    pub fn from_runs(architecture: Architecture, runs: &[&RunSummary]) -> Self {
        let n = runs.len();
        let rate = |f: &dyn Fn(&RunSummary) -> bool| runs.iter().filter(|r| f(r)).count() as f64 / n.max(1) as f64;
        let times: Vec<f64> = runs.iter().filter(|r| r.safe).filter_map(|r| r.reach_time_s).collect();
        Self {
            architecture,
            n_runs: n,
            safe_rate: rate(&|r| r.safe),
            reach_rate: rate(&|r| r.reached),
            success_rate: rate(&|r| r.success()),
            avg_reach_time_s: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
            peak_jerk_mean: runs.iter().map(|r| r.peak_jerk).sum::<f64>() / n.max(1) as f64,
            peak_jerk_max: runs.iter().map(|r| r.peak_jerk).fold(0.0, f64::max),
            aborted: runs.iter().filter(|r| r.aborted.is_some()).count(),
            min_h: runs.iter().map(|r| r.min_h).fold(f64::INFINITY, f64::min),
        }
    }
}

/// Per-step statistics of the clearance to one obstacle over the runs still
/// active at that step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearanceEnvelope {
    pub architecture: Option<Architecture>,
    pub obstacle: usize,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub count: Vec<usize>,
}

impl ClearanceEnvelope {
    fn add(&mut self, k: usize, d: f64) {
        if self.mean.len() <= k {
            self.mean.resize(k + 1, 0.0);
            self.min.resize(k + 1, f64::INFINITY);
            self.max.resize(k + 1, f64::NEG_INFINITY);
            self.count.resize(k + 1, 0);
        }
        // Running sum; divided by the count in `finish`.
        self.mean[k] += d;
        self.min[k] = self.min[k].min(d);
        self.max[k] = self.max[k].max(d);
        self.count[k] += 1;
    }

    fn finish(&mut self) {
        for (m, c) in self.mean.iter_mut().zip(&self.count) {
            *m /= *c as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub spec: DisturbanceSpec,
    pub channel: DisturbanceChannel,
    pub n_runs: usize,
    pub calibration: Option<Calibration>,
    pub stats: Vec<ArchitectureStats>,
    pub envelopes: Vec<ClearanceEnvelope>,
    pub runs: Vec<RunSummary>,
}

impl BatchReport {
    pub fn stats(&self, arch: Architecture) -> Option<&ArchitectureStats> {
        self.stats.iter().find(|s| s.architecture == arch)
    }
}

/// Number of worker threads for batch runs.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `0..n` on the worker pool; results keep index order.
pub fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every index is processed"))
        .collect()
}

/// Runs every architecture `n_runs` times. Run `i` uses the same disturbance
/// seed for every architecture, so the comparison is paired.
pub fn run_batch(
    exp: &Experiment,
    plant: &Plant,
    calibration: Option<&Calibration>,
    architectures: &[Architecture],
    spec: DisturbanceSpec,
    n_runs: usize,
) -> Result<BatchReport> {
    run_batch_with(exp, plant, calibration, architectures, spec, n_runs, |_, _| Ok(()))
}

/// [`run_batch`] with a hook called on every completed run from the worker
/// thread that ran it. An error from the hook aborts the batch.
pub fn run_batch_with(
    exp: &Experiment,
    plant: &Plant,
    calibration: Option<&Calibration>,
    architectures: &[Architecture],
    spec: DisturbanceSpec,
    n_runs: usize,
    on_run: impl Fn(&RunSummary, &RunRecord) -> Result<()> + Sync,
) -> Result<BatchReport> {
    if n_runs == 0 {
        return Err(Error::InvalidParameter("a batch needs at least one run".into()));
    }
    let setup = exp.setup(plant, calibration)?;
    let ts = exp.scenario.arm.ts;
    let jobs: Vec<(Architecture, usize)> = architectures.iter().flat_map(|&a| (0..n_runs).map(move |i| (a, i))).collect();
    let outcomes = parallel_map(jobs.len(), |j| {
        let (arch, i) = jobs[j];
        let seed = run_seed(spec.seed, i);
        let mut d = exp.disturbance(plant, spec.with_seed(seed));
        let summary_and_clearance = match run(arch, &setup, &mut d) {
            Ok(rec) => {
                let clearance: Vec<Vec<f64>> = rec.steps.iter().map(|s| exp.scenario.obstacle_distances(&s.state)).collect();
                let summary = RunSummary::from_record(&rec, i, seed, ts);
                on_run(&summary, &rec)?;
                (summary, clearance)
            }
            Err(e) => (
                RunSummary {
                    architecture: arch,
                    run_index: i,
                    seed,
                    safe: false,
                    reached: false,
                    reach_time_s: None,
                    peak_jerk: 0.0,
                    min_h: f64::NAN,
                    interventions: 0,
                    steps: 0,
                    aborted: Some(e.to_string()),
                },
                Vec::new(),
            ),
        };
        Ok(summary_and_clearance)
    })?;

    let n_obs = exp.scenario.obstacles.len();
    let mut stats = Vec::new();
    let mut envelopes = Vec::new();
    let mut runs = Vec::new();
    for &arch in architectures {
        let mine: Vec<&(RunSummary, Vec<Vec<f64>>)> = outcomes.iter().filter(|(r, _)| r.architecture == arch).collect();
        let summaries: Vec<&RunSummary> = mine.iter().map(|(r, _)| r).collect();
        stats.push(ArchitectureStats::from_runs(arch, &summaries));
        for o in 0..n_obs {
            let mut env = ClearanceEnvelope {
                architecture: Some(arch),
                obstacle: o,
                ..Default::default()
            };
            for (_, clearance) in &mine {
                for (k, d) in clearance.iter().enumerate() {
                    env.add(k, d[o]);
                }
            }
            env.finish();
            envelopes.push(env);
        }
        runs.extend(summaries.into_iter().cloned());
    }
    Ok(BatchReport {
        spec,
        channel: exp.channel,
        n_runs,
        calibration: calibration.cloned(),
        stats,
        envelopes,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_sigma_gives_zero() {
        let spec = DisturbanceSpec::new(0.0, 1.0, DisturbanceMode::Custom, 3).unwrap();
        assert_eq!(sample_disturbance(&spec, 4, 9), DVector::zeros(4));
    }

    #[test]
    fn samples_respect_clip_and_are_reproducible() {
        let spec = DisturbanceSpec::high(11);
        for k in 0..2000 {
            let w = sample_disturbance(&spec, 6, k);
            assert!(w.norm() <= spec.clip * (1.0 + 1e-12));
            assert_eq!(w, sample_disturbance(&spec, 6, k));
        }
        assert_ne!(sample_disturbance(&spec, 6, 0), sample_disturbance(&spec, 6, 1));
        assert_ne!(sample_disturbance(&spec, 6, 0), sample_disturbance(&spec.with_seed(12), 6, 0));
    }

    #[test]
    fn unclipped_components_have_requested_spread() {
        // A clip far above σ leaves the Gaussian untouched.
        let spec = DisturbanceSpec::new(0.3, 1e6, DisturbanceMode::Custom, 5).unwrap();
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for k in 0..n {
            let x = sample_disturbance(&spec, 1, k)[0];
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std / 0.3 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn presets() {
        let low = DisturbanceSpec::low(0);
        assert_eq!((low.sigma, low.clip, low.mode), (0.001, 0.002, DisturbanceMode::Low));
        let high = DisturbanceSpec::high(0);
        assert_eq!((high.sigma, high.clip, high.mode), (0.002, 0.004, DisturbanceMode::High));
        assert!(DisturbanceSpec::new(-1.0, 1.0, DisturbanceMode::Custom, 0).is_err());
    }

    #[test]
    fn run_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| run_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(run_seed(42, 3), run_seed(42, 3));
    }

    #[test]
    fn parallel_map_keeps_order_and_propagates_errors() {
        let v = parallel_map(50, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..50).map(|i| i * i).collect::<Vec<_>>());
        let e = parallel_map(10, |i| if i == 7 { Err(Error::Calibration("x".into())) } else { Ok(i) });
        assert!(e.is_err());
    }

    #[test]
    fn stats_rates() {
        let mk = |safe, reached, t: Option<f64>, jerk| RunSummary {
            architecture: Architecture::LocalCBF,
            run_index: 0,
            seed: 0,
            safe,
            reached,
            reach_time_s: t,
            peak_jerk: jerk,
            min_h: 0.1,
            interventions: 0,
            steps: 1,
            aborted: None,
        };
        let runs = [mk(true, true, Some(10.0), 1.0), mk(true, false, None, 3.0), mk(false, true, Some(2.0), 2.0), mk(true, true, Some(20.0), 6.0)];
        let refs: Vec<&RunSummary> = runs.iter().collect();
        let s = ArchitectureStats::from_runs(Architecture::LocalCBF, &refs);
        assert_eq!((s.safe_rate, s.reach_rate, s.success_rate), (0.75, 0.75, 0.5));
        assert_eq!(s.avg_reach_time_s, Some(15.0));
        assert_eq!((s.peak_jerk_mean, s.peak_jerk_max), (3.0, 6.0));
        assert!(s.success_rate <= s.safe_rate.min(s.reach_rate));
    }

    #[test]
    fn envelope_over_ragged_runs() {
        let mut e = ClearanceEnvelope::default();
        for (k, d) in [1.0, 2.0, 3.0].iter().enumerate() {
            e.add(k, *d);
        }
        e.add(0, 3.0);
        e.finish();
        assert_eq!(e.mean, vec![2.0, 2.0, 3.0]);
        assert_eq!(e.min, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.max, vec![3.0, 2.0, 3.0]);
        assert_eq!(e.count, vec![2, 1, 1]);
    }

    fn summary(safe: bool, reached: bool, time: f64, jerk: f64) -> RunSummary {
        RunSummary {
            architecture: Architecture::LocalCBF,
            run_index: 0,
            seed: 0,
            safe,
            reached,
            reach_time_s: reached.then_some(time),
            peak_jerk: jerk,
            min_h: 0.0,
            interventions: 0,
            steps: 1,
            aborted: None,
        }
    }

    proptest! {
        #[test]
        fn success_never_exceeds_safe_or_reach(
            runs in prop::collection::vec((any::<bool>(), any::<bool>(), 1.0..50.0f64, 0.0..500.0f64), 1..40)
        ) {
            let runs: Vec<RunSummary> = runs.into_iter().map(|(s, r, t, j)| summary(s, r, t, j)).collect();
            let refs: Vec<&RunSummary> = runs.iter().collect();
            let st = ArchitectureStats::from_runs(Architecture::LocalCBF, &refs);
            prop_assert!(st.success_rate <= st.safe_rate.min(st.reach_rate));
            prop_assert!((0.0..=1.0).contains(&st.safe_rate) && (0.0..=1.0).contains(&st.reach_rate));
            prop_assert!(st.peak_jerk_mean <= st.peak_jerk_max + 1e-12);
            if let Some(t) = st.avg_reach_time_s {
                prop_assert!((1.0..50.0).contains(&t));
            }
        }

        #[test]
        fn samples_stay_inside_the_clip(
            sigma in 1e-4..0.1f64, clip in 1e-4..0.05f64, seed in any::<u64>(), index in any::<u64>(), dim in 1usize..8
        ) {
            let spec = DisturbanceSpec::new(sigma, clip, DisturbanceMode::Custom, seed).unwrap();
            let w = sample_disturbance(&spec, dim, index);
            prop_assert!(w.norm() <= clip * (1.0 + 1e-12));
            prop_assert_eq!(w, sample_disturbance(&spec, dim, index));
        }

        #[test]
        fn neighbouring_runs_get_distinct_seeds(base in any::<u64>(), i in 0usize..10_000) {
            prop_assert_ne!(run_seed(base, i), run_seed(base, i + 1));
        }
    }

    struct Arm {
        exp: Experiment,
        plant: Plant,
        calibration: Calibration,
    }

    fn arm() -> &'static Arm {
        static S: std::sync::OnceLock<Arm> = std::sync::OnceLock::new();
        S.get_or_init(|| {
            let exp = Experiment::default();
            let plant = exp.plant().unwrap();
            let calibration = exp.calibrate(&plant, 42).unwrap();
            Arm { exp, plant, calibration }
        })
    }

    #[test]
    fn batches_are_reproducible_and_paired() {
        let s = arm();
        let mut exp = s.exp.clone();
        exp.scenario.sim_horizon_steps = 600;
        let spec = DisturbanceSpec::high(11);
        let a = run_batch(&exp, &s.plant, Some(&s.calibration), &Architecture::ALL, spec, 3).unwrap();
        let b = run_batch(&exp, &s.plant, Some(&s.calibration), &Architecture::ALL, spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.len(), 15);
        for r in &a.runs {
            assert_eq!(r.seed, run_seed(11, r.run_index), "{r:?}");
            assert_eq!(r.steps, 600);
        }
        assert_eq!(a.envelopes.len(), 5 * s.exp.scenario.obstacles.len());
    }

    #[test]
    fn safe_rate_does_not_grow_with_the_clip() {
        let s = arm();
        let clips = [0.001, 0.002, 0.004, 0.008];
        let mut rates = Vec::new();
        for clip in clips {
            let spec = DisturbanceSpec::with_clip(clip, DisturbanceMode::Custom, 5).unwrap();
            let rep = run_batch(&s.exp, &s.plant, Some(&s.calibration), &Architecture::CBF, spec, 3).unwrap();
            rates.push(Architecture::CBF.map(|a| rep.stats(a).unwrap().safe_rate));
        }
        for (i, arch) in Architecture::CBF.iter().enumerate() {
            let column: Vec<f64> = rates.iter().map(|r| r[i]).collect();
            assert!(column.windows(2).all(|w| w[1] <= w[0]), "{arch}: {column:?} over {clips:?}");
        }
    }
}
