//! Closed-loop simulation of the networked setup: plant, constant-delay
//! channel, predictor, remote MPC and the plant-side safety stage.
//!
//! Step protocol at time `k`:
//! 1. the plant state `x_k` is measured and enqueued;
//! 2. the remote side dequeues `x_{k−τ}` and predicts `x̂_k` through its
//!    record of the last `τ` inputs, replaying the plant-side filter;
//! 3. the remote controller solves from `x̂_k` and emits `u_remote`;
//! 4. the plant applies its local stage (identity, filter or robust filter);
//! 5. the plant steps with disturbance `w_k`.
//!
//! For `k < τ` there is no measurement yet and the remote input is the
//! standby input.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Input, InputBuffer, State, SystemModel};
use crate::error::{Error, Result};
use crate::mpc::{MpcConfig, MpcController, MpcVariant, StageCost};
use crate::qp::SolveStatus;
use crate::safety::{filter, robust_filter, FilterConfig, FilterResult};

/// Barrier values down to `−SAFETY_TOL` count as safe; the filters are
/// solved to about this accuracy.
pub const SAFETY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    NominalMPC,
    LocalCBF,
    RemoteMPCCBF,
    RobustLocalCBF,
    Combined,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::NominalMPC,
        Architecture::LocalCBF,
        Architecture::RemoteMPCCBF,
        Architecture::RobustLocalCBF,
        Architecture::Combined,
    ];

    /// The three safety architectures compared in the batch experiments.
    pub const CBF: [Architecture; 3] = [Architecture::LocalCBF, Architecture::RemoteMPCCBF, Architecture::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::NominalMPC => "nominal-mpc",
            Architecture::LocalCBF => "local-cbf",
            Architecture::RemoteMPCCBF => "mpc-cbf",
            Architecture::RobustLocalCBF => "robust-local-cbf",
            Architecture::Combined => "combined",
        }
    }

    pub fn remote_variant(self) -> MpcVariant {
        match self {
            Architecture::NominalMPC | Architecture::LocalCBF | Architecture::RobustLocalCBF => MpcVariant::Nominal,
            Architecture::RemoteMPCCBF => MpcVariant::Cbf,
            Architecture::Combined => MpcVariant::RobustCbf,
        }
    }

    /// True when the architecture uses the calibrated tolerances.
    pub fn is_robust(self) -> bool {
        self.remote_variant() == MpcVariant::RobustCbf || self.local_stage() == LocalStage::RobustFilter
    }

    pub fn local_stage(self) -> LocalStage {
        match self {
            Architecture::NominalMPC | Architecture::RemoteMPCCBF => LocalStage::PassThrough,
            Architecture::LocalCBF => LocalStage::Filter,
            Architecture::RobustLocalCBF | Architecture::Combined => LocalStage::RobustFilter,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.name().to_string()
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "nominalmpc" | "nominal" => Ok(Architecture::NominalMPC),
            "localcbf" | "local" => Ok(Architecture::LocalCBF),
            "mpccbf" | "remotempccbf" | "remote" => Ok(Architecture::RemoteMPCCBF),
            "robustlocalcbf" | "robustlocal" => Ok(Architecture::RobustLocalCBF),
            "combined" => Ok(Architecture::Combined),
            _ => Err(Error::InvalidParameter(format!("unknown architecture '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalStage {
    PassThrough,
    Filter,
    RobustFilter,
}

/// Applied input and, when a filter ran, its result.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub input: Input,
    pub filter: Option<FilterResult>,
}

/// The plant-side stage of `arch` applied to the remote input at `x`.
pub fn architecture_stage(arch: Architecture, x: &State, u_remote: &Input, cfg: &FilterConfig) -> Result<StageOutput> {
    let result = match arch.local_stage() {
        LocalStage::PassThrough => {
            return Ok(StageOutput {
                input: u_remote.clone(),
                filter: None,
            })
        }
        LocalStage::Filter => filter(cfg, x, u_remote)?,
        LocalStage::RobustFilter => robust_filter(cfg, x, u_remote)?,
    };
    Ok(StageOutput {
        input: result.u_applied.clone(),
        filter: Some(result),
    })
}

/// Sequential reaching targets. The remote controller tracks target `i`
/// with `stage_cost(i)`.
pub trait Task: Send + Sync {
    fn num_targets(&self) -> usize;
    fn stage_cost(&self, target: usize) -> Arc<dyn StageCost>;
    fn reached(&self, target: usize, x: &State) -> bool;
}

/// Additive disturbance `w_k`, possibly state dependent.
pub trait Disturbance {
    fn sample(&mut self, k: usize, x: &State) -> State;
}

pub struct NoDisturbance {
    dim: usize,
}

impl NoDisturbance {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Disturbance for NoDisturbance {
    fn sample(&mut self, _k: usize, _x: &State) -> State {
        State::zeros(self.dim)
    }
}

/// A fixed per-step sequence.
pub struct SequenceDisturbance(pub Vec<State>);

impl Disturbance for SequenceDisturbance {
    fn sample(&mut self, k: usize, _x: &State) -> State {
        self.0[k].clone()
    }
}

impl<F: FnMut(usize, &State) -> State> Disturbance for F {
    fn sample(&mut self, k: usize, x: &State) -> State {
        self(k, x)
    }
}

/// Measurement line with constant latency `τ`.
#[derive(Clone, Debug)]
pub struct ChannelState {
    tau: usize,
    line: VecDeque<Measurement>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub step: usize,
    pub state: State,
    /// Target index the plant was pursuing when measured.
    pub target: usize,
}

impl ChannelState {
    pub fn new(tau: usize) -> Self {
        Self {
            tau,
            line: VecDeque::with_capacity(tau + 1),
        }
    }

    pub fn send(&mut self, m: Measurement) {
        self.line.push_back(m);
    }

    /// The measurement taken at `now − τ`, once it has arrived.
    pub fn receive(&mut self, now: usize) -> Option<Measurement> {
        match self.line.front() {
            Some(m) if m.step + self.tau == now => self.line.pop_front(),
            _ => None,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.line.len()
    }
}

/// Everything one closed-loop run needs besides the architecture and the
/// disturbance.
#[derive(Clone)]
pub struct LoopSetup {
    pub model: SystemModel,
    pub tau: usize,
    pub max_steps: usize,
    /// Sampling time, for jerk and reach times.
    pub ts: f64,
    pub x0: State,
    pub standby: Input,
    /// Shared by the plant and the remote predictor.
    pub filter: FilterConfig,
    /// Remote controller template; the task supplies the stage cost.
    pub mpc: MpcConfig,
    pub task: Option<Arc<dyn Task>>,
}

impl fmt::Debug for LoopSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LoopSetup")
            .field("tau", &self.tau)
            .field("max_steps", &self.max_steps)
            .field("ts", &self.ts)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub state: State,
    pub u_remote: Input,
    pub u_applied: Input,
    pub disturbance: State,
    /// Composite barrier value at `state`.
    pub h: f64,
    pub intervened: bool,
    pub mpc_status: Option<SolveStatus>,
    pub filter_status: Option<SolveStatus>,
    pub slack_sum: f64,
    /// `‖x_k − x̂_k‖`; zero before the first measurement arrives.
    pub prediction_error: f64,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: Architecture,
    pub steps: Vec<StepLog>,
    pub final_state: State,
    pub min_h: f64,
    pub safety_violated: bool,
    pub violation_step: Option<usize>,
    pub waypoint_steps: Vec<usize>,
    pub reached_all: bool,
    pub reach_step: Option<usize>,
    pub peak_jerk: f64,
    pub interventions: usize,
    pub mpc_failures: usize,
    pub filter_failures: usize,
    pub max_prediction_error: f64,
    /// Set when a hard solver error stopped the run early.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn reach_time(&self, ts: f64) -> Option<f64> {
        self.reach_step.map(|k| k as f64 * ts)
    }

    /// Safe and all targets reached.
    pub fn success(&self) -> bool {
        !self.safety_violated && self.reached_all && self.aborted.is_none()
    }
}

/// `max_k ‖(u_k − u_{k−1})/T_s‖_∞` over `k ≥ from`.
pub fn peak_jerk(inputs: &[&Input], ts: f64, from: usize) -> f64 {
    let mut peak: f64 = 0.0;
    for k in from.max(1)..inputs.len() {
        let d = (inputs[k] - inputs[k - 1]).amax() / ts;
        peak = peak.max(d);
    }
    peak
}

struct Remote {
    controller: MpcController,
    configs: Vec<MpcConfig>,
    buffer: InputBuffer,
    target: usize,
}

/// Runs `arch` from `setup.x0` for `setup.max_steps` steps or until every
/// target has been reached.
pub fn run(arch: Architecture, setup: &LoopSetup, disturbance: &mut dyn Disturbance) -> Result<RunRecord> {
    let n = setup.model.state_dim();
    if setup.x0.len() != n {
        return Err(Error::Dimension {
            context: "run: initial state",
            expected: n,
            got: setup.x0.len(),
        });
    }
    let barriers = &setup.filter.barriers;
    if !(barriers.evaluate(&setup.x0) > 0.0) {
        return Err(Error::UnsafeInitialState {
            label: "composite".into(),
            value: barriers.evaluate(&setup.x0),
        });
    }
    let variant = arch.remote_variant();
    if variant == MpcVariant::RobustCbf && setup.mpc.robust.is_none() {
        return Err(Error::InvalidParameter(format!("{arch} needs calibrated robust MPC parameters")));
    }
    let configs: Vec<MpcConfig> = match &setup.task {
        Some(t) => (0..t.num_targets()).map(|i| setup.mpc.with_stage_cost(t.stage_cost(i))).collect(),
        None => vec![setup.mpc.clone()],
    };
    let mut remote = Remote {
        controller: MpcController::new(configs[0].clone(), variant),
        configs,
        buffer: InputBuffer::filled(setup.tau, &setup.standby),
        target: 0,
    };
    let mut channel = ChannelState::new(setup.tau);
    let mut x = setup.x0.clone();
    let mut plant_target = 0usize;
    let num_targets = setup.task.as_ref().map_or(0, |t| t.num_targets());
    let mut waypoint_steps = Vec::new();
    let mut steps: Vec<StepLog> = Vec::with_capacity(setup.max_steps.min(1 << 16));
    let mut aborted = None;
    let mut min_h = f64::INFINITY;
    let mut violation_step = None;

    let mut note_h = |k: usize, h: f64| {
        min_h = min_h.min(h);
        if h < -SAFETY_TOL && violation_step.is_none() {
            violation_step = Some(k);
        }
    };

    for k in 0..setup.max_steps {
        if let Some(task) = &setup.task {
            if plant_target < num_targets && task.reached(plant_target, &x) {
                waypoint_steps.push(k);
                plant_target += 1;
            }
            if plant_target >= num_targets {
                break;
            }
        }
        let h = barriers.evaluate(&x);
        note_h(k, h);

        channel.send(Measurement {
            step: k,
            state: x.clone(),
            target: plant_target,
        });
        let outcome = remote_step(arch, setup, &mut remote, &mut channel, k, &x).and_then(|(u_remote, mpc_status, slack, err)| {
            let stage = architecture_stage(arch, &x, &u_remote, &setup.filter)?;
            Ok((u_remote, mpc_status, slack, err, stage))
        });
        let (u_remote, mpc_status, slack_sum, prediction_error, stage) = match outcome {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let w = disturbance.sample(k, &x);
        let next = match setup.model.step(&x, &stage.input, &w) {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        remote.buffer.push(u_remote.clone());
        steps.push(StepLog {
            step: k,
            state: std::mem::replace(&mut x, next),
            u_remote,
            u_applied: stage.input,
            disturbance: w,
            h,
            intervened: stage.filter.as_ref().is_some_and(|f| f.intervened),
            mpc_status,
            filter_status: stage.filter.as_ref().map(|f| f.status),
            slack_sum,
            prediction_error,
            target: plant_target,
        });
    }
    if aborted.is_none() {
        note_h(steps.len(), barriers.evaluate(&x));
    }

    let applied: Vec<&Input> = steps.iter().map(|s| &s.u_applied).collect();
    let reached_all = setup.task.is_some() && plant_target >= num_targets;
    Ok(RunRecord {
        architecture: arch,
        peak_jerk: peak_jerk(&applied, setup.ts, setup.tau + 1),
        interventions: steps.iter().filter(|s| s.intervened).count(),
        mpc_failures: steps.iter().filter(|s| matches!(s.mpc_status, Some(st) if st != SolveStatus::Optimal)).count(),
        filter_failures: steps.iter().filter(|s| matches!(s.filter_status, Some(st) if st != SolveStatus::Optimal)).count(),
        max_prediction_error: steps.iter().map(|s| s.prediction_error).fold(0.0, f64::max),
        steps,
        final_state: x,
        safety_violated: violation_step.is_some() || aborted.is_some(),
        violation_step,
        reach_step: if reached_all { waypoint_steps.last().copied() } else { None },
        waypoint_steps,
        reached_all,
        min_h,
        aborted,
    })
}

type RemoteOutput = (Input, Option<SolveStatus>, f64, f64);

fn remote_step(
    arch: Architecture,
    setup: &LoopSetup,
    remote: &mut Remote,
    channel: &mut ChannelState,
    k: usize,
    x_true: &State,
) -> Result<RemoteOutput> {
    let Some(m) = channel.receive(k) else {
        return Ok((setup.standby.clone(), None, 0.0, 0.0));
    };
    let x_hat = setup
        .model
        .predict_with(&m.state, &remote.buffer, |x, u| Ok(architecture_stage(arch, x, u, &setup.filter)?.input))?;
    let prediction_error = (x_true - &x_hat).norm();

    let mut target = remote.target.max(m.target);
    if let Some(task) = &setup.task {
        while target + 1 < task.num_targets() && task.reached(target, &x_hat) {
            target += 1;
        }
    }
    let target = target.min(remote.configs.len() - 1);
    if target != remote.target {
        remote.target = target;
        remote.controller.config = remote.configs[target].clone();
    }
    let sol = remote.controller.solve(&x_hat)?;
    Ok((sol.first_input().clone(), Some(sol.status), sol.slack_sum(), prediction_error))
}
