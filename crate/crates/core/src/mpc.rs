//! Remote model predictive controllers solved by single shooting from the
//! predicted state: nominal MPC, MPC with per-step barrier constraints, and
//! the slack-relaxed robust variant.
//!
//! Costs are sums of squared residuals so the SQP driver can use a
//! Gauss–Newton Hessian. Derivatives are central differences that exploit
//! causality: perturbing `u_j` only re-rolls the trajectory from step `j`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::barrier::BarrierSet;
use crate::dynamics::{Input, InputSet, State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::qp::{solve_nlp_sqp, Nlp, NlpDerivatives, NlpPoint, SolveStatus, SqpOptions};

/// Default slack penalty ρ.
pub const DEFAULT_SLACK_WEIGHT: f64 = 1e3;

/// Stage cost `q(x, u) = ‖r(x, u)‖²`.
pub trait StageCost: Send + Sync {
    /// Number of residuals; must not depend on the arguments.
    fn len(&self) -> usize;
    fn residuals(&self, x: &State, u: &Input, out: &mut [f64]);
}

/// Terminal cost `p(x) = ‖r(x)‖²`.
pub trait TerminalCost: Send + Sync {
    fn len(&self) -> usize;
    fn residuals(&self, x: &State, out: &mut [f64]);
}

/// `Σ q_i (x_i − r_i)² + Σ r_j u_j²` with diagonal weights.
#[derive(Clone, Debug)]
pub struct QuadraticCost {
    pub reference: State,
    pub state_weight: DVector<f64>,
    pub input_weight: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(reference: State, state_weight: DVector<f64>, input_weight: DVector<f64>) -> Result<Self> {
        check_dim("quadratic cost: weights", reference.len(), state_weight.len())?;
        if state_weight.iter().chain(input_weight.iter()).any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter("cost weights must be finite and nonnegative".into()));
        }
        Ok(Self {
            reference,
            state_weight,
            input_weight,
        })
    }
}

impl StageCost for QuadraticCost {
    fn len(&self) -> usize {
        self.reference.len() + self.input_weight.len()
    }

    fn residuals(&self, x: &State, u: &Input, out: &mut [f64]) {
        let n = self.reference.len();
        for i in 0..n {
            out[i] = self.state_weight[i].sqrt() * (x[i] - self.reference[i]);
        }
        for j in 0..self.input_weight.len() {
            out[n + j] = self.input_weight[j].sqrt() * u[j];
        }
    }
}

impl TerminalCost for QuadraticCost {
    fn len(&self) -> usize {
        self.reference.len()
    }

    fn residuals(&self, x: &State, out: &mut [f64]) {
        for i in 0..self.reference.len() {
            out[i] = self.state_weight[i].sqrt() * (x[i] - self.reference[i]);
        }
    }
}

/// State box enforced as a quadratic penalty on predicted states and
/// checked afterwards. Infinite bounds are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub weight: f64,
}

impl StateBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>, weight: f64) -> Result<Self> {
        check_dim("state box", lower.len(), upper.len())?;
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) || weight < 0.0 {
            return Err(Error::InvalidParameter("state box needs lower ≤ upper and weight ≥ 0".into()));
        }
        Ok(Self { lower, upper, weight })
    }

    /// Largest bound violation at `x`.
    pub fn violation(&self, x: &State) -> f64 {
        (0..x.len()).fold(0.0_f64, |acc, i| acc.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]))
    }

    fn residuals(&self, x: &State, out: &mut [f64]) {
        let s = self.weight.sqrt();
        for i in 0..x.len() {
            let excess = (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0);
            out[i] = s * excess;
        }
    }
}

/// Parameters of the slack-relaxed barrier constraints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustSpec {
    pub w_bar_r: f64,
    pub w_bar_l: f64,
    /// ρ in the slack cost `ρ·δ²`.
    pub slack_weight: f64,
    /// Radius of the ball removed from the input set (room for local corrections).
    pub input_margin: f64,
}

impl RobustSpec {
    pub fn new(w_bar_r: f64, w_bar_l: f64, slack_weight: f64, input_margin: f64) -> Result<Self> {
        if !(0.0..=w_bar_l).contains(&w_bar_r) {
            return Err(Error::InvalidParameter(format!("need 0 ≤ w̄_r ({w_bar_r}) ≤ w̄_l ({w_bar_l})")));
        }
        if slack_weight < 0.0 || input_margin < 0.0 {
            return Err(Error::InvalidParameter("slack weight and input margin must be nonnegative".into()));
        }
        Ok(Self {
            w_bar_r,
            w_bar_l,
            slack_weight,
            input_margin,
        })
    }
}

#[derive(Clone)]
pub struct MpcConfig {
    pub model: SystemModel,
    pub horizon: usize,
    pub stage_cost: Arc<dyn StageCost>,
    pub terminal_cost: Option<Arc<dyn TerminalCost>>,
    pub state_box: Option<StateBox>,
    pub input_set: InputSet,
    pub barriers: Option<BarrierSet>,
    pub robust: Option<RobustSpec>,
    pub sqp: SqpOptions,
}

impl fmt::Debug for MpcConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MpcConfig")
            .field("horizon", &self.horizon)
            .field("input_set", &self.input_set)
            .field("barriers", &self.barriers)
            .field("robust", &self.robust)
            .finish_non_exhaustive()
    }
}

impl MpcConfig {
    pub fn new(model: SystemModel, horizon: usize, stage_cost: Arc<dyn StageCost>, input_set: InputSet) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("MPC horizon must be at least 1".into()));
        }
        check_dim("mpc: input set", model.input_dim(), input_set.dim())?;
        Ok(Self {
            model,
            horizon,
            stage_cost,
            terminal_cost: None,
            state_box: None,
            input_set,
            barriers: None,
            robust: None,
            sqp: SqpOptions {
                max_iter: 30,
                feas_tol: 1e-8,
                ..SqpOptions::default()
            },
        })
    }

    pub fn with_barriers(mut self, barriers: BarrierSet) -> Self {
        self.barriers = Some(barriers);
        self
    }

    pub fn with_robust(mut self, robust: RobustSpec) -> Self {
        self.robust = Some(robust);
        self
    }

    pub fn with_state_box(mut self, state_box: StateBox) -> Result<Self> {
        check_dim("mpc: state box", self.model.state_dim(), state_box.lower.len())?;
        self.state_box = Some(state_box);
        Ok(self)
    }

    pub fn with_terminal_cost(mut self, cost: Arc<dyn TerminalCost>) -> Self {
        self.terminal_cost = Some(cost);
        self
    }

    pub fn with_stage_cost(&self, stage_cost: Arc<dyn StageCost>) -> Self {
        Self {
            stage_cost,
            ..self.clone()
        }
    }

    /// Upper bound on each slack, `L_h·(w̄_l − w̄_r)`.
    pub fn slack_cap(&self) -> Option<f64> {
        let (r, b) = (self.robust.as_ref()?, self.barriers.as_ref()?);
        Some(b.lipschitz() * (r.w_bar_l - r.w_bar_r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpcVariant {
    Nominal,
    Cbf,
    RobustCbf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub inputs: Vec<Input>,
    /// `x_{1|k} … x_{N|k}`.
    pub predicted_states: Vec<State>,
    pub slacks: Option<Vec<f64>>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Largest state-box violation along the prediction.
    pub state_violation: f64,
}

impl MpcSolution {
    pub fn first_input(&self) -> &Input {
        &self.inputs[0]
    }

    pub fn slack_sum(&self) -> f64 {
        self.slacks.as_ref().map_or(0.0, |s| s.iter().sum())
    }

    /// Decision vector `(u_0, …, u_{N−1})`, for warm starts.
    pub fn input_vector(&self) -> DVector<f64> {
        let m = self.inputs[0].len();
        let mut z = DVector::zeros(m * self.inputs.len());
        for (i, u) in self.inputs.iter().enumerate() {
            z.rows_mut(i * m, m).copy_from(u);
        }
        z
    }

    /// The plan advanced one step, last input repeated.
    pub fn shifted(&self) -> DVector<f64> {
        let m = self.inputs[0].len();
        let n = self.inputs.len();
        let mut z = DVector::zeros(m * n);
        for i in 0..n {
            z.rows_mut(i * m, m).copy_from(&self.inputs[(i + 1).min(n - 1)]);
        }
        z
    }
}

/// The single-shooting problem solved by [`solve`] for `variant`, with the
/// robust slacks free. Decision vector: inputs stacked in time, then slacks.
pub fn shooting_problem<'a>(cfg: &'a MpcConfig, x0: &'a State, variant: MpcVariant) -> Result<impl Nlp + 'a> {
    Shooting::new(cfg, x0, variant, true)
}

/// Shooting problem. `slacks_free` selects whether the robust slacks are
/// decision variables or pinned at zero.
struct Shooting<'a> {
    cfg: &'a MpcConfig,
    x0: &'a State,
    /// Per-member barrier values at `x0`.
    h0: Vec<f64>,
    gamma: f64,
    /// `L_h·w̄_r` for the robust variant, else 0.
    margin: f64,
    use_barriers: bool,
    slacks: bool,
    input_set: InputSet,
    slack_cap: f64,
    rs: usize,
    rb: usize,
    rt: usize,
}

struct Trajectory {
    states: Vec<State>,
    /// Barrier values per state index (0 = `x0`).
    h: Vec<Vec<f64>>,
}

impl<'a> Shooting<'a> {
    fn new(cfg: &'a MpcConfig, x0: &'a State, variant: MpcVariant, slacks: bool) -> Result<Self> {
        let use_barriers = variant != MpcVariant::Nominal;
        let (h0, gamma, margin) = match (&cfg.barriers, use_barriers) {
            (Some(b), true) => {
                let margin = match (&cfg.robust, variant) {
                    (Some(r), MpcVariant::RobustCbf) => b.lipschitz() * r.w_bar_r,
                    (None, MpcVariant::RobustCbf) => return Err(Error::InvalidParameter("robust MPC needs a RobustSpec".into())),
                    _ => 0.0,
                };
                (b.values(x0), b.gamma(), margin)
            }
            (None, true) => return Err(Error::InvalidParameter("barrier-constrained MPC needs barriers".into())),
            _ => (Vec::new(), 1.0, 0.0),
        };
        let input_set = match (&cfg.robust, variant) {
            (Some(r), MpcVariant::RobustCbf) if r.input_margin > 0.0 => cfg.input_set.tightened(r.input_margin)?,
            _ => cfg.input_set.clone(),
        };
        let slacks = slacks && variant == MpcVariant::RobustCbf;
        Ok(Self {
            cfg,
            x0,
            h0,
            gamma,
            margin,
            use_barriers,
            slacks,
            input_set,
            slack_cap: cfg.slack_cap().unwrap_or(0.0).max(0.0),
            rs: cfg.stage_cost.len(),
            rb: cfg.state_box.as_ref().map_or(0, |b| b.lower.len()),
            rt: cfg.terminal_cost.as_ref().map_or(0, |t| t.len()),
        })
    }

    fn m(&self) -> usize {
        self.cfg.model.input_dim()
    }

    fn n_horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn members(&self) -> usize {
        self.h0.len()
    }

    fn input(&self, z: &DVector<f64>, i: usize) -> Input {
        z.rows(i * self.m(), self.m()).into_owned()
    }

    fn slack(&self, z: &DVector<f64>, i: usize) -> f64 {
        if self.slacks {
            z[self.m() * self.n_horizon() + i]
        } else {
            0.0
        }
    }

    /// Residual rows owned by stage `i` (stage cost, box penalty on `x_{i+1}`, slack).
    fn stage_rows(&self) -> usize {
        self.rs + self.rb + usize::from(self.slacks)
    }

    fn num_residuals(&self) -> usize {
        self.n_horizon() * self.stage_rows() + self.rt
    }

    fn num_constraints(&self) -> usize {
        self.n_horizon() * self.members()
    }

    /// Rolls out from step `from`, reusing `base` for earlier states.
    fn roll(&self, z: &DVector<f64>, from: usize, base: Option<&Trajectory>) -> Trajectory {
        let n = self.n_horizon();
        let mut states = Vec::with_capacity(n + 1);
        let mut h = Vec::with_capacity(n + 1);
        match base {
            Some(b) => {
                states.extend_from_slice(&b.states[..=from]);
                h.extend_from_slice(&b.h[..=from]);
            }
            None => {
                debug_assert_eq!(from, 0);
                states.push(self.x0.clone());
                h.push(self.h0.clone());
            }
        }
        for i in from..n {
            let u = self.input(z, i);
            let (f, g) = self.cfg.model.dynamics().affine_parts(&states[i]);
            let next = f + g * u;
            if self.use_barriers {
                let mut v = Vec::with_capacity(self.members());
                self.cfg.barriers.as_ref().expect("barriers").values_into(&next, &mut v);
                h.push(v);
            } else {
                h.push(Vec::new());
            }
            states.push(next);
        }
        Trajectory { states, h }
    }

    fn fill_stage(&self, z: &DVector<f64>, t: &Trajectory, i: usize, r: &mut [f64], c: &mut [f64]) {
        let u = self.input(z, i);
        self.cfg.stage_cost.residuals(&t.states[i], &u, &mut r[..self.rs]);
        if let Some(b) = &self.cfg.state_box {
            b.residuals(&t.states[i + 1], &mut r[self.rs..self.rs + self.rb]);
        }
        let delta = self.slack(z, i);
        if self.slacks {
            let rho = self.cfg.robust.as_ref().map_or(0.0, |r| r.slack_weight);
            r[self.rs + self.rb] = rho.sqrt() * delta;
        }
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = t.h[i + 1][j] - (1.0 - self.gamma) * t.h[i][j] - self.margin + delta;
        }
    }

    fn fill_terminal(&self, t: &Trajectory, r: &mut [f64]) {
        if let Some(p) = &self.cfg.terminal_cost {
            p.residuals(&t.states[self.n_horizon()], r);
        }
    }

    /// Residuals and constraints from stage `from` on.
    fn fill(&self, z: &DVector<f64>, t: &Trajectory, from: usize, r: &mut DVector<f64>, c: &mut DVector<f64>) {
        let sr = self.stage_rows();
        let nm = self.members();
        for i in from..self.n_horizon() {
            let (rr, cc) = (&mut r.as_mut_slice()[i * sr..(i + 1) * sr], &mut c.as_mut_slice()[i * nm..(i + 1) * nm]);
            self.fill_stage(z, t, i, rr, cc);
        }
        let off = self.n_horizon() * sr;
        self.fill_terminal(t, &mut r.as_mut_slice()[off..off + self.rt]);
    }

    fn point(&self, z: &DVector<f64>) -> (Trajectory, NlpPoint) {
        let t = self.roll(z, 0, None);
        let mut r = DVector::zeros(self.num_residuals());
        let mut c = DVector::zeros(self.num_constraints());
        self.fill(z, &t, 0, &mut r, &mut c);
        let point = NlpPoint {
            objective: r.norm_squared(),
            residuals: Some(r),
            constraints: c,
        };
        (t, point)
    }
}

impl Nlp for Shooting<'_> {
    fn num_vars(&self) -> usize {
        self.m() * self.n_horizon() + if self.slacks { self.n_horizon() } else { 0 }
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let nv = self.num_vars();
        let mut lo = DVector::zeros(nv);
        let mut hi = DVector::zeros(nv);
        let hw = self.input_set.half_width();
        let m = self.m();
        for i in 0..self.n_horizon() {
            for j in 0..m {
                lo[i * m + j] = -hw[j];
                hi[i * m + j] = hw[j];
            }
        }
        for k in m * self.n_horizon()..nv {
            hi[k] = self.slack_cap;
        }
        (lo, hi)
    }

    fn evaluate(&self, z: &DVector<f64>) -> NlpPoint {
        self.point(z).1
    }

    fn derivatives(&self, z: &DVector<f64>, at: &NlpPoint) -> Option<NlpDerivatives> {
        let step = self.cfg.sqp.fd_step;
        let m = self.m();
        let n = self.n_horizon();
        let nv = self.num_vars();
        let nr = self.num_residuals();
        let nc = self.num_constraints();
        let sr = self.stage_rows();
        let nm = self.members();
        let base = self.roll(z, 0, None);
        let mut jr = DMatrix::zeros(nr, nv);
        let mut jc = DMatrix::zeros(nc, nv);
        let mut rp = DVector::zeros(nr);
        let mut rm = DVector::zeros(nr);
        let mut cp = DVector::zeros(nc);
        let mut cm = DVector::zeros(nc);
        let mut zp = z.clone();
        for i in 0..n {
            for j in 0..m {
                let col = i * m + j;
                zp[col] = z[col] + step;
                let tp = self.roll(&zp, i, Some(&base));
                self.fill(&zp, &tp, i, &mut rp, &mut cp);
                zp[col] = z[col] - step;
                let tm = self.roll(&zp, i, Some(&base));
                self.fill(&zp, &tm, i, &mut rm, &mut cm);
                zp[col] = z[col];
                let inv = 1.0 / (2.0 * step);
                for row in i * sr..nr {
                    jr[(row, col)] = (rp[row] - rm[row]) * inv;
                }
                for row in i * nm..nc {
                    jc[(row, col)] = (cp[row] - cm[row]) * inv;
                }
            }
        }
        if self.slacks {
            let rho = self.cfg.robust.as_ref().map_or(0.0, |r| r.slack_weight);
            for i in 0..n {
                let col = m * n + i;
                jr[(i * sr + self.rs + self.rb, col)] = rho.sqrt();
                for k in 0..nm {
                    jc[(i * nm + k, col)] = 1.0;
                }
            }
        }
        let r = at.residuals.as_ref().expect("shooting problems use residual form");
        Some(NlpDerivatives {
            gradient: jr.tr_mul(r) * 2.0,
            residual_jacobian: Some(jr),
            constraint_jacobian: jc,
        })
    }
}

fn default_start(cfg: &MpcConfig) -> DVector<f64> {
    DVector::zeros(cfg.model.input_dim() * cfg.horizon)
}

fn solve_once(cfg: &MpcConfig, x_hat: &State, variant: MpcVariant, slacks: bool, warm: &DVector<f64>) -> Result<MpcSolution> {
    check_dim("mpc: state", cfg.model.state_dim(), x_hat.len())?;
    let problem = Shooting::new(cfg, x_hat, variant, slacks)?;
    let m = problem.m();
    let n = problem.n_horizon();
    check_dim("mpc: warm start", m * n, warm.len())?;
    let mut z0 = DVector::zeros(problem.num_vars());
    z0.rows_mut(0, m * n).copy_from(warm);
    let report = solve_nlp_sqp(&problem, &z0, &cfg.sqp)?;
    let (traj, point) = problem.point(&report.solution);
    let inputs: Vec<Input> = (0..n).map(|i| problem.input(&report.solution, i)).collect();
    let predicted_states: Vec<State> = traj.states[1..].to_vec();
    let state_violation = cfg
        .state_box
        .as_ref()
        .map_or(0.0, |b| predicted_states.iter().fold(0.0_f64, |acc, x| acc.max(b.violation(x))));
    let slacks = (variant == MpcVariant::RobustCbf).then(|| (0..n).map(|i| problem.slack(&report.solution, i)).collect());
    Ok(MpcSolution {
        inputs,
        predicted_states,
        slacks,
        objective: point.objective,
        status: report.status,
        iterations: report.iterations,
        state_violation,
    })
}

/// Solves the requested variant from `x_hat`, starting at `warm` (stacked
/// inputs) or at zero. The robust variant first tries with every slack
/// pinned at zero and frees the slacks only if that fails, so slacks are
/// used only when the tightened constraints cannot otherwise be met.
pub fn solve(cfg: &MpcConfig, variant: MpcVariant, x_hat: &State, warm: Option<&DVector<f64>>) -> Result<MpcSolution> {
    let start = warm.cloned().unwrap_or_else(|| default_start(cfg));
    if variant != MpcVariant::RobustCbf {
        return solve_once(cfg, x_hat, variant, false, &start);
    }
    let pinned = solve_once(cfg, x_hat, variant, false, &start)?;
    if pinned.status == SolveStatus::Optimal || cfg.slack_cap().unwrap_or(0.0) <= 0.0 {
        return Ok(pinned);
    }
    solve_once(cfg, x_hat, variant, true, &pinned.input_vector())
}

pub fn solve_nominal(cfg: &MpcConfig, x_hat: &State) -> Result<MpcSolution> {
    solve(cfg, MpcVariant::Nominal, x_hat, None)
}

pub fn solve_mpc_cbf(cfg: &MpcConfig, x_hat: &State) -> Result<MpcSolution> {
    solve(cfg, MpcVariant::Cbf, x_hat, None)
}

pub fn solve_robust_mpc_cbf(cfg: &MpcConfig, x_hat: &State) -> Result<MpcSolution> {
    solve(cfg, MpcVariant::RobustCbf, x_hat, None)
}

/// Receding-horizon controller that warm-starts from its shifted last plan.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub config: MpcConfig,
    pub variant: MpcVariant,
    last: Option<MpcSolution>,
}

impl MpcController {
    pub fn new(config: MpcConfig, variant: MpcVariant) -> Self {
        Self {
            config,
            variant,
            last: None,
        }
    }

    pub fn solve(&mut self, x_hat: &State) -> Result<&MpcSolution> {
        let warm = self.last.as_ref().map(MpcSolution::shifted);
        let sol = solve(&self.config, self.variant, x_hat, warm.as_ref())?;
        Ok(self.last.insert(sol))
    }

    pub fn last(&self) -> Option<&MpcSolution> {
        self.last.as_ref()
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}
