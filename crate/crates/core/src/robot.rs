//! Planar three-link arm with circular obstacles and a waypoint task.
//!
//! Links are uniform rods without gravity (the arm moves in a horizontal
//! plane): `M(q) q̈ + C(q, q̇) q̇ + b q̇ = u`, with `C` built from the
//! Christoffel symbols of `M`. The state is `x = (q, q̇)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierFunction, BarrierSet, LipschitzEstimator, Region};
use crate::closed_loop::Task;
use crate::dynamics::{ControlAffine, Input, InputSet, State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::mpc::StageCost;

pub type Point = Vector2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    /// Metres.
    pub link_lengths: [f64; 3],
    /// Kilograms.
    pub link_masses: [f64; 3],
    /// Sampling time in seconds.
    pub ts: f64,
    /// Viscous joint friction, N·m·s/rad.
    pub damping: f64,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            link_lengths: [0.4, 0.3, 0.2],
            link_masses: [1.0, 0.8, 0.5],
            ts: 0.005,
            damping: 0.05,
        }
    }
}

/// Configuration-independent pieces of `M(q)`.
struct MassTerms {
    k11: f64,
    k12: f64,
    k13: f64,
    k22: f64,
    k23: f64,
    k33: f64,
    /// Coefficients of `cos q₂`, `cos(q₂+q₃)` and `cos q₃`.
    a: f64,
    b: f64,
    d: f64,
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        let positive = self.link_lengths.iter().chain(&self.link_masses).all(|v| *v > 0.0 && v.is_finite());
        if !positive || !(self.ts > 0.0) || !(self.damping >= 0.0) {
            return Err(Error::InvalidParameter(
                "arm needs positive lengths, masses and sampling time, and nonnegative damping".into(),
            ));
        }
        Ok(())
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    fn mass_terms(&self) -> MassTerms {
        let [l1, l2, l3] = self.link_lengths;
        let [m1, m2, m3] = self.link_masses;
        let (c1, c2, c3) = (l1 / 2.0, l2 / 2.0, l3 / 2.0);
        let (i1, i2, i3) = (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0, m3 * l3 * l3 / 12.0);
        let k33 = i3 + m3 * c3 * c3;
        let k22 = i2 + m2 * c2 * c2 + m3 * l2 * l2 + k33;
        let k11 = i1 + m1 * c1 * c1 + m2 * l1 * l1 + m3 * l1 * l1 + k22;
        MassTerms {
            k11,
            k12: k22,
            k13: k33,
            k22,
            k23: k33,
            k33,
            a: m2 * l1 * c2 + m3 * l1 * l2,
            b: m3 * l1 * c3,
            d: m3 * l2 * c3,
        }
    }

    /// Joint-space inertia matrix.
    pub fn mass_matrix(&self, q: &Vector3<f64>) -> Matrix3<f64> {
        let t = self.mass_terms();
        let (c2, c3, c23) = (q[1].cos(), q[2].cos(), (q[1] + q[2]).cos());
        let m11 = t.k11 + 2.0 * t.a * c2 + 2.0 * t.b * c23 + 2.0 * t.d * c3;
        let m12 = t.k12 + t.a * c2 + t.b * c23 + 2.0 * t.d * c3;
        let m13 = t.k13 + t.b * c23 + t.d * c3;
        let m22 = t.k22 + 2.0 * t.d * c3;
        let m23 = t.k23 + t.d * c3;
        Matrix3::new(m11, m12, m13, m12, m22, m23, m13, m23, t.k33)
    }

    /// `∂M/∂q_i` for `i = 1, 2, 3`.
    pub fn mass_matrix_partials(&self, q: &Vector3<f64>) -> [Matrix3<f64>; 3] {
        let t = self.mass_terms();
        let (s2, s3, s23) = (q[1].sin(), q[2].sin(), (q[1] + q[2]).sin());
        let sym = |a11: f64, a12: f64, a13: f64, a22: f64, a23: f64| Matrix3::new(a11, a12, a13, a12, a22, a23, a13, a23, 0.0);
        let dq2 = sym(-2.0 * t.a * s2 - 2.0 * t.b * s23, -t.a * s2 - t.b * s23, -t.b * s23, 0.0, 0.0);
        let dq3 = sym(
            -2.0 * t.b * s23 - 2.0 * t.d * s3,
            -t.b * s23 - 2.0 * t.d * s3,
            -t.b * s23 - t.d * s3,
            -2.0 * t.d * s3,
            -t.d * s3,
        );
        [Matrix3::zeros(), dq2, dq3]
    }

    /// Coriolis matrix from Christoffel symbols,
    /// `C_kj = Σ_i ½(∂M_kj/∂q_i + ∂M_ki/∂q_j − ∂M_ij/∂q_k) q̇_i`.
    pub fn coriolis(&self, q: &Vector3<f64>, qd: &Vector3<f64>) -> Matrix3<f64> {
        let dm = self.mass_matrix_partials(q);
        let mut c = Matrix3::zeros();
        for k in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for i in 0..3 {
                    s += 0.5 * (dm[i][(k, j)] + dm[j][(k, i)] - dm[k][(i, j)]) * qd[i];
                }
                c[(k, j)] = s;
            }
        }
        c
    }

    pub fn kinetic_energy(&self, q: &Vector3<f64>, qd: &Vector3<f64>) -> f64 {
        0.5 * qd.dot(&(self.mass_matrix(q) * qd))
    }

    /// `M⁻¹` and the unforced acceleration `−M⁻¹(C + bI)q̇`.
    fn acceleration_parts(&self, x: &State) -> (Matrix3<f64>, Vector3<f64>) {
        let q = Vector3::new(x[0], x[1], x[2]);
        let qd = Vector3::new(x[3], x[4], x[5]);
        let m = self.mass_matrix(&q);
        let m_inv = m.try_inverse().expect("inertia matrix of a valid arm is positive definite");
        let c = self.coriolis(&q, &qd);
        let a0 = -(m_inv * (c * qd + qd * self.damping));
        (m_inv, a0)
    }

    /// One semi-implicit Euler step `q̇⁺ = q̇ + T_s q̈`, `q⁺ = q + T_s q̇⁺`,
    /// followed by the additive disturbance.
    pub fn arm_step(&self, x: &State, u: &Input, w: &State) -> Result<State> {
        check_dim("arm_step: state", 6, x.len())?;
        check_dim("arm_step: input", 3, u.len())?;
        check_dim("arm_step: disturbance", 6, w.len())?;
        if let Some(i) = x.iter().chain(u.iter()).chain(w.iter()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let (f, g) = self.affine_parts(x);
        Ok(f + g * u + w)
    }

    /// Joint positions, interior samples and the end-effector, link by link:
    /// `joint₁, s₁₁…s₁ₖ, joint₂, s₂₁…, joint₃, s₃₁…, end-effector`.
    pub fn sample_points(&self, q: &[f64], per_link: usize) -> Vec<Point> {
        let mut out = Vec::with_capacity(3 * (per_link + 1) + 1);
        self.sample_points_into(q, per_link, &mut out);
        out
    }

    pub fn sample_points_into(&self, q: &[f64], per_link: usize, out: &mut Vec<Point>) {
        out.clear();
        let mut base = Point::zeros();
        let mut angle = 0.0;
        for j in 0..3 {
            angle += q[j];
            let dir = Point::new(angle.cos(), angle.sin()) * self.link_lengths[j];
            out.push(base);
            for s in 1..=per_link {
                out.push(base + dir * (s as f64 / (per_link + 1) as f64));
            }
            base += dir;
        }
        out.push(base);
    }

    pub fn end_effector(&self, q: &[f64]) -> Point {
        let mut p = Point::zeros();
        let mut angle = 0.0;
        for j in 0..3 {
            angle += q[j];
            p += Point::new(angle.cos(), angle.sin()) * self.link_lengths[j];
        }
        p
    }

    /// Generic model with sampled Lipschitz constants of `f` and `g` over
    /// all joint angles and joint speeds up to `speed_bound`.
    pub fn system_model(&self, input_limit: f64, speed_bound: f64, samples: usize, seed: u64) -> Result<SystemModel> {
        self.validate()?;
        let pi = std::f64::consts::PI;
        let region = Region::new(
            DVector::from_column_slice(&[-pi, -pi, -pi, -speed_bound, -speed_bound, -speed_bound]),
            DVector::from_column_slice(&[pi, pi, pi, speed_bound, speed_bound, speed_bound]),
        )?;
        let est = LipschitzEstimator::new(samples, seed);
        let l_f = est.vector(&region, |x| self.drift(x))?;
        let l_g = est.matrix(&region, |x| self.input_map(x))?;
        let u_max = InputSet::uniform(3, input_limit)?.norm_bound();
        SystemModel::new(Arc::new(*self), l_f, l_g, u_max)
    }
}

impl ControlAffine for ArmModel {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &State) -> State {
        self.affine_parts(x).0
    }

    fn input_map(&self, x: &State) -> DMatrix<f64> {
        self.affine_parts(x).1
    }

    fn affine_parts(&self, x: &State) -> (State, DMatrix<f64>) {
        let ts = self.ts;
        let (m_inv, a0) = self.acceleration_parts(x);
        let mut f = DVector::zeros(6);
        for i in 0..3 {
            let qd_next = x[3 + i] + ts * a0[i];
            f[3 + i] = qd_next;
            f[i] = x[i] + ts * qd_next;
        }
        let mut g = DMatrix::zeros(6, 3);
        for i in 0..3 {
            for j in 0..3 {
                g[(i, j)] = ts * ts * m_inv[(i, j)];
                g[(3 + i, j)] = ts * m_inv[(i, j)];
            }
        }
        (f, g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!("obstacle radius {radius} must be positive")));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> Point {
        Point::new(self.center[0], self.center[1])
    }

    /// Distance from `p` to the obstacle surface.
    pub fn clearance(&self, p: &Point) -> f64 {
        (p - self.center()).norm() - self.radius
    }
}

/// The reaching task: arm, obstacles, waypoints and run limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub arm: ArmModel,
    pub obstacles: Vec<Obstacle>,
    pub waypoints: Vec<[f64; 2]>,
    /// Initial joint angles; the arm starts at rest.
    pub initial_q: [f64; 3],
    pub reach_threshold: f64,
    pub epsilon: f64,
    pub samples_per_link: usize,
    pub sim_horizon_steps: usize,
    pub joint_vel_limit: f64,
    pub input_limit: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            arm: ArmModel::default(),
            obstacles: vec![
                Obstacle {
                    center: [0.7247, 0.4488],
                    radius: 0.06,
                },
                Obstacle {
                    center: [0.1061, 0.7106],
                    radius: 0.06,
                },
            ],
            waypoints: vec![[0.48, 0.57], [-0.13, 0.74]],
            initial_q: [-0.2, 0.5, 0.4],
            reach_threshold: 0.035,
            epsilon: 0.005,
            samples_per_link: 3,
            sim_horizon_steps: 9000,
            joint_vel_limit: 5.0,
            input_limit: 5.0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        if self.waypoints.is_empty() {
            return Err(Error::Scenario("at least one waypoint is required".into()));
        }
        for o in &self.obstacles {
            Obstacle::new(o.center, o.radius).map_err(|e| Error::Scenario(e.to_string()))?;
        }
        if !(self.reach_threshold > 0.0) || !(self.epsilon >= 0.0) || !(self.joint_vel_limit > 0.0) || !(self.input_limit > 0.0) {
            return Err(Error::Scenario(
                "reach threshold, velocity and input limits must be positive and epsilon nonnegative".into(),
            ));
        }
        if self.sim_horizon_steps == 0 {
            return Err(Error::Scenario("simulation horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> State {
        let q = self.initial_q;
        DVector::from_column_slice(&[q[0], q[1], q[2], 0.0, 0.0, 0.0])
    }

    pub fn num_sample_points(&self) -> usize {
        3 * (self.samples_per_link + 1) + 1
    }

    pub fn waypoint(&self, i: usize) -> Point {
        let w = self.waypoints[i.min(self.waypoints.len() - 1)];
        Point::new(w[0], w[1])
    }

    pub fn input_set(&self) -> Result<InputSet> {
        InputSet::uniform(3, self.input_limit)
    }

    /// Per-obstacle minimum of `‖p − O‖ − r` over all sample points.
    pub fn obstacle_distances(&self, x: &State) -> Vec<f64> {
        let pts = self.arm.sample_points(&x.as_slice()[..3], self.samples_per_link);
        self.obstacles
            .iter()
            .map(|o| pts.iter().map(|p| o.clearance(p)).fold(f64::INFINITY, f64::min))
            .collect()
    }

    /// Lipschitz bound of each sample point's position over all joint
    /// angles, estimated by sampling.
    pub fn sample_point_lipschitz(&self, samples: usize, seed: u64) -> Result<Vec<f64>> {
        let pi = std::f64::consts::PI;
        let region = Region::new(DVector::from_element(3, -pi), DVector::from_element(3, pi))?;
        let est = LipschitzEstimator::new(samples, seed);
        (0..self.num_sample_points())
            .map(|k| {
                est.vector(&region, |q| {
                    let p = self.arm.sample_points(q.as_slice(), self.samples_per_link)[k];
                    DVector::from_column_slice(p.as_slice())
                })
            })
            .collect()
    }

    /// One barrier per (sample point, obstacle), point-major, with a batch
    /// evaluator that computes the kinematics once per state.
    pub fn build_barriers(&self, gamma: f64) -> Result<BarrierSet> {
        self.validate()?;
        if self.obstacles.is_empty() {
            return Err(Error::Scenario("no obstacles to build barriers for".into()));
        }
        let lipschitz = self.sample_point_lipschitz(2000, 17)?;
        let arm = self.arm;
        let per_link = self.samples_per_link;
        let mut members = Vec::new();
        for (k, l_k) in lipschitz.iter().enumerate() {
            for (i, o) in self.obstacles.iter().enumerate() {
                let (center, offset) = (o.center(), o.radius + self.epsilon);
                // A fixed point (the base joint) still needs a positive constant.
                let l_h = l_k.max(1e-9);
                members.push(BarrierFunction::new(format!("p{k}/o{i}"), l_h, move |x: &State| {
                    let p = arm.sample_points(&x.as_slice()[..3], per_link)[k];
                    (p - center).norm() - offset
                })?);
            }
        }
        let obstacles: Vec<(Point, f64)> = self.obstacles.iter().map(|o| (o.center(), o.radius + self.epsilon)).collect();
        let set = BarrierSet::new(members, gamma)?.with_batch(move |x: &State, out: &mut Vec<f64>| {
            let pts = arm.sample_points(&x.as_slice()[..3], per_link);
            out.clear();
            for p in &pts {
                for (c, off) in &obstacles {
                    out.push((p - c).norm() - off);
                }
            }
        });
        let x0 = self.initial_state();
        for (m, v) in set.members().iter().zip(set.values(&x0)) {
            if !(v > 0.0) {
                return Err(Error::UnsafeInitialState {
                    label: m.label().to_string(),
                    value: v,
                });
            }
        }
        Ok(set)
    }

    /// Waypoint bookkeeping over a whole trajectory.
    pub fn task_status(&self, trajectory: &[State]) -> TaskStatus {
        let mut t = WaypointTracker::new(self);
        for (k, x) in trajectory.iter().enumerate() {
            if k >= self.sim_horizon_steps {
                break;
            }
            t.observe(self, k, x);
        }
        t.status(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub current_waypoint_index: usize,
    pub reached_all: bool,
    /// Step at which the last waypoint was consumed.
    pub reach_step: Option<usize>,
    pub waypoint_steps: Vec<usize>,
}

/// Consumes waypoints in order as the end-effector comes within the reach
/// threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WaypointTracker {
    next: usize,
    steps: Vec<usize>,
}

impl WaypointTracker {
    pub fn new(_scenario: &Scenario) -> Self {
        Self {
            next: 0,
            steps: Vec::new(),
        }
    }

    /// Index of the waypoint being tracked (the last one once all are done).
    pub fn target(&self, scenario: &Scenario) -> usize {
        self.next.min(scenario.waypoints.len() - 1)
    }

    pub fn done(&self, scenario: &Scenario) -> bool {
        self.next >= scenario.waypoints.len()
    }

    /// Consumes at most one waypoint per step.
    pub fn observe(&mut self, scenario: &Scenario, step: usize, x: &State) {
        if self.done(scenario) {
            return;
        }
        let ee = scenario.arm.end_effector(&x.as_slice()[..3]);
        if (ee - scenario.waypoint(self.next)).norm() < scenario.reach_threshold {
            self.steps.push(step);
            self.next += 1;
        }
    }

    pub fn status(&self, scenario: &Scenario) -> TaskStatus {
        let reached_all = self.done(scenario);
        TaskStatus {
            current_waypoint_index: self.target(scenario),
            reached_all,
            reach_step: if reached_all { self.steps.last().copied() } else { None },
            waypoint_steps: self.steps.clone(),
        }
    }
}

/// Stage-cost weights of the reaching MPC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachWeights {
    pub position: f64,
    pub velocity: f64,
    pub input: f64,
}

impl Default for ReachWeights {
    fn default() -> Self {
        Self {
            position: 100.0,
            velocity: 0.1,
            input: 0.01,
        }
    }
}

/// `w_p‖p_ee(q) − target‖² + w_v‖q̇‖² + w_u‖u‖²`.
#[derive(Clone, Debug)]
pub struct ReachCost {
    pub arm: ArmModel,
    pub target: Point,
    pub weights: ReachWeights,
}

impl StageCost for ReachCost {
    fn len(&self) -> usize {
        8
    }

    fn residuals(&self, x: &State, u: &Input, out: &mut [f64]) {
        let ee = self.arm.end_effector(&x.as_slice()[..3]);
        let (sp, sv, su) = (self.weights.position.sqrt(), self.weights.velocity.sqrt(), self.weights.input.sqrt());
        out[0] = sp * (ee[0] - self.target[0]);
        out[1] = sp * (ee[1] - self.target[1]);
        for i in 0..3 {
            out[2 + i] = sv * x[3 + i];
            out[5 + i] = su * u[i];
        }
    }
}

/// Sequential waypoint reaching for the closed loop.
#[derive(Clone, Debug)]
pub struct ReachTask {
    pub scenario: Scenario,
    pub weights: ReachWeights,
}

impl Task for ReachTask {
    fn num_targets(&self) -> usize {
        self.scenario.waypoints.len()
    }

    fn stage_cost(&self, target: usize) -> Arc<dyn StageCost> {
        Arc::new(ReachCost {
            arm: self.scenario.arm,
            target: self.scenario.waypoint(target),
            weights: self.weights,
        })
    }

    fn reached(&self, target: usize, x: &State) -> bool {
        let ee = self.scenario.arm.end_effector(&x.as_slice()[..3]);
        (ee - self.scenario.waypoint(target)).norm() < self.scenario.reach_threshold
    }
}
