//! Discrete-time control-affine systems `x⁺ = f(x) + g(x)·u + w`, the
//! nominal rollout shared by the delay predictor and the shooting MPC, and
//! the FIFO of in-flight inputs.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub type State = DVector<f64>;
pub type Input = DVector<f64>;

/// Drift and input map of a control-affine system.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &State) -> State;
    fn input_map(&self, x: &State) -> DMatrix<f64>;

    /// Both parts at once. Implementations that share work between `f` and
    /// `g` (a mass-matrix inverse, say) override this.
    fn affine_parts(&self, x: &State) -> (State, DMatrix<f64>) {
        (self.drift(x), self.input_map(x))
    }
}

type VecFn = Arc<dyn Fn(&State) -> State + Send + Sync>;
type MatFn = Arc<dyn Fn(&State) -> DMatrix<f64> + Send + Sync>;

/// A [`ControlAffine`] built from two closures.
#[derive(Clone)]
pub struct FnDynamics {
    n: usize,
    m: usize,
    f: VecFn,
    g: MatFn,
}

impl FnDynamics {
    pub fn new(
        n: usize,
        m: usize,
        f: impl Fn(&State) -> State + Send + Sync + 'static,
        g: impl Fn(&State) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            m,
            f: Arc::new(f),
            g: Arc::new(g),
        }
    }
}

impl ControlAffine for FnDynamics {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, x: &State) -> State {
        (self.f)(x)
    }
    fn input_map(&self, x: &State) -> DMatrix<f64> {
        (self.g)(x)
    }
}

/// Symmetric box `|u_j| ≤ half_width_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSet {
    half_width: DVector<f64>,
}

impl InputSet {
    pub fn new(half_width: DVector<f64>) -> Result<Self> {
        if half_width.is_empty() || half_width.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "input box half-widths must be positive and finite, got {:?}",
                half_width.as_slice()
            )));
        }
        Ok(Self { half_width })
    }

    pub fn uniform(dim: usize, limit: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, limit))
    }

    pub fn dim(&self) -> usize {
        self.half_width.len()
    }

    pub fn half_width(&self) -> &DVector<f64> {
        &self.half_width
    }

    /// `ū = max_{u∈𝒰} ‖u‖₂`, the box corner.
    pub fn norm_bound(&self) -> f64 {
        self.half_width.norm()
    }

    pub fn contains(&self, u: &Input, tol: f64) -> bool {
        u.len() == self.dim()
            && u.iter()
                .zip(self.half_width.iter())
                .all(|(ui, w)| ui.abs() <= w + tol)
    }

    pub fn clamp(&self, u: &Input) -> Input {
        u.zip_map(&self.half_width, |ui, w| ui.clamp(-w, w))
    }

    /// Pontryagin difference with a Euclidean ball of the given radius. For a
    /// box this shrinks every half-width by the radius.
    pub fn tightened(&self, radius: f64) -> Result<Self> {
        if radius < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tightening radius must be nonnegative, got {radius}"
            )));
        }
        Self::new(self.half_width.map(|w| w - radius))
    }
}

/// Control-affine model with the Lipschitz metadata the tolerance bounds use.
#[derive(Clone)]
pub struct SystemModel {
    dynamics: Arc<dyn ControlAffine>,
    pub lipschitz_f: f64,
    pub lipschitz_g: f64,
    pub u_max: f64,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .field("lipschitz_f", &self.lipschitz_f)
            .field("lipschitz_g", &self.lipschitz_g)
            .field("u_max", &self.u_max)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        dynamics: Arc<dyn ControlAffine>,
        lipschitz_f: f64,
        lipschitz_g: f64,
        u_max: f64,
    ) -> Result<Self> {
        if !(lipschitz_f >= 0.0) || !(lipschitz_g >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Lipschitz constants must be nonnegative (L_f = {lipschitz_f}, L_g = {lipschitz_g})"
            )));
        }
        if !(u_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "input bound must be positive, got {u_max}"
            )));
        }
        if dynamics.state_dim() == 0 || dynamics.input_dim() == 0 {
            return Err(Error::InvalidParameter("state and input dimensions must be positive".into()));
        }
        Ok(Self {
            dynamics,
            lipschitz_f,
            lipschitz_g,
            u_max,
        })
    }

    /// `x⁺ = x + u`.
    pub fn integrator(u_max: f64) -> Result<Self> {
        let dynamics = FnDynamics::new(1, 1, |x| x.clone(), |_| DMatrix::from_element(1, 1, 1.0));
        Self::new(Arc::new(dynamics), 1.0, 0.0, u_max)
    }

    /// Forward-Euler double integrator, state `(p, v)`, input acceleration.
    pub fn double_integrator(ts: f64, u_max: f64) -> Result<Self> {
        if !(ts > 0.0) {
            return Err(Error::InvalidParameter(format!("sampling time must be positive, got {ts}")));
        }
        let dynamics = FnDynamics::new(
            2,
            1,
            move |x| DVector::from_vec(vec![x[0] + ts * x[1], x[1]]),
            move |_| DMatrix::from_column_slice(2, 1, &[0.0, ts]),
        );
        let a = DMatrix::from_row_slice(2, 2, &[1.0, ts, 0.0, 1.0]);
        let l_f = a.singular_values().max();
        Self::new(Arc::new(dynamics), l_f, 0.0, u_max)
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn dynamics(&self) -> &Arc<dyn ControlAffine> {
        &self.dynamics
    }

    pub fn drift(&self, x: &State) -> State {
        self.dynamics.drift(x)
    }

    pub fn input_map(&self, x: &State) -> DMatrix<f64> {
        self.dynamics.input_map(x)
    }

    /// `L_d = L_f + L_g·ū`.
    pub fn lipschitz_closed_loop(&self) -> f64 {
        self.lipschitz_f + self.lipschitz_g * self.u_max
    }

    /// One step of the true plant. No noise is added beyond `w`.
    pub fn step(&self, x: &State, u: &Input, w: &State) -> Result<State> {
        check_dim("step: state", self.state_dim(), x.len())?;
        check_dim("step: input", self.input_dim(), u.len())?;
        check_dim("step: disturbance", self.state_dim(), w.len())?;
        let (f, g) = self.dynamics.affine_parts(x);
        Ok(f + g * u + w)
    }

    /// Disturbance-free step `f(x) + g(x)·u`.
    pub fn nominal_step(&self, x: &State, u: &Input) -> Result<State> {
        check_dim("nominal_step: state", self.state_dim(), x.len())?;
        check_dim("nominal_step: input", self.input_dim(), u.len())?;
        let (f, g) = self.dynamics.affine_parts(x);
        Ok(f + g * u)
    }

    /// States `x_1..x_L` of the nominal recursion from `x0`.
    pub fn rollout<'a, I>(&self, x0: &State, inputs: I) -> Result<Vec<State>>
    where
        I: IntoIterator<Item = &'a Input>,
    {
        let mut x = x0.clone();
        let mut out = Vec::new();
        for u in inputs {
            x = self.nominal_step(&x, u)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Rolls the delayed measurement forward through the buffered inputs.
    pub fn predict(&self, x_delayed: &State, buffer: &InputBuffer) -> Result<State> {
        self.predict_with(x_delayed, buffer, |_, u| Ok(u.clone()))
    }

    /// Like [`predict`](Self::predict), but every buffered input first passes
    /// through `stage`, which sees the predicted state it is applied at. The
    /// closed loop uses this to replay plant-side safety filters.
    pub fn predict_with<F>(&self, x_delayed: &State, buffer: &InputBuffer, mut stage: F) -> Result<State>
    where
        F: FnMut(&State, &Input) -> Result<Input>,
    {
        check_dim("predict: state", self.state_dim(), x_delayed.len())?;
        if buffer.len() != buffer.delay() {
            return Err(Error::Buffer {
                tau: buffer.delay(),
                got: buffer.len(),
            });
        }
        let mut x = x_delayed.clone();
        for u in buffer.iter() {
            let applied = stage(&x, u)?;
            x = self.nominal_step(&x, &applied)?;
        }
        Ok(x)
    }
}

/// FIFO of the last `τ` inputs `u_{k−τ}, …, u_{k−1}` in application order.
#[derive(Clone, Debug)]
pub struct InputBuffer {
    tau: usize,
    entries: VecDeque<Input>,
}

impl InputBuffer {
    pub fn new(tau: usize) -> Self {
        Self {
            tau,
            entries: VecDeque::with_capacity(tau + 1),
        }
    }

    /// A buffer pre-filled with `τ` copies of `standby`.
    pub fn filled(tau: usize, standby: &Input) -> Self {
        let mut buf = Self::new(tau);
        for _ in 0..tau {
            buf.entries.push_back(standby.clone());
        }
        buf
    }

    pub fn from_inputs(inputs: Vec<Input>) -> Self {
        Self {
            tau: inputs.len(),
            entries: inputs.into(),
        }
    }

    pub fn delay(&self) -> usize {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.entries.len() == self.tau
    }

    /// Appends the newest input and drops the oldest once `τ` are held.
    pub fn push(&mut self, u: Input) {
        if self.tau == 0 {
            return;
        }
        self.entries.push_back(u);
        while self.entries.len() > self.tau {
            self.entries.pop_front();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Input> {
        self.entries.iter()
    }
}
