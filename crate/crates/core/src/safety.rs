//! Plant-side safety filters.
//!
//! The filter solves
//!
//! ```text
//!   min ½‖u − u_ref‖²
//!   s.t. h_j(f(x) + g(x)u) ≥ (1−γ)·h_j(x) + margin   for every member j
//!        u ∈ 𝒰
//! ```
//!
//! on the nominal next state. The plain filter uses `margin = 0`
//! (or a fixed configured margin); the robust filter uses `L_h·w̄_l`.

use nalgebra::{DMatrix, DVector};

use crate::barrier::BarrierSet;
use crate::dynamics::{Input, InputSet, State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::qp::{solve_nlp_sqp, Nlp, NlpPoint, SolveStatus, SqpOptions};

/// Output difference above which a filter counts as having intervened.
pub const INTERVENTION_TOL: f64 = 1e-9;

/// Source of the local disturbance tolerance used by the robust filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalTolerance {
    /// `w̄_l(x) = (1−γ)h(x)/L_h` at the state being filtered.
    Pointwise,
    /// A scenario constant, typically calibrated from disturbance-free runs.
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub barriers: BarrierSet,
    pub model: SystemModel,
    pub input_set: InputSet,
    /// Extra margin of the plain filter (0 for the textbook filter).
    pub tighten: f64,
    pub robust_tolerance: LocalTolerance,
    pub sqp: SqpOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub u_applied: Input,
    pub u_reference: Input,
    pub intervened: bool,
    /// Smallest member residual (margin included) at the reference input.
    pub residual_before: f64,
    /// Smallest member residual at the applied input.
    pub residual_after: f64,
    pub status: SolveStatus,
}

impl FilterConfig {
    pub fn new(model: SystemModel, barriers: BarrierSet, input_set: InputSet) -> Result<Self> {
        check_dim("filter: input set", model.input_dim(), input_set.dim())?;
        Ok(Self {
            barriers,
            model,
            input_set,
            tighten: 0.0,
            robust_tolerance: LocalTolerance::Pointwise,
            sqp: SqpOptions {
                feas_tol: 1e-10,
                step_tol: 1e-13,
                ..SqpOptions::default()
            },
        })
    }

    /// Sets a fixed margin for [`filter`]. Rejected unless it is below
    /// `γ·h(x0)`, since otherwise the filter is infeasible from the start.
    pub fn with_tightening(mut self, margin: f64, x0: &State) -> Result<Self> {
        self.check_margin(margin, x0)?;
        self.tighten = margin;
        Ok(self)
    }

    /// Uses a constant `w̄_l` in [`robust_filter`], subject to the same
    /// start-up feasibility check on `L_h·w̄_l`.
    pub fn with_robust_tolerance(mut self, w_bar_l: f64, x0: &State) -> Result<Self> {
        self.check_margin(self.barriers.lipschitz() * w_bar_l, x0)?;
        self.robust_tolerance = LocalTolerance::Constant(w_bar_l);
        Ok(self)
    }

    fn check_margin(&self, margin: f64, x0: &State) -> Result<()> {
        if !(margin >= 0.0) {
            return Err(Error::InvalidParameter(format!("tightening must be nonnegative, got {margin}")));
        }
        let limit = self.barriers.gamma() * self.barriers.evaluate(x0);
        if margin > 0.0 && margin >= limit {
            return Err(Error::InvalidParameter(format!(
                "tightening {margin:e} is not below γ·h(x0) = {limit:e}; the filter would be infeasible at start"
            )));
        }
        Ok(())
    }

    /// Margin the robust filter applies at `x`.
    pub fn robust_margin(&self, x: &State) -> f64 {
        let l_h = self.barriers.lipschitz();
        let w_bar_l = match self.robust_tolerance {
            LocalTolerance::Constant(w) => w,
            LocalTolerance::Pointwise => (1.0 - self.barriers.gamma()) * self.barriers.evaluate(x).max(0.0) / l_h,
        };
        l_h * w_bar_l
    }
}

/// Per-call data: the affine next-state map and per-member thresholds.
struct FilterProblem<'a> {
    cfg: &'a FilterConfig,
    drift: State,
    input_map: DMatrix<f64>,
    thresholds: Vec<f64>,
    u_ref: &'a Input,
    /// Fallback mode: an extra variable `s ≥ 0` relaxes every constraint.
    elastic: bool,
}

const ELASTIC_REG: f64 = 1e-6;

impl FilterProblem<'_> {
    fn residuals_at(&self, u: &[f64], out: &mut Vec<f64>) {
        let u = DVector::from_column_slice(u);
        let next = &self.drift + &self.input_map * u;
        self.cfg.barriers.values_into(&next, out);
        for (v, t) in out.iter_mut().zip(&self.thresholds) {
            *v -= t;
        }
    }

    fn min_residual(&self, u: &Input) -> f64 {
        let mut out = Vec::new();
        self.residuals_at(u.as_slice(), &mut out);
        out.into_iter().fold(f64::INFINITY, f64::min)
    }
}

impl Nlp for FilterProblem<'_> {
    fn num_vars(&self) -> usize {
        self.u_ref.len() + usize::from(self.elastic)
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.u_ref.len();
        let hw = self.cfg.input_set.half_width();
        let mut lo = DVector::from_element(self.num_vars(), 0.0);
        let mut hi = DVector::from_element(self.num_vars(), f64::INFINITY);
        for j in 0..m {
            lo[j] = -hw[j];
            hi[j] = hw[j];
        }
        (lo, hi)
    }

    fn evaluate(&self, z: &DVector<f64>) -> NlpPoint {
        let m = self.u_ref.len();
        let mut c = Vec::new();
        self.residuals_at(&z.as_slice()[..m], &mut c);
        let du = z.rows(0, m) - self.u_ref;
        let residuals = if self.elastic {
            let s = z[m];
            for v in c.iter_mut() {
                *v += s;
            }
            let mut r = DVector::zeros(m + 1);
            r.rows_mut(0, m).copy_from(&(du * (0.5 * ELASTIC_REG).sqrt()));
            r[m] = s * 0.5f64.sqrt();
            r
        } else {
            du * 0.5f64.sqrt()
        };
        NlpPoint {
            objective: residuals.norm_squared(),
            residuals: Some(residuals),
            constraints: DVector::from_vec(c),
        }
    }
}

fn filter_with_margin(cfg: &FilterConfig, x: &State, u_ref: &Input, margin: f64) -> Result<FilterResult> {
    check_dim("filter: state", cfg.model.state_dim(), x.len())?;
    check_dim("filter: input", cfg.model.input_dim(), u_ref.len())?;
    let gamma = cfg.barriers.gamma();
    let (drift, input_map) = cfg.model.dynamics().affine_parts(x);
    let thresholds = cfg
        .barriers
        .values(x)
        .into_iter()
        .map(|h| (1.0 - gamma) * h + margin)
        .collect();
    let mut problem = FilterProblem {
        cfg,
        drift,
        input_map,
        thresholds,
        u_ref,
        elastic: false,
    };
    let residual_before = problem.min_residual(u_ref);
    // Same acceptance tolerance as the solver, so filtering is idempotent.
    if residual_before >= -cfg.sqp.feas_tol && cfg.input_set.contains(u_ref, 0.0) {
        return Ok(FilterResult {
            u_applied: u_ref.clone(),
            u_reference: u_ref.clone(),
            intervened: false,
            residual_before,
            residual_after: residual_before,
            status: SolveStatus::Optimal,
        });
    }

    let start = cfg.input_set.clamp(u_ref);
    let report = solve_nlp_sqp(&problem, &start, &cfg.sqp)?;
    let (u_applied, status) = if report.status == SolveStatus::Optimal {
        (report.solution, SolveStatus::Optimal)
    } else {
        // Infeasible at runtime: apply the input with the largest worst-case residual.
        problem.elastic = true;
        let m = u_ref.len();
        let mut z0 = DVector::zeros(m + 1);
        z0.rows_mut(0, m).copy_from(&report.solution.rows(0, m));
        z0[m] = (-problem.min_residual(&report.solution.rows(0, m).into_owned())).max(0.0);
        let relaxed = solve_nlp_sqp(&problem, &z0, &cfg.sqp)?;
        problem.elastic = false;
        let u = relaxed.solution.rows(0, m).into_owned();
        let status = if problem.min_residual(&u) >= -cfg.sqp.feas_tol {
            report.status
        } else {
            SolveStatus::Infeasible
        };
        (u, status)
    };
    let residual_after = problem.min_residual(&u_applied);
    Ok(FilterResult {
        intervened: (&u_applied - u_ref).norm() > INTERVENTION_TOL,
        u_applied,
        u_reference: u_ref.clone(),
        residual_before,
        residual_after,
        status,
    })
}

/// Local CBF filter with the configured fixed margin.
pub fn filter(cfg: &FilterConfig, x: &State, u_ref: &Input) -> Result<FilterResult> {
    filter_with_margin(cfg, x, u_ref, cfg.tighten)
}

/// Robust local CBF filter with margin `L_h·w̄_l`.
pub fn robust_filter(cfg: &FilterConfig, x: &State, u_ref: &Input) -> Result<FilterResult> {
    filter_with_margin(cfg, x, u_ref, cfg.robust_margin(x))
}
