//! Sequential quadratic programming for small smooth problems
//! `min f(z)  s.t.  c(z) ≥ 0, lo ≤ z ≤ hi`.
//!
//! Derivatives come from central differences unless the problem supplies
//! them. When the objective is a sum of squared residuals the Hessian is the
//! Gauss–Newton matrix, otherwise a damped BFGS approximation. Steps are
//! globalized with an ℓ1 merit function and backtracking.

use nalgebra::{DMatrix, DVector};

use super::fd::FD_STEP;
use super::{solve_qp, ConstraintRef, MultiplierEntry, QpProblem, SolveReport, SolveStatus};
use crate::error::Result;

/// Values of an [`Nlp`] at one point.
#[derive(Clone, Debug)]
pub struct NlpPoint {
    pub objective: f64,
    /// When present, `objective == Σ residuals²`.
    pub residuals: Option<DVector<f64>>,
    /// Inequalities in the form `c(z) ≥ 0`.
    pub constraints: DVector<f64>,
}

/// Analytic first derivatives, when a problem can provide them.
#[derive(Clone, Debug)]
pub struct NlpDerivatives {
    pub gradient: DVector<f64>,
    pub residual_jacobian: Option<DMatrix<f64>>,
    pub constraint_jacobian: DMatrix<f64>,
}

pub trait Nlp {
    fn num_vars(&self) -> usize;
    /// Simple variable bounds; infinite entries are ignored.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn evaluate(&self, z: &DVector<f64>) -> NlpPoint;
    fn derivatives(&self, _z: &DVector<f64>, _at: &NlpPoint) -> Option<NlpDerivatives> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct SqpOptions {
    pub max_iter: usize,
    pub feas_tol: f64,
    pub stat_tol: f64,
    /// Stop once an accepted full step is this small (relative to `1 + ‖z‖∞`).
    pub step_tol: f64,
    pub fd_step: f64,
    pub max_halvings: usize,
    /// Weight on the squared elastic variable when a QP subproblem is infeasible.
    pub elastic_weight: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            feas_tol: 1e-6,
            stat_tol: 1e-4,
            step_tol: 1e-9,
            fd_step: FD_STEP,
            max_halvings: 30,
            elastic_weight: 1e6,
        }
    }
}

/// One accepted iteration: merit before and after, at the same penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeritStep {
    pub before: f64,
    pub after: f64,
    pub penalty: f64,
    pub step_length: f64,
}

struct Linearization {
    gradient: DVector<f64>,
    residual_jacobian: Option<DMatrix<f64>>,
    constraint_jacobian: DMatrix<f64>,
}

fn linearize<P: Nlp + ?Sized>(nlp: &P, z: &DVector<f64>, at: &NlpPoint, step: f64) -> Linearization {
    if let Some(d) = nlp.derivatives(z, at) {
        return Linearization {
            gradient: d.gradient,
            residual_jacobian: d.residual_jacobian,
            constraint_jacobian: d.constraint_jacobian,
        };
    }
    let n = z.len();
    let nc = at.constraints.len();
    let nr = at.residuals.as_ref().map_or(0, |r| r.len());
    let mut jc = DMatrix::zeros(nc, n);
    let mut jr = at.residuals.as_ref().map(|_| DMatrix::zeros(nr, n));
    let mut grad = DVector::zeros(n);
    let mut zp = z.clone();
    for j in 0..n {
        zp[j] = z[j] + step;
        let plus = nlp.evaluate(&zp);
        zp[j] = z[j] - step;
        let minus = nlp.evaluate(&zp);
        zp[j] = z[j];
        let inv = 1.0 / (2.0 * step);
        jc.set_column(j, &((&plus.constraints - &minus.constraints) * inv));
        if let (Some(jr), Some(rp), Some(rm)) = (jr.as_mut(), &plus.residuals, &minus.residuals) {
            jr.set_column(j, &((rp - rm) * inv));
        }
        grad[j] = (plus.objective - minus.objective) * inv;
    }
    if let (Some(jr), Some(r)) = (&jr, &at.residuals) {
        grad = jr.tr_mul(r) * 2.0;
    }
    Linearization {
        gradient: grad,
        residual_jacobian: jr,
        constraint_jacobian: jc,
    }
}

/// The first derivatives [`solve_nlp_sqp`] works with at `z`: the problem's
/// own when it supplies them, central differences with `step` otherwise.
pub fn sqp_derivatives<P: Nlp + ?Sized>(nlp: &P, z: &DVector<f64>, step: f64) -> NlpDerivatives {
    let at = nlp.evaluate(z);
    let lin = linearize(nlp, z, &at, step);
    NlpDerivatives {
        gradient: lin.gradient,
        residual_jacobian: lin.residual_jacobian,
        constraint_jacobian: lin.constraint_jacobian,
    }
}

fn violation_sum(c: &DVector<f64>) -> f64 {
    c.iter().map(|v| (-v).max(0.0)).sum()
}

fn violation_max(c: &DVector<f64>) -> f64 {
    c.iter().fold(0.0_f64, |acc, v| acc.max(-v))
}

fn clamp(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        z.len(),
        z.iter().zip(lo.iter().zip(hi.iter())).map(|(v, (l, h))| v.max(*l).min(*h)),
    )
}

/// Solves `nlp` from `z0`. Infeasible linearizations switch to an elastic
/// subproblem so the iteration always moves toward least violation; the
/// final status is `Infeasible` if constraints still fail by more than
/// `feas_tol`.
pub fn solve_nlp_sqp<P: Nlp + ?Sized>(nlp: &P, z0: &DVector<f64>, opts: &SqpOptions) -> Result<SolveReport> {
    let n = nlp.num_vars();
    let (lo, hi) = nlp.bounds();
    let mut z = clamp(z0, &lo, &hi);
    let mut point = nlp.evaluate(&z);
    let mut lin = linearize(nlp, &z, &point, opts.fd_step);
    let use_gn = point.residuals.is_some();
    let mut bfgs = DMatrix::<f64>::identity(n, n);
    let mut penalty: f64 = 1.0;
    let mut merit_steps = Vec::new();
    let mut best_feasible: Option<(DVector<f64>, f64)> = None;
    let mut last_active: Vec<ConstraintRef> = Vec::new();
    let mut last_mult: Vec<MultiplierEntry> = Vec::new();
    let mut certificate = Vec::new();
    let mut stationarity = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut elastic_active = false;

    let note_feasible = |best: &mut Option<(DVector<f64>, f64)>, z: &DVector<f64>, p: &NlpPoint| {
        if violation_max(&p.constraints) <= opts.feas_tol && best.as_ref().is_none_or(|(_, f)| p.objective < *f) {
            *best = Some((z.clone(), p.objective));
        }
    };
    note_feasible(&mut best_feasible, &z, &point);

    while iterations < opts.max_iter {
        iterations += 1;
        let hessian = if use_gn {
            let jr = lin.residual_jacobian.as_ref().expect("residual jacobian");
            let h = jr.tr_mul(jr) * 2.0;
            (&h + h.transpose()) * 0.5
        } else {
            bfgs.clone()
        };
        let nc = point.constraints.len();
        let qp = QpProblem::new(hessian.clone(), lin.gradient.clone())
            .with_constraints(lin.constraint_jacobian.clone(), -point.constraints.clone())
            .with_bounds(&lo - &z, &hi - &z);
        let mut sol = solve_qp(&qp)?;
        elastic_active = false;
        if sol.status == SolveStatus::Infeasible {
            certificate = sol.certificate.clone();
            let mut he = DMatrix::zeros(n + 1, n + 1);
            he.view_mut((0, 0), (n, n)).copy_from(&hessian);
            he[(n, n)] = opts.elastic_weight;
            let mut ge = DVector::zeros(n + 1);
            ge.rows_mut(0, n).copy_from(&lin.gradient);
            let mut ae = DMatrix::zeros(nc, n + 1);
            ae.view_mut((0, 0), (nc, n)).copy_from(&lin.constraint_jacobian);
            ae.column_mut(n).fill(1.0);
            let mut le = DVector::zeros(n + 1);
            le.rows_mut(0, n).copy_from(&(&lo - &z));
            let mut ue = DVector::from_element(n + 1, f64::INFINITY);
            ue.rows_mut(0, n).copy_from(&(&hi - &z));
            let eq = QpProblem::new(he, ge)
                .with_constraints(ae, -point.constraints.clone())
                .with_bounds(le, ue);
            let esol = solve_qp(&eq)?;
            if esol.status != SolveStatus::Optimal {
                status = esol.status;
                break;
            }
            sol = SolveReport {
                solution: esol.solution.rows(0, n).into_owned(),
                ..esol
            };
            elastic_active = true;
        } else if sol.status != SolveStatus::Optimal {
            status = sol.status;
            break;
        }
        let d = sol.solution.clone();

        // Lagrangian stationarity at the current iterate with the QP multipliers.
        let mut lag = lin.gradient.clone();
        for m in &sol.multipliers {
            match m.constraint {
                ConstraintRef::Inequality(i) => lag.axpy(-m.value, &lin.constraint_jacobian.row(i).transpose(), 1.0),
                ConstraintRef::Lower(j) => lag[j] -= m.value,
                ConstraintRef::Upper(j) => lag[j] += m.value,
            }
        }
        stationarity = lag.amax();
        last_active = sol.active_set.clone();
        last_mult = sol.multipliers.clone();

        let viol_max = violation_max(&point.constraints);
        let zscale = 1.0 + z.amax();
        let tiny = d.amax() <= opts.step_tol * zscale;
        if tiny || (stationarity <= opts.stat_tol && d.amax() <= 1e-6 * zscale) {
            if viol_max <= opts.feas_tol {
                status = SolveStatus::Optimal;
                break;
            }
            // A short step that still repairs the linearized constraints is
            // worth taking; otherwise we are stuck at a violated point.
            if tiny || elastic_active {
                status = SolveStatus::Infeasible;
                break;
            }
        }

        let lambda_max = sol
            .multipliers
            .iter()
            .filter(|m| matches!(m.constraint, ConstraintRef::Inequality(_)))
            .fold(0.0_f64, |acc, m| acc.max(m.value));
        penalty = penalty.max(1.1 * lambda_max + 1e-8);
        if elastic_active {
            penalty = penalty.max(opts.elastic_weight.sqrt());
        }

        let viol = violation_sum(&point.constraints);
        let lin_c = &point.constraints + &lin.constraint_jacobian * &d;
        let phi0 = point.objective + penalty * viol;
        let slope = lin.gradient.dot(&d) - penalty * (viol - violation_sum(&lin_c));
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = clamp(&(&z + &d * alpha), &lo, &hi);
            let tp = nlp.evaluate(&trial);
            let phi = tp.objective + penalty * violation_sum(&tp.constraints);
            if phi <= phi0 + 1e-4 * alpha * slope.min(0.0) && phi.is_finite() {
                accepted = Some((trial, tp, phi));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, tp, phi)) = accepted else {
            status = SolveStatus::MaxIter;
            break;
        };
        merit_steps.push(MeritStep {
            before: phi0,
            after: phi,
            penalty,
            step_length: alpha,
        });
        note_feasible(&mut best_feasible, &trial, &tp);

        let small_step = alpha == 1.0 && d.amax() <= 1e-7 * zscale;
        let new_lin = linearize(nlp, &trial, &tp, opts.fd_step);
        if !use_gn {
            // Damped BFGS on the Lagrangian gradient.
            let s = &trial - &z;
            let mult_term = |l: &Linearization| {
                let mut g = l.gradient.clone();
                for m in &sol.multipliers {
                    if let ConstraintRef::Inequality(i) = m.constraint {
                        g.axpy(-m.value, &l.constraint_jacobian.row(i).transpose(), 1.0);
                    }
                }
                g
            };
            let y = mult_term(&new_lin) - mult_term(&lin);
            let bs = &bfgs * &s;
            let sbs = s.dot(&bs);
            let sy = s.dot(&y);
            if sbs > 1e-16 {
                let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
                let r = &y * theta + &bs * (1.0 - theta);
                let sr = s.dot(&r);
                if sr > 1e-16 {
                    bfgs = &bfgs - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
                    bfgs = (&bfgs + bfgs.transpose()) * 0.5;
                }
            }
        }
        z = trial;
        point = tp;
        lin = new_lin;
        if small_step && violation_max(&point.constraints) <= opts.feas_tol {
            status = SolveStatus::Optimal;
            break;
        }
    }

    let max_violation = violation_max(&point.constraints);
    if status == SolveStatus::MaxIter {
        match best_feasible {
            Some((zb, _)) => {
                if zb != z {
                    z = zb;
                    point = nlp.evaluate(&z);
                }
            }
            None if max_violation > opts.feas_tol => status = SolveStatus::Infeasible,
            None => {}
        }
    }
    if status == SolveStatus::Optimal && elastic_active && max_violation > opts.feas_tol {
        status = SolveStatus::Infeasible;
    }
    if status != SolveStatus::Infeasible {
        certificate.clear();
    }
    Ok(SolveReport {
        max_violation: violation_max(&point.constraints),
        objective: point.objective,
        solution: z,
        status,
        active_set: last_active,
        multipliers: last_mult,
        iterations,
        certificate,
        kkt_residual: stationarity,
        merit_steps,
    })
}
