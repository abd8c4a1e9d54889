//! Small dense optimization kernels.
//!
//! [`solve_qp`] is a dual active-set method in the Goldfarb–Idnani family
//! for `min ½zᵀHz + cᵀz  s.t.  A z ≥ b, lo ≤ z ≤ hi`. The safety filters and
//! the shooting MPC use it through the SQP driver in [`sqp`].

pub mod fd;
pub mod sqp;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use fd::{fd_gradient, fd_jacobian, FD_STEP};
pub use sqp::{solve_nlp_sqp, sqp_derivatives, MeritStep, Nlp, NlpDerivatives, NlpPoint, SqpOptions};

/// Default cap on active-set changes.
pub const QP_MAX_ITER: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// A constraint of a [`QpProblem`]: a general inequality row or a variable bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConstraintRef {
    Inequality(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplierEntry {
    pub constraint: ConstraintRef,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub active_set: Vec<ConstraintRef>,
    /// Lagrange multipliers of the active constraints (≥ 0).
    pub multipliers: Vec<MultiplierEntry>,
    pub iterations: usize,
    /// For `Infeasible`: a subset of constraints that cannot hold together.
    pub certificate: Vec<ConstraintRef>,
    pub max_violation: f64,
    pub kkt_residual: f64,
    /// Accepted SQP steps; empty for a plain QP.
    pub merit_steps: Vec<MeritStep>,
}

/// `min ½zᵀHz + cᵀz` subject to `A z ≥ b` and optional per-variable bounds.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
    pub max_iter: usize,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: None,
            upper: None,
            max_iter: QP_MAX_ITER,
        }
    }

    pub fn with_constraints(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Largest violation over all constraints at `z`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.ineq_matrix.nrows() > 0 {
            let s = &self.ineq_matrix * z - &self.ineq_rhs;
            v = s.iter().fold(v, |acc, si| acc.max(-si));
        }
        if let Some(lo) = &self.lower {
            v = z.iter().zip(lo.iter()).fold(v, |acc, (zi, l)| acc.max(l - zi));
        }
        if let Some(hi) = &self.upper {
            v = z.iter().zip(hi.iter()).fold(v, |acc, (zi, h)| acc.max(zi - h));
        }
        v.max(0.0)
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let h = &self.hessian;
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::Dimension {
                context: "qp: hessian",
                expected: n,
                got: h.nrows(),
            });
        }
        if self.ineq_matrix.nrows() != self.ineq_rhs.len() || (self.ineq_matrix.nrows() > 0 && self.ineq_matrix.ncols() != n) {
            return Err(Error::Dimension {
                context: "qp: constraint matrix",
                expected: n,
                got: self.ineq_matrix.ncols(),
            });
        }
        for b in [&self.lower, &self.upper].into_iter().flatten() {
            if b.len() != n {
                return Err(Error::Dimension {
                    context: "qp: bounds",
                    expected: n,
                    got: b.len(),
                });
            }
        }
        let scale = h.amax().max(1.0);
        if (h - h.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidParameter("qp: hessian is not symmetric".into()));
        }
        Ok(())
    }
}

/// Lower-triangular factor of `H` (regularized if `H` is singular PSD).
fn factor_hessian(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = h.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.amax().max(1.0);
    if min < -1e-10 * max {
        return Err(Error::NotPositiveSemidefinite(min));
    }
    let n = h.nrows();
    let mut reg = 1e-10 * max;
    for _ in 0..20 {
        let shifted = h + DMatrix::identity(n, n) * reg;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.l());
        }
        reg *= 10.0;
    }
    Err(Error::NotPositiveSemidefinite(min))
}

struct Row {
    id: ConstraintRef,
    normal: DVector<f64>,
    rhs: f64,
    scale: f64,
}

fn collect_rows(p: &QpProblem) -> (Vec<Row>, Vec<ConstraintRef>) {
    let n = p.num_vars();
    let mut rows = Vec::new();
    let mut trivially_infeasible = Vec::new();
    let mut push = |id, normal: DVector<f64>, rhs: f64| {
        let norm = normal.norm();
        if norm == 0.0 {
            if rhs > 0.0 {
                trivially_infeasible.push(id);
            }
            return;
        }
        rows.push(Row {
            id,
            normal: normal / norm,
            rhs: rhs / norm,
            scale: norm,
        });
    };
    for i in 0..p.ineq_matrix.nrows() {
        push(
            ConstraintRef::Inequality(i),
            p.ineq_matrix.row(i).transpose(),
            p.ineq_rhs[i],
        );
    }
    if let Some(lo) = &p.lower {
        for j in 0..n {
            if lo[j].is_finite() {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                push(ConstraintRef::Lower(j), e, lo[j]);
            }
        }
    }
    if let Some(hi) = &p.upper {
        for j in 0..n {
            if hi[j].is_finite() {
                let mut e = DVector::zeros(n);
                e[j] = -1.0;
                push(ConstraintRef::Upper(j), e, -hi[j]);
            }
        }
    }
    (rows, trivially_infeasible)
}

/// Solves a convex QP. Non-PSD Hessians are a hard error; infeasibility and
/// the iteration cap are reported through [`SolveStatus`].
pub fn solve_qp(p: &QpProblem) -> Result<SolveReport> {
    p.validate()?;
    let n = p.num_vars();
    let l = factor_hessian(&p.hessian)?;
    let (rows, trivial) = collect_rows(p);

    // Unconstrained minimizer x = −H⁻¹c.
    let mut x = -p.linear.clone();
    l.solve_lower_triangular_mut(&mut x);
    l.tr_solve_lower_triangular_mut(&mut x);

    let report = |x: DVector<f64>, status, active: &[usize], u: &[f64], iterations, certificate: Vec<ConstraintRef>| {
        let multipliers: Vec<MultiplierEntry> = active
            .iter()
            .zip(u)
            .map(|(&a, &ui)| MultiplierEntry {
                constraint: rows[a].id,
                value: ui / rows[a].scale,
            })
            .collect();
        let mut grad = &p.hessian * &x + &p.linear;
        for (&a, &ui) in active.iter().zip(u) {
            grad.axpy(-ui, &rows[a].normal, 1.0);
        }
        SolveReport {
            objective: p.objective(&x),
            max_violation: p.max_violation(&x),
            kkt_residual: grad.amax(),
            solution: x,
            status,
            active_set: active.iter().map(|&a| rows[a].id).collect(),
            multipliers,
            iterations,
            certificate,
            merit_steps: Vec::new(),
        }
    };

    if !trivial.is_empty() {
        return Ok(report(x, SolveStatus::Infeasible, &[], &[], 0, trivial));
    }

    // Constraint normals mapped into the whitened space y = Lᵀx.
    let whitened: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.normal.clone();
            l.solve_lower_triangular_mut(&mut v);
            v
        })
        .collect();

    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        // Most violated inactive constraint.
        let mut worst: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = r.normal.dot(&x) - r.rhs;
            let tol = 1e-12 * (1.0 + r.rhs.abs());
            if s < -tol && worst.is_none_or(|(_, sw)| s < sw) {
                worst = Some((i, s));
            }
        }
        let Some((p_idx, mut s_p)) = worst else {
            polish_active(&mut x, &l, &rows, &whitened, &active);
            return Ok(report(x, SolveStatus::Optimal, &active, &u, iterations, Vec::new()));
        };

        let mut u_plus = u.clone();
        u_plus.push(0.0);
        loop {
            iterations += 1;
            if iterations > p.max_iter {
                return Ok(report(x, SolveStatus::MaxIter, &active, &u, iterations, Vec::new()));
            }
            let q = active.len();
            let np_w = &whitened[p_idx];
            // Project the new normal off the span of the active ones.
            let (z_y, r) = if q == 0 {
                (np_w.clone(), DVector::zeros(0))
            } else {
                let mut nmat = DMatrix::zeros(n, q);
                for (c, &a) in active.iter().enumerate() {
                    nmat.set_column(c, &whitened[a]);
                }
                let qr = nmat.qr();
                let q1 = qr.q();
                let rmat = qr.r();
                let coeff = q1.tr_mul(np_w);
                let z_y = np_w - &q1 * &coeff;
                let r = rmat
                    .solve_upper_triangular(&coeff)
                    .unwrap_or_else(|| DVector::zeros(q));
                (z_y, r)
            };
            let mut z = z_y.clone();
            l.tr_solve_lower_triangular_mut(&mut z);
            let zn = z_y.norm_squared();

            // Partial step: the first active multiplier to hit zero.
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for j in 0..q {
                if r[j] > 1e-14 {
                    let t = u_plus[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(j);
                    }
                }
            }
            let t2 = if zn > 1e-20 { -s_p / zn } else { f64::INFINITY };
            let t = t1.min(t2);

            if !t.is_finite() {
                let mut cert: Vec<ConstraintRef> = active.iter().map(|&a| rows[a].id).collect();
                cert.push(rows[p_idx].id);
                return Ok(report(x, SolveStatus::Infeasible, &active, &u, iterations, cert));
            }

            for j in 0..q {
                u_plus[j] -= t * r[j];
            }
            u_plus[q] += t;

            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            if t2 <= t1 {
                active.push(p_idx);
                u = u_plus;
                break;
            }
            let k = drop_at.expect("partial step implies a blocking multiplier");
            active.remove(k);
            u_plus.remove(k);
            s_p = rows[p_idx].normal.dot(&x) - rows[p_idx].rhs;
            if s_p >= 0.0 {
                // Dropping made room; p no longer needs to enter.
                u_plus.pop();
                u = u_plus;
                break;
            }
        }
    }
}

/// Minimum-H-norm correction that puts the active rows back at equality.
/// Removes drift accumulated when the unconstrained start is far away
/// (nearly singular Hessians).
fn polish_active(x: &mut DVector<f64>, l: &DMatrix<f64>, rows: &[Row], whitened: &[DVector<f64>], active: &[usize]) {
    if active.is_empty() {
        return;
    }
    let n = x.len();
    let q = active.len();
    let mut w = DMatrix::zeros(n, q);
    let mut resid = DVector::zeros(q);
    for (c, &a) in active.iter().enumerate() {
        w.set_column(c, &whitened[a]);
        resid[c] = rows[a].rhs - rows[a].normal.dot(x);
    }
    let gram = w.tr_mul(&w);
    let Some(ch) = gram.cholesky() else {
        return;
    };
    let mut dy = &w * ch.solve(&resid);
    l.tr_solve_lower_triangular_mut(&mut dy);
    if dy.iter().all(|v| v.is_finite()) {
        *x += dy;
    }
}
