//! Dense active-set QP: project a point onto a triangle.

use cbf_placement::qp::{solve_qp, QpProblem};
use nalgebra::{dmatrix, dvector, DMatrix};

fn main() -> cbf_placement::Result<()> {
    // min ½‖z − (2, 2)‖²  s.t.  z ≥ 0, z₀ + z₁ ≤ 1
    let target = dvector![2.0, 2.0];
    let p = QpProblem::new(DMatrix::identity(2, 2), -&target)
        .with_constraints(dmatrix![-1.0, -1.0], dvector![-1.0])
        .with_bounds(dvector![0.0, 0.0], dvector![f64::INFINITY, f64::INFINITY]);
    let r = solve_qp(&p)?;
    println!("status      {:?}", r.status);
    println!("solution    {:?}", r.solution.as_slice());
    println!("active set  {:?}", r.active_set);
    for m in &r.multipliers {
        println!("multiplier  {:?} = {:.4}", m.constraint, m.value);
    }
    println!("kkt residual {:.2e}, iterations {}", r.kkt_residual, r.iterations);
    Ok(())
}
