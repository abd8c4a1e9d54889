//! Plain and robust CBF filters on the integrator x⁺ = x + u with h(x) = x.

use cbf_placement::barrier::{BarrierFunction, BarrierSet};
use cbf_placement::dynamics::{InputSet, State, SystemModel};
use cbf_placement::safety::{filter, robust_filter, FilterConfig};
use nalgebra::dvector;

fn main() -> cbf_placement::Result<()> {
    let model = SystemModel::integrator(5.0)?;
    let barriers = BarrierSet::new(vec![BarrierFunction::new("x", 1.0, |x: &State| x[0])?], 0.5)?;
    let input_set = InputSet::uniform(1, 5.0)?;
    let cfg = FilterConfig::new(model, barriers, input_set)?;

    let x = dvector![1.0];
    for u_ref in [0.3, -0.2, -2.0] {
        let r = filter(&cfg, &x, &dvector![u_ref])?;
        println!("plain   u_ref {u_ref:>5} -> u {:>8.4} intervened {}", r.u_applied[0], r.intervened);
    }

    // Constant tolerance w̄_l: the constraint becomes x + u ≥ 0.5x + L_h·w̄_l.
    let robust = cfg.with_robust_tolerance(0.25, &x)?;
    for u_ref in [0.3, -0.2, -2.0] {
        let r = robust_filter(&robust, &x, &dvector![u_ref])?;
        println!("robust  u_ref {u_ref:>5} -> u {:>8.4} intervened {}", r.u_applied[0], r.intervened);
    }
    Ok(())
}
