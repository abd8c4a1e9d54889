//! Every architecture on a delayed integrator loop, first disturbance-free
//! and then under a constant push toward the unsafe side.

use std::sync::Arc;

use cbf_placement::barrier::{BarrierFunction, BarrierSet};
use cbf_placement::closed_loop::{run, Architecture, LoopSetup, NoDisturbance};
use cbf_placement::dynamics::{InputSet, State, SystemModel};
use cbf_placement::mpc::{MpcConfig, QuadraticCost, RobustSpec};
use cbf_placement::safety::FilterConfig;
use nalgebra::dvector;

fn setup(tau: usize) -> cbf_placement::Result<LoopSetup> {
    let model = SystemModel::integrator(1.0)?;
    let barriers = BarrierSet::new(vec![BarrierFunction::new("x", 1.0, |x: &State| x[0])?], 0.5)?;
    let input_set = InputSet::uniform(1, 1.0)?;
    // The reference sits on the wrong side of the barrier.
    let cost = QuadraticCost::new(dvector![-1.0], dvector![1.0], dvector![0.1])?;
    let x0 = dvector![2.0];
    let mpc = MpcConfig::new(model.clone(), 3, Arc::new(cost), input_set.clone())?
        .with_barriers(barriers.clone())
        .with_robust(RobustSpec::new(0.01, 0.1, 1e3, 0.1)?);
    let filter = FilterConfig::new(model.clone(), barriers, input_set)?.with_robust_tolerance(0.1, &x0)?;
    Ok(LoopSetup {
        model,
        tau,
        max_steps: 60,
        ts: 1.0,
        x0,
        standby: dvector![0.0],
        filter,
        mpc,
        task: None,
    })
}

fn main() -> cbf_placement::Result<()> {
    let s = setup(3)?;
    println!("{:<18} {:>10} {:>10} {:>14} {:>6}", "architecture", "min h", "final x", "max pred err", "safe");
    for arch in Architecture::ALL {
        let rec = run(arch, &s, &mut NoDisturbance::new(1))?;
        println!(
            "{:<18} {:>10.4} {:>10.4} {:>14.2e} {:>6}",
            arch.name(),
            rec.min_h,
            rec.final_state[0],
            rec.max_prediction_error,
            !rec.safety_violated
        );
    }

    println!("\nconstant push w = -0.05 per step");
    for arch in Architecture::ALL {
        let mut push = |_k: usize, _x: &State| dvector![-0.05];
        let rec = run(arch, &s, &mut push)?;
        println!("{:<18} min h {:>8.4} safe {}", arch.name(), rec.min_h, !rec.safety_violated);
    }
    Ok(())
}
