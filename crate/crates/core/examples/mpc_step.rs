//! One solve of each MPC variant from the arm's start pose, then a short
//! receding-horizon loop with warm starts.

use cbf_placement::closed_loop::Task;
use cbf_placement::montecarlo::Experiment;
use cbf_placement::mpc::{solve_mpc_cbf, solve_nominal, MpcController, MpcVariant};

fn main() -> cbf_placement::Result<()> {
    let exp = Experiment::default();
    let plant = exp.plant()?;
    let setup = exp.setup(&plant, None)?;
    let x0 = setup.x0.clone();

    for (name, sol) in [("nominal", solve_nominal(&setup.mpc, &x0)?), ("mpc-cbf", solve_mpc_cbf(&setup.mpc, &x0)?)] {
        println!("{name:8} status {:?} objective {:.5} first input {:?}", sol.status, sol.objective, sol.first_input().as_slice());
    }

    let cfg = setup.mpc.with_stage_cost(plant.task.stage_cost(0));
    let mut ctrl = MpcController::new(cfg, MpcVariant::Cbf);
    let mut x = x0;
    for k in 0..50 {
        let (u, iters) = {
            let sol = ctrl.solve(&x)?;
            (sol.first_input().clone(), sol.iterations)
        };
        x = plant.model.nominal_step(&x, &u)?;
        if k % 10 == 0 {
            println!("k {k:>2}  sqp iterations {iters:>2}  h {:.4}", plant.barriers.evaluate(&x));
        }
    }
    Ok(())
}
