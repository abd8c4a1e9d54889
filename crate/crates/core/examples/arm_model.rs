//! The three-link arm: kinematics, one dynamics step, obstacle barriers and
//! the sampled Lipschitz constants.

use cbf_placement::robot::Scenario;
use nalgebra::DVector;

fn main() -> cbf_placement::Result<()> {
    let sc = Scenario::default();
    let x0 = sc.initial_state();
    let q = &x0.as_slice()[..3];
    let ee = sc.arm.end_effector(q);
    println!("start q {q:?}, end effector ({:.4}, {:.4})", ee[0], ee[1]);

    let model = sc.arm.system_model(sc.input_limit, sc.joint_vel_limit, 2000, 7)?;
    println!("L_f {:.4}  L_g {:.4}  u_max {:.4}", model.lipschitz_f, model.lipschitz_g, model.u_max);

    let u = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let x1 = model.nominal_step(&x0, &u)?;
    println!("after one step with 1 N·m at the base: {:?}", x1.as_slice());

    let barriers = sc.build_barriers(0.5)?;
    println!("{} barriers, composite h(x0) = {:.4}, L_h = {:.4}", barriers.len(), barriers.evaluate(&x0), barriers.lipschitz());
    for (i, d) in sc.obstacle_distances(&x0).iter().enumerate() {
        println!("clearance to obstacle {} = {:.4} m", i + 1, d);
    }
    Ok(())
}
