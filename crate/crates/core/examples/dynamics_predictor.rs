//! A control-affine model, an input buffer and the delay predictor.

use cbf_placement::dynamics::{InputBuffer, SystemModel};
use nalgebra::{dvector, DVector};

fn main() -> cbf_placement::Result<()> {
    let ts = 0.1;
    let model = SystemModel::double_integrator(ts, 2.0)?;
    println!("L_f = {:.4}, L_g = {:.4}, u_max = {}", model.lipschitz_f, model.lipschitz_g, model.u_max);

    let tau = 4;
    let inputs: Vec<DVector<f64>> = (0..tau).map(|k| dvector![0.5 * (k as f64)]).collect();
    let mut buffer = InputBuffer::new(tau);
    for u in &inputs {
        buffer.push(u.clone());
    }

    // The plant starts where the delayed measurement was taken.
    let x_delayed = dvector![0.0, 1.0];
    let truth = model.rollout(&x_delayed, inputs.iter())?;
    let predicted = model.predict(&x_delayed, &buffer)?;
    println!("true state after {tau} steps  {:?}", truth.last().unwrap().as_slice());
    println!("prediction                  {:?}", predicted.as_slice());

    let w = dvector![0.0, 0.05];
    let disturbed = model.step(&x_delayed, &inputs[0], &w)?;
    println!("one disturbed step          {:?}", disturbed.as_slice());
    Ok(())
}
