//! Tolerance calibration on the bundled arm scenario.

use cbf_placement::montecarlo::Experiment;

fn main() -> cbf_placement::Result<()> {
    let exp = Experiment::default();
    let plant = exp.plant()?;
    let c = exp.calibrate(&plant, 42)?;
    println!("margins     eta_l {:.5}  eta_r {:.5}", c.eta_local, c.eta_remote);
    println!("constants   L_h {:.4}  L_f {:.4}  L_g {:.4}  u_max {:.4}", c.l_h, c.l_f, c.l_g, c.u_max);
    println!("tolerances  w_bar_l {:.4e}  w_bar_r {:.4e}  ratio {:.3e}", c.w_bar_l, c.w_bar_r, c.ratio());
    println!("input set   largest correction {:.4}, tightening {:.4}", c.max_correction, c.input_margin);
    Ok(())
}
