//! Local and remote disturbance tolerances and how delay shrinks the latter.

use cbf_placement::bounds::{local_tolerance, remote_tolerance_horizon, ToleranceInputs, ToleranceTable};
use cbf_placement::commands::bounds_text;

fn main() -> cbf_placement::Result<()> {
    let t = ToleranceInputs::new(0.02, 0.5, 1.0, 0.2, 0.1, 2.0, 7, 5)?;
    print!("{}", bounds_text(&ToleranceTable::new(&t)));

    println!("\ntau  w_bar_r / w_bar_l");
    for tau in 0..=10 {
        let t = t.with_tau(tau);
        println!("{tau:>3}  {:.4}", remote_tolerance_horizon(&t) / local_tolerance(&t));
    }
    Ok(())
}
