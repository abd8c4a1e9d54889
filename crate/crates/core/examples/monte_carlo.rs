//! A small paired batch at the low disturbance level.
//! `cargo run --release --example monte_carlo -- 5` runs five seeds.

use cbf_placement::closed_loop::Architecture;
use cbf_placement::montecarlo::{run_batch, DisturbanceSpec, Experiment};
use cbf_placement::report::{envelope_csv, summary_csv};

fn main() -> cbf_placement::Result<()> {
    let n_runs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let exp = Experiment::default();
    let plant = exp.plant()?;
    let cal = exp.calibrate(&plant, 42)?;
    let report = run_batch(&exp, &plant, Some(&cal), &Architecture::CBF, DisturbanceSpec::low(42), n_runs)?;
    print!("{}", summary_csv(&report));
    for r in &report.runs {
        println!("{:<10} run {} seed {:>20} safe {} min h {:.4}", r.architecture.name(), r.run_index, r.seed, r.safe, r.min_h);
    }
    let env = envelope_csv(&report, exp.scenario.arm.ts);
    println!("envelope: {} rows", env.lines().count() - 1);
    Ok(())
}
