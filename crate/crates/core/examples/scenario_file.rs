//! Load a bundled scenario file, show the parsed experiment and write it back.

use cbf_placement::config::ScenarioFile;

fn main() -> cbf_placement::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/high.toml").into());
    let file = ScenarioFile::load(&path)?;
    let exp = file.experiment()?;
    let spec = file.disturbance_spec()?;
    println!("{path}");
    println!("  obstacles {}  waypoints {}  tau {}  N {}  gamma {}", exp.scenario.obstacles.len(), exp.scenario.waypoints.len(), exp.tau, exp.horizon, exp.gamma);
    println!("  disturbance {:?} clip {} sigma {} seed {} channel {:?}", spec.mode, spec.clip, spec.sigma, spec.seed, exp.channel);
    println!("  runs {} of {:?}", file.run.n_runs, file.run.architectures.iter().map(|a| a.name()).collect::<Vec<_>>());

    let text = file.to_toml()?;
    assert_eq!(ScenarioFile::parse(&text)?, file);
    println!("\n{text}");
    Ok(())
}
