//! Scenario files.
//!
//! A scenario file is a TOML document with the sections `[arm]`,
//! `[obstacles]`, `[waypoints]`, `[network]`, `[mpc]`, `[disturbance]` and
//! `[run]`. Unknown keys are rejected. Lengths are in metres, angles in
//! radians, torques in N·m and times in seconds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closed_loop::Architecture;
use crate::error::{Error, Result};
use crate::montecarlo::{DisturbanceChannel, DisturbanceMode, DisturbanceSpec, Experiment, HIGH_CLIP, LOW_CLIP};
use crate::robot::{ArmModel, Obstacle, ReachWeights, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub arm: ArmSection,
    pub obstacles: ObstacleSection,
    pub waypoints: WaypointSection,
    pub network: NetworkSection,
    pub mpc: MpcSection,
    pub disturbance: DisturbanceSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub link_lengths: [f64; 3],
    pub link_masses: [f64; 3],
    pub damping: f64,
    pub ts: f64,
    pub initial_q: [f64; 3],
    pub joint_vel_limit: f64,
    pub input_limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub epsilon: f64,
    pub samples_per_link: usize,
    pub circles: Vec<Obstacle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSection {
    pub reach_threshold: f64,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Round-trip delay in steps.
    pub tau: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    #[serde(rename = "N")]
    pub horizon: usize,
    pub gamma: f64,
    /// Slack penalty of the robust MPC.
    pub rho: f64,
    pub velocity_box_weight: f64,
    pub weights: ReachWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub mode: DisturbanceMode,
    /// Required for `custom`; `low` and `high` fix it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    /// Defaults to `clip / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub channel: DisturbanceChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_runs: usize,
    pub architectures: Vec<Architecture>,
    /// Simulation length in steps.
    pub max_steps: usize,
    pub calibration_runs: usize,
    pub lipschitz_samples: usize,
    pub lipschitz_seed: u64,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.experiment()?;
        file.disturbance_spec()?;
        if file.run.n_runs == 0 {
            return Err(Error::Config("[run] n_runs must be at least 1".into()));
        }
        if file.run.architectures.is_empty() {
            return Err(Error::Config("[run] architectures must not be empty".into()));
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_experiment(exp: &Experiment, disturbance: DisturbanceSection, n_runs: usize, architectures: Vec<Architecture>) -> Self {
        let sc = &exp.scenario;
        Self {
            arm: ArmSection {
                link_lengths: sc.arm.link_lengths,
                link_masses: sc.arm.link_masses,
                damping: sc.arm.damping,
                ts: sc.arm.ts,
                initial_q: sc.initial_q,
                joint_vel_limit: sc.joint_vel_limit,
                input_limit: sc.input_limit,
            },
            obstacles: ObstacleSection {
                epsilon: sc.epsilon,
                samples_per_link: sc.samples_per_link,
                circles: sc.obstacles.clone(),
            },
            waypoints: WaypointSection {
                reach_threshold: sc.reach_threshold,
                points: sc.waypoints.clone(),
            },
            network: NetworkSection { tau: exp.tau },
            mpc: MpcSection {
                horizon: exp.horizon,
                gamma: exp.gamma,
                rho: exp.slack_weight,
                velocity_box_weight: exp.velocity_box_weight,
                weights: exp.weights,
            },
            disturbance: DisturbanceSection {
                channel: exp.channel,
                ..disturbance
            },
            run: RunSection {
                n_runs,
                architectures,
                max_steps: sc.sim_horizon_steps,
                calibration_runs: exp.calibration_runs,
                lipschitz_samples: exp.lipschitz_samples,
                lipschitz_seed: exp.lipschitz_seed,
            },
        }
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let scenario = Scenario {
            arm: ArmModel {
                link_lengths: self.arm.link_lengths,
                link_masses: self.arm.link_masses,
                ts: self.arm.ts,
                damping: self.arm.damping,
            },
            obstacles: self.obstacles.circles.clone(),
            waypoints: self.waypoints.points.clone(),
            initial_q: self.arm.initial_q,
            reach_threshold: self.waypoints.reach_threshold,
            epsilon: self.obstacles.epsilon,
            samples_per_link: self.obstacles.samples_per_link,
            sim_horizon_steps: self.run.max_steps,
            joint_vel_limit: self.arm.joint_vel_limit,
            input_limit: self.arm.input_limit,
        };
        let exp = Experiment {
            scenario,
            tau: self.network.tau,
            horizon: self.mpc.horizon,
            gamma: self.mpc.gamma,
            weights: self.mpc.weights,
            slack_weight: self.mpc.rho,
            velocity_box_weight: self.mpc.velocity_box_weight,
            channel: self.disturbance.channel,
            lipschitz_samples: self.run.lipschitz_samples,
            lipschitz_seed: self.run.lipschitz_seed,
            calibration_runs: self.run.calibration_runs,
        };
        exp.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(exp)
    }

    pub fn disturbance_spec(&self) -> Result<DisturbanceSpec> {
        self.disturbance.spec()
    }
}

impl DisturbanceSection {
    pub fn preset(mode: DisturbanceMode, seed: u64) -> Self {
        Self {
            mode,
            clip: None,
            sigma: None,
            seed,
            channel: DisturbanceChannel::default(),
        }
    }

    pub fn custom(clip: f64, sigma: Option<f64>, seed: u64) -> Self {
        Self {
            clip: Some(clip),
            sigma,
            ..Self::preset(DisturbanceMode::Custom, seed)
        }
    }

    pub fn spec(&self) -> Result<DisturbanceSpec> {
        let preset = match self.mode {
            DisturbanceMode::Low => Some(LOW_CLIP),
            DisturbanceMode::High => Some(HIGH_CLIP),
            DisturbanceMode::Custom => None,
        };
        let clip = match (preset, self.clip) {
            (Some(p), None) => p,
            (Some(p), Some(c)) if c == p => p,
            (Some(p), Some(c)) => {
                return Err(Error::Config(format!(
                    "[disturbance] clip = {c} contradicts mode {:?} (clip {p}); use mode = \"custom\"",
                    self.mode
                )))
            }
            (None, Some(c)) => c,
            (None, None) => return Err(Error::Config("[disturbance] mode = \"custom\" needs clip".into())),
        };
        let sigma = self.sigma.unwrap_or(clip / 2.0);
        DisturbanceSpec::new(sigma, clip, self.mode, self.seed).map_err(|e| Error::Config(format!("[disturbance] {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ScenarioFile {
        ScenarioFile::from_experiment(
            &Experiment::default(),
            DisturbanceSection::preset(DisturbanceMode::Low, 42),
            20,
            Architecture::CBF.to_vec(),
        )
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let text = f.to_toml().unwrap();
        let back = ScenarioFile::parse(&text).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_toml().unwrap(), text);
        assert_eq!(back.experiment().unwrap(), Experiment::default());
    }

    #[test]
    fn missing_section_is_named() {
        let text = sample().to_toml().unwrap();
        for section in ["arm", "obstacles", "waypoints", "network", "mpc", "disturbance", "run"] {
            // Drop the table and its subtables.
            let mut inside = false;
            let cut: String = text
                .lines()
                .filter(|l| {
                    if l.starts_with('[') {
                        let name = l.trim_matches(|c| c == '[' || c == ']');
                        inside = name.split('.').next() == Some(section);
                    }
                    !inside
                })
                .collect::<Vec<_>>()
                .join("\n");
            let err = ScenarioFile::parse(&cut).unwrap_err().to_string();
            assert!(err.contains(&format!("`{section}`")), "{section}: {err}");
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = sample().to_toml().unwrap().replace("[network]\n", "[network]\nlatency = 3\n");
        let err = ScenarioFile::parse(&text).unwrap_err().to_string();
        assert!(err.contains("latency"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn disturbance_presets_and_custom() {
        let low = DisturbanceSection::preset(DisturbanceMode::Low, 1).spec().unwrap();
        assert_eq!((low.clip, low.sigma), (LOW_CLIP, LOW_CLIP / 2.0));
        let high = DisturbanceSection::preset(DisturbanceMode::High, 1).spec().unwrap();
        assert_eq!(high.clip, HIGH_CLIP);
        let c = DisturbanceSection::custom(0.008, None, 3).spec().unwrap();
        assert_eq!((c.clip, c.sigma, c.seed), (0.008, 0.004, 3));
        assert!(DisturbanceSection::preset(DisturbanceMode::Custom, 1).spec().is_err());
        let mut bad = DisturbanceSection::preset(DisturbanceMode::Low, 1);
        bad.clip = Some(0.01);
        assert!(bad.spec().is_err());
    }

    #[test]
    fn invalid_values_are_reported() {
        let mut f = sample();
        f.mpc.gamma = 1.5;
        let err = ScenarioFile::parse(&f.to_toml().unwrap()).unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
        let mut f = sample();
        f.run.architectures = vec![];
        assert!(ScenarioFile::parse(&f.to_toml().unwrap()).is_err());
    }

    #[test]
    fn architecture_names_in_files() {
        let text = sample().to_toml().unwrap();
        assert!(text.contains(r#"architectures = ["local-cbf", "mpc-cbf", "combined"]"#), "{text}");
    }

    fn bundled(name: &str) -> ScenarioFile {
        ScenarioFile::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
    }

    #[test]
    fn bundled_scenarios_parse() {
        let default = bundled("default.toml");
        assert_eq!(default.experiment().unwrap(), Experiment::default());
        assert_eq!(default.run.architectures, Architecture::ALL.to_vec());
        assert_eq!(default.disturbance_spec().unwrap().clip, 0.0);
        for (name, mode) in [("low.toml", DisturbanceMode::Low), ("high.toml", DisturbanceMode::High)] {
            let f = bundled(name);
            assert_eq!(f.experiment().unwrap(), Experiment::default(), "{name}");
            assert_eq!(f.disturbance.mode, mode);
            assert_eq!(f.run.n_runs, 20);
            assert_eq!(f.run.architectures, Architecture::CBF.to_vec());
        }
    }

    proptest! {
        #[test]
        fn files_round_trip(
            tau in 0usize..12,
            horizon in 1usize..10,
            gamma in 0.01..0.99f64,
            clip in 1e-4..0.02f64,
            seed in any::<u64>(),
            n_runs in 1usize..50,
            arch_mask in 1u8..32,
        ) {
            let mut exp = Experiment::default();
            exp.tau = tau;
            exp.horizon = horizon;
            exp.gamma = gamma;
            let archs: Vec<Architecture> =
                Architecture::ALL.iter().enumerate().filter(|(i, _)| arch_mask & (1 << i) != 0).map(|(_, &a)| a).collect();
            let file = ScenarioFile::from_experiment(&exp, DisturbanceSection::custom(clip, None, seed), n_runs, archs);
            let back = ScenarioFile::parse(&file.to_toml().unwrap()).unwrap();
            prop_assert_eq!(&back, &file);
            prop_assert_eq!(back.experiment().unwrap(), exp);
            prop_assert_eq!(back.disturbance_spec().unwrap().sigma, clip / 2.0);
        }
    }
}
