//! Experiment configuration files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::iteropt::{IterConfig, LossSpec};
use crate::online::OnlineConfig;
use crate::scenarios::Settings;
use crate::structure::StructureConfig;
use crate::testbed::{self, ArmToolWorld, BipedWorld, TendonArmWorld, World};
use crate::trainer::{Dataset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    #[serde(alias = "A", alias = "a")]
    ArmTool,
    #[serde(alias = "B", alias = "b")]
    Tendon,
    #[serde(alias = "C", alias = "c")]
    Biped,
}

impl std::str::FromStr for WorldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "arm_tool" => Ok(Self::ArmTool),
            "B" | "b" | "tendon" => Ok(Self::Tendon),
            "C" | "c" | "biped" => Ok(Self::Biped),
            _ => Err(Error::Parse(format!(
                "unknown world `{s}` (expected A, B, C, arm_tool, tendon or biped)"
            ))),
        }
    }
}

/// Which world to roll out and in which hidden states.
///
/// A state is a parameter pair: `(tool length mm, tool angle deg)` for the
/// arm, `(tool mass g, tool length mm)` for the biped and
/// `(moment arm scale, rest length shift mm)` for the tendon arm. An empty
/// list means the default states of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub kind: WorldKind,
    #[serde(default)]
    pub states: Vec<[f64; 2]>,
    #[serde(default = "default_samples")]
    pub samples_per_state: usize,
    /// Groups recorded in every sample; all groups when absent.
    #[serde(default)]
    pub available: Option<Vec<bool>>,
    #[serde(default)]
    pub arm_tool: ArmToolWorld,
    #[serde(default)]
    pub tendon: TendonArmWorld,
    #[serde(default)]
    pub biped: BipedWorld,
}

fn default_samples() -> usize {
    1000
}

impl WorldConfig {
    pub fn new(kind: WorldKind) -> Self {
        Self {
            kind,
            states: Vec::new(),
            samples_per_state: default_samples(),
            available: None,
            arm_tool: ArmToolWorld::default(),
            tendon: TendonArmWorld::default(),
            biped: BipedWorld::default(),
        }
    }

    pub fn default_states(&self) -> Vec<[f64; 2]> {
        match self.kind {
            WorldKind::ArmTool => ArmToolWorld::grasp_grid().into_iter().map(|(a, b)| [a, b]).collect(),
            WorldKind::Biped => BipedWorld::tool_grid().into_iter().map(|(a, b)| [a, b]).collect(),
            WorldKind::Tendon => vec![[1.0, 0.0]],
        }
    }

    pub fn world(&self, state: [f64; 2]) -> Box<dyn World> {
        match self.kind {
            WorldKind::ArmTool => Box::new(self.arm_tool.with_grasp(state[0], state[1])),
            WorldKind::Biped => Box::new(self.biped.with_tool(state[0], state[1])),
            WorldKind::Tendon => {
                if state == [1.0, 0.0] {
                    Box::new(self.tendon.clone())
                } else {
                    let label = format!("tendon_s{}_r{}", state[0], state[1]);
                    Box::new(self.tendon.perturbed(state[0], state[1], &label))
                }
            }
        }
    }

    pub fn worlds(&self) -> Vec<Box<dyn World>> {
        let states = if self.states.is_empty() {
            self.default_states()
        } else {
            self.states.clone()
        };
        states.into_iter().map(|s| self.world(s)).collect()
    }

    /// Rollouts of every state; state `i` draws from `seed + 1000 i`.
    pub fn collect(&self, seed: u64) -> Result<Dataset> {
        let worlds = self.worlds();
        let first = worlds.first().ok_or_else(|| Error::Empty("world states".into()))?;
        let layout = first.layout();
        let avail = match &self.available {
            Some(a) if a.len() != layout.n_groups() => {
                return Err(Error::InvalidConfig(format!(
                    "world.available has {} entries, the world has {} groups",
                    a.len(),
                    layout.n_groups()
                )))
            }
            Some(a) => a.clone(),
            None => vec![true; layout.n_groups()],
        };
        let mut d = Dataset::new(layout);
        for (i, w) in worlds.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * i as u64));
            for _ in 0..self.samples_per_state {
                let cmd = testbed::random_command(w.as_ref(), &mut rng);
                d.push(testbed::observe(w.as_ref(), &cmd, &avail, Some(&mut rng))?)?;
            }
        }
        Ok(d)
    }
}

/// What `control` optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub control_group: String,
    pub loss: LossSpec,
    /// Raw starting values over the data layout; the data mean when absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default)]
    pub init_available: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    /// Groups removed from each observation before estimating them.
    pub hidden: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub command_group: String,
    #[serde(default)]
    pub constraints: LossSpec,
    /// Start each step from the previous latent state.
    #[serde(default = "yes")]
    pub carry_over: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    /// Mask over the model's input groups used for the residual prediction.
    pub mask: String,
    /// Leading rows of the data used for calibration.
    #[serde(default = "default_calibration")]
    pub calibration: usize,
}

fn default_calibration() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub world: WorldConfig,
    #[serde(default)]
    pub structure: StructureConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub iter: IterConfig,
    #[serde(default)]
    pub estimate: Option<EstimateSection>,
    #[serde(default)]
    pub control: Option<ControlSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub detect: Option<DetectSection>,
    /// Overrides for the `eval` studies.
    #[serde(default)]
    pub eval: Settings,
}

impl ExperimentConfig {
    pub fn new(kind: WorldKind) -> Self {
        Self {
            seed: 0,
            world: WorldConfig::new(kind),
            structure: StructureConfig::default(),
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            iter: IterConfig::default(),
            estimate: None,
            control: None,
            simulate: None,
            detect: None,
            eval: Settings::default(),
        }
    }

    /// Parses TOML; errors carry the line and column of the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.online.validate()?;
        self.iter.validate()?;
        if self.world.samples_per_state == 0 {
            return Err(Error::InvalidConfig("world.samples_per_state must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.structure.eval_fraction) {
            return Err(Error::InvalidConfig("structure.eval_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
