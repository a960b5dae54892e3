use std::path::Path;

use capl_core::protocol::DEFAULT_SEEDS;
use capl_core::synth::SceneConfig;
use capl_core::train::{TrainConfig, Variant, DEFAULT_AMP_GAMMA};
use capl_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Evaluation options shared by `eval`, `register` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub amp_gamma: f64,
    pub variants: Vec<Variant>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 5, 10],
            seeds: DEFAULT_SEEDS.to_vec(),
            episodes: 500,
            amp_gamma: DEFAULT_AMP_GAMMA,
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.scene.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }
}
