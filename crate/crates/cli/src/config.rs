//! JSON run configuration. Every section is optional; keys given in the
//! file replace the defaults one by one, and command-line flags replace
//! both. Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use stoneseg::nnet::ModelConfig;
use stoneseg::synthdata::SceneSpec;
use stoneseg::training::{GridSpec, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub grid: GridSpec,
    pub split: SplitConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            model: ModelConfig::unet_plus_plus(2, 8),
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            grid: GridSpec {
                learning_rates: vec![1e-3, 3e-4],
                batch_sizes: vec![4, 8],
                seeds_per_cell: 1,
            },
            split: SplitConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["model", "train", "scene", "grid", "split"];

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, section: &str) -> Result<T, CliError> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("config serializes"))
            .expect("config roundtrips"));
    };
    let Value::Object(patch) = patch else {
        return Err(CliError::Data(format!("config section `{section}` must be an object")));
    };
    let mut merged: Map<String, Value> = match serde_json::to_value(base).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config sections are structs"),
    };
    for (k, v) in patch {
        merged.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Data(format!("config section `{section}`: {e}")))
}

impl CliConfig {
    pub fn from_value(v: &Value) -> Result<Self, CliError> {
        let Value::Object(top) = v else {
            return Err(CliError::Data("config must be a JSON object".into()));
        };
        if let Some(k) = top.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Data(format!(
                "unknown config key `{k}` (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
        let d = CliConfig::default();
        Ok(CliConfig {
            model: overlay(&d.model, top.get("model"), "model")?,
            train: overlay(&d.train, top.get("train"), "train")?,
            scene: overlay(&d.scene, top.get("scene"), "scene")?,
            grid: overlay(&d.grid, top.get("grid"), "grid")?,
            split: overlay(&d.split, top.get("split"), "split")?,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let v: Value =
                    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                Self::from_value(&v)
            }
        }
    }
}
