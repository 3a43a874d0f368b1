//! Run configuration: one JSON document with `model`, `data`, `bp`, `de`,
//! `eval` and `grid` sections. Missing keys take their defaults, unknown
//! keys are rejected, and every error carries a JSON pointer.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::augment::AugmentSpec;
use crate::data::corrupt::CorruptionKind;
use crate::de::{DeConfig, GridSpec};
use crate::network::{zoo, NetworkError, NetworkSpec};
use crate::train::TrainConfig;

/// Known dataset names.
pub const DATASETS: [&str; 3] = ["mnist", "fashion_mnist", "cifar10"];

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config {pointer}: {message}")]
pub struct ConfigError {
    /// JSON pointer to the offending value (`""` for the whole document).
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    fn at(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Built-in architecture name.
    pub name: String,
    /// Spec JSON file; overrides `name` when set.
    pub spec_file: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "lenet1".into(),
            spec_file: None,
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> Result<NetworkSpec, NetworkError> {
        match &self.spec_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| NetworkError::Json(format!("{}: {e}", p.display())))?;
                NetworkSpec::from_json(&text)
            }
            None => zoo::builtin(&self.name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: String,
    /// Directory with the raw files; defaults to the cache directory.
    pub dir: Option<PathBuf>,
    /// Use this many training samples (random, seeded).
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Training set size multiplier; 1 disables augmentation.
    pub augment_multiplier: usize,
    pub augment: AugmentSpec,
    /// Seeds subset draws and augmentation, independent of the stage seeds.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            dir: None,
            train_subset: None,
            test_subset: None,
            augment_multiplier: 1,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
    /// Corruptions synthesized by `corrupt`.
    pub corruptions: Vec<String>,
    pub severity: u8,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            corruptions: CorruptionKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            severity: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub data: DataSection,
    pub bp: TrainConfig,
    pub de: DeConfig,
    pub eval: EvalSection,
    pub grid: GridSpec,
}

impl Config {
    /// Pretty JSON with every field spelled out, keys in declaration order.
    pub fn canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.spec_file.is_none() && !zoo::NAMES.contains(&self.model.name.as_str()) {
            return Err(ConfigError::at(
                "/model/name",
                format!("unknown model '{}' (known: {})", self.model.name, zoo::NAMES.join(", ")),
            ));
        }
        if !DATASETS.contains(&self.data.dataset.as_str()) {
            return Err(ConfigError::at(
                "/data/dataset",
                format!("unknown dataset '{}' (known: {})", self.data.dataset, DATASETS.join(", ")),
            ));
        }
        if self.data.augment_multiplier == 0 {
            return Err(ConfigError::at("/data/augment_multiplier", "must be at least 1"));
        }
        for (key, v) in [("train_subset", self.data.train_subset), ("test_subset", self.data.test_subset)] {
            if v == Some(0) {
                return Err(ConfigError::at(format!("/data/{key}"), "must be at least 1"));
            }
        }
        let a = &self.data.augment;
        if !(a.max_rotate_deg.is_finite() && a.max_rotate_deg >= 0.0) {
            return Err(ConfigError::at("/data/augment/max_rotate_deg", "must be a non-negative number"));
        }
        self.bp
            .validate()
            .map_err(|(field, msg)| ConfigError::at(format!("/bp/{field}"), msg))?;
        self.de
            .validate()
            .map_err(|(field, msg)| ConfigError::at(format!("/de/{field}"), msg))?;
        if self.eval.batch_size == 0 {
            return Err(ConfigError::at("/eval/batch_size", "must be at least 1"));
        }
        if !(1..=5).contains(&self.eval.severity) {
            return Err(ConfigError::at("/eval/severity", "must be in 1..=5"));
        }
        for (i, c) in self.eval.corruptions.iter().enumerate() {
            if let Err(e) = c.parse::<CorruptionKind>() {
                return Err(ConfigError::at(format!("/eval/corruptions/{i}"), e.to_string()));
            }
        }
        for (axis, values) in [("F", &self.grid.f), ("Cr", &self.grid.cr), ("lr", &self.grid.lr)] {
            if values.is_empty() {
                return Err(ConfigError::at(format!("/grid/{axis}"), "must not be empty"));
            }
            for (i, &v) in values.iter().enumerate() {
                let ok = match axis {
                    "Cr" => (0.0..=1.0).contains(&v),
                    "lr" => v.is_finite() && v > 0.0,
                    _ => v.is_finite(),
                };
                if !ok {
                    return Err(ConfigError::at(format!("/grid/{axis}/{i}"), format!("{v} is out of range")));
                }
            }
        }
        Ok(())
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

/// Parses, fills defaults and validates.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let p = pointer(e.path());
        ConfigError::at(p, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_golden_default() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, Config::default());
        let golden = include_str!("../../tests/fixtures/default_config.json");
        assert_eq!(c.canonical(), golden);
        assert_eq!(parse_config(golden).unwrap(), c);
    }

    #[test]
    fn constraint_errors_carry_pointers() {
        let e = parse_config(r#"{"de":{"Cr":1.5}}"#).unwrap_err();
        assert_eq!(e.pointer, "/de/Cr");
        assert_eq!(parse_config(r#"{"de":{"population":3}}"#).unwrap_err().pointer, "/de/population");
        assert_eq!(parse_config(r#"{"bp":{"lr":-1}}"#).unwrap_err().pointer, "/bp/lr");
        assert_eq!(parse_config(r#"{"grid":{"Cr":[0.5, 2]}}"#).unwrap_err().pointer, "/grid/Cr/1");
        assert_eq!(parse_config(r#"{"model":{"name":"vgg"}}"#).unwrap_err().pointer, "/model/name");
    }

    #[test]
    fn unknown_keys_and_type_errors() {
        let e = parse_config(r#"{"bp":{"learning_rate":0.1}}"#).unwrap_err();
        assert_eq!(e.pointer, "/bp/learning_rate");
        assert!(e.message.contains("learning_rate"), "{}", e.message);
        assert!(parse_config(r#"{"extra":1}"#).is_err());
        let e = parse_config(r#"{"de":{"F":"big"}}"#).unwrap_err();
        assert_eq!(e.pointer, "/de/F");
        assert!(parse_config("not json").is_err());
    }

    #[test]
    fn hyperparameter_grid() {
        let c = parse_config(r#"{"grid":{"F":[0.01,0.1,1,2],"Cr":[0,0.05,0.5,1],"lr":[0.01,0.02]}}"#).unwrap();
        let cells = c.grid.cells().unwrap();
        assert_eq!(cells.len(), 2 * 4 * 4);
        assert_eq!((cells[0].lr, cells[0].f, cells[0].cr), (0.01, 0.01, 0.0));
        assert_eq!((cells[31].lr, cells[31].f, cells[31].cr), (0.02, 2.0, 1.0));
    }
}
