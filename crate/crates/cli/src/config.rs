//! Run configuration: a TOML file with dotted keys, `--set key=value`
//! overrides and a few dedicated flags, merged in that order over the
//! built-in defaults.
//!
//! ```toml
//! preset = "shrunken"            # "full" (default) or "shrunken"
//! paths.manifest = "data/manifest.txt"
//! paths.output_dir = "runs/a"
//! flow.window_size = 15
//! model.variant = "sa_bi_cnn_lstm"
//! train.max_epochs = 100
//! data.val_fraction = 0.15
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cyclingnet::flow::FlowParams;
use cyclingnet::network::ModelConfig;
use cyclingnet::pipeline::SplitPolicy;
use cyclingnet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The full-size network on 240x320 frames.
    #[default]
    Full,
    /// A narrow network on 24x32 frames for quick runs and tests.
    Shrunken,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Shrunken => "shrunken",
        })
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Preset::Full),
            "shrunken" => Ok(Preset::Shrunken),
            other => Err(format!("unknown preset {other:?} (expected full or shrunken)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub flow_cache: PathBuf,
    /// Defaults to `<output_dir>/weights.cynw`.
    pub weights: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "manifest.txt".into(),
            flow_cache: "flow_cache".into(),
            weights: None,
            output_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fractions of untagged clips sent to validation and test.
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Keep fused samples in memory between epochs.
    pub memoize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { val_fraction: 0.0, test_fraction: 0.0, memoize: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub paths: Paths,
    pub data: DataConfig,
    pub flow: FlowParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Flag values that take precedence over file and `--set` values.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub weights: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let model = match preset {
            Preset::Full => ModelConfig::default(),
            Preset::Shrunken => ModelConfig::shrunken(),
        };
        Self { preset, model, ..Default::default() }
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.model.input_height, self.model.input_width)
    }

    pub fn weights_path(&self) -> PathBuf {
        self.paths.weights.clone().unwrap_or_else(|| self.paths.output_dir.join("weights.cynw"))
    }

    pub fn split_policy(&self) -> SplitPolicy {
        SplitPolicy {
            val_fraction: self.data.val_fraction,
            test_fraction: self.data.test_fraction,
            seed: self.train.seed,
        }
    }

    /// Resolves file, `--set` overrides and flags into a validated config.
    pub fn resolve(file: Option<&Path>, sets: &[String], flags: &FlagOverrides) -> Result<Self, CliError> {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for set in sets {
            let (key, value) = parse_set(set)?;
            insert_dotted(&mut user, &key, value)?;
        }
        let preset = match user.get("preset") {
            None => Preset::Full,
            Some(Value::String(s)) => s.parse().map_err(CliError::Config)?,
            Some(other) => return Err(CliError::Config(format!("preset must be a string, got {other}"))),
        };
        let mut merged = Table::try_from(Self::with_preset(preset)).expect("defaults serialize");
        merge(&mut merged, user);
        let mut config: RunConfig =
            Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))?;
        if let Some(seed) = flags.seed {
            config.model.seed = seed;
            config.train.seed = seed;
        }
        if let Some(t) = flags.threshold {
            config.train.threshold = t;
        }
        if let Some(w) = &flags.weights {
            config.paths.weights = Some(w.clone());
        }
        if let Some(m) = &flags.manifest {
            config.paths.manifest = m.clone();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: cyclingnet::Error| CliError::Config(e.to_string());
        self.flow.validate().map_err(invalid)?;
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        let (v, t) = (self.data.val_fraction, self.data.test_fraction);
        if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(CliError::Config(format!(
                "data.val_fraction and data.test_fraction must be in [0, 1) with a sum below 1, got {v} and {t}"
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config to `<output_dir>/resolved-<command>.toml`.
    pub fn echo(&self, command: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.paths.output_dir).map_err(cyclingnet::Error::from)?;
        let path = self.paths.output_dir.join(format!("resolved-{command}.toml"));
        std::fs::write(&path, self.to_toml()).map_err(cyclingnet::Error::from)?;
        Ok(path)
    }
}

/// `key=value`; the value is read as a TOML value, or as a bare string when
/// it does not parse as one.
fn parse_set(set: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = set.split_once('=').ok_or_else(|| CliError::Config(format!("--set {set:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("--set {set:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

fn insert_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_owned()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("--set {key}: {part} is not a table"))),
        };
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
