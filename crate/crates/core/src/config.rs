//! Layered configuration for the command-line front end.
//!
//! Sources are merged in this order, later ones winning:
//!
//! 1. built-in defaults ([`CliConfig::default`]),
//! 2. a TOML file with one table per section (`[train]`, `[generator]`, …),
//! 3. environment variables `REGO__<SECTION>__<KEY>` (for example
//!    `REGO__TRAIN__LR_G=1e-4`),
//! 4. `--set section.key=value` flags and dedicated flags such as `--seed`.
//!
//! Values from the environment and `--set` are parsed as TOML literals and
//! fall back to plain strings. Every key must already exist in the defaults,
//! so misspelled keys are rejected instead of silently ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::checkpoint::ModelConfig;
use crate::dataprep::PrepareConfig;
use crate::error::{RegoError, Result};
use crate::generator::GeneratorConfig;
use crate::service::DEFAULT_PORT;
use crate::styleloss::StyleConfig;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "REGO__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub backend: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { backend: "convnet10-f64-s0".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub port: u16,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { port: DEFAULT_PORT }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub prepare: PrepareConfig,
    pub generator: GeneratorConfig,
    pub style: StyleConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl CliConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator.clone(),
            style: self.style.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.style.validate()?;
        self.train.validate()
    }

    /// The defaults rendered as a TOML document, for `--help`.
    pub fn defaults_toml() -> String {
        toml::to_string(&CliConfig::default()).expect("defaults serialize")
    }
}

fn config_err(msg: impl Into<String>) -> RegoError {
    RegoError::Config(msg.into())
}

fn overlay(base: &mut Table, layer: &Table, path: &str, explicit: &mut Vec<String>) -> Result<()> {
    for (key, value) in layer {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        let slot = base
            .get_mut(key)
            .ok_or_else(|| config_err(format!("unknown config key `{full}`")))?;
        match (slot, value) {
            (Value::Table(b), Value::Table(l)) => overlay(b, l, &full, explicit)?,
            (Value::Table(_), _) => return Err(config_err(format!("`{full}` is a section, not a value"))),
            (slot, v) => {
                *slot = v.clone();
                explicit.push(full);
            }
        }
    }
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Turns `section.key` and a raw value into a one-entry nested table.
fn dotted(key: &str, raw: &str) -> Result<Table> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed config key `{key}`")));
    }
    let mut value = parse_literal(raw);
    for part in parts[1..].iter().rev() {
        let mut t = Table::new();
        t.insert(part.to_string(), value);
        value = Value::Table(t);
    }
    let mut t = Table::new();
    t.insert(parts[0].to_string(), value);
    Ok(t)
}

/// Builder for a merged [`CliConfig`].
#[derive(Default)]
pub struct ConfigLoader {
    tree: Option<Table>,
    explicit: Vec<String>,
}

impl ConfigLoader {
    pub fn new() -> Self {
        let tree = Table::try_from(CliConfig::default()).expect("defaults serialize");
        ConfigLoader { tree: Some(tree), explicit: Vec::new() }
    }

    fn apply(&mut self, layer: &Table) -> Result<()> {
        overlay(self.tree.as_mut().expect("tree present"), layer, "", &mut self.explicit)
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RegoError::io(path, e))?;
        let layer: Table = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        self.apply(&layer)?;
        Ok(self)
    }

    pub fn toml_str(mut self, text: &str) -> Result<Self> {
        let layer: Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        self.apply(&layer)?;
        Ok(self)
    }

    /// Applies `REGO__SECTION__KEY=value` pairs; other variables are ignored.
    pub fn env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v)))
            .collect();
        pairs.sort();
        for (key, raw) in pairs {
            self.apply(&dotted(&key, &raw)?)?;
        }
        Ok(self)
    }

    /// Applies one `section.key=value` assignment.
    pub fn set(mut self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("`{assignment}` is not of the form section.key=value")))?;
        self.apply(&dotted(key.trim(), raw.trim())?)?;
        Ok(self)
    }

    pub fn finish(mut self) -> Result<CliConfig> {
        let tree = self.tree.take().expect("tree present");
        let mut cfg: CliConfig = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let set = |k: &str| self.explicit.iter().any(|e| e == k);
        // ACS flags follow the decoder depth unless given explicitly
        if set("generator.decoder_layers") && !set("generator.acs_enabled") {
            let g = &cfg.generator;
            let mut fresh = GeneratorConfig::new(g.height, g.width, g.base_channels, g.decoder_layers);
            fresh.max_channels = g.max_channels;
            fresh.sketch_threshold = g.sketch_threshold;
            fresh.seed = g.seed;
            cfg.generator = fresh;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ConfigLoader::new().finish().unwrap();
        assert_eq!(cfg, CliConfig::default());
        let text = CliConfig::defaults_toml();
        assert!(text.contains("style_weight = 0.5"));
        assert_eq!(ConfigLoader::new().toml_str(&text).unwrap().finish().unwrap(), cfg);
    }

    #[test]
    fn precedence_file_env_flags() {
        let cfg = ConfigLoader::new()
            .toml_str("[train]\niterations = 50\nlr_g = 1e-3\n")
            .unwrap()
            .env(vec![
                ("REGO__TRAIN__ITERATIONS".to_string(), "60".to_string()),
                ("REGO_PORT".to_string(), "1".to_string()),
            ])
            .unwrap()
            .set("train.iterations=70")
            .unwrap()
            .finish()
            .unwrap();
        assert_eq!(cfg.train.iterations, 70);
        assert_eq!(cfg.train.lr_g, 1e-3);
        assert_eq!(cfg.serve.port, DEFAULT_PORT);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigLoader::new().toml_str("[train]\nitterations = 5\n").is_err());
        assert!(ConfigLoader::new().toml_str("[nope]\na = 1\n").is_err());
        assert!(ConfigLoader::new().set("style.alpa=0.3").is_err());
        assert!(ConfigLoader::new().set("train").is_err());
    }

    #[test]
    fn decoder_depth_resets_acs_flags() {
        let cfg = ConfigLoader::new().set("generator.decoder_layers=3").unwrap().finish().unwrap();
        assert_eq!(cfg.generator.acs_enabled, vec![true, true, false]);
        let bad = ConfigLoader::new().set("train.batch_size=0").unwrap().finish();
        assert!(matches!(bad, Err(RegoError::Config(_))));
    }

    #[test]
    fn string_fallback() {
        let cfg = ConfigLoader::new().set("style.extractor=randconv5-s9").unwrap().finish().unwrap();
        assert_eq!(cfg.style.extractor, "randconv5-s9");
    }
}
