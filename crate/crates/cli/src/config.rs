//! Layered configuration: built-in defaults, then a `--config` file section,
//! then command-line flags. Layers are merged as JSON values so every
//! subcommand shares one mechanism and the resolved result can be written to
//! the run manifest verbatim.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sgcd::spectral::{DEFAULT_BETA_C, DEFAULT_BETA_E};
use sgcd::{Error, Result};

/// Parsed `--config` file: one optional table per subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        } else {
            let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            serde_json::to_value(table).expect("toml tables convert to json")
        };
        let Value::Object(sections) = value else {
            return Err(Error::Format(format!("{}: expected a table of sections", path.display())));
        };
        for (name, v) in &sections {
            if !matches!(name.as_str(), "synth" | "filter" | "train") {
                return Err(Error::Invalid(format!(
                    "{}: unknown section [{name}] (expected synth, filter or train)",
                    path.display()
                )));
            }
            if !v.is_object() {
                return Err(Error::Format(format!("{}: [{name}] must be a table", path.display())));
            }
        }
        Ok(ConfigFile { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.sections.get(name)
    }
}

/// Flag overrides for one subcommand, keyed like the config struct's fields.
/// Dotted keys address nested tables (`temperatures.logit`).
#[derive(Debug, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<V: Serialize>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            let mut map = &mut self.0;
            for p in parts {
                map = map
                    .entry(p)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("nested override is a table");
            }
            map.insert(last.to_string(), v);
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Overlays `top` onto `base`, refusing keys `base` does not have.
fn overlay(base: &mut Value, top: &Value, path: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(t)) = (&mut *base, top) else {
        *base = top.clone();
        return Ok(());
    };
    for (k, v) in t {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match b.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &here)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Invalid(format!("unknown configuration key {here:?}"))),
        }
    }
    Ok(())
}

/// Resolves `base < file section < flags` into a `T`, returning the merged
/// value as well so it can be recorded.
pub fn resolve<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Value>, flags: &Overrides) -> Result<(T, Value)> {
    let mut merged = serde_json::to_value(base).expect("config serializes");
    if let Some(f) = file {
        overlay(&mut merged, f, "")?;
    }
    overlay(&mut merged, &Value::Object(flags.0.clone()), "")?;
    let resolved: T = serde_json::from_value(merged).map_err(|e| Error::Invalid(format!("configuration: {e}")))?;
    // Round-trip once more so the recorded value has every default materialized.
    let recorded = serde_json::to_value(&resolved).expect("config serializes");
    Ok((resolved, recorded))
}

/// Settings of the `filter` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub beta_e: f64,
    pub beta_c: f64,
    /// CLIP logit temperature.
    pub tau: f64,
    /// Use the low-rank eigensolver with this many leading pairs.
    pub top_k: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            beta_e: DEFAULT_BETA_E,
            beta_c: DEFAULT_BETA_C,
            tau: sgcd::representation::DEFAULT_LOGIT_TEMPERATURE,
            top_k: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgcd::trainer::TrainConfig;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = serde_json::json!({"epochs": 7, "lr_head": 0.2, "temperatures": {"contrast": 0.2}});
        let mut flags = Overrides::default();
        flags.set("lr_head", Some(0.3)).set("temperatures.logit", Some(0.02)).set::<f64>("lambda", None);
        let (cfg, recorded) = resolve(&TrainConfig::default(), Some(&file), &flags).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr_head, 0.3);
        assert_eq!(cfg.loss.temperatures.contrast, 0.2);
        assert_eq!(cfg.loss.temperatures.logit, 0.02);
        assert_eq!(cfg.loss.temperatures.cls_student, 0.1);
        assert_eq!(cfg.loss.lambda, 0.35);
        assert_eq!(recorded["batch_size"], 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        let file = serde_json::json!({"epoch": 7});
        let err = resolve(&TrainConfig::default(), Some(&file), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        let file = serde_json::json!({"temperatures": {"cls": 0.1}});
        assert!(resolve(&TrainConfig::default(), Some(&file), &Overrides::default()).is_err());
    }

    #[test]
    fn optional_fields_accept_values() {
        let mut flags = Overrides::default();
        flags.set("top_k", Some(64usize));
        let (cfg, _) = resolve(&FilterConfig::default(), None, &flags).unwrap();
        assert_eq!(cfg.top_k, Some(64));
    }

    #[test]
    fn toml_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[train]\nepochs = 3\n[filter]\nbeta_c = 0.9\n").unwrap();
        let f = ConfigFile::load(&p).unwrap();
        assert_eq!(f.section("train").unwrap()["epochs"], 3);
        assert!(f.section("synth").is_none());
        fs::write(&p, "[training]\nepochs = 3\n").unwrap();
        assert_eq!(ConfigFile::load(&p).unwrap_err().exit_code(), 1);
    }
}
