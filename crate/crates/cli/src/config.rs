//! Line-oriented `key = value` configuration files with `[section]` headers.
//!
//! Values are read as JSON when they parse as JSON (`64`, `0.2`, `true`,
//! `[2, 4]`, `null`) and as plain strings otherwise. Command-line flags are
//! applied on top of the file, so a flag always wins over the same key in
//! the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Parsed file contents: section name (empty for keys before any header)
/// to key to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, Value>>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, Value>> = BTreeMap::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    bail!("line {}: unterminated section header {line:?}", i + 1);
                };
                current = name.trim().to_string();
                if current.is_empty() {
                    bail!("line {}: empty section name", i + 1);
                }
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got {line:?}", i + 1);
            };
            let key = key.trim();
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            let entries = sections.entry(current.clone()).or_default();
            if entries
                .insert(key.to_string(), parse_value(value.trim()))
                .is_some()
            {
                bail!("line {}: duplicate key {key:?}", i + 1);
            }
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load)
            .transpose()
            .map(Option::unwrap_or_default)
    }

    /// Fails on sections this command does not read.
    pub fn only_sections(&self, allowed: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !allowed.contains(&name.as_str()) {
                let shown = if name.is_empty() { "(top level)" } else { name };
                bail!(
                    "unknown config section {shown}; this command reads {}",
                    allowed.join(", ")
                );
            }
        }
        Ok(())
    }

    /// Sets `section.key` as a flag would.
    pub fn set(&mut self, section: &str, key: &str, value: impl Serialize) -> Result<()> {
        let value = serde_json::to_value(value)?;
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Value> {
        self.sections.get(section)?.get(key)
    }

    /// `base` with every key of `section` applied; unknown keys are errors.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, section: &str, base: T) -> Result<T> {
        let Some(entries) = self.sections.get(section) else {
            return Ok(base);
        };
        let Value::Object(mut map) = serde_json::to_value(&base)? else {
            bail!("section [{section}] does not map to a record");
        };
        for (k, v) in entries {
            if !map.contains_key(k) {
                bail!("unknown key {k:?} in section [{section}]");
            }
            map.insert(k.clone(), v.clone());
        }
        serde_json::from_value(Value::Object(map))
            .with_context(|| format!("invalid value in section [{section}]"))
    }
}

/// Renders resolved settings back in the file format, one section per
/// record.
pub fn render(sections: &[(&str, Value)]) -> String {
    let mut out = String::new();
    for (name, value) in sections {
        let _ = writeln!(out, "[{name}]");
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    let _ = writeln!(out, "{k} = {v}");
                }
            }
            other => {
                let _ = writeln!(out, "value = {other}");
            }
        }
    }
    out
}

/// Serializes `value` as an object for [`render`].
pub fn record(value: &impl Serialize) -> Value {
    serde_json::to_value(value).unwrap_or_else(|_| Value::Object(Map::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Knobs {
        hidden: usize,
        rate: f64,
        name: String,
        keys: [usize; 2],
    }

    impl Default for Knobs {
        fn default() -> Self {
            Self {
                hidden: 8,
                rate: 0.5,
                name: "x".into(),
                keys: [1, 2],
            }
        }
    }

    #[test]
    fn sections_values_and_comments() {
        let file = ConfigFile::parse(
            "# comment\n[model]\nhidden = 64\nrate=0.25\nname = plain text\nkeys = [3, 4]\n",
        )
        .unwrap();
        let k = file.apply("model", Knobs::default()).unwrap();
        assert_eq!(
            k,
            Knobs {
                hidden: 64,
                rate: 0.25,
                name: "plain text".into(),
                keys: [3, 4]
            }
        );
        assert_eq!(
            file.apply("other", Knobs::default()).unwrap(),
            Knobs::default()
        );
    }

    #[test]
    fn flags_override_the_file() {
        let mut file = ConfigFile::parse("[model]\nhidden = 64\n").unwrap();
        file.set("model", "hidden", 16).unwrap();
        assert_eq!(file.apply("model", Knobs::default()).unwrap().hidden, 16);
    }

    #[test]
    fn malformed_files_and_unknown_keys_are_errors() {
        for bad in [
            "[model\nx = 1",
            "novalue",
            "[model]\nhidden = 1\nhidden = 2",
            "[]\n",
            " = 3",
        ] {
            assert!(ConfigFile::parse(bad).is_err(), "{bad:?}");
        }
        let file = ConfigFile::parse("[model]\nwidth = 3\n").unwrap();
        assert!(file.apply("model", Knobs::default()).is_err());
        let file = ConfigFile::parse("[model]\nhidden = lots\n").unwrap();
        assert!(file.apply("model", Knobs::default()).is_err());
        assert!(file.only_sections(&["train"]).is_err());
        file.only_sections(&["model"]).unwrap();
    }

    #[test]
    fn rendered_settings_parse_back() {
        let text = render(&[("model", record(&Knobs::default()))]);
        let back = ConfigFile::parse(&text)
            .unwrap()
            .apply(
                "model",
                Knobs {
                    hidden: 1,
                    ..Knobs::default()
                },
            )
            .unwrap();
        assert_eq!(back, Knobs::default());
    }
}
