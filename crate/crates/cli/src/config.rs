//! Layered run configuration: built-in defaults, then the JSON config file, then flags.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// The effective configuration of one run, as a JSON object of sections.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    root: Map<String, Value>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(CliError::invalid("config", "top level must be a JSON object")),
            Err(e) => Err(CliError::invalid("config", format!("{}: {e}", path.display()))),
        }
    }

    /// Sets `section.key` when a flag was given; flags always win over the file.
    pub fn set<T: Serialize>(&mut self, section: &str, key: &str, value: Option<T>) {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialise");
            self.section_mut(section).insert(key.to_string(), v);
        }
    }

    pub fn set_root<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.root
                .insert(key.to_string(), serde_json::to_value(v).expect("flag values serialise"));
        }
    }

    pub fn root_u64(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.root.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| CliError::invalid(key, format!("expected an unsigned integer, got {v}"))),
        }
    }

    fn section_mut(&mut self, section: &str) -> &mut Map<String, Value> {
        let entry = self
            .root
            .entry(section.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !entry.is_object() {
            *entry = Value::Object(Map::new());
        }
        entry.as_object_mut().expect("just made an object")
    }

    /// Deserialises `section` layered over `default`, then stores the merged result back
    /// so the echoed config shows every effective value.
    pub fn resolve<T: Serialize + DeserializeOwned>(&mut self, section: &str, default: T) -> Result<T, CliError> {
        let mut merged = serde_json::to_value(default).expect("defaults serialise");
        if let Some(over) = self.root.get(section) {
            if !over.is_object() {
                return Err(CliError::invalid(section, "must be a JSON object"));
            }
            merge(&mut merged, over);
        }
        let typed: T = serde_path_to_error::deserialize(merged.clone()).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { section.to_string() } else { format!("{section}.{path}") };
            CliError::invalid(field, e.into_inner().to_string())
        })?;
        let effective = serde_json::to_value(&typed).expect("resolved sections serialise");
        self.root.insert(section.to_string(), effective);
        Ok(typed)
    }

    pub fn write(&self, out: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(&Value::Object(self.root.clone()))?;
        std::fs::write(out.join("config.json"), text + "\n")
            .with_context(|| format!("writing {}", out.join("config.json").display()))
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct S {
        a: u32,
        b: String,
    }

    #[test]
    fn flags_override_file_and_defaults_fill_gaps() {
        let mut c = RunConfig {
            root: serde_json::from_str(r#"{"s": {"a": 5, "b": "file"}}"#).unwrap(),
        };
        c.set("s", "b", Some("flag"));
        let s: S = c
            .resolve(
                "s",
                S {
                    a: 1,
                    b: "default".into(),
                },
            )
            .unwrap();
        assert_eq!(
            s,
            S {
                a: 5,
                b: "flag".into()
            }
        );
        let s: S = RunConfig::default()
            .resolve(
                "s",
                S {
                    a: 1,
                    b: "d".into(),
                },
            )
            .unwrap();
        assert_eq!(s.a, 1);
    }

    #[test]
    fn bad_type_names_the_section() {
        let mut c = RunConfig {
            root: serde_json::from_str(r#"{"s": {"a": "x"}}"#).unwrap(),
        };
        let err = c.resolve("s", S { a: 1, b: "d".into() }).unwrap_err();
        assert!(matches!(err, CliError::Invalid { ref field, .. } if field == "s.a"), "{err}");
    }
}
