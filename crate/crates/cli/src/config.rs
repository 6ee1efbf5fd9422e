//! Layered configuration: built-in default, then the config file section,
//! then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Usage;

/// Where a resolved key came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Cli,
}

/// Parsed config file: one TOML table per section (`[train]`, `[align]`, ...).
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config file {}: {e}", path.display())))?;
        let sections: toml::Table = toml::from_str(&text).map_err(|e| Usage(format!("invalid config file {}: {e}", path.display())))?;
        Ok(ConfigFile { sections })
    }

    fn section(&self, name: &str) -> anyhow::Result<Option<Map<String, Value>>> {
        match self.sections.get(name) {
            None => Ok(None),
            Some(toml::Value::Table(t)) => match serde_json::to_value(t)? {
                Value::Object(m) => Ok(Some(m)),
                _ => unreachable!("a table serializes to an object"),
            },
            Some(_) => Err(Usage(format!("config section [{name}] must be a table")).into()),
        }
    }
}

/// Flag values given on the command line, keyed by config field name.
#[derive(Debug, Clone, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `value` under `key` when the flag was given.
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Resolved<T> {
    pub value: T,
    pub sources: BTreeMap<String, Source>,
}

/// Merges `default`, the `section` of `file` and `cli`, in increasing
/// precedence. Unknown keys are usage errors.
pub fn resolve<T>(default: T, file: Option<&ConfigFile>, section: &str, cli: &Overrides) -> anyhow::Result<Resolved<T>>
where
    T: Serialize + DeserializeOwned,
{
    let Value::Object(mut merged) = serde_json::to_value(&default)? else {
        anyhow::bail!("config section [{section}] is not a struct");
    };
    let mut sources: BTreeMap<String, Source> = merged.keys().map(|k| (k.clone(), Source::Default)).collect();
    let file_section = match file {
        Some(f) => f.section(section)?,
        None => None,
    };
    for (layer, source) in [(file_section.as_ref(), Source::File), (Some(&cli.0), Source::Cli)] {
        for (k, v) in layer.into_iter().flatten() {
            if !merged.contains_key(k) {
                let known: Vec<&String> = sources.keys().collect();
                return Err(Usage(format!("unknown key '{k}' in [{section}] (known: {known:?})")).into());
            }
            merged.insert(k.clone(), v.clone());
            sources.insert(k.clone(), source);
        }
    }
    let value = serde_json::from_value(Value::Object(merged))
        .map_err(|e| Usage(format!("invalid [{section}] configuration: {e}")))
        .with_context(|| format!("resolving [{section}]"))?;
    Ok(Resolved { value, sources })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Demo {
        a: u32,
        b: f64,
        c: String,
    }

    fn demo() -> Demo {
        Demo { a: 1, b: 0.5, c: "x".into() }
    }

    #[test]
    fn cli_beats_file_beats_default() {
        let file = ConfigFile {
            sections: toml::from_str("[demo]\na = 7\nb = 2.0\n").unwrap(),
        };
        let mut cli = Overrides::new();
        cli.set("a", Some(9u32)).set::<f64>("b", None);
        let r = resolve(demo(), Some(&file), "demo", &cli).unwrap();
        assert_eq!(r.value, Demo { a: 9, b: 2.0, c: "x".into() });
        assert_eq!(r.sources["a"], Source::Cli);
        assert_eq!(r.sources["b"], Source::File);
        assert_eq!(r.sources["c"], Source::Default);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_usage_errors() {
        let file = ConfigFile {
            sections: toml::from_str("[demo]\nzzz = 1\n").unwrap(),
        };
        let err = resolve(demo(), Some(&file), "demo", &Overrides::new()).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());

        let file = ConfigFile {
            sections: toml::from_str("[demo]\na = \"seven\"\n").unwrap(),
        };
        let err = resolve(demo(), Some(&file), "demo", &Overrides::new()).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }

    #[test]
    fn missing_section_keeps_defaults() {
        let r = resolve(demo(), Some(&ConfigFile::default()), "demo", &Overrides::new()).unwrap();
        assert_eq!(r.value, demo());
    }
}
