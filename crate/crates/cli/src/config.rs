//! Layered configuration: a TOML file plus `--section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// A dotted key path and its raw value, as given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub raw: String,
}

/// Splits `--a.b=value` flags out of `args`; everything else is returned untouched.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v)),
            None => (body, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let Some(raw) = value else {
            return Err(CliError::Usage(format!(
                "override `--{key}` needs `=value`"
            )));
        };
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Usage(format!("malformed override key `{key}`")));
        }
        overrides.push(Override {
            path,
            raw: raw.to_string(),
        });
    }
    Ok((rest, overrides))
}

/// Reads a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty override path");
    let mut cursor = table;
    for (depth, key) in parents.iter().enumerate() {
        let entry = cursor
            .entry(key.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("`{}` is not a section", path[..=depth].join(".")))
        })?;
    }
    cursor.insert(last.clone(), value);
    Ok(())
}

/// Configuration tree after overrides, with the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Layered {
    pub table: Table,
    pub base_dir: PathBuf,
}

impl Layered {
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let (mut table, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let table: Table = text
                    .parse()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, dir)
            }
            None => (Table::new(), PathBuf::new()),
        };
        for o in overrides {
            set_path(&mut table, &o.path, parse_value(&o.raw))?;
        }
        Ok(Layered { table, base_dir })
    }

    pub fn set(&mut self, path: &[&str], value: Value) -> Result<()> {
        let owned: Vec<String> = path.iter().map(|s| s.to_string()).collect();
        set_path(&mut self.table, &owned, value)
    }

    /// Rejects top-level keys outside `allowed`.
    pub fn expect_sections(&self, allowed: &[&str]) -> Result<()> {
        match self.table.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Config(format!(
                "unknown section `{k}` (expected one of: {})",
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }

    pub fn section<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let value = self
            .table
            .get(name)
            .ok_or_else(|| CliError::Config(format!("missing section `[{name}]`")))?;
        value
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[{name}] {}", e.message())))
    }

    pub fn optional_section<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        if self.table.contains_key(name) {
            self.section(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.table).expect("toml table converts to json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, o) = split_overrides(args(&[
            "train",
            "--config",
            "a.toml",
            "--federation.gamma=0.01",
            "--out=./x",
        ]))
        .unwrap();
        assert_eq!(rest, args(&["train", "--config", "a.toml", "--out=./x"]));
        assert_eq!(o[0].path, vec!["federation", "gamma"]);
        assert!(split_overrides(args(&["--federation.gamma"])).is_err());
    }

    #[test]
    fn override_values_keep_their_types() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("fedgsp"), Value::String("fedgsp".into()));
    }

    #[test]
    fn overrides_replace_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[csbm]\nn = 10\nc = 2\n").unwrap();
        let o = Override {
            path: vec!["csbm".into(), "n".into()],
            raw: "20".into(),
        };
        let layered = Layered::load(Some(&path), &[o]).unwrap();
        assert_eq!(layered.table["csbm"]["n"].as_integer(), Some(20));
        assert_eq!(layered.table["csbm"]["c"].as_integer(), Some(2));
    }

    #[test]
    fn missing_keys_are_named() {
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct S {
            rounds: usize,
        }
        let mut layered = Layered::load(None, &[]).unwrap();
        layered
            .set(&["federation", "clients"], Value::Integer(2))
            .unwrap();
        let err = layered.section::<S>("federation").unwrap_err().to_string();
        assert!(err.contains("rounds"), "{err}");
    }
}
