//! Run configuration: documented defaults, a flat `section.key = value` file
//! and flag overrides, merged in that order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use tov_core::data::SyntheticSpec;
use tov_core::metrics::SPARSITY_TOL;
use tov_core::probe::ProbeConfig;
use tov_core::ssl::SslConfig;
use tov_core::vit::ViTConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub sample_n: usize,
    pub sparsity_tol: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            sample_n: 512,
            sparsity_tol: SPARSITY_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; `ssl.seed` and `probe.seed` inherit it unless set.
    pub seed: u64,
    pub threads: usize,
    pub model: ViTConfig,
    pub ssl: SslConfig,
    pub probe: ProbeConfig,
    pub diagnose: DiagnoseConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            model: ViTConfig::default(),
            ssl: SslConfig::default(),
            probe: ProbeConfig::default(),
            diagnose: DiagnoseConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Keys that are valid although their default is absent.
const OPTIONAL_KEYS: [(&str, Value); 1] = [("model.pos_table_tokens", Value::Integer(0))];

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables");
        }
        t.insert(last.to_string(), v.clone());
    }
    root
}

fn defaults() -> BTreeMap<String, Value> {
    let Value::Table(t) = Value::try_from(RunConfig::default()).expect("defaults serialize") else {
        unreachable!("a struct serializes to a table")
    };
    let mut flat = BTreeMap::new();
    flatten("", &t, &mut flat);
    for (k, v) in OPTIONAL_KEYS {
        flat.insert(k.to_string(), v);
    }
    flat
}

/// Coerces `v` to the kind of `template`, widening integers to floats.
fn coerce(key: &str, template: &Value, v: Value) -> Result<Value, CliError> {
    let bad = |v: &Value| CliError::config(key, format!("expected {}, got {}", template.type_str(), v.type_str()));
    match (template, v) {
        (Value::Integer(_), Value::Integer(i)) if i < 0 => Err(CliError::config(key, format!("must be ≥ 0, got {i}"))),
        (Value::Integer(_), v @ Value::Integer(_)) => Ok(v),
        (Value::Float(_), v @ Value::Float(_)) => Ok(v),
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::String(_), v @ Value::String(_)) => Ok(v),
        (Value::Boolean(_), v @ Value::Boolean(_)) => Ok(v),
        (Value::Array(t), Value::Array(items)) => {
            let elem = t.first().cloned().unwrap_or(Value::Integer(0));
            items
                .into_iter()
                .map(|x| coerce(key, &elem, x))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        (_, v) => Err(bad(&v)),
    }
}

/// Parses a config file: flat TOML with dotted keys, or (for `.json`) a
/// previously written `resolved_config.json`.
pub fn read_file(path: &Path) -> Result<BTreeMap<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let table: Table = if path.extension().is_some_and(|e| e == "json") {
        let mut json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?;
        strip_nulls(&mut json);
        Table::try_from(json).map_err(|e| CliError::config(path.display().to_string(), e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::config(path.display().to_string(), e.message().to_string()))?
    };
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    Ok(flat)
}

fn strip_nulls(v: &mut serde_json::Value) {
    if let serde_json::Value::Object(m) = v {
        m.retain(|_, x| !x.is_null());
        m.values_mut().for_each(strip_nulls);
    }
}

/// Merges defaults, `file` and `flags` (later wins), rejecting unknown keys
/// and ill-typed values by name, then validates the result.
pub fn resolve(file: BTreeMap<String, Value>, flags: Vec<(String, Value)>) -> Result<RunConfig, CliError> {
    let base = defaults();
    let mut merged: BTreeMap<String, Value> = base.clone();
    merged.remove("model.pos_table_tokens");
    let mut explicit = BTreeSet::new();
    for (key, v) in file.into_iter().chain(flags) {
        let template = base
            .get(&key)
            .ok_or_else(|| CliError::config(&key, "unknown key"))?;
        let v = coerce(&key, template, v)?;
        // Deserialize with only this key changed so errors name it.
        let mut probe = base.clone();
        probe.remove("model.pos_table_tokens");
        probe.insert(key.clone(), v.clone());
        RunConfig::deserialize(Value::Table(unflatten(&probe))).map_err(|e| CliError::config(&key, e.to_string()))?;
        merged.insert(key.clone(), v);
        explicit.insert(key);
    }
    let mut cfg = RunConfig::deserialize(Value::Table(unflatten(&merged)))
        .map_err(|e| CliError::config("config", e.to_string()))?;
    if !explicit.contains("ssl.seed") {
        cfg.ssl.seed = cfg.seed;
    }
    if !explicit.contains("probe.seed") {
        cfg.probe.seed = cfg.seed;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.model.validate()?;
    cfg.ssl.validate()?;
    cfg.probe.validate()?;
    if cfg.threads == 0 {
        return Err(CliError::config("threads", "must be ≥ 1"));
    }
    if cfg.diagnose.sample_n < 3 {
        return Err(CliError::config("diagnose.sample_n", "must be ≥ 3"));
    }
    if !(cfg.diagnose.sparsity_tol >= 0.0) {
        return Err(CliError::config("diagnose.sparsity_tol", "must be ≥ 0"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten("", &toml::from_str(text).unwrap(), &mut flat);
        flat
    }

    #[test]
    fn empty_gives_defaults() {
        assert_eq!(resolve(BTreeMap::new(), vec![]).unwrap(), RunConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let file = parse("ssl.cov_coef = 3\nmodel.depth = 4\n");
        let cfg = resolve(file, vec![("ssl.cov_coef".into(), Value::Float(7.5))]).unwrap();
        assert_eq!(cfg.ssl.cov_coef, 7.5);
        assert_eq!(cfg.model.depth, 4);
    }

    #[test]
    fn errors_name_the_key() {
        let err = |text: &str| resolve(parse(text), vec![]).unwrap_err().to_string();
        assert!(err("ssl.bogus = 1").contains("ssl.bogus"));
        assert!(err("model.depth = \"deep\"").contains("model.depth"));
        assert!(err("model.heads = 5").contains("model.heads"));
        assert!(err("ssl.optimizer = \"rmsprop\"").contains("ssl.optimizer"));
        assert!(err("model.pos_table_tokens = 51").contains("model.pos_table_tokens"));
    }

    #[test]
    fn seeds_follow_the_global_seed() {
        let cfg = resolve(parse("seed = 11"), vec![]).unwrap();
        assert_eq!((cfg.ssl.seed, cfg.probe.seed), (11, 11));
        let cfg = resolve(parse("seed = 11\nssl.seed = 3"), vec![]).unwrap();
        assert_eq!((cfg.ssl.seed, cfg.probe.seed), (3, 11));
    }

    #[test]
    fn resolved_json_replays() {
        let cfg = resolve(parse("seed = 5\nmodel.pos_table_tokens = 785\nssl.expander_dims = [8, 8]"), vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("resolved_config.json");
        std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(resolve(read_file(&p).unwrap(), vec![]).unwrap(), cfg);
    }
}
