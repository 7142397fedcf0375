//! Hierarchical run configuration.
//!
//! Configs are JSON documents. A document is a tree of mappings, lists and
//! scalars (strings, numbers, booleans, null). Two extensions sit on top of
//! plain JSON:
//!
//! * `"inherit": "<path>"` (or a list of paths) at the top level names base
//!   documents, resolved relative to the including file. Bases are merged in
//!   order, then the including document is merged over them.
//! * Dotted overrides such as `optimizer.base_lr=0.02` replace exactly one
//!   existing node after inheritance. The right-hand side is parsed as JSON
//!   when it is valid JSON and taken as a bare string otherwise. List
//!   elements are addressed by index (`model.segmentor.bins.0=2`).
//!
//! Merging is recursive for mappings; scalars and lists in the override
//! replace the base value wholesale.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

pub const REQUIRED_SECTIONS: [&str; 6] = ["dataset", "model", "loss", "optimizer", "scheduler", "runtime"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad override `{spec}`: {reason}")]
    BadOverride { spec: String, reason: String },
    #[error("type clash at `{0}`: a mapping in one config and a non-mapping in the other")]
    TypeClash(String),
    #[error("config is missing required section `{0}`")]
    MissingSection(String),
    #[error("config root must be a mapping")]
    NotAMapping,
    #[error("inherit cycle through {0}")]
    InheritCycle(String),
    #[error("`inherit` must be a path or a list of paths")]
    BadInherit,
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A configuration tree whose root is a mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    root: Value,
}

impl Default for Config {
    fn default() -> Self {
        Self { root: Value::Object(Map::new()) }
    }
}

impl Config {
    pub fn from_value(root: Value) -> Result<Self> {
        if !root.is_object() {
            return Err(ConfigError::NotAMapping);
        }
        Ok(Self { root })
    }

    /// Parse a single document without resolving `inherit`.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_value(root)
    }

    pub fn as_value(&self) -> &Value {
        &self.root
    }

    pub fn into_value(self) -> Value {
        self.root
    }

    /// Node at a dotted path.
    pub fn get(&self, dotted: &str) -> Option<&Value> {
        dotted.split('.').try_fold(&self.root, |node, key| match node {
            Value::Object(m) => m.get(key),
            Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get(i)),
            _ => None,
        })
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.root.get(name)
    }

    pub fn validate_sections(&self) -> Result<()> {
        for s in REQUIRED_SECTIONS {
            if !self.root.get(s).is_some_and(Value::is_object) {
                return Err(ConfigError::MissingSection(s.to_string()));
            }
        }
        Ok(())
    }

    /// Apply one `dotted.path=value` override in place.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let bad = |reason: &str| ConfigError::BadOverride { spec: spec.to_string(), reason: reason.to_string() };
        let (path, raw) = spec.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let path = path.trim();
        if path.is_empty() || path.split('.').any(str::is_empty) {
            return Err(bad("empty path segment"));
        }
        let value = serde_json::from_str::<Value>(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut node = &mut self.root;
        for key in path.split('.') {
            node = match node {
                Value::Object(m) => m.get_mut(key).ok_or_else(|| bad(&format!("no key `{key}`")))?,
                Value::Array(a) => {
                    let i: usize = key.parse().map_err(|_| bad(&format!("`{key}` is not a list index")))?;
                    let len = a.len();
                    a.get_mut(i).ok_or_else(|| bad(&format!("index {i} out of range for list of {len}")))?
                }
                _ => return Err(bad(&format!("`{key}` descends into a scalar"))),
            };
        }
        *node = value;
        Ok(())
    }

    pub fn to_pretty_string(&self) -> String {
        serde_json::to_string_pretty(&self.root).expect("config values are always serializable")
    }
}

/// Recursive right-biased merge.
pub fn merge_config(base: &Config, over: &Config) -> Result<Config> {
    Ok(Config { root: merge_values("", &base.root, &over.root)? })
}

fn merge_values(path: &str, base: &Value, over: &Value) -> Result<Value> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let mut out = b.clone();
            for (k, ov) in o {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let merged = match b.get(k) {
                    Some(bv) => merge_values(&child, bv, ov)?,
                    None => ov.clone(),
                };
                out.insert(k.clone(), merged);
            }
            Ok(Value::Object(out))
        }
        (Value::Object(_), _) | (_, Value::Object(_)) => Err(ConfigError::TypeClash(path.to_string())),
        (_, o) => Ok(o.clone()),
    }
}

/// Load a config file, resolve `inherit`, apply overrides in order and
/// check that all required sections are present.
pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = load_tree(path.as_ref(), &mut BTreeSet::new())?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate_sections()?;
    Ok(cfg)
}

fn load_tree(path: &Path, stack: &mut BTreeSet<PathBuf>) -> Result<Config> {
    let canonical = path.canonicalize().map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    if !stack.insert(canonical.clone()) {
        return Err(ConfigError::InheritCycle(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let mut cfg = Config::parse_str(&text, &path.display().to_string())?;
    let inherit = cfg.root.as_object_mut().and_then(|m| m.remove("inherit"));
    let bases: Vec<String> = match inherit {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| v.as_str().map(str::to_string).ok_or(ConfigError::BadInherit))
            .collect::<Result<_>>()?,
        Some(_) => return Err(ConfigError::BadInherit),
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = Config::default();
    for b in bases {
        let base = load_tree(&dir.join(b), stack)?;
        merged = merge_config(&merged, &base)?;
    }
    stack.remove(&canonical);
    merge_config(&merged, &cfg)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use serde_json::json;

    use super::*;

    fn cfg(v: Value) -> Config {
        Config::from_value(v).unwrap()
    }

    #[test]
    fn merge_examples() {
        let x = cfg(json!({"a": {"b": 1, "c": 2}}));
        assert_eq!(merge_config(&x, &Config::default()).unwrap(), x);
        let m = merge_config(&x, &cfg(json!({"a": {"c": 3}}))).unwrap();
        assert_eq!(m.as_value(), &json!({"a": {"b": 1, "c": 3}}));
        let clash = merge_config(&cfg(json!({"a": 1})), &cfg(json!({"a": {"b": 2}})));
        assert!(matches!(clash, Err(ConfigError::TypeClash(p)) if p == "a"));
    }

    #[test]
    fn lists_replace_wholesale() {
        let m = merge_config(&cfg(json!({"bins": [1, 2, 3, 6]})), &cfg(json!({"bins": [1]}))).unwrap();
        assert_eq!(m.as_value(), &json!({"bins": [1]}));
    }

    #[test]
    fn overrides_replace_single_leaf() {
        let mut c = cfg(json!({"optimizer": {"lr": 0.01, "momentum": 0.9}, "m": {"bins": [1, 2]}}));
        c.apply_override("optimizer.lr=0.02").unwrap();
        c.apply_override("m.bins.1=6").unwrap();
        c.apply_override("optimizer.momentum=fast").unwrap();
        assert_eq!(c.get("optimizer.lr"), Some(&json!(0.02)));
        assert_eq!(c.get("m.bins"), Some(&json!([1, 6])));
        assert_eq!(c.get("optimizer.momentum"), Some(&json!("fast")));
        for bad in ["no.such.key=1", "optimizer.lr.x=1", "m.bins.5=1", "novalue", ".a=1"] {
            assert!(matches!(c.apply_override(bad), Err(ConfigError::BadOverride { .. })), "{bad}");
        }
    }

    #[test]
    fn parse_error_reports_position() {
        let err = Config::parse_str("{\n  \"a\": 1,\n  \"b\": }", "x.json").unwrap_err();
        match err {
            ConfigError::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            (-1000i64..1000).prop_map(|v| json!(v)),
            "[a-z]{0,4}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..3).prop_map(Value::Array),
                prop::collection::btree_map("[a-c]", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    fn arb_config() -> impl Strategy<Value = Config> {
        prop::collection::btree_map("[a-c]", arb_value(), 0..4)
            .prop_map(|m| Config::from_value(Value::Object(m.into_iter().collect())).unwrap())
    }

    proptest! {
        #[test]
        fn empty_is_identity(x in arb_config()) {
            prop_assert_eq!(merge_config(&x, &Config::default()).unwrap(), x.clone());
            prop_assert_eq!(merge_config(&Config::default(), &x).unwrap(), x);
        }

        #[test]
        fn merge_is_right_biased_on_shared_leaves(a in arb_config(), b in arb_config()) {
            if let Ok(m) = merge_config(&a, &b) {
                fn check(m: &Value, b: &Value) -> bool {
                    match (m, b) {
                        (Value::Object(mm), Value::Object(bm)) => bm.iter().all(|(k, bv)| mm.get(k).is_some_and(|mv| check(mv, bv))),
                        _ => m == b,
                    }
                }
                prop_assert!(check(m.as_value(), b.as_value()));
            }
        }

        #[test]
        fn serialization_roundtrips(x in arb_config()) {
            let back = Config::parse_str(&x.to_pretty_string(), "mem").unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
