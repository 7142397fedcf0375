//! String-keyed component registries, one per category.
//!
//! A config node `{ "type": "<name>", ...params }` is turned into a component
//! by looking `name` up in the registry of its category and handing the
//! remaining keys to the registered constructor. Constructors reject keys
//! they do not understand.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Backbone,
    Segmentor,
    Dataset,
    Transform,
    Loss,
    Optimizer,
    Scheduler,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Backbone => "backbone",
            Category::Segmentor => "segmentor",
            Category::Dataset => "dataset",
            Category::Transform => "transform",
            Category::Loss => "loss",
            Category::Optimizer => "optimizer",
            Category::Scheduler => "scheduler",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("{0}: component name must not be empty")]
    EmptyName(Category),
    #[error("{category}: `{name}` is already registered")]
    DuplicateName { category: Category, name: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("{0}: config node must be a mapping with a string `type` key")]
    MissingType(Category),
    #[error("{category}: unknown type `{name}` (registered: {valid})")]
    UnknownType { category: Category, name: String, valid: String },
    #[error("{category} `{name}`: invalid parameters: {message}")]
    InvalidParams { category: Category, name: String, message: String },
}

/// Error a constructor reports; the registry attaches category and name.
#[derive(Debug, Clone, PartialEq)]
pub struct CtorError(pub String);

impl<E: fmt::Display> From<E> for CtorError {
    fn from(e: E) -> Self {
        CtorError(e.to_string())
    }
}

pub type Constructor<C, T> = Box<dyn Fn(&mut C, Map<String, Value>) -> Result<T, CtorError> + Send + Sync>;

pub struct Registry<C, T> {
    category: Category,
    entries: BTreeMap<String, Constructor<C, T>>,
}

impl<C, T> fmt::Debug for Registry<C, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("category", &self.category).field("names", &self.names()).finish()
    }
}

impl<C, T> Registry<C, T> {
    pub fn new(category: Category) -> Self {
        Self { category, entries: BTreeMap::new() }
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn register(
        &mut self,
        name: &str,
        ctor: impl Fn(&mut C, Map<String, Value>) -> Result<T, CtorError> + Send + Sync + 'static,
    ) -> Result<(), RegistryError> {
        if name.is_empty() {
            return Err(RegistryError::EmptyName(self.category));
        }
        if self.entries.contains_key(name) {
            return Err(RegistryError::DuplicateName { category: self.category, name: name.to_string() });
        }
        self.entries.insert(name.to_string(), Box::new(ctor));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    /// Construct the component a `{type: ..}` node names.
    pub fn build(&self, ctx: &mut C, node: &Value) -> Result<T, BuildError> {
        let mut params = node.as_object().cloned().ok_or(BuildError::MissingType(self.category))?;
        let name = match params.remove("type") {
            Some(Value::String(s)) => s,
            _ => return Err(BuildError::MissingType(self.category)),
        };
        let ctor = self.entries.get(&name).ok_or_else(|| BuildError::UnknownType {
            category: self.category,
            name: name.clone(),
            valid: self.names().join(", "),
        })?;
        ctor(ctx, params).map_err(|e| BuildError::InvalidParams { category: self.category, name, message: e.0 })
    }
}

/// Deserialize constructor parameters; unknown keys are an error as long as
/// `P` carries `#[serde(deny_unknown_fields)]`.
pub fn parse_params<P: DeserializeOwned>(params: Map<String, Value>) -> Result<P, CtorError> {
    serde_json::from_value(Value::Object(params)).map_err(|e| CtorError(e.to_string()))
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;
    use serde_json::json;

    use super::*;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Knobs {
        #[serde(default = "default_depth")]
        depth: u32,
    }

    fn default_depth() -> u32 {
        18
    }

    fn registry() -> Registry<(), u32> {
        let mut r = Registry::new(Category::Backbone);
        r.register("resnet", |_, p| Ok(parse_params::<Knobs>(p)?.depth)).unwrap();
        r
    }

    #[test]
    fn build_and_defaults() {
        let r = registry();
        assert_eq!(r.build(&mut (), &json!({"type": "resnet", "depth": 50})).unwrap(), 50);
        assert_eq!(r.build(&mut (), &json!({"type": "resnet"})).unwrap(), 18);
    }

    #[test]
    fn duplicate_and_empty_names_rejected() {
        let mut r = registry();
        assert_eq!(
            r.register("resnet", |_, _| Ok(0)),
            Err(RegistryError::DuplicateName { category: Category::Backbone, name: "resnet".into() })
        );
        assert_eq!(r.register("", |_, _| Ok(0)), Err(RegistryError::EmptyName(Category::Backbone)));
    }

    #[test]
    fn unknown_type_lists_valid_names_and_lookup_is_case_sensitive() {
        let r = registry();
        let err = r.build(&mut (), &json!({"type": "ResNet"})).unwrap_err();
        match err {
            BuildError::UnknownType { valid, .. } => assert_eq!(valid, "resnet"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_invalid_params() {
        let r = registry();
        let err = r.build(&mut (), &json!({"type": "resnet", "dpeth": 50})).unwrap_err();
        assert!(matches!(err, BuildError::InvalidParams { .. }), "{err}");
        assert!(matches!(r.build(&mut (), &json!({"depth": 1})), Err(BuildError::MissingType(_))));
    }
}
