//! The sensitive attribute under attack and its value ordering.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_PROMPTS: &str = include_str!("../prompts/default.json");

/// Ordered set of values a sensitive attribute can take.
///
/// The position of a value in `values` is its index everywhere else in the
/// crate (advantage vectors, confusion matrix rows, tie-breaking).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct AttributeSpace {
    name: String,
    values: Vec<String>,
    prompts: BTreeMap<String, String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawSpace {
    name: String,
    values: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    prompts: BTreeMap<String, String>,
}

impl TryFrom<RawSpace> for AttributeSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        AttributeSpace::new(raw.name, raw.values)?.with_prompts(raw.prompts)
    }
}

impl From<AttributeSpace> for RawSpace {
    fn from(space: AttributeSpace) -> Self {
        RawSpace {
            name: space.name,
            values: space.values,
            prompts: space.prompts,
        }
    }
}

impl AttributeSpace {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        values: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let name = name.into();
        let values: Vec<String> = values.into_iter().map(Into::into).collect();
        if name.is_empty() {
            return Err(Error::InvalidSpace("attribute name is empty".into()));
        }
        if values.len() < 2 {
            return Err(Error::InvalidSpace(format!(
                "`{name}` needs at least two values, got {}",
                values.len()
            )));
        }
        let mut index = HashMap::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            if v.is_empty() {
                return Err(Error::InvalidSpace(format!(
                    "`{name}` has an empty value label"
                )));
            }
            if index.insert(v.clone(), i).is_some() {
                return Err(Error::InvalidSpace(format!(
                    "`{name}` lists value `{v}` more than once"
                )));
            }
        }
        Ok(Self {
            name,
            values,
            prompts: BTreeMap::new(),
            index,
        })
    }

    /// Attach edit prompts. Every key must be a value of this space.
    pub fn with_prompts(mut self, prompts: BTreeMap<String, String>) -> Result<Self> {
        if let Some(unknown) = prompts.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(Error::InvalidSpace(format!(
                "prompt given for unknown value `{unknown}` of `{}`",
                self.name
            )));
        }
        self.prompts = prompts;
        Ok(self)
    }

    /// Built-in attribute definition (with edit prompts) by name, e.g.
    /// `hair_color`.
    pub fn preset(name: &str) -> Option<Self> {
        PromptCatalog::builtin().space(name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.index.get(value).copied()
    }

    pub fn require_index(&self, value: &str) -> Result<usize> {
        self.index_of(value)
            .ok_or_else(|| Error::UnknownValue(value.to_string()))
    }

    pub fn value(&self, index: usize) -> &str {
        &self.values[index]
    }

    pub fn prompts(&self) -> &BTreeMap<String, String> {
        &self.prompts
    }

    /// Same name and values in the same order; prompts are ignored.
    pub fn same_values(&self, other: &AttributeSpace) -> bool {
        self.name == other.name && self.values == other.values
    }
}

/// Edit prompts used to generate attack images, keyed by attribute and value.
#[derive(Debug, Clone, Deserialize)]
pub struct PromptCatalog {
    pub prefix: String,
    pub attributes: BTreeMap<String, CatalogEntry>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CatalogEntry {
    pub values: Vec<String>,
    pub prompts: BTreeMap<String, String>,
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_PROMPTS).expect("bundled prompt catalog is valid JSON")
    }

    pub fn space(&self, attribute: &str) -> Option<AttributeSpace> {
        let entry = self.attributes.get(attribute)?;
        AttributeSpace::new(attribute, entry.values.iter().cloned())
            .and_then(|s| s.with_prompts(entry.prompts.clone()))
            .ok()
    }

    /// Full generation prompt for one value, prefix included.
    pub fn full_prompt(&self, attribute: &str, value: &str) -> Option<String> {
        let p = self.attributes.get(attribute)?.prompts.get(value)?;
        Some(format!("{}{}", self.prefix, p))
    }
}
