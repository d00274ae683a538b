//! Tool pool: loading, validation, persistence and seeded splitting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tool pool JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid tool `{tool}`: {reason}")]
    Validation { tool: String, reason: String },
    #[error("n_train must satisfy 0 < n_train < {n} (got {n_train})")]
    Range { n_train: usize, n: usize },
}

/// Semantic type tag of a function parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Boolean,
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamType,
    pub required: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub api_name: String,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    #[serde(default)]
    pub returns: String,
}

impl FunctionSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Human-readable signature, e.g. `get_weather(city: string, units?: string) -> forecast`.
    pub fn signature(&self) -> String {
        let params = self
            .parameters
            .iter()
            .map(|p| {
                let opt = if p.required { "" } else { "?" };
                format!("{}{}: {}", p.name, opt, p.kind)
            })
            .collect::<Vec<_>>()
            .join(", ");
        if self.returns.is_empty() {
            format!("{}({})", self.api_name, params)
        } else {
            format!("{}({}) -> {}", self.api_name, params, self.returns)
        }
    }
}

/// A named external capability: name, natural-language description and the
/// function it exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub description: String,
    pub function: FunctionSpec,
}

impl Tool {
    pub fn api_name(&self) -> &str {
        &self.function.api_name
    }
}

/// Returns true when `s` matches `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn validate_tool(tool: &Tool) -> Result<(), RegistryError> {
    let fail = |reason: String| RegistryError::Validation {
        tool: tool.name.clone(),
        reason,
    };
    if !is_identifier(&tool.name) {
        return Err(fail("name is not a valid identifier".into()));
    }
    if tool.description.trim().is_empty() {
        return Err(fail("description is empty".into()));
    }
    if !is_identifier(&tool.function.api_name) {
        return Err(fail(format!(
            "api_name `{}` is not a valid identifier",
            tool.function.api_name
        )));
    }
    let mut seen = HashSet::new();
    for p in &tool.function.parameters {
        if !is_identifier(&p.name) {
            return Err(fail(format!("parameter `{}` is not a valid identifier", p.name)));
        }
        if !seen.insert(p.name.as_str()) {
            return Err(fail(format!("duplicate parameter `{}`", p.name)));
        }
    }
    Ok(())
}

/// Immutable, validated set of tools indexed by name and api name.
#[derive(Debug, Clone)]
pub struct ToolPool {
    tools: Vec<Tool>,
    by_name: HashMap<String, usize>,
    by_api: HashMap<String, usize>,
}

impl PartialEq for ToolPool {
    fn eq(&self, other: &Self) -> bool {
        self.tools == other.tools
    }
}

impl ToolPool {
    pub fn new(tools: Vec<Tool>) -> Result<Self, RegistryError> {
        let mut by_name = HashMap::with_capacity(tools.len());
        let mut by_api = HashMap::with_capacity(tools.len());
        for (i, tool) in tools.iter().enumerate() {
            validate_tool(tool)?;
            if by_name.insert(tool.name.clone(), i).is_some() {
                return Err(RegistryError::Validation {
                    tool: tool.name.clone(),
                    reason: "duplicate tool name".into(),
                });
            }
            if by_api.insert(tool.function.api_name.clone(), i).is_some() {
                return Err(RegistryError::Validation {
                    tool: tool.name.clone(),
                    reason: format!("api_name `{}` already used by another tool", tool.function.api_name),
                });
            }
        }
        Ok(Self { tools, by_name, by_api })
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[Tool] {
        &self.tools
    }

    pub fn get(&self, name: &str) -> Option<&Tool> {
        self.by_name.get(name).map(|&i| &self.tools[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_api_name(&self, api_name: &str) -> Option<&Tool> {
        self.by_api.get(api_name).map(|&i| &self.tools[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.iter().map(|t| t.name.as_str())
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let tools: Vec<Tool> = serde_json::from_str(text)?;
        Self::new(tools)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tools).expect("tools serialize")
    }
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<ToolPool, RegistryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ToolPool::from_json(&text)
}

pub fn save_pool(pool: &ToolPool, path: impl AsRef<Path>) -> Result<(), RegistryError> {
    let path = path.as_ref();
    fs::write(path, pool.to_json() + "\n").map_err(|source| RegistryError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Seeded uniform partition of the pool into `n_train` and `N - n_train`
/// tools. Each part keeps the original pool order.
pub fn split_pool(pool: &ToolPool, n_train: usize, seed: u64) -> Result<(ToolPool, ToolPool), RegistryError> {
    let n = pool.len();
    if n_train == 0 || n_train >= n {
        return Err(RegistryError::Range { n_train, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, "split-pool", 0));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, held): (Vec<_>, Vec<_>) = pool
        .tools
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    let strip = |v: Vec<(Tool, bool)>| v.into_iter().map(|(t, _)| t).collect::<Vec<_>>();
    Ok((ToolPool::new(strip(train))?, ToolPool::new(strip(held))?))
}
