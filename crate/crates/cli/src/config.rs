//! Config files, presets, flag overlays and provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Optional sections of a TOML run config. Flags override every field.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub tile: Option<toml::Table>,
    pub energy: Option<toml::Table>,
    pub synthetic: Option<toml::Table>,
    pub setup: Option<toml::Table>,
    pub hp: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_bytes(path)?).map_err(|_| CliError::User(format!("{} is not UTF-8", path.display())))
}

/// Parses a TOML or JSON table, chosen by extension.
pub fn read_table(path: &Path) -> Result<Value, CliError> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str::<toml::Table>(&text)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::to_value(t).map_err(|e| e.to_string()))
    };
    parsed.map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with every key of `patches` written over it, in order.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patches: &[Value], what: &str) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Internal(e.to_string()))?;
    for p in patches {
        merge(&mut v, p.clone());
    }
    serde_json::from_value(v).map_err(|e| CliError::User(format!("{what}: {e}")))
}

pub fn table_value(t: &Option<toml::Table>) -> Vec<Value> {
    t.iter()
        .map(|t| serde_json::to_value(t).expect("TOML tables are JSON-representable"))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Where an output came from: enough to reproduce it.
#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    /// SHA-256 of the effective configuration as canonical JSON.
    pub config_sha256: String,
    /// Input file name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_table: Option<String>,
}

impl Provenance {
    pub fn new(command: &'static str, seed: Option<u64>, config: &impl Serialize) -> Self {
        let canonical = serde_json::to_vec(config).expect("configs serialize");
        Self {
            tool: "leopard",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_sha256: sha256_hex(&canonical),
            inputs: BTreeMap::new(),
            energy_table: None,
        }
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.inputs.insert(name, sha256_hex(bytes));
    }
}
