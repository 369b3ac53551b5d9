//! Declarative run configuration: one TOML file per run, hashed into every
//! artifact it produces.

use crate::degrade::DegradeConfig;
use crate::error::{Error, Result};
use crate::synth::RenderConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::TomlParse { path: path.to_path_buf(), message: e.to_string() })
}

pub fn save_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_canonical_toml(value)?)?;
    Ok(())
}

/// Canonical TOML text (serde field order, which is fixed per struct).
pub fn to_canonical_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::TomlSer(e.to_string()))
}

/// Hex SHA-256 of the canonical TOML encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = to_canonical_toml(value)?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    Ok(format!("{:x}", h.finalize()))
}

/// Config for the `synth` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SynthRunConfig {
    pub render: RenderConfig,
    /// Optional line-oriented corpus file; uniform charset draws otherwise.
    pub corpus: Option<std::path::PathBuf>,
    /// Charset file; the built-in printable-ASCII table otherwise.
    pub charset: Option<std::path::PathBuf>,
}

/// Config for the `degrade` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DegradeRunConfig {
    pub degrade: DegradeConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = SynthRunConfig::default();
        let mut b = SynthRunConfig::default();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
        b.render.p_curved = 0.9;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
