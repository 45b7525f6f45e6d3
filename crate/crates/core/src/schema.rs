//! Versioned JSON documents.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("unsupported schema_version {found} (this build reads {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("missing schema_version field")]
    Missing,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Wraps a document with a top-level `schema_version` field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Versioned<T> {
    pub fn new(body: T) -> Self {
        Versioned {
            schema_version: SCHEMA_VERSION,
            body,
        }
    }
}

/// Parses a versioned document and checks the version before the body.
pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T, SchemaError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        None => return Err(SchemaError::Missing),
        Some(v) if v != SCHEMA_VERSION as u64 => {
            return Err(SchemaError::Version { found: v as u32 })
        }
        Some(_) => {}
    }
    Ok(serde_json::from_value(value)?)
}

pub fn to_json_pretty<T: Serialize>(body: &T) -> String {
    let mut s = serde_json::to_string_pretty(&Versioned::new(body)).expect("serialisable document");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Doc {
        x: f64,
    }

    #[test]
    fn round_trip_and_version_check() {
        let text = to_json_pretty(&Doc { x: 1.5 });
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(from_json::<Doc>(&text).unwrap(), Doc { x: 1.5 });
        assert!(matches!(
            from_json::<Doc>("{\"x\": 1}"),
            Err(SchemaError::Missing)
        ));
        assert!(matches!(
            from_json::<Doc>("{\"schema_version\": 9, \"x\": 1}"),
            Err(SchemaError::Version { found: 9 })
        ));
    }
}
