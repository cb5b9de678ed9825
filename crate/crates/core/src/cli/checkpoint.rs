//! Integrity-checked JSON container for trained forecasters.
//!
//! On disk: `{"sha256":"<hex>","body":<body>}` where the digest covers the
//! exact bytes of `<body>` as written. Floats round-trip exactly, so a loaded
//! model predicts bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecasters::TrainedForecaster;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: TrainedForecaster,
}

#[derive(Deserialize)]
struct Container<'a> {
    sha256: String,
    #[serde(borrow)]
    body: &'a RawValue,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Wrap any serializable body in the digest container.
pub fn seal<T: Serialize>(body: &T) -> Result<String> {
    let body = serde_json::to_string(body)?;
    Ok(format!(
        "{{\"sha256\":\"{}\",\"body\":{body}}}\n",
        sha256_hex(body.as_bytes())
    ))
}

/// Verify the digest, then decode the body.
pub fn unseal<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let container: Container = serde_json::from_str(text.trim_end())
        .map_err(|e| Error::CheckpointIntegrity(format!("malformed container: {e}")))?;
    let actual = sha256_hex(container.body.get().as_bytes());
    if actual != container.sha256 {
        return Err(Error::CheckpointIntegrity(format!(
            "digest mismatch: recorded {}, computed {actual}",
            container.sha256
        )));
    }
    Ok(serde_json::from_str(container.body.get())?)
}

impl Checkpoint {
    pub fn new(model: TrainedForecaster) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        seal(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = unseal(text)?;
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::CheckpointIntegrity(format!(
                "schema version {} is not {CHECKPOINT_SCHEMA_VERSION}",
                c.schema_version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json()?;
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        Ok(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| {
            Error::CheckpointIntegrity(format!("{} is not UTF-8: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }
}
