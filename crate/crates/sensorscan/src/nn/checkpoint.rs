//! Versioned JSON checkpoint container.
//!
//! A checkpoint wraps a serializable payload (model struct, optimizer state,
//! config — whatever the stage needs) together with a format version and a
//! `kind` string naming what the payload is. Loading validates both, so a
//! clustering stage pointed at a pretraining artifact fails with a clear
//! error instead of deserializing garbage.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Container<T> {
    version: u32,
    kind: String,
    payload: T,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let container = Container {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let json = serde_json::to_string(&container)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    let container: Container<T> = serde_json::from_str(&text)?;
    if container.version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleArtifact(format!(
            "{}: checkpoint version {} (this build reads {})",
            path.display(),
            container.version,
            CHECKPOINT_VERSION
        )));
    }
    if container.kind != kind {
        return Err(Error::IncompatibleArtifact(format!(
            "{}: contains a '{}' checkpoint, expected '{}'",
            path.display(),
            container.kind,
            kind
        )));
    }
    Ok(container.payload)
}
