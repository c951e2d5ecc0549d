//! `run.meta` provenance written beside every output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunMeta<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    core_version: &'a str,
    config: &'a C,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

pub fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Path of the provenance file accompanying `output`.
pub fn meta_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".run.meta");
    output.with_file_name(name)
}

/// Writes one provenance file per output. Contents depend only on the
/// inputs and the configuration, so re-runs rewrite them identically.
pub fn write<C: Serialize>(
    command: &str,
    config: &C,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: digest(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = RunMeta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        core_version: sguq_core::VERSION,
        config,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    for out in outputs {
        let path = meta_path(out);
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
