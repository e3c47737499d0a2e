//! Run manifests: the resolved configuration plus content hashes of every
//! input and output file.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<FileHash, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileHash { path: path.display().to_string(), sha256 })
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: &'a C,
    pub inputs: Vec<FileHash>,
    /// Output paths are relative to the output directory.
    pub outputs: Vec<FileHash>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Hashes inputs and outputs (named relative to `out_dir`) and writes the
/// manifest to `out_dir/name`.
pub fn write_manifest<C: Serialize>(
    out_dir: &Path,
    name: &str,
    command: &'static str,
    config: &C,
    inputs: &[PathBuf],
    outputs: &[String],
    notes: Vec<String>,
) -> Result<(), CliError> {
    let inputs = inputs.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>, _>>()?;
    let mut out_hashes = Vec::with_capacity(outputs.len());
    for name in outputs {
        let mut h = hash_file(&out_dir.join(name))?;
        h.path = name.clone();
        out_hashes.push(h);
    }
    let manifest = Manifest {
        tool: "heatsc",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        inputs,
        outputs: out_hashes,
        notes,
    };
    heatsc::io::write_json(&out_dir.join(name), &manifest)?;
    Ok(())
}
