//! Checkpoint files: safetensors with the architecture in the header.
//!
//! Header metadata keys:
//!
//! * `format`: always `bgvae-ckpt`
//! * `version`: schema version, currently `1`
//! * `arch`: the [`ArchConfig`] as JSON
//!
//! Tensor names are the dotted parameter paths of the model, for example
//! `decoder.z3.latent.prior.weight`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Codec};

pub const FORMAT_TAG: &str = "bgvae-ckpt";
pub const SCHEMA_VERSION: u32 = 1;

/// Writes `tensors` under `config`.
pub fn save_tensors(path: &Path, config: &ArchConfig, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let arch = serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("version".to_string(), SCHEMA_VERSION.to_string()),
        ("arch".to_string(), arch),
    ]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors.iter(), Some(meta), path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Saves the codec's current weights.
pub fn save(path: &Path, codec: &Codec) -> Result<()> {
    save_tensors(path, codec.config(), &codec.store().snapshot()?)
}

/// Reads the architecture and the raw tensors.
pub fn read(path: &Path) -> Result<(ArchConfig, BTreeMap<String, Tensor>)> {
    let buf = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Version(format!("{}: not a checkpoint ({e})", path.display())))?;
    let meta = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Version(format!("{}: checkpoint header has no metadata", path.display())))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(Error::Version(format!("{}: not a {FORMAT_TAG} file", path.display())));
    }
    let version = meta.get("version").and_then(|v| v.parse::<u32>().ok());
    if version != Some(SCHEMA_VERSION) {
        return Err(Error::Version(format!(
            "{}: schema version {:?}, expected {SCHEMA_VERSION}",
            path.display(),
            meta.get("version")
        )));
    }
    let arch = meta
        .get("arch")
        .ok_or_else(|| Error::Version(format!("{}: missing architecture", path.display())))?;
    let config: ArchConfig = serde_json::from_str(arch)
        .map_err(|e| Error::Version(format!("{}: bad architecture ({e})", path.display())))?;
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?;
    Ok((config, tensors.into_iter().collect()))
}

/// Builds a codec from a checkpoint.
pub fn load(path: &Path) -> Result<Codec> {
    let (config, tensors) = read(path)?;
    let codec = Codec::new(config, 0)?;
    codec.store().load(&tensors)?;
    Ok(codec)
}
