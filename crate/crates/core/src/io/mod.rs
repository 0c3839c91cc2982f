//! Files on disk: manifests, images, configs, checkpoints, embedding dumps
//! and attention-map images.

pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod image;
pub mod manifest;
pub mod pgm;
pub mod synth;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
