//! HSIC container: a `<name>.json` header next to a `<name>.raw` payload.
//!
//! Cubes are float32, labels int32; both little-endian, pixel-major with
//! the band axis fastest-varying (BIP interleave).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{HyperspectralCube, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub byte_order: String,
    pub interleave: String,
}

fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn read_header(path: &Path) -> Result<ContainerHeader> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read container header {}: {e}", path.display())))?;
    let header: ContainerHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("malformed container header {}: {e}", path.display())))?;
    if header.height == 0 || header.width == 0 || header.bands == 0 {
        return Err(Error::Format(format!(
            "container header {} has zero dimension {}x{}x{}",
            path.display(),
            header.height,
            header.width,
            header.bands
        )));
    }
    if header.byte_order != "little" {
        return Err(Error::Format(format!("unsupported byte order `{}`", header.byte_order)));
    }
    if header.interleave != "bip" {
        return Err(Error::Format(format!("unsupported interleave `{}`", header.interleave)));
    }
    Ok(header)
}

fn read_payload(path: &Path, expected_bytes: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read container payload {}: {e}", path.display())))?;
    if bytes.len() != expected_bytes {
        return Err(Error::Format(format!(
            "container payload {} holds {} bytes, header requires {}",
            path.display(),
            bytes.len(),
            expected_bytes
        )));
    }
    Ok(bytes)
}

/// Loads a float32 cube from its header path.
pub fn load_cube(header_path: &Path) -> Result<HyperspectralCube> {
    let header = read_header(header_path)?;
    if header.dtype != "float32" {
        return Err(Error::Format(format!("cube container dtype must be float32, got `{}`", header.dtype)));
    }
    let n = header.height * header.width * header.bands;
    let bytes = read_payload(&raw_path(header_path), n * 4)?;
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("cube payload has non-finite value at flat index {pos}")));
    }
    let data = Array3::from_shape_vec((header.height, header.width, header.bands), values)
        .expect("length checked against header");
    let name = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cube".to_string());
    HyperspectralCube::new(data, name)
}

/// Loads an int32 label map from its header path.
pub fn load_labels(header_path: &Path) -> Result<LabelMap> {
    let header = read_header(header_path)?;
    if header.dtype != "int32" {
        return Err(Error::Format(format!("label container dtype must be int32, got `{}`", header.dtype)));
    }
    if header.bands != 1 {
        return Err(Error::Format(format!("label container must have bands=1, got {}", header.bands)));
    }
    let n = header.height * header.width;
    let bytes = read_payload(&raw_path(header_path), n * 4)?;
    let mut values = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        values.push(i32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let labels = Array2::from_shape_vec((header.height, header.width), values)
        .expect("length checked against header");
    LabelMap::new(labels)
}

/// Writes a cube as an HSIC container pair; `base` is the path without
/// extension.
pub fn save_cube(cube: &HyperspectralCube, base: &Path) -> Result<()> {
    let (h, w, b) = cube.data.dim();
    let header = ContainerHeader {
        height: h,
        width: w,
        bands: b,
        dtype: "float32".to_string(),
        byte_order: "little".to_string(),
        interleave: "bip".to_string(),
    };
    fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header).unwrap())?;
    let mut bytes = Vec::with_capacity(h * w * b * 4);
    for v in cube.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(base.with_extension("raw"), bytes)?;
    Ok(())
}

/// Writes a label map as an HSIC container pair.
pub fn save_labels(labels: &LabelMap, base: &Path) -> Result<()> {
    let (h, w) = labels.labels.dim();
    let header = ContainerHeader {
        height: h,
        width: w,
        bands: 1,
        dtype: "int32".to_string(),
        byte_order: "little".to_string(),
        interleave: "bip".to_string(),
    };
    fs::write(base.with_extension("json"), serde_json::to_string_pretty(&header).unwrap())?;
    let mut bytes = Vec::with_capacity(h * w * 4);
    for v in labels.labels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(base.with_extension("raw"), bytes)?;
    Ok(())
}
