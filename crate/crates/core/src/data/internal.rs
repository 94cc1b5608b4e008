//! The toolkit's own volume format: a short text manifest next to a
//! little-endian `f32` payload.
//!
//! ```text
//! format = r2u3d-volume
//! version = 1
//! dims = D H W
//! spacing = sz sy sx
//! dtype = f32
//! data = scan.raw
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

pub const INTERNAL_FORMAT: &str = "r2u3d-volume";
pub const INTERNAL_VERSION: u32 = 1;

pub fn write_internal(manifest: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    vol.validate()?;
    let manifest = manifest.as_ref();
    let raw_path = manifest.with_extension("raw");
    let raw_name = raw_path.file_name().unwrap().to_string_lossy();
    let [d, h, w] = vol.dims;
    let [sz, sy, sx] = vol.spacing;
    let text = format!(
        "format = {INTERNAL_FORMAT}\nversion = {INTERNAL_VERSION}\ndims = {d} {h} {w}\n\
         spacing = {sz:?} {sy:?} {sx:?}\ndtype = f32\ndata = {raw_name}\n"
    );
    let bytes: Vec<u8> = vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
}

pub fn read_internal(manifest: impl AsRef<Path>) -> Result<Volume> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut keys = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(manifest, format!("malformed line `{line}`")))?;
        keys.insert(k.trim(), v.trim());
    }
    let get = |k: &str| keys.get(k).copied().ok_or_else(|| Error::format(manifest, format!("missing key `{k}`")));
    if get("format")? != INTERNAL_FORMAT {
        return Err(Error::format(manifest, "not an r2u3d volume manifest"));
    }
    if get("version")? != INTERNAL_VERSION.to_string() {
        return Err(Error::format(manifest, format!("unsupported version `{}`", get("version")?)));
    }
    if get("dtype")? != "f32" {
        return Err(Error::format(manifest, format!("unsupported dtype `{}`", get("dtype")?)));
    }
    let dims: Vec<usize> = get("dims")?.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(manifest, "dims must be three integers"))?;
    let spacing: Vec<f64> = get("spacing")?.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(manifest, "spacing must be three numbers"))?;
    if dims.len() != 3 || spacing.len() != 3 {
        return Err(Error::format(manifest, "dims and spacing need three entries each"));
    }
    let raw_path = manifest.parent().unwrap_or(Path::new("")).join(get("data")?);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(&raw_path, format!("payload holds {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let voxels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new([dims[0], dims[1], dims[2]], [spacing[0], spacing[1], spacing[2]], voxels)
        .map_err(|e| Error::format(manifest, e.to_string()))
}
