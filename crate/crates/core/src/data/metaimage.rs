//! MetaImage (`.mhd` + detached raw) reader and a matching writer.
//!
//! Only the subset the public lung CT collections use is accepted: three
//! dimensions, one channel, little-endian uncompressed payload in a
//! separate file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaElementType {
    UChar,
    Short,
    Float,
}

impl MetaElementType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(Self::UChar),
            "MET_SHORT" => Some(Self::Short),
            "MET_FLOAT" => Some(Self::Float),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::UChar => "MET_UCHAR",
            Self::Short => "MET_SHORT",
            Self::Float => "MET_FLOAT",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::UChar => 1,
            Self::Short => 2,
            Self::Float => 4,
        }
    }
}

fn is_true(v: &str) -> bool {
    v.eq_ignore_ascii_case("true") || v == "1"
}

fn numbers<T: std::str::FromStr>(path: &Path, key: &str, v: &str, n: usize) -> Result<Vec<T>> {
    let parsed: std::result::Result<Vec<T>, _> = v.split_whitespace().map(str::parse).collect();
    match parsed {
        Ok(xs) if xs.len() == n => Ok(xs),
        _ => Err(Error::format(path, format!("`{key}` must hold {n} numbers, got `{v}`"))),
    }
}

pub fn read_metaimage(header: impl AsRef<Path>) -> Result<Volume> {
    let header = header.as_ref();
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let mut keys = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(header, format!("line {}: expected `key = value`", lineno + 1)))?;
        keys.insert(k.trim().to_string(), v.trim().to_string());
    }
    let req = |k: &str| keys.get(k).ok_or_else(|| Error::format(header, format!("missing required key `{k}`")));

    let ndims: usize = req("NDims")?.parse().map_err(|_| Error::format(header, "NDims is not an integer"))?;
    if ndims != 3 {
        return Err(Error::format(header, format!("only 3-D volumes are supported, NDims = {ndims}")));
    }
    let [x, y, z]: [usize; 3] = numbers(header, "DimSize", req("DimSize")?, 3)?.try_into().unwrap();
    let ty_name = req("ElementType")?;
    let ty = MetaElementType::parse(ty_name)
        .ok_or_else(|| Error::format(header, format!("unsupported ElementType `{ty_name}`")))?;
    let data_file = req("ElementDataFile")?;

    if keys.get("CompressedData").is_some_and(|v| is_true(v)) {
        return Err(Error::format(header, "compressed MetaImage payloads are not supported"));
    }
    for k in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if keys.get(k).is_some_and(|v| is_true(v)) {
            return Err(Error::format(header, "big-endian payloads are not supported"));
        }
    }
    if keys.get("ElementNumberOfChannels").is_some_and(|v| v != "1") {
        return Err(Error::format(header, "multi-channel volumes are not supported"));
    }
    if data_file == "LOCAL" {
        return Err(Error::format(header, "ElementDataFile = LOCAL is not supported; use a separate raw file"));
    }
    let spacing = match keys.get("ElementSpacing") {
        Some(v) => {
            let s: Vec<f64> = numbers(header, "ElementSpacing", v, 3)?;
            [s[2], s[1], s[0]]
        }
        None => [1.0; 3],
    };

    let raw_path = header.parent().unwrap_or(Path::new("")).join(data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = x * y * z;
    if bytes.len() != n * ty.size() {
        return Err(Error::format(
            &raw_path,
            format!("payload holds {} bytes, expected {} ({} voxels of {})", bytes.len(), n * ty.size(), n, ty.name()),
        ));
    }
    let voxels: Vec<f32> = match ty {
        MetaElementType::UChar => bytes.iter().map(|&b| b as f32).collect(),
        MetaElementType::Short => bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        MetaElementType::Float => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Volume::new([z, y, x], spacing, voxels).map_err(|e| Error::format(header, e.to_string()))
}

/// Writes `header` and a sibling `.raw` payload. Values are rounded and
/// saturated for the integer element types.
pub fn write_metaimage(header: impl AsRef<Path>, vol: &Volume, ty: MetaElementType) -> Result<PathBuf> {
    let header = header.as_ref();
    let raw_path = header.with_extension("raw");
    let raw_name = raw_path.file_name().unwrap().to_string_lossy().into_owned();
    let [d, h, w] = vol.dims;
    let [sz, sy, sx] = vol.spacing;
    let text = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         CompressedData = False\nDimSize = {w} {h} {d}\nElementSpacing = {sx} {sy} {sz}\n\
         ElementType = {}\nElementDataFile = {raw_name}\n",
        ty.name()
    );
    let mut bytes = Vec::with_capacity(vol.voxels.len() * ty.size());
    for &v in &vol.voxels {
        match ty {
            MetaElementType::UChar => bytes.push(v.round().clamp(0.0, 255.0) as u8),
            MetaElementType::Short => bytes.extend_from_slice(&(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
            MetaElementType::Float => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(header, text).map_err(|e| Error::io(header, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(raw_path)
}
