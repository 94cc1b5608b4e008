//! Dataset directories: one `<id>.image.vhdr` and one `<id>.mask.vhdr`
//! (internal format) per scan.

use std::fs;
use std::path::{Path, PathBuf};

use r2u3d_core::data::{normalize, read_internal, read_metaimage, write_internal, ScanPair, Volume};

use crate::error::{CliError, CliResult};

const IMAGE_SUFFIX: &str = ".image.vhdr";
const MASK_SUFFIX: &str = ".mask.vhdr";

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{IMAGE_SUFFIX}"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{MASK_SUFFIX}"))
}

/// Every scan in `dir`, ordered by id.
pub fn load_dataset(dir: &Path) -> CliResult<Vec<ScanPair>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| CliError::io(dir, e))?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(IMAGE_SUFFIX)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.iter()
        .map(|id| {
            let image = read_internal(image_path(dir, id))?;
            let mask = read_internal(mask_path(dir, id))?;
            Ok(ScanPair::new(id.clone(), image, mask)?)
        })
        .collect()
}

pub fn write_pair(dir: &Path, pair: &ScanPair) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_internal(image_path(dir, &pair.id), &pair.image)?;
    write_internal(mask_path(dir, &pair.id), &pair.mask)?;
    Ok(())
}

pub fn is_metaimage(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("mhd" | "mha"))
}

/// Reads either format. MetaImage volumes are raw scanner output and get
/// min-max normalised; internal volumes are taken as already preprocessed.
pub fn read_scan(path: &Path) -> CliResult<Volume> {
    Ok(if is_metaimage(path) { normalize(&read_metaimage(path)?) } else { read_internal(path)? })
}

/// Scan id from a file name: the stem with any `.image` / `.mask` tag removed.
pub fn id_from_path(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scan");
    stem.trim_end_matches(".image").trim_end_matches(".mask").to_string()
}
