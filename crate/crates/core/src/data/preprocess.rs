use super::{ScanPair, Volume};
use crate::error::{Error, Result};

/// Source slice for each of `target` output slices: the nearest index to
/// the centre of each output cell, `floor((i + 0.5) * depth / target)`.
///
/// Repeats slices when upsampling, takes evenly spaced ones when
/// downsampling, and never reorders.
pub fn depth_index_map(depth: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| (((2 * i + 1) * depth) / (2 * target)).min(depth.saturating_sub(1))).collect()
}

pub fn resample_depth(v: &Volume, target: usize) -> Result<Volume> {
    if target == 0 {
        return Err(Error::Invalid("target depth must be at least 1".into()));
    }
    let map = depth_index_map(v.depth(), target);
    let mut voxels = Vec::with_capacity(target * v.slice_len());
    for &z in &map {
        voxels.extend_from_slice(v.slice(z));
    }
    let scale = v.depth() as f64 / target as f64;
    Volume::new([target, v.dims[1], v.dims[2]], [v.spacing[0] * scale, v.spacing[1], v.spacing[2]], voxels)
}

/// Per-scan min-max scaling to `[0, 1]`; a constant scan becomes zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let voxels = if range > 0.0 {
        v.voxels.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.voxels.len()]
    };
    Volume { dims: v.dims, spacing: v.spacing, voxels }
}

/// Resamples image and mask with the same index map, normalises the image
/// and re-binarises the mask at 0.5.
pub fn preprocess_pair(id: &str, image: &Volume, mask: &Volume, target_depth: Option<usize>) -> Result<ScanPair> {
    if image.dims != mask.dims {
        return Err(Error::Invalid(format!("image dims {:?} differ from mask dims {:?}", image.dims, mask.dims)));
    }
    let target = target_depth.unwrap_or(image.depth());
    let image = normalize(&resample_depth(image, target)?);
    let mut mask = resample_depth(mask, target)?;
    for v in &mut mask.voxels {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    ScanPair::new(id, image, mask)
}
