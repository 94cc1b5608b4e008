//! Scan volumes: on-disk formats, depth resampling, intensity
//! normalisation and synthetic phantoms.

mod internal;
mod metaimage;
mod phantom;
mod preprocess;

pub use internal::{read_internal, write_internal, INTERNAL_FORMAT, INTERNAL_VERSION};
pub use metaimage::{read_metaimage, write_metaimage, MetaElementType};
pub use phantom::{ellipsoid_phantom, phantom_set, PhantomConfig};
pub use preprocess::{depth_index_map, normalize, preprocess_pair, resample_depth};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel scalar volume, row-major with `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    /// `(sz, sy, sx)` in millimetres.
    pub spacing: [f64; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        let v = Volume { dims, spacing, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume { dims, spacing: [1.0; 3], voxels: vec![0.0; dims.iter().product()] }
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if n == 0 || n != self.voxels.len() {
            return Err(Error::Invalid(format!(
                "volume dims {:?} hold {} voxels but {} were supplied",
                self.dims,
                n,
                self.voxels.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!("voxel spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let s = self.slice_len();
        &self.voxels[z * s..(z + 1) * s]
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// `[1, 1, D, H, W]` view suitable for the network.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::from_vec([1, 1, d, h, w], self.voxels.clone()).expect("validated volume")
    }

    /// Inverse of [`Volume::to_tensor`]; the tensor must have one batch
    /// entry and one channel.
    pub fn from_tensor(t: &Tensor<f32>, spacing: [f64; 3]) -> Result<Self> {
        let [n, c, d, h, w] = t.shape().0;
        if n != 1 || c != 1 {
            return Err(Error::Invalid(format!("expected a [1, 1, D, H, W] tensor, got {}", t.shape())));
        }
        Volume::new([d, h, w], spacing, t.data().to_vec())
    }

    pub fn is_binary(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// A CT image and its lung mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPair {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
}

impl ScanPair {
    pub fn new(id: impl Into<String>, image: Volume, mask: Volume) -> Result<Self> {
        if image.dims != mask.dims {
            return Err(Error::Invalid(format!("image dims {:?} differ from mask dims {:?}", image.dims, mask.dims)));
        }
        if !mask.is_binary() {
            return Err(Error::Invalid("mask must be binary".into()));
        }
        Ok(ScanPair { id: id.into(), image, mask })
    }
}
