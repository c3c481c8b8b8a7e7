//! Image/mask files, the synthetic salient-shape generator and manifests.

mod manifest;
mod pnm;
mod synth;

pub use manifest::{load_samples, read_manifest, write_manifest, ManifestEntry, MANIFEST_NAME};
pub use pnm::{decode, dequantize, encode, quantize, read_pgm, read_ppm, write_pgm, write_ppm, PnmKind, Raster};
pub use synth::{generate_synthetic, Background, Profile, Scene, Shape, ShapeKind, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Strictly binary `h x w` map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "h/w",
                format!("{} values for {height}x{width} mask", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Input(format!(
                "mask value {} at index {pos} is not binary",
                data[pos]
            )));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask { height, width, data }
    }

    /// Binarizes a `(1, 1, h, w)` tensor at `threshold` (values `>= threshold` are foreground).
    pub fn from_tensor(t: &Tensor<f32>, threshold: f32) -> Result<Self> {
        let d = t.dims();
        if d.n != 1 || d.c != 1 {
            return Err(Error::shape(
                "channel",
                format!("mask tensor must be (1, 1, h, w), got {d}"),
            ));
        }
        Ok(BinaryMask {
            height: d.h,
            width: d.w,
            data: t.data().iter().map(|&v| (v >= threshold) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            Dims::new(1, 1, self.height, self.width),
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask extents are positive")
    }
}

/// An RGB image in `[0, 1]` and its binary ground truth at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `(1, 3, h, w)`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        let d = image.dims();
        if d.n != 1 || d.c != 3 {
            return Err(Error::shape("channel", format!("image must be (1, 3, h, w), got {d}")));
        }
        if (d.h, d.w) != (mask.height, mask.width) {
            return Err(Error::shape(
                "h/w",
                format!("image {}x{} vs mask {}x{}", d.h, d.w, mask.height, mask.width),
            ));
        }
        Ok(ImageSample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.mask.height, self.mask.width)
    }
}
