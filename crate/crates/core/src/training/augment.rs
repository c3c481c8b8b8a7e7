use serde::{Deserialize, Serialize};

use crate::data_io::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{resize_bilinear, Dims, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Flip horizontally with probability one half.
    pub mirror: bool,
    /// Allowed counter-clockwise rotations in degrees, drawn uniformly.
    pub rotations: Vec<u32>,
    /// Crop side as a fraction of the (rotated) image side.
    pub crop_fraction_range: [f64; 2],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            mirror: true,
            rotations: vec![0, 90, 180, 270],
            crop_fraction_range: [0.8, 1.0],
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            mirror: false,
            rotations: vec![0],
            crop_fraction_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() || self.rotations.iter().any(|r| ![0, 90, 180, 270].contains(r)) {
            return Err(Error::Config(
                "augment: rotations must be a non-empty subset of 0, 90, 180, 270".into(),
            ));
        }
        let [lo, hi] = self.crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(
                "augment: crop_fraction_range must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        Ok(())
    }

    /// Draws one transform for an `h x w` sample.
    pub fn draw(&self, h: usize, w: usize, rng: &mut Rng) -> Transform {
        let mirror = self.mirror && rng.chance(0.5);
        let quarter_turns = (*rng.pick(&self.rotations) / 90) as usize;
        let (rh, rw) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let [lo, hi] = self.crop_fraction_range;
        let f = if lo == hi { lo } else { rng.range(lo, hi) };
        let ch = ((f * rh as f64).round() as usize).clamp(1, rh);
        let cw = ((f * rw as f64).round() as usize).clamp(1, rw);
        let y0 = rng.below(rh - ch + 1);
        let x0 = rng.below(rw - cw + 1);
        Transform {
            mirror,
            quarter_turns,
            crop: Crop { y0, x0, h: ch, w: cw },
        }
    }
}

/// Crop window in the coordinates of the rotated image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Horizontal mirror, then `quarter_turns` counter-clockwise rotations,
/// then a crop, then a resize to the output size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub mirror: bool,
    pub quarter_turns: usize,
    pub crop: Crop,
}

/// Index of the source pixel `(row, col)` in an `h x w` plane that lands at
/// `(y, x)` after mirroring and rotation.
fn rotated_source(y: usize, x: usize, h: usize, w: usize, mirror: bool, turns: usize) -> (usize, usize) {
    // undo the rotation one quarter at a time; the rotated extents alternate
    let (mut r, mut c) = (y, x);
    let (mut rh, mut rw) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    for _ in 0..turns {
        // a CCW quarter turn maps (r, c) of an a x b plane to (b - 1 - c, r)
        // of a b x a plane; invert it
        let (pr, pc) = (c, rh - 1 - r);
        r = pr;
        c = pc;
        std::mem::swap(&mut rh, &mut rw);
    }
    if mirror {
        c = w - 1 - c;
    }
    (r, c)
}

impl Transform {
    pub fn identity(h: usize, w: usize) -> Self {
        Transform {
            mirror: false,
            quarter_turns: 0,
            crop: Crop { y0: 0, x0: 0, h, w },
        }
    }

    /// Source pixel for cropped pixel `(y, x)`.
    pub fn source_pixel(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        rotated_source(
            self.crop.y0 + y,
            self.crop.x0 + x,
            h,
            w,
            self.mirror,
            self.quarter_turns,
        )
    }

    fn geometric(&self, plane: &[f32], h: usize, w: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.crop.h * self.crop.w);
        for y in 0..self.crop.h {
            for x in 0..self.crop.w {
                let (r, c) = self.source_pixel(y, x, h, w);
                out.push(plane[r * w + c]);
            }
        }
        out
    }

    /// Applies the transform and resizes to `out_hw`: bilinear for the image,
    /// nearest neighbour for the mask (source row `floor((i + 0.5) * h / H)`).
    pub fn apply(&self, sample: &ImageSample, out_hw: (usize, usize)) -> Result<ImageSample> {
        let (h, w) = sample.hw();
        let (ch, cw) = (self.crop.h, self.crop.w);
        let (rh, rw) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        if self.crop.y0 + ch > rh || self.crop.x0 + cw > rw {
            return Err(Error::shape("h/w", format!("crop {:?} outside {rh}x{rw}", self.crop)));
        }
        let mut data = Vec::with_capacity(3 * ch * cw);
        for c in 0..3 {
            data.extend(self.geometric(sample.image.plane(0, c), h, w));
        }
        let cropped = Tensor::new(Dims::new(1, 3, ch, cw), data)?;
        let image = resize_bilinear(&cropped, out_hw.0, out_hw.1)?;

        let mask_plane: Vec<f32> = sample.mask.data().iter().map(|&v| v as f32).collect();
        let mask_crop = self.geometric(&mask_plane, h, w);
        let (oh, ow) = out_hw;
        let mask = BinaryMask::from_fn(oh, ow, |i, j| {
            let sy = (((i as f64 + 0.5) * ch as f64 / oh as f64).floor() as usize).min(ch - 1);
            let sx = (((j as f64 + 0.5) * cw as f64 / ow as f64).floor() as usize).min(cw - 1);
            mask_crop[sy * cw + sx] >= 0.5
        });
        ImageSample::new(sample.id.clone(), image, mask)
    }
}

/// One random transform from `spec`, applied and resized to `out_hw`.
pub fn augment(sample: &ImageSample, spec: &AugmentSpec, out_hw: (usize, usize), rng: &mut Rng) -> Result<ImageSample> {
    let (h, w) = sample.hw();
    spec.draw(h, w, rng).apply(sample, out_hw)
}
