//! Deterministic synthetic salient-shape scenes.
//!
//! Each sample is a textured background (base color, linear gradient and
//! uniform noise) with one to three filled shapes. The ground-truth mask is
//! the union of the shape supports, evaluated at pixel centers.

use serde::{Deserialize, Serialize};

use super::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Dims, Tensor};

/// Minimum distance in pixels between a shape's bounding box and the canvas
/// edge in the [`Profile::Interior`] profile.
pub const MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Every shape keeps a [`MARGIN`]-pixel border.
    #[default]
    Interior,
    /// The first shape of each scene is cut by one canvas edge.
    BoundaryTouching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// `[height, width]`.
    pub image_hw: [usize; 2],
    /// Inclusive `[min, max]` shape count.
    pub shapes_per_image: [usize; 2],
    pub kinds: Vec<ShapeKind>,
    /// Shape extent as a fraction of the shorter canvas side.
    pub size_range: [f64; 2],
    /// Per-channel fill offset from the local background mean.
    pub contrast: [f64; 2],
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    /// Maximum per-axis slope of the background gradient across the canvas.
    pub gradient: f64,
    pub profile: Profile,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_hw: [64, 64],
            shapes_per_image: [1, 3],
            kinds: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle],
            size_range: [0.25, 0.55],
            contrast: [0.25, 0.45],
            noise: 0.04,
            gradient: 0.2,
            profile: Profile::Interior,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_hw;
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if h < 8 || w < 8 {
            return bad("image_hw must be at least 8x8");
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad("shapes_per_image must satisfy 1 <= min <= max");
        }
        if self.kinds.is_empty() {
            return bad("kinds must not be empty");
        }
        let max_extent = (h.min(w) as f64 - 2.0 * MARGIN) / h.min(w) as f64;
        let [s0, s1] = self.size_range;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= max_extent) {
            return bad(&format!("size_range must satisfy 0 < min <= max <= {max_extent:.3}"));
        }
        let [c0, c1] = self.contrast;
        if !(0.0..=0.5).contains(&c0) || !(c0..=0.5).contains(&c1) {
            return bad("contrast must satisfy 0 <= min <= max <= 0.5");
        }
        if !(0.0..=0.2).contains(&self.gradient) {
            return bad("gradient must lie in [0, 0.2]");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5]");
        }
        Ok(())
    }

    /// The scene for sample `index`; depends only on `(self, index)`.
    pub fn scene(&self, index: u64) -> Scene {
        let [h, w] = self.image_hw;
        let mut rng = Rng::stream(self.seed, &[index, 0]);
        let g = self.gradient;
        let background = Background {
            base: [0; 3].map(|_| rng.range(0.2, 0.8)),
            slope_x: [0; 3].map(|_| rng.range(-g, g)),
            slope_y: [0; 3].map(|_| rng.range(-g, g)),
        };
        let count = rng.between(self.shapes_per_image[0], self.shapes_per_image[1]);
        let mut scene = Scene {
            height: h,
            width: w,
            background,
            shapes: Vec::with_capacity(count),
            fills: Vec::with_capacity(count),
        };
        for k in 0..count {
            let kind = *rng.pick(&self.kinds);
            let extent = rng.range(self.size_range[0], self.size_range[1]) * h.min(w) as f64;
            let mut shape = place(kind, extent, h, w, &mut rng);
            if self.profile == Profile::BoundaryTouching && k == 0 {
                shape = push_to_edge(shape, h, w, &mut rng);
            }
            let fill = scene.contrasting_fill(&shape, self.contrast, &mut rng);
            scene.shapes.push(shape);
            scene.fills.push(fill);
        }
        scene
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    pub slope_x: [f64; 3],
    pub slope_y: [f64; 3],
}

impl Background {
    pub fn at(&self, x: f64, y: f64, width: usize, height: usize) -> [f64; 3] {
        let u = x / width as f64 - 0.5;
        let v = y / height as f64 - 0.5;
        [0, 1, 2].map(|c| self.base[c] + self.slope_x[c] * u + self.slope_y[c] * v)
    }
}

/// A filled region in continuous canvas coordinates, where pixel `(row, col)`
/// has its center at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    /// Pixel-aligned: covers columns `x0..x0+width` and rows `y0..y0+height`.
    Rectangle {
        x0: i64,
        y0: i64,
        width: usize,
        height: usize,
    },
    Triangle {
        vertices: [(f64, f64); 3],
    },
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let u = (x - cx) / rx;
                let v = (y - cy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Rectangle { x0, y0, width, height } => {
                let (x0, y0) = (x0 as f64, y0 as f64);
                x >= x0 && x < x0 + width as f64 && y >= y0 && y < y0 + height as f64
            }
            Shape::Triangle { vertices: [a, b, c] } => {
                // inclusive edges; orientation-independent
                let p = (x, y);
                let (e0, e1, e2) = (edge(a, b, p), edge(b, c, p), edge(c, a, p));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    /// `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Rectangle { x0, y0, width, height } => (
                x0 as f64,
                y0 as f64,
                (x0 + width as i64) as f64,
                (y0 + height as i64) as f64,
            ),
            Shape::Triangle { vertices } => {
                let xs = vertices.map(|v| v.0);
                let ys = vertices.map(|v| v.1);
                let min = |a: [f64; 3]| a.iter().copied().fold(f64::INFINITY, f64::min);
                let max = |a: [f64; 3]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (min(xs), min(ys), max(xs), max(ys))
            }
        }
    }

    fn shifted(&self, dx: f64, dy: f64) -> Shape {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
            },
            Shape::Rectangle { x0, y0, width, height } => Shape::Rectangle {
                x0: x0 + dx.round() as i64,
                y0: y0 + dy.round() as i64,
                width,
                height,
            },
            Shape::Triangle { vertices } => Shape::Triangle {
                vertices: vertices.map(|(x, y)| (x + dx, y + dy)),
            },
        }
    }
}

fn place(kind: ShapeKind, extent: f64, h: usize, w: usize, rng: &mut Rng) -> Shape {
    let (hf, wf) = (h as f64, w as f64);
    match kind {
        ShapeKind::Rectangle => {
            let side = |rng: &mut Rng, len: usize| -> usize {
                let s = (extent * rng.range(0.6, 1.0)).round() as usize;
                s.clamp(2, len - 2 * MARGIN as usize)
            };
            let width = side(rng, w);
            let height = side(rng, h);
            let m = MARGIN as usize;
            Shape::Rectangle {
                x0: rng.between(m, w - m - width) as i64,
                y0: rng.between(m, h - m - height) as i64,
                width,
                height,
            }
        }
        ShapeKind::Ellipse => {
            let rx = (extent / 2.0 * rng.range(0.6, 1.0)).max(1.5);
            let ry = (extent / 2.0 * rng.range(0.6, 1.0)).max(1.5);
            Shape::Ellipse {
                cx: rng.range(MARGIN + rx, wf - MARGIN - rx),
                cy: rng.range(MARGIN + ry, hf - MARGIN - ry),
                rx,
                ry,
            }
        }
        ShapeKind::Triangle => {
            let sx = extent.max(3.0);
            let sy = (extent * rng.range(0.7, 1.0)).max(3.0);
            let ox = rng.range(MARGIN, wf - MARGIN - sx);
            let oy = rng.range(MARGIN, hf - MARGIN - sy);
            let mut vertices = [(ox, oy + sy), (ox + sx, oy + sy), (ox + sx / 2.0, oy)];
            for _ in 0..16 {
                let cand = [0; 3].map(|_| (ox + rng.range(0.0, sx), oy + rng.range(0.0, sy)));
                let area = edge(cand[0], cand[1], cand[2]).abs() / 2.0;
                if area >= 0.2 * sx * sy {
                    vertices = cand;
                    break;
                }
            }
            Shape::Triangle { vertices }
        }
    }
}

/// Moves a shape so it crosses one randomly chosen canvas edge.
fn push_to_edge(shape: Shape, h: usize, w: usize, rng: &mut Rng) -> Shape {
    let (x0, y0, x1, y1) = shape.bounds();
    let overhang = rng.range(0.1, 0.35);
    match rng.below(4) {
        0 => shape.shifted(-x0 - overhang * (x1 - x0), 0.0),
        1 => shape.shifted(w as f64 - x1 + overhang * (x1 - x0), 0.0),
        2 => shape.shifted(0.0, -y0 - overhang * (y1 - y0)),
        _ => shape.shifted(0.0, h as f64 - y1 + overhang * (y1 - y0)),
    }
}

/// Background description plus an ordered list of filled shapes; later
/// shapes paint over earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub shapes: Vec<Shape>,
    pub fills: Vec<[f64; 3]>,
}

impl Scene {
    /// True when the canvas point lies in any shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.shapes.iter().any(|s| s.contains(x, y))
    }

    pub fn mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            self.contains(x as f64 + 0.5, y as f64 + 0.5)
        })
    }

    /// Mean noiseless background color over the pixels covered by `shape`.
    pub fn local_background(&self, shape: &Shape) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if shape.contains(px, py) {
                    let b = self.background.at(px, py, self.width, self.height);
                    (0..3).for_each(|c| sum[c] += b[c]);
                    count += 1;
                }
            }
        }
        if count == 0 {
            let (x0, y0, x1, y1) = shape.bounds();
            return self
                .background
                .at((x0 + x1) / 2.0, (y0 + y1) / 2.0, self.width, self.height);
        }
        sum.map(|s| s / count as f64)
    }

    fn contrasting_fill(&self, shape: &Shape, contrast: [f64; 2], rng: &mut Rng) -> [f64; 3] {
        let local = self.local_background(shape);
        local.map(|m| {
            let delta = rng.range(contrast[0], contrast[1]);
            let v = if m < 0.5 { m + delta } else { m - delta };
            v.clamp(0.0, 1.0)
        })
    }

    /// Renders the RGB image, drawing per-pixel noise in `(row, col, channel)` order.
    pub fn render(&self, noise: f64, rng: &mut Rng) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let color = match self.shapes.iter().rposition(|s| s.contains(px, py)) {
                    Some(k) => self.fills[k],
                    None => self.background.at(px, py, w, h),
                };
                for (c, v) in color.iter().enumerate() {
                    let n = if noise > 0.0 { rng.range(-noise, noise) } else { 0.0 };
                    data[(c * h + y) * w + x] = (v + n).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::new(Dims::new(1, 3, h, w), data).expect("canvas extents are positive")
    }

    pub fn to_sample(&self, id: impl Into<String>, noise: f64, rng: &mut Rng) -> ImageSample {
        ImageSample::new(id, self.render(noise, rng), self.mask()).expect("image and mask share extents")
    }
}

/// `n` samples with ids `synth_00000`, `synth_00001`, ...
pub fn generate_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    Ok((0..n as u64)
        .map(|i| {
            let scene = spec.scene(i);
            let mut noise_rng = Rng::stream(spec.seed, &[i, 1]);
            scene.to_sample(format!("synth_{i:05}"), spec.noise, &mut noise_rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_covers_exactly_its_area() {
        let scene = Scene {
            height: 20,
            width: 30,
            background: Background {
                base: [0.5; 3],
                slope_x: [0.0; 3],
                slope_y: [0.0; 3],
            },
            shapes: vec![Shape::Rectangle {
                x0: 3,
                y0: 4,
                width: 7,
                height: 5,
            }],
            fills: vec![[0.9; 3]],
        };
        assert_eq!(scene.mask().foreground_count(), 35);
    }

    #[test]
    fn triangle_edges_are_inclusive() {
        let t = Shape::Triangle {
            vertices: [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)],
        };
        assert!(t.contains(2.0, 2.0));
        assert!(t.contains(0.0, 0.0));
        assert!(!t.contains(2.5, 2.0));
        let flipped = Shape::Triangle {
            vertices: [(0.0, 0.0), (0.0, 4.0), (4.0, 0.0)],
        };
        assert!(flipped.contains(1.0, 1.0));
    }

    #[test]
    fn interior_profile_keeps_margin() {
        let spec = SynthSpec::default();
        for i in 0..200 {
            let s = spec.scene(i);
            let m = s.mask();
            for y in 0..64 {
                for x in 0..64 {
                    if m.get(y, x) {
                        assert!((2..62).contains(&y) && (2..62).contains(&x), "scene {i} at {y},{x}");
                    }
                }
            }
            assert!(m.foreground_count() > 0);
        }
    }

    #[test]
    fn boundary_profile_touches_an_edge() {
        let spec = SynthSpec {
            profile: Profile::BoundaryTouching,
            ..SynthSpec::default()
        };
        for i in 0..50 {
            let m = spec.scene(i).mask();
            let touches = (0..64).any(|k| m.get(0, k) || m.get(63, k) || m.get(k, 0) || m.get(k, 63));
            assert!(touches, "scene {i}");
        }
    }

    #[test]
    fn fills_contrast_with_local_background() {
        let spec = SynthSpec::default();
        for i in 0..100 {
            let s = spec.scene(i);
            for (shape, fill) in s.shapes.iter().zip(&s.fills) {
                let local = s.local_background(shape);
                for c in 0..3 {
                    assert!((fill[c] - local[c]).abs() >= spec.contrast[0] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::default();
        spec.shapes_per_image = [0, 2];
        assert!(spec.validate().is_err());
        let spec = SynthSpec {
            contrast: [0.3, 0.7],
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(generate_synthetic(&SynthSpec::default(), 0).is_err());
    }
}
