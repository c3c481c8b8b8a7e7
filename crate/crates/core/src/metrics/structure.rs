//! Structure measure: object-aware and region-aware structural similarity,
//! following the reference algorithm of the measure.

use super::{check_dims, GroundTruth, SaliencyMap};
use crate::error::{Error, Result};

/// Default object/region balance.
pub const S_LAMBDA: f64 = 0.5;

const EPS: f64 = f64::EPSILON;

/// The two halves of the structure measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructureParts {
    pub object: f64,
    pub region: f64,
}

impl StructureParts {
    /// `lambda * object + (1 - lambda) * region`, clamped to `[0, 1]`.
    pub fn combine(&self, lambda: f64) -> f64 {
        (lambda * self.object + (1.0 - lambda) * self.region).clamp(0.0, 1.0)
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    if n < 2 {
        return (mean, 0.0, n);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt(), n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, n) = mean_std(values);
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_similarity(pred: &SaliencyMap, gt: &GroundTruth) -> f64 {
    let pairs = || pred.values().iter().zip(gt.mask().data());
    let fg = object_score(pairs().filter(|(_, &g)| g != 0).map(|(&p, _)| p));
    let bg = object_score(pairs().filter(|(_, &g)| g == 0).map(|(&p, _)| 1.0 - p));
    let u = gt.mean();
    u * fg + (1.0 - u) * bg
}

/// Foreground centroid as 1-based `(column, row)`, rounded half away from zero.
fn centroid(gt: &GroundTruth) -> (usize, usize) {
    let (h, w) = (gt.height(), gt.width());
    let total = gt.mask().foreground_count();
    if total == 0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    (
        (sx / total as f64).round() as usize,
        (sy / total as f64).round() as usize,
    )
}

/// Structural similarity of one block.
fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sxx += (p - x) * (p - x);
        syy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let d = n - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_similarity(pred: &SaliencyMap, gt: &GroundTruth) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let (cx, cy) = centroid(gt);
    let area = (h * w) as f64;
    let blocks = [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)];
    let mut weights = [
        (cx * cy) as f64 / area,
        ((w - cx) * cy) as f64 / area,
        (cx * (h - cy)) as f64 / area,
        0.0,
    ];
    weights[3] = 1.0 - weights[0] - weights[1] - weights[2];
    let mut total = 0.0;
    for (&(y0, y1, x0, x1), wt) in blocks.iter().zip(weights) {
        let mut p = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut g = Vec::with_capacity(p.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred.get(y, x));
                g.push(gt.get(y, x) as u8 as f64);
            }
        }
        if !p.is_empty() {
            total += wt * block_ssim(&p, &g);
        }
    }
    total
}

/// Object and region similarity. For an all-background ground truth both
/// halves equal `1 - mean(pred)`, for an all-foreground one `mean(pred)`.
/// The region half is clamped to `[0, 1]`; block SSIM can go negative.
pub fn s_measure_parts(pred: &SaliencyMap, gt: &GroundTruth) -> Result<StructureParts> {
    check_dims(pred, gt.height(), gt.width(), "ground truth")?;
    let y = gt.mean();
    let degenerate = if y == 0.0 {
        Some(1.0 - pred.mean())
    } else if y == 1.0 {
        Some(pred.mean())
    } else {
        None
    };
    if let Some(q) = degenerate {
        return Ok(StructureParts { object: q, region: q });
    }
    Ok(StructureParts {
        object: object_similarity(pred, gt),
        region: region_similarity(pred, gt).clamp(0.0, 1.0),
    })
}

pub fn s_measure(pred: &SaliencyMap, gt: &GroundTruth, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("s-measure lambda {lambda} outside [0, 1]")));
    }
    Ok(s_measure_parts(pred, gt)?.combine(lambda))
}
