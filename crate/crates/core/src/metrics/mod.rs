//! Saliency evaluation: precision/recall sweeps, F-measure, MAE, S-measure
//! and dataset reports.

mod report;
mod structure;

pub use report::{evaluate, evaluate_dataset, EvalReport, ImageScores};
pub use structure::{s_measure, s_measure_parts, StructureParts, S_LAMBDA};

use crate::data_io::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weight of precision in the F-measure.
pub const ETA2: f64 = 0.3;

/// Number of thresholds in a precision/recall sweep (`k / 255`, `k = 0..=255`).
pub const PR_THRESHOLDS: usize = 256;

/// Sweep threshold `k`.
pub fn pr_threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// Real-valued `h x w` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    id: String,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(id: impl Into<String>, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if values.len() != height * width {
            return Err(Error::shape(
                "h/w",
                format!("{}: {} values for {height}x{width} map", id, values.len()),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!(
                "{id}: saliency value {} at index {pos} outside [0, 1]",
                values[pos]
            )));
        }
        Ok(SaliencyMap {
            id,
            height,
            width,
            values,
        })
    }

    pub fn from_fn(
        id: impl Into<String>,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(id, height, width, values)
    }

    /// From a `(1, 1, h, w)` tensor.
    pub fn from_tensor<T: Real>(id: impl Into<String>, t: &Tensor<T>) -> Result<Self> {
        let d = t.dims();
        if d.n != 1 || d.c != 1 {
            return Err(Error::shape(
                "channel",
                format!("saliency tensor must be (1, 1, h, w), got {d}"),
            ));
        }
        Self::new(
            id,
            d.h,
            d.w,
            t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Binary `h x w` ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    id: String,
    mask: BinaryMask,
}

impl GroundTruth {
    pub fn new(id: impl Into<String>, mask: BinaryMask) -> Self {
        GroundTruth { id: id.into(), mask }
    }

    /// From real values that must all be exactly 0 or 1.
    pub fn from_values(id: impl Into<String>, height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let id = id.into();
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("{id}: ground truth value {v} is not binary")));
        }
        let mask = BinaryMask::new(height, width, values.iter().map(|&v| v as u8).collect())?;
        Ok(GroundTruth { id, mask })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask.get(y, x)
    }

    /// Fraction of foreground pixels.
    pub fn mean(&self) -> f64 {
        self.mask.foreground_count() as f64 / self.mask.data().len() as f64
    }

    pub fn to_map(&self) -> SaliencyMap {
        SaliencyMap {
            id: self.id.clone(),
            height: self.height(),
            width: self.width(),
            values: self.mask.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

pub(crate) fn check_dims(pred: &SaliencyMap, h: usize, w: usize, other: &str) -> Result<()> {
    if (pred.height, pred.width) != (h, w) {
        return Err(Error::shape(
            "h/w",
            format!(
                "{}: prediction {}x{} vs {other} {h}x{w}",
                pred.id, pred.height, pred.width
            ),
        ));
    }
    Ok(())
}

/// Confusion counts of a binarized prediction against the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `TP / (TP + FP)`, or 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// `TP / (TP + FN)`, or `None` when the ground truth is empty.
    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    /// F-measure of this binarization; an empty ground truth counts as recall 0.
    pub fn f_measure(&self, eta2: f64) -> f64 {
        f_measure(self.precision(), self.recall().unwrap_or(0.0), eta2)
    }
}

/// Counts for the binarization `foreground(value)`.
pub fn confusion(pred: &SaliencyMap, gt: &GroundTruth, foreground: impl Fn(f64) -> bool) -> Result<Counts> {
    check_dims(pred, gt.height(), gt.width(), "ground truth")?;
    let mut c = Counts::default();
    for (&v, &g) in pred.values.iter().zip(gt.mask.data()) {
        match (foreground(v), g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Counts at every sweep threshold; pixels strictly above `k / 255` are foreground.
pub fn sweep_counts(pred: &SaliencyMap, gt: &GroundTruth) -> Result<Vec<Counts>> {
    check_dims(pred, gt.height(), gt.width(), "ground truth")?;
    let mut fg_hist = vec![0usize; PR_THRESHOLDS + 1];
    let mut bg_hist = vec![0usize; PR_THRESHOLDS + 1];
    for (&v, &g) in pred.values.iter().zip(gt.mask.data()) {
        let above = (0..PR_THRESHOLDS).take_while(|&k| v > pr_threshold(k)).count();
        if g != 0 {
            fg_hist[above] += 1;
        } else {
            bg_hist[above] += 1;
        }
    }
    let total_fg = gt.mask.foreground_count();
    let (mut tp, mut fp) = (0, 0);
    // pixels with `above > k` are foreground at threshold k
    let mut counts = vec![Counts::default(); PR_THRESHOLDS];
    for k in (0..PR_THRESHOLDS).rev() {
        tp += fg_hist[k + 1];
        fp += bg_hist[k + 1];
        counts[k] = Counts {
            tp,
            fp,
            fn_: total_fg - tp,
        };
    }
    Ok(counts)
}

/// Weighted harmonic mean `(1 + eta2) P R / (eta2 P + R)`, 0 when the
/// denominator vanishes.
pub fn f_measure(precision: f64, recall: f64, eta2: f64) -> f64 {
    let den = eta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + eta2) * precision * recall / den
    }
}

/// Binarization threshold `min(1, 2 * mean)` used by [`f_adaptive`].
pub fn adaptive_threshold(pred: &SaliencyMap) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// F-measure at the adaptive threshold. Pixels at or above the threshold are
/// foreground; an all-zero map predicts nothing.
pub fn f_adaptive(pred: &SaliencyMap, gt: &GroundTruth) -> Result<f64> {
    let t = adaptive_threshold(pred);
    Ok(confusion(pred, gt, |v| v >= t && v > 0.0)?.f_measure(ETA2))
}

/// Largest F-measure over the 256-threshold sweep of one image.
pub fn f_max(pred: &SaliencyMap, gt: &GroundTruth) -> Result<f64> {
    Ok(sweep_counts(pred, gt)?
        .iter()
        .map(|c| c.f_measure(ETA2))
        .fold(0.0, f64::max))
}

/// Mean absolute difference of two maps of equal size.
pub fn mae_between(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    check_dims(a, b.height, b.width, &b.id)?;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.values.len() as f64)
}

pub fn mae(pred: &SaliencyMap, gt: &GroundTruth) -> Result<f64> {
    mae_between(pred, &gt.to_map())
}

/// Dataset precision/recall at the 256 sweep thresholds, averaged over
/// images. Images with empty ground truth have no defined recall and are
/// left out of both averages; `excluded` counts them.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub images: usize,
    pub excluded: usize,
}

impl PrCurve {
    /// Largest F-measure along the averaged curve.
    pub fn f_max(&self, eta2: f64) -> f64 {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r, eta2))
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for k in 0..PR_THRESHOLDS {
            s.push_str(&format!(
                "{:.6},{:.6},{:.6}\n",
                pr_threshold(k),
                self.precision[k],
                self.recall[k]
            ));
        }
        s
    }
}

pub(crate) fn average_sweeps(sweeps: &[Vec<Counts>]) -> PrCurve {
    let mut precision = vec![0.0; PR_THRESHOLDS];
    let mut recall = vec![0.0; PR_THRESHOLDS];
    let mut used = 0usize;
    for s in sweeps {
        if s[0].recall().is_none() {
            continue;
        }
        used += 1;
        for (k, c) in s.iter().enumerate() {
            precision[k] += c.precision();
            recall[k] += c.recall().unwrap_or(0.0);
        }
    }
    if used > 0 {
        for k in 0..PR_THRESHOLDS {
            precision[k] /= used as f64;
            recall[k] /= used as f64;
        }
    }
    PrCurve {
        precision,
        recall,
        images: sweeps.len(),
        excluded: sweeps.len() - used,
    }
}

pub fn pr_curve(preds: &[SaliencyMap], gts: &[GroundTruth]) -> Result<PrCurve> {
    if preds.len() != gts.len() {
        return Err(Error::Arity(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("precision/recall needs at least one image".into()));
    }
    let sweeps = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| sweep_counts(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_sweeps(&sweeps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64], w: usize) -> SaliencyMap {
        SaliencyMap::new("p", values.len() / w, w, values.to_vec()).unwrap()
    }

    #[test]
    fn sweep_matches_direct_counting() {
        let p = map(&[0.0, 1.0, 0.5, 2.0 / 255.0, 1.0 / 255.0, 0.999], 3);
        let g = GroundTruth::from_values("g", 2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let sweep = sweep_counts(&p, &g).unwrap();
        for (k, c) in sweep.iter().enumerate() {
            let t = pr_threshold(k);
            assert_eq!(*c, confusion(&p, &g, |v| v > t).unwrap(), "k = {k}");
        }
        assert_eq!(sweep[255].tp + sweep[255].fp, 0);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(SaliencyMap::new("x", 1, 2, vec![0.5, 1.5]).is_err());
        assert!(SaliencyMap::new("x", 1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(GroundTruth::from_values("g", 1, 2, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn empty_ground_truth_is_excluded() {
        let p = map(&[0.2, 0.8], 2);
        let empty = GroundTruth::from_values("e", 1, 2, &[0.0, 0.0]).unwrap();
        let full = GroundTruth::from_values("f", 1, 2, &[1.0, 1.0]).unwrap();
        let c = pr_curve(&[p.clone(), p], &[empty, full]).unwrap();
        assert_eq!((c.images, c.excluded), (2, 1));
        assert_eq!(c.recall[0], 1.0);
        assert_eq!(c.precision[0], 1.0);
    }
}
