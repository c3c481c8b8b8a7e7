use std::path::Path;

use super::{
    average_sweeps, check_dims, f_adaptive, mae, s_measure, sweep_counts, Counts, GroundTruth, PrCurve, SaliencyMap,
    ETA2, S_LAMBDA,
};
use crate::data_io::{read_manifest, read_pgm, BinaryMask};
use crate::error::{Error, Result};

/// The four per-image scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub id: String,
    pub f_adaptive: f64,
    pub f_max: f64,
    pub mae: f64,
    pub s_measure: f64,
}

impl ImageScores {
    fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            self.id, self.f_adaptive, self.f_max, self.mae, self.s_measure
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScores>,
    /// Arithmetic means of the per-image scores, with id `MEAN`.
    pub mean: ImageScores,
    pub pr: PrCurve,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "id,f_adaptive,f_max,mae,s_measure";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for img in &self.images {
            s.push_str(&img.csv_row());
        }
        s.push_str(&self.mean.csv_row());
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_pr_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.pr.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn score_image(pred: &SaliencyMap, gt: &GroundTruth) -> Result<(ImageScores, Vec<Counts>)> {
    let sweep = sweep_counts(pred, gt)?;
    let scores = ImageScores {
        id: gt.id().to_string(),
        f_adaptive: f_adaptive(pred, gt)?,
        f_max: sweep.iter().map(|c| c.f_measure(ETA2)).fold(0.0, f64::max),
        mae: mae(pred, gt)?,
        s_measure: s_measure(pred, gt, S_LAMBDA)?,
    };
    Ok((scores, sweep))
}

/// Scores every pair, spreading images over `jobs` threads. The result does
/// not depend on `jobs`.
pub fn evaluate(preds: &[SaliencyMap], gts: &[GroundTruth], jobs: usize) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::Arity(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("evaluation needs at least one image".into()));
    }
    let chunk = preds.len().div_ceil(jobs.max(1));
    let results: Vec<Result<(ImageScores, Vec<Counts>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = preds
            .chunks(chunk)
            .zip(gts.chunks(chunk))
            .map(|(p, g)| s.spawn(move || p.iter().zip(g).map(|(p, g)| score_image(p, g)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let (images, sweeps): (Vec<ImageScores>, Vec<Vec<Counts>>) =
        results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();

    let n = images.len() as f64;
    let avg = |f: fn(&ImageScores) -> f64| images.iter().map(f).sum::<f64>() / n;
    let mean = ImageScores {
        id: "MEAN".into(),
        f_adaptive: avg(|s| s.f_adaptive),
        f_max: avg(|s| s.f_max),
        mae: avg(|s| s.mae),
        s_measure: avg(|s| s.s_measure),
    };
    Ok(EvalReport {
        images,
        mean,
        pr: average_sweeps(&sweeps),
    })
}

/// Loads `<pred_dir>/<id>.pgm` for every manifest entry and scores it
/// against the entry's mask. Missing predictions are reported together.
pub fn evaluate_dataset(pred_dir: impl AsRef<Path>, manifest: impl AsRef<Path>, jobs: usize) -> Result<EvalReport> {
    let pred_dir = pred_dir.as_ref();
    let entries = read_manifest(manifest)?;
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !pred_dir.join(format!("{}.pgm", e.id)).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingData(missing));
    }
    let mut preds = Vec::with_capacity(entries.len());
    let mut gts = Vec::with_capacity(entries.len());
    for e in &entries {
        let m = read_pgm(&e.mask)?;
        let mask = BinaryMask::new(
            m.dims().h,
            m.dims().w,
            m.data()
                .iter()
                .map(|&v| match v {
                    0.0 => Ok(0),
                    1.0 => Ok(1),
                    _ => Err(Error::Input(format!(
                        "{}: mask value {v} is not binary",
                        e.mask.display()
                    ))),
                })
                .collect::<Result<_>>()?,
        )?;
        let pred = SaliencyMap::from_tensor(&e.id, &read_pgm(pred_dir.join(format!("{}.pgm", e.id)))?)?;
        check_dims(&pred, mask.height(), mask.width(), "ground truth")?;
        preds.push(pred);
        gts.push(GroundTruth::new(&e.id, mask));
    }
    evaluate(&preds, &gts, jobs)
}
