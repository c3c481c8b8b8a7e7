//! Whole-run configuration, batched prediction and the variant ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::{BinaryMask, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, GroundTruth, SaliencyMap};
use crate::network::{init_params, predict, Mode, NetBuilder, NetworkConfig, ParameterStore, Variant};
use crate::rng::Rng;
use crate::tensor::{grad_check, one_sided_slopes, resize_bilinear, Dims, GradCheckReport, Graph, NodeId, Tensor};
use crate::training::{
    class_balance, total_loss, train, AugmentSpec, CheckpointPolicy, LossConfig, OptimConfig, TrainSetup, Trainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Trailing fraction of the samples (by index) held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { test_fraction: 0.25 }
    }
}

/// A complete run description. Every field is optional in JSON and unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentSpec,
    pub data: DataConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentSpec::default(),
            data: DataConfig::default(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        let f = self.data.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config("data: test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            network: self.network.clone(),
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            augment: self.augment.clone(),
            seed: self.seed,
        }
    }
}

/// Splits by index: the last `round(n * test_fraction)` samples are the test
/// set, with at least one sample on each side.
pub fn split(samples: &[ImageSample], test_fraction: f64) -> Result<(&[ImageSample], &[ImageSample])> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Input(format!("need at least two samples to split, got {n}")));
    }
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    Ok(samples.split_at(n - test))
}

/// Saliency maps at each sample's own resolution. Images are resized to the
/// network input and the prediction is resized back.
pub fn predict_samples(
    store: &ParameterStore<f32>,
    config: &NetworkConfig,
    samples: &[ImageSample],
    batch: usize,
) -> Result<Vec<SaliencyMap>> {
    let [h, w] = config.input_hw;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let inputs = chunk
            .iter()
            .map(|s| resize_bilinear(&s.image, h, w))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
        let sal = predict(&x, store, config)?;
        for (i, s) in chunk.iter().enumerate() {
            let plane = Tensor::new(Dims::new(1, 1, h, w), sal.plane(i, 0).to_vec())?;
            let (sh, sw) = s.hw();
            let mut back = resize_bilinear(&plane, sh, sw)?;
            back.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            out.push(SaliencyMap::from_tensor(&s.id, &back)?);
        }
    }
    Ok(out)
}

pub fn ground_truths(samples: &[ImageSample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .map(|s| GroundTruth::new(&s.id, s.mask.clone()))
        .collect()
}

/// Predicts every sample and scores it against its own mask.
pub fn evaluate_samples(
    store: &ParameterStore<f32>,
    config: &NetworkConfig,
    samples: &[ImageSample],
) -> Result<EvalReport> {
    let preds = predict_samples(store, config, samples, 8)?;
    evaluate(&preds, &ground_truths(samples), 1)
}

/// Largest network [`loss_grad_check`] accepts, in scalar parameters.
pub const GRADCHECK_MAX_PARAMS: usize = 50_000;

const GRADCHECK_STREAM: u64 = 0x6772_6164;

/// Sample points [`loss_grad_check`] tries before giving up.
pub const GRADCHECK_MAX_POINTS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOutcome {
    /// Check at the requested step for the last point tried.
    pub report: GradCheckReport,
    /// Points rejected because a step straddled a ReLU or max-pool kink.
    pub kinked_points: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.max_rel_error < tolerance
    }
}

/// Central-difference check of the full deeply supervised loss with respect
/// to every parameter, at 64-bit precision, on `batch` random images and
/// masks drawn from `seed`.
///
/// When a step straddles a kink of the piecewise-linear activations the
/// central difference is meaningless there. An entry above `tolerance` whose
/// analytic value matches the forward or backward one-sided quotient at step
/// `h / 100` is attributed to such a kink. If every failing entry is, the
/// point is discarded and a fresh one drawn, up to [`GRADCHECK_MAX_POINTS`]
/// points. Otherwise the failing report is returned.
pub fn loss_grad_check(
    config: &NetworkConfig,
    loss: &LossConfig,
    seed: u64,
    batch: usize,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckOutcome> {
    config.validate()?;
    let alpha = loss.alpha(config.levels)?;
    let store = init_params(config, seed)?.cast::<f64>();
    if store.scalar_count() > GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "network has {} parameters; gradient checks are limited to {GRADCHECK_MAX_PARAMS}",
            store.scalar_count()
        )));
    }
    let names: Vec<String> = store.names().map(String::from).collect();
    let values: Vec<Tensor<f64>> = names.iter().map(|n| store.value(n).cloned()).collect::<Result<_>>()?;
    let [hh, ww] = config.input_hw;
    let n = batch.max(1);
    let mut kinked_points = 0;
    for point in 0..GRADCHECK_MAX_POINTS as u64 {
        let mut rng = Rng::stream(seed, &[GRADCHECK_STREAM, point]);
        let x = Tensor::from_fn(Dims::new(n, 3, hh, ww), |_, _, _, _| rng.uniform());
        let masks: Vec<BinaryMask> = (0..n)
            .map(|_| BinaryMask::from_fn(hh, ww, |_, _| rng.chance(0.4)))
            .collect();
        let target: Vec<u8> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
        let betas: Vec<f64> = masks.iter().map(|m| class_balance(m).beta).collect();
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let map: BTreeMap<String, NodeId> = names.iter().cloned().zip(ids.iter().copied()).collect();
            let xi = g.constant(x.clone());
            let levels = NetBuilder::new(g, &map, &store, config, Mode::Train).run(xi)?;
            total_loss(g, &levels.logits, &target, &betas, &alpha)
        };
        let report = grad_check(f, &values, h)?;
        if report.max_rel_error < tolerance {
            return Ok(GradCheckOutcome { report, kinked_points });
        }
        let mut kink = true;
        for e in report.details.iter().filter(|e| e.rel_error() >= tolerance) {
            let (fwd, bwd) = one_sided_slopes(f, &values, e.param, e.index, h / 100.0)?;
            let off = |q: f64| (e.analytic - q).abs() / q.abs().max(1.0);
            if off(fwd).min(off(bwd)) >= tolerance {
                kink = false;
                break;
            }
        }
        if !kink || point + 1 == GRADCHECK_MAX_POINTS as u64 {
            return Ok(GradCheckOutcome { report, kinked_points });
        }
        kinked_points += 1;
    }
    unreachable!("the last point always returns")
}

/// Dataset means of one trained variant on the held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub f_adaptive: f64,
    pub f_max: f64,
    pub mae: f64,
    pub s_measure: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,seed,f_adaptive,f_max,mae,s_measure";
}

/// Trains every variant for each of `seeds` consecutive seeds starting at
/// `config.seed`, all with the same hyperparameters, and evaluates on `test`.
pub fn run_ablation(
    config: &RunConfig,
    train_set: &[ImageSample],
    test_set: &[ImageSample],
    variants: &[Variant],
    seeds: usize,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds == 0 {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        for k in 0..seeds as u64 {
            let seed = config.seed.wrapping_add(k);
            let mut setup = config.setup();
            setup.network = variant.configure(&config.network);
            setup.seed = seed;
            let mut trainer = Trainer::new(setup)?;
            train(&mut trainer, train_set, &CheckpointPolicy::default(), |_| Ok(()))?;
            let net = trainer.setup().network.clone();
            let report = evaluate_samples(trainer.params(), &net, test_set)?;
            let row = AblationRow {
                variant,
                seed,
                f_adaptive: report.mean.f_adaptive,
                f_max: report.mean.f_max,
                mae: report.mean.mae,
                s_measure: report.mean.s_measure,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.seed, r.f_adaptive, r.f_max, r.mae, r.s_measure
        )
        .expect("writing to a String");
    }
    s
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-variant medians over seeds, in first-appearance order.
pub fn ablation_medians(rows: &[AblationRow]) -> Vec<AblationRow> {
    let mut variants: Vec<Variant> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let of =
                |f: fn(&AblationRow) -> f64| median(&rows.iter().filter(|r| r.variant == v).map(f).collect::<Vec<_>>());
            AblationRow {
                variant: v,
                seed: 0,
                f_adaptive: of(|r| r.f_adaptive),
                f_max: of(|r| r.f_max),
                mae: of(|r| r.mae),
                s_measure: of(|r| r.s_measure),
            }
        })
        .collect()
}

pub fn medians_csv(medians: &[AblationRow]) -> String {
    let mut s = String::from("variant,f_adaptive,f_max,mae,s_measure\n");
    for r in medians {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.f_adaptive, r.f_max, r.mae, r.s_measure
        )
        .expect("writing to a String");
    }
    s
}
