use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::augment::AugmentSpec;
use super::loss::{class_balance, total_loss, LossConfig};
use super::sgd::{sgd_step, OptimConfig, SgdStep};
use crate::data_io::ImageSample;
use crate::error::{Error, Result};
use crate::network::{forward, init_params, Checkpoint, Mode, NetworkConfig, ParameterStore};
use crate::rng::Rng;
use crate::tensor::{Dims, Graph, Tensor, BN_MOMENTUM};

/// Stream tag for per-iteration batch and augmentation draws.
const BATCH_STREAM: u64 = 0x6261_7463_68;

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based iteration number.
    pub iter: usize,
    /// Weighted level-loss sum, averaged over the images of the batch.
    pub loss_raw: f64,
    /// `loss_raw` divided by the pixel count of one image.
    pub loss_per_pixel: f64,
    /// Learning rate used for this iteration's update.
    pub lr: f32,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,loss_raw,loss_per_pixel,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:e}",
            self.iter, self.loss_raw, self.loss_per_pixel, self.lr
        )
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.alpha(self.network.levels)?;
        self.optim.validate()?;
        self.augment.validate()
    }
}

fn seed_tensor(seed: u64) -> Tensor<f32> {
    let parts = [0, 16, 32, 48].map(|s| ((seed >> s) & 0xffff) as f32);
    Tensor::new(Dims::new(1, 1, 1, 4), parts.to_vec()).unwrap()
}

fn seed_from_tensor(t: &Tensor<f32>) -> Option<u64> {
    (t.len() == 4).then(|| {
        t.data()
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)))
    })
}

/// SGD training state: parameters, iteration counter, current learning
/// rate and the recent per-pixel losses the plateau rule looks at.
#[derive(Clone, Debug)]
pub struct Trainer {
    setup: TrainSetup,
    alpha: Vec<f64>,
    store: ParameterStore<f32>,
    iter: usize,
    lr: f32,
    history: Vec<f32>,
}

impl Trainer {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.validate()?;
        let store = init_params(&setup.network, setup.seed)?;
        Ok(Trainer {
            alpha: setup.loss.alpha(setup.network.levels)?,
            lr: setup.optim.lr as f32,
            setup,
            store,
            iter: 0,
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`]. The
    /// checkpoint's network config and seed must match `setup`.
    pub fn resume(setup: TrainSetup, ckpt: Checkpoint) -> Result<Self> {
        setup.validate()?;
        if ckpt.config != setup.network {
            return Err(Error::Checkpoint("network config differs from the run config".into()));
        }
        let get = |k: &str| {
            ckpt.extra
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing training state {k}")))
        };
        let iter = get("train.iter")?.item() as usize;
        let lr = get("train.lr")?.item();
        let seed = seed_from_tensor(get("train.seed")?).ok_or_else(|| Error::Checkpoint("bad train.seed".into()))?;
        if seed != setup.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {seed} differs from run seed {}",
                setup.seed
            )));
        }
        let history = ckpt
            .extra
            .get("train.history")
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        Ok(Trainer {
            alpha: setup.loss.alpha(setup.network.levels)?,
            setup,
            store: ckpt.params,
            iter,
            lr,
            history,
        })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn params(&self) -> &ParameterStore<f32> {
        &self.store
    }

    pub fn into_params(self) -> ParameterStore<f32> {
        self.store
    }

    /// Completed iterations.
    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.setup.network.clone(), self.store.clone());
        c.extra.insert("train.iter".into(), Tensor::scalar(self.iter as f32));
        c.extra.insert("train.lr".into(), Tensor::scalar(self.lr));
        c.extra.insert("train.seed".into(), seed_tensor(self.setup.seed));
        if !self.history.is_empty() {
            let t = Tensor::new(Dims::new(1, 1, 1, self.history.len()), self.history.clone()).unwrap();
            c.extra.insert("train.history".into(), t);
        }
        c
    }

    /// Samples of iteration `iter + 1`: batch indices and augmentation drawn
    /// from a stream that depends only on the seed and the iteration.
    pub fn batch(&self, data: &[ImageSample]) -> Result<Vec<ImageSample>> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut rng = Rng::stream(self.setup.seed, &[BATCH_STREAM, self.iter as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let [h, w] = self.setup.network.input_hw;
        (0..self.setup.optim.batch_size)
            .map(|k| {
                let s = &data[order[k % order.len()]];
                let (sh, sw) = s.hw();
                self.setup.augment.draw(sh, sw, &mut rng).apply(s, (h, w))
            })
            .collect()
    }

    /// One SGD iteration. The gradient is taken of the loss averaged over
    /// the batch and the pixels of an image.
    pub fn step(&mut self, data: &[ImageSample]) -> Result<LossRecord> {
        let batch = self.batch(data)?;
        let n = batch.len();
        let [h, w] = self.setup.network.input_hw;
        let pixels = (h * w) as f64;
        let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
        let x = Tensor::stack(&images)?;
        let target: Vec<u8> = batch.iter().flat_map(|s| s.mask.data().iter().copied()).collect();
        let betas: Vec<f32> = batch.iter().map(|s| class_balance(&s.mask).beta as f32).collect();

        let mut trace = forward(&x, &self.store, &self.setup.network, Mode::Train)?;
        let g: &mut Graph<f32> = &mut trace.graph;
        let raw = total_loss(g, &trace.levels.logits, &target, &betas, &self.alpha)?;
        let scaled = g.weighted_sum(&[raw], &[(1.0 / (n as f64 * pixels)) as f32])?;
        let loss_raw = g.value(raw).item() as f64 / n as f64;
        let iter = self.iter + 1;
        if !loss_raw.is_finite() {
            return Err(Error::Diverged {
                iter,
                detail: format!("loss is {loss_raw}"),
            });
        }
        g.backward(scaled)?;
        let mut grads = BTreeMap::new();
        for (name, &id) in &trace.params {
            let gr = g
                .grad(id)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(id).len()]);
            grads.insert(name.clone(), gr);
        }
        let step = SgdStep {
            lr: self.lr as f64,
            momentum: self.setup.optim.momentum,
            weight_decay: self.setup.optim.weight_decay,
        };
        sgd_step(&mut self.store, &grads, step).map_err(|e| match e {
            Error::NonFiniteGradient(d) => Error::Diverged { iter, detail: d },
            other => other,
        })?;
        self.store.apply_bn_stats(&trace.bn_stats, BN_MOMENTUM as f32)?;

        let record = LossRecord {
            iter,
            loss_raw,
            loss_per_pixel: loss_raw / pixels,
            lr: self.lr,
        };
        self.iter = iter;
        self.note_loss(record.loss_per_pixel as f32);
        Ok(record)
    }

    /// Plateau rule: every `window` iterations, once two full windows exist,
    /// decay the learning rate if the latest window's mean loss exceeds
    /// 0.999 times the previous window's mean.
    fn note_loss(&mut self, loss: f32) {
        let window = self.setup.optim.plateau_window;
        self.history.push(loss);
        if self.history.len() > 2 * window {
            self.history.drain(..self.history.len() - 2 * window);
        }
        if self.iter.is_multiple_of(window) && self.history.len() == 2 * window {
            let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
            let (prev, last) = self.history.split_at(window);
            if mean(last) > 0.999 * mean(prev) {
                self.lr = (self.lr as f64 * self.setup.optim.lr_decay_factor) as f32;
            }
        }
    }
}

/// Where and how often a run writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub every: usize,
}

impl CheckpointPolicy {
    pub fn path(dir: &Path, iter: usize) -> PathBuf {
        dir.join(format!("iter_{iter:06}.ckpt"))
    }

    pub fn final_path(dir: &Path) -> PathBuf {
        dir.join("final.ckpt")
    }
}

/// Runs `trainer` until `optim.max_iters` iterations are complete, calling
/// `on_record` after every iteration. Periodic checkpoints and a final one
/// go to `policy.dir`; on divergence the files already written are kept and
/// the error is returned.
pub fn train(
    trainer: &mut Trainer,
    data: &[ImageSample],
    policy: &CheckpointPolicy,
    mut on_record: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    if let Some(dir) = &policy.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::new();
    while trainer.iter() < trainer.setup().optim.max_iters {
        let rec = trainer.step(data)?;
        on_record(&rec)?;
        log.push(rec);
        if let Some(dir) = &policy.dir {
            if policy.every > 0 && rec.iter % policy.every == 0 {
                trainer.checkpoint().save(CheckpointPolicy::path(dir, rec.iter))?;
            }
        }
    }
    if let Some(dir) = &policy.dir {
        trainer.checkpoint().save(CheckpointPolicy::final_path(dir))?;
    }
    Ok(log)
}
