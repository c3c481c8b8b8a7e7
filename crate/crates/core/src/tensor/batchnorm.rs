use super::{Dims, Real};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight on the previous running value in the moving-average update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Normalization statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Infer { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + take * b;
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

fn for_channel<T: Real>(d: Dims, c: usize, data: &[T], mut f: impl FnMut(usize, T)) {
    let hw = d.hw();
    for n in 0..d.n {
        let start = d.offset(n, c, 0, 0);
        for (i, &v) in data[start..start + hw].iter().enumerate() {
            f(start + i, v);
        }
    }
}

pub(crate) fn bn_forward<T: Real>(
    x: &[T],
    d: Dims,
    gamma: &[T],
    beta: &[T],
    mode: BnMode<'_, T>,
) -> (Vec<T>, BnCache<T>, Option<BatchStats<T>>) {
    let eps = T::from_f64(BN_EPSILON);
    let m = d.n * d.hw();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); d.c];
    let mut stats = BatchStats {
        mean: vec![T::zero(); d.c],
        var: vec![T::zero(); d.c],
    };
    for c in 0..d.c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for_channel(d, c, x, |_, v| sum += v);
                let mean = sum / T::from_f64(m as f64);
                let mut sq = T::zero();
                for_channel(d, c, x, |_, v| sq += (v - mean) * (v - mean));
                let var = sq / T::from_f64(m as f64);
                stats.mean[c] = mean;
                stats.var[c] = if m > 1 { sq / T::from_f64((m - 1) as f64) } else { var };
                (mean, var)
            }
            BnMode::Infer { mean, var } => (mean[c], var[c]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma[c], beta[c]);
        for_channel(d, c, x, |i, v| {
            let h = (v - mean) * istd;
            xhat[i] = h;
            y[i] = g * h + b;
        });
    }
    let train = matches!(mode, BnMode::Train);
    (y, BnCache { xhat, inv_std, train }, train.then_some(stats))
}

pub(crate) struct BnGrads<T> {
    pub x: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn bn_backward<T: Real>(cache: &BnCache<T>, d: Dims, gamma: &[T], dy: &[T]) -> BnGrads<T> {
    let m = T::from_f64((d.n * d.hw()) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for c in 0..d.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for_channel(d, c, dy, |i, g| {
            sum_dy += g;
            sum_dy_xhat += g * cache.xhat[i];
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * cache.inv_std[c];
        if cache.train {
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for_channel(d, c, dy, |i, g| {
                dx[i] = scale * (g - mean_dy - cache.xhat[i] * mean_dy_xhat);
            });
        } else {
            for_channel(d, c, dy, |i, g| dx[i] = scale * g);
        }
    }
    BnGrads {
        x: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
