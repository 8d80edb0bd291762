use rand::Rng;
use rand_distr::StandardNormal;

use super::data::{draw_sample, DatasetParams, Sample, SignalNoiseDataset};
use crate::error::{shape_err, Error, Result};
use crate::matker::dot;

/// Training loss above which a trained model is flagged.
pub const LOSS_TARGET: f64 = 0.1;

/// Two-layer CNN with `m` filters per output sign:
/// `f(W, x) = (1/m) sum_r sum_s [ReLU(<w+_r, x^s>) - ReLU(<w-_r, x^s>)]`.
///
/// Parameters are stored flat as `(j, r, coord)` with `j = 0` for the
/// positive filters and `j = 1` for the negative ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    m: usize,
    d: usize,
    params: Vec<f64>,
}

impl CnnModel {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            params: vec![0.0; 2 * m * d],
        }
    }

    /// I.i.d. `N(0, init_scale^2)` weights.
    pub fn random<R: Rng + ?Sized>(m: usize, d: usize, init_scale: f64, rng: &mut R) -> Self {
        let params = (0..2 * m * d)
            .map(|_| init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { m, d, params }
    }

    pub fn from_params(m: usize, d: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != 2 * m * d {
            return Err(shape_err(2 * m * d, params.len()));
        }
        Ok(Self { m, d, params })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Filter `r` of sign block `j` (0 positive, 1 negative).
    pub fn filter(&self, j: usize, r: usize) -> &[f64] {
        let start = (j * self.m + r) * self.d;
        &self.params[start..start + self.d]
    }

    pub fn filter_mut(&mut self, j: usize, r: usize) -> &mut [f64] {
        let start = (j * self.m + r) * self.d;
        &mut self.params[start..start + self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    fn check(&self, s: &Sample) -> Result<()> {
        if s.x1.len() != self.d || s.x2.len() != self.d {
            return Err(shape_err(self.d, s.x1.len().max(s.x2.len())));
        }
        Ok(())
    }

    /// Network output on one sample. ReLU'(0) is taken as 0.
    pub fn forward(&self, s: &Sample) -> Result<f64> {
        self.check(s)?;
        let mut f = 0.0;
        for j in 0..2 {
            let sign = if j == 0 { 1.0 } else { -1.0 };
            for r in 0..self.m {
                let w = self.filter(j, r);
                for x in s.slots() {
                    f += sign * dot(w, x).max(0.0);
                }
            }
        }
        Ok(f / self.m as f64)
    }

    /// `(f, df/dW)` on one sample.
    pub fn forward_grad(&self, s: &Sample) -> Result<(f64, Vec<f64>)> {
        self.check(s)?;
        let mut f = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        let inv_m = 1.0 / self.m as f64;
        for j in 0..2 {
            let sign = if j == 0 { 1.0 } else { -1.0 };
            for r in 0..self.m {
                let start = (j * self.m + r) * self.d;
                let w = &self.params[start..start + self.d];
                let g = &mut grad[start..start + self.d];
                for x in s.slots() {
                    let pre = dot(w, x);
                    if pre > 0.0 {
                        f += sign * pre;
                        for (gi, xi) in g.iter_mut().zip(x) {
                            *gi += sign * inv_m * xi;
                        }
                    }
                }
            }
        }
        Ok((f * inv_m, grad))
    }
}

/// `log(1 + exp(-z))`, stable for large `|z|`.
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `sigmoid(-z) = -l'(z)`.
pub(crate) fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Loss `log(1 + exp(-y f))` and its gradient for one sample.
pub fn sample_loss_and_grad(model: &CnnModel, s: &Sample) -> Result<(f64, Vec<f64>)> {
    let (f, mut g) = model.forward_grad(s)?;
    let z = s.y * f;
    let coef = -sigmoid_neg(z) * s.y;
    g.iter_mut().for_each(|x| *x *= coef);
    Ok((logistic_loss(z), g))
}

/// Mean logistic loss over `samples` and its gradient.
pub fn loss_and_grad(model: &CnnModel, samples: &[Sample]) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("loss over an empty sample set".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    let inv_n = 1.0 / samples.len() as f64;
    for s in samples {
        let (l, g) = sample_loss_and_grad(model, s)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += inv_n * b;
        }
    }
    Ok((loss * inv_n, grad))
}

pub(crate) fn mean_loss(model: &CnnModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += logistic_loss(s.y * model.forward(s)?);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub m: usize,
    pub lr: f64,
    pub epochs: usize,
    pub init_scale: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            m: 10,
            lr: 0.1,
            epochs: 100,
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub model: CnnModel,
    pub train_loss: f64,
    /// Final loss above [`LOSS_TARGET`].
    pub above_target: bool,
}

/// Full-batch gradient descent from a random initialization.
pub fn train_full_batch<R: Rng + ?Sized>(
    dataset: &SignalNoiseDataset,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainResult> {
    if !(opts.lr >= 0.0) || opts.m == 0 {
        return Err(Error::InvalidConfig(format!(
            "need lr >= 0 and m >= 1, got lr={} m={}",
            opts.lr, opts.m
        )));
    }
    let mut model = CnnModel::random(opts.m, dataset.params.d, opts.init_scale, rng);
    for epoch in 0..opts.epochs {
        let (loss, grad) = loss_and_grad(&model, &dataset.samples)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        for (w, g) in model.params.iter_mut().zip(&grad) {
            *w -= opts.lr * g;
        }
    }
    let train_loss = mean_loss(&model, &dataset.samples)?;
    if !train_loss.is_finite() || !model.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: opts.epochs,
            loss: train_loss,
        });
    }
    Ok(TrainResult {
        model,
        train_loss,
        above_target: train_loss > LOSS_TARGET,
    })
}

/// Fraction of `n_test` fresh draws with `sign(f) != y`; `f = 0` counts as
/// an error.
pub fn test_error<R: Rng + ?Sized>(
    model: &CnnModel,
    n_test: usize,
    params: &DatasetParams,
    rng: &mut R,
) -> Result<f64> {
    if n_test == 0 {
        return Err(Error::InvalidConfig("n_test must be positive".into()));
    }
    let mut errors = 0usize;
    for _ in 0..n_test {
        let s = draw_sample(params, rng);
        if s.y * model.forward(&s)? <= 0.0 {
            errors += 1;
        }
    }
    Ok(errors as f64 / n_test as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnnmem::data::generate_dataset;
    use crate::seed::rng_from_seed;

    fn sample(x1: Vec<f64>, x2: Vec<f64>, y: f64) -> Sample {
        Sample {
            x1,
            x2,
            y,
            signal_slot: 1,
        }
    }

    #[test]
    fn forward_examples() {
        let s = sample(vec![2.0, 0.0], vec![0.0, 0.0], 1.0);
        assert_eq!(CnnModel::zeros(3, 2).forward(&s).unwrap(), 0.0);
        let mut m = CnnModel::zeros(1, 2);
        m.filter_mut(0, 0).copy_from_slice(&[1.0, 0.0]);
        assert_eq!(m.forward(&s).unwrap(), 2.0);
        m.filter_mut(1, 0).copy_from_slice(&[1.0, 0.0]);
        assert_eq!(m.forward(&s).unwrap(), 0.0);
        assert!(matches!(
            m.forward(&sample(vec![1.0], vec![1.0], 1.0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn loss_at_zero_is_log2() {
        let mut rng = rng_from_seed(1);
        let ds = generate_dataset(7, 5, 2.0, 1.0, &mut rng).unwrap();
        let (loss, _) = loss_and_grad(&CnnModel::zeros(4, 5), &ds.samples).unwrap();
        assert_eq!(loss, std::f64::consts::LN_2);
    }

    #[test]
    fn logistic_is_stable() {
        assert!((logistic_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(logistic_loss(-1000.0), 1000.0);
        assert!(logistic_loss(1000.0) >= 0.0 && logistic_loss(1000.0) < 1e-300);
        assert!((sigmoid_neg(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(7);
        let ds = generate_dataset(8, 10, 1.5, 1.0, &mut rng).unwrap();
        let model = CnnModel::random(3, 10, 0.5, &mut rng);
        let (_, g) = loss_and_grad(&model, &ds.samples).unwrap();
        let h = 1e-5;
        for (i, gi) in g.iter().enumerate() {
            let mut p = model.clone();
            p.params_mut()[i] += h;
            let mut q = model.clone();
            q.params_mut()[i] -= h;
            let fd =
                (loss_and_grad(&p, &ds.samples).unwrap().0 - loss_and_grad(&q, &ds.samples).unwrap().0) / (2.0 * h);
            assert!((fd - gi).abs() <= 1e-6 * gi.abs().max(1e-3), "i={i}: {fd} vs {gi}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let mut rng = rng_from_seed(3);
        let ds = generate_dataset(6, 4, 1.0, 1.0, &mut rng).unwrap();
        let opts = TrainOptions {
            m: 2,
            lr: 0.0,
            epochs: 5,
            init_scale: 0.1,
        };
        let r = train_full_batch(&ds, &opts, &mut rng_from_seed(9)).unwrap();
        let init = CnnModel::random(2, 4, 0.1, &mut rng_from_seed(9));
        assert_eq!(r.model, init);
    }

    #[test]
    fn high_snr_training_fits() {
        let mut rng = rng_from_seed(11);
        let ds = generate_dataset(50, 20, 5.0, 1.0, &mut rng).unwrap();
        let r = train_full_batch(&ds, &TrainOptions::default(), &mut rng).unwrap();
        assert!(r.train_loss <= LOSS_TARGET, "loss {}", r.train_loss);
        assert!(!r.above_target);
        let err = test_error(&r.model, 1000, &ds.params, &mut rng).unwrap();
        assert!(err < 0.05, "error {err}");
    }

    #[test]
    fn zero_model_test_error_is_one() {
        let mut rng = rng_from_seed(5);
        let params = DatasetParams {
            d: 3,
            mu_norm: 1.0,
            noise_sigma: 1.0,
        };
        assert_eq!(test_error(&CnnModel::zeros(2, 3), 200, &params, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn signal_model_classifies() {
        let params = DatasetParams {
            d: 5,
            mu_norm: 20.0,
            noise_sigma: 0.1,
        };
        let mut m = CnnModel::zeros(1, 5);
        m.filter_mut(0, 0).copy_from_slice(&params.mu());
        let neg: Vec<f64> = params.mu().iter().map(|x| -x).collect();
        m.filter_mut(1, 0).copy_from_slice(&neg);
        let err = test_error(&m, 1000, &params, &mut rng_from_seed(6)).unwrap();
        assert!(err < 0.01);
    }
}
