use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use super::data::{generate_dataset, DatasetParams, Sample};
use super::hessian::sample_hessian;
use super::model::{mean_loss, sample_loss_and_grad, test_error, train_full_batch, CnnModel, TrainOptions};
use crate::coherence::{mix_coherence, UnlearnConfig};
use crate::ensemble::{HessianEnsemble, SampleHessian};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, format_sig, rng_from_seed};

/// How unlearning minibatches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Each sample independently with probability `batch / n`.
    #[default]
    Bernoulli,
    /// Exactly `batch` samples per set, without replacement.
    FixedSize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnOptions {
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub steps: usize,
    pub sampling: Sampling,
}

impl Default for UnlearnOptions {
    fn default() -> Self {
        Self {
            batch: 5,
            lr: 0.1,
            alpha: 0.3,
            steps: 90,
            sampling: Sampling::Bernoulli,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnTrace {
    /// Mean forget-set loss before the first step and after each step.
    pub forget_losses: Vec<f64>,
    /// Set when the weights or loss became non-finite; the trace stops there.
    pub diverged: bool,
    pub model: CnnModel,
}

fn draw_batch<R: Rng + ?Sized>(n: usize, batch: usize, sampling: Sampling, rng: &mut R) -> Result<Vec<usize>> {
    if batch == 0 || batch > n {
        return Err(Error::InvalidBatch { batch, n });
    }
    Ok(match sampling {
        Sampling::Bernoulli => {
            let p = batch as f64 / n as f64;
            (0..n).filter(|_| rng.random_bool(p)).collect()
        }
        Sampling::FixedSize => {
            let mut idx = index::sample(rng, n, batch).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// Gradient descent on the retain loss and ascent on the forget loss:
/// `W <- W - lr [(1-alpha)/B sum_{retain batch} grad l_i - alpha/B sum_{forget batch} grad l_i]`.
pub fn unlearn_cnn<R: Rng + ?Sized>(
    model: &CnnModel,
    retain: &[Sample],
    forget: &[Sample],
    opts: &UnlearnOptions,
    rng: &mut R,
) -> Result<UnlearnTrace> {
    if retain.is_empty() {
        return Err(Error::EmptyRetainSet);
    }
    if forget.is_empty() {
        return Err(Error::EmptyForgetSet);
    }
    let mut model = model.clone();
    let mut forget_losses = vec![mean_loss(&model, forget)?];
    let b = opts.batch as f64;
    let mut diverged = false;
    for _ in 0..opts.steps {
        let r_idx = draw_batch(retain.len(), opts.batch, opts.sampling, rng)?;
        let f_idx = draw_batch(forget.len(), opts.batch, opts.sampling, rng)?;
        let mut update = vec![0.0; model.params().len()];
        for (set, idx, coef) in [
            (retain, &r_idx, (1.0 - opts.alpha) / b),
            (forget, &f_idx, -opts.alpha / b),
        ] {
            for &i in idx {
                let (_, g) = sample_loss_and_grad(&model, &set[i])?;
                for (u, gi) in update.iter_mut().zip(&g) {
                    *u += coef * gi;
                }
            }
        }
        for (w, u) in model.params_mut().iter_mut().zip(&update) {
            *w -= opts.lr * u;
        }
        let loss = mean_loss(&model, forget)?;
        if !loss.is_finite() || !model.is_finite() {
            diverged = true;
            break;
        }
        forget_losses.push(loss);
    }
    Ok(UnlearnTrace {
        forget_losses,
        diverged,
        model,
    })
}

/// Settings of the memorization versus forgetting heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSpec {
    pub signal_grid: Vec<f64>,
    pub d_grid: Vec<usize>,
    pub repeats: usize,
    pub master_seed: u64,
    pub n: usize,
    pub n_forget: usize,
    pub noise_sigma: f64,
    pub n_test: usize,
    pub train: TrainOptions,
    pub unlearn: UnlearnOptions,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            signal_grid: (1..=10).map(|i| 0.5 * i as f64).collect(),
            d_grid: vec![100, 300, 500, 700, 900, 1100],
            repeats: 20,
            master_seed: 0,
            n: 50,
            n_forget: 25,
            noise_sigma: 1.0,
            n_test: 1000,
            train: TrainOptions::default(),
            unlearn: UnlearnOptions::default(),
        }
    }
}

impl HeatmapSpec {
    /// `(signal_norm, d)` in cell order: signal outer, dimension inner.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.signal_grid
            .iter()
            .flat_map(|&s| self.d_grid.iter().map(move |&d| (s, d)))
            .collect()
    }
}

/// Means over the successful repeats of one heatmap cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    pub signal_norm: f64,
    pub d: usize,
    pub snr: f64,
    pub train_loss: f64,
    pub test_error: f64,
    pub forget_loss: f64,
    /// Repeats whose training or unlearning produced non-finite values.
    pub n_failed: usize,
}

struct RepeatResult {
    train_loss: f64,
    test_error: f64,
    forget_loss: f64,
}

fn heatmap_repeat(spec: &HeatmapSpec, signal: f64, d: usize, seed: u64) -> Result<Option<RepeatResult>> {
    let mut rng = rng_from_seed(seed);
    let ds = generate_dataset(spec.n, d, signal, spec.noise_sigma, &mut rng)?;
    let trained = match train_full_batch(&ds, &spec.train, &mut rng) {
        Ok(t) => t,
        Err(Error::TrainingDiverged { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let err = test_error(&trained.model, spec.n_test, &ds.params, &mut rng)?;
    let split = spec.n - spec.n_forget;
    let (retain, forget) = ds.samples.split_at(split);
    let trace = unlearn_cnn(&trained.model, retain, forget, &spec.unlearn, &mut rng)?;
    if trace.diverged {
        return Ok(None);
    }
    Ok(Some(RepeatResult {
        train_loss: trained.train_loss,
        test_error: err,
        forget_loss: *trace.forget_losses.last().expect("nonempty"),
    }))
}

/// Runs every cell and repeat. Repeat `r` of cell `c` is seeded with
/// `derive_seed(derive_seed(master_seed, c), r)`.
pub fn snr_heatmap(spec: &HeatmapSpec) -> Result<Vec<HeatmapCell>> {
    if spec.signal_grid.is_empty() || spec.d_grid.is_empty() || spec.repeats == 0 {
        return Err(Error::InvalidConfig(
            "heatmap needs nonempty grids and repeats >= 1".into(),
        ));
    }
    if spec.n_forget == 0 || spec.n_forget >= spec.n {
        return Err(Error::InvalidConfig(format!(
            "n_forget must lie in [1, n), got {} with n={}",
            spec.n_forget, spec.n
        )));
    }
    let cells = spec.cells();
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.repeats).map(move |r| (c, r)))
        .collect();
    let results = tasks
        .par_iter()
        .map(|&(c, r)| {
            let (signal, d) = cells[c];
            heatmap_repeat(
                spec,
                signal,
                d,
                derive_seed(derive_seed(spec.master_seed, c as u64), r as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(signal, d))| {
            let reps = &results[c * spec.repeats..(c + 1) * spec.repeats];
            let ok: Vec<&RepeatResult> = reps.iter().flatten().collect();
            let mean = |f: fn(&RepeatResult) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            HeatmapCell {
                signal_norm: signal,
                d,
                snr: DatasetParams {
                    d,
                    mu_norm: signal,
                    noise_sigma: spec.noise_sigma,
                }
                .snr(),
                train_loss: mean(|r| r.train_loss),
                test_error: mean(|r| r.test_error),
                forget_loss: mean(|r| r.forget_loss),
                n_failed: reps.len() - ok.len(),
            }
        })
        .collect())
}

pub const HEATMAP_CSV_HEADER: &str = "signal_norm,d,snr,train_loss,test_error,forget_loss,n_failed";

pub fn heatmap_csv(cells: &[HeatmapCell]) -> String {
    let mut out = format!("{HEATMAP_CSV_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            format_sig(c.signal_norm, 12),
            c.d,
            format_sig(c.snr, 12),
            format_sig(c.train_loss, 12),
            format_sig(c.test_error, 12),
            format_sig(c.forget_loss, 12),
            c.n_failed
        );
    }
    out
}

/// Settings of the coherence-versus-SNR curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceCurveSpec {
    pub snr_list: Vec<f64>,
    pub d: usize,
    pub n_retain: usize,
    pub n_forget: usize,
    pub noise_sigma: f64,
    pub repeats: usize,
    pub master_seed: u64,
    pub train: TrainOptions,
    /// Unlearning rate, forget weight and batch that set `C'_r`, `C'_f`.
    pub eta: f64,
    pub alpha: f64,
    pub batch: usize,
}

impl Default for CoherenceCurveSpec {
    fn default() -> Self {
        Self {
            snr_list: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            d: 100,
            n_retain: 10,
            n_forget: 10,
            noise_sigma: 1.0,
            repeats: 20,
            master_seed: 0,
            train: TrainOptions::default(),
            eta: 0.1,
            alpha: 0.3,
            batch: 5,
        }
    }
}

/// Means over the non-degenerate repeats at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceCurvePoint {
    pub snr: f64,
    pub lambda_max_s: f64,
    pub max_pair_lambda: f64,
    pub ratio: f64,
    /// Repeats skipped because every Hessian vanished or training failed.
    pub n_skipped: usize,
}

fn curve_repeat(spec: &CoherenceCurveSpec, config: &UnlearnConfig, snr: f64, seed: u64) -> Result<Option<[f64; 3]>> {
    let mut rng = rng_from_seed(seed);
    let mu_norm = snr * spec.noise_sigma * (spec.d as f64).sqrt();
    let n = spec.n_retain + spec.n_forget;
    let ds = generate_dataset(n, spec.d, mu_norm, spec.noise_sigma, &mut rng)?;
    let trained = match train_full_batch(&ds, &spec.train, &mut rng) {
        Ok(t) => t,
        Err(Error::TrainingDiverged { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let factors = ds
        .samples
        .iter()
        .map(|s| Ok(SampleHessian::from(sample_hessian(&trained.model, s)?.to_rank_one()?)))
        .collect::<Result<Vec<_>>>()?;
    let (retain, forget) = factors.split_at(spec.n_retain);
    let ens = HessianEnsemble::new(trained.model.params().len(), retain.to_vec(), forget.to_vec())?;
    match mix_coherence(&ens, config) {
        Ok(r) => Ok(Some([r.lambda_max_s, r.max_pair_lambda, r.sigma])),
        Err(Error::DegenerateEnsemble) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains on `n_retain + n_forget` samples per repeat (the first `n_retain`
/// form the retain set) and measures the coherence of the per-sample
/// Hessians at the trained weights. Repeat `r` at SNR index `i` is seeded
/// with `derive_seed(derive_seed(master_seed, i), r)`.
pub fn coherence_ratio_curve(spec: &CoherenceCurveSpec) -> Result<Vec<CoherenceCurvePoint>> {
    if spec.snr_list.is_empty() || spec.repeats == 0 {
        return Err(Error::InvalidConfig(
            "curve needs a nonempty SNR list and repeats >= 1".into(),
        ));
    }
    let config = UnlearnConfig::new(spec.eta, spec.alpha, spec.batch, spec.n_retain, spec.n_forget)?;
    let tasks: Vec<(usize, usize)> = (0..spec.snr_list.len())
        .flat_map(|i| (0..spec.repeats).map(move |r| (i, r)))
        .collect();
    let results = tasks
        .par_iter()
        .map(|&(i, r)| {
            curve_repeat(
                spec,
                &config,
                spec.snr_list[i],
                derive_seed(derive_seed(spec.master_seed, i as u64), r as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(spec
        .snr_list
        .iter()
        .enumerate()
        .map(|(i, &snr)| {
            let ok: Vec<[f64; 3]> = results[i * spec.repeats..(i + 1) * spec.repeats]
                .iter()
                .flatten()
                .copied()
                .collect();
            let mean = |k: usize| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|v| v[k]).sum::<f64>() / ok.len() as f64
                }
            };
            CoherenceCurvePoint {
                snr,
                lambda_max_s: mean(0),
                max_pair_lambda: mean(1),
                ratio: mean(2),
                n_skipped: spec.repeats - ok.len(),
            }
        })
        .collect())
}

pub const COHERENCE_CSV_HEADER: &str = "snr,lambda_max_S,max_pair_lambda,ratio";

pub fn coherence_curve_csv(points: &[CoherenceCurvePoint]) -> String {
    let mut out = format!("{COHERENCE_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            format_sig(p.snr, 12),
            format_sig(p.lambda_max_s, 12),
            format_sig(p.max_pair_lambda, 12),
            format_sig(p.ratio, 12)
        );
    }
    out
}

/// Average ranks, 1-based; ties share the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two points or constant
/// input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
