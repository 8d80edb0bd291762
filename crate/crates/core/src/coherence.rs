//! Hessian coherence for single sets and for retain/forget mixtures.
//!
//! The minibatch noise weights `C_r` and `C_f` split every retain/forget pair
//! `(r, f)` into a mix-Hessian `D_rf = C'_r H_r + C'_f H_f`. The coherence
//! matrix collects `||D_p^{1/2} D_q^{1/2}||_F` over all pairs, indexed
//! row-major with the retain index outer: `p(r, f) = r * n_f + f`. The
//! coherence `sigma` is its top eigenvalue divided by the largest pair
//! eigenvalue `max_p lambda_max(D_p)`.
//!
//! For PSD `A`, `B` the identity `||A^{1/2} B^{1/2}||_F^2 = Tr(A B)` lets the
//! factored path work entirely from a Gram matrix of the rank-one factors;
//! the dense path takes explicit square roots. Both are exposed so they can be
//! checked against each other.

use rayon::prelude::*;

use crate::ensemble::{HessianEnsemble, SampleHessian};
use crate::error::{Error, Result};
use crate::matker::{self, RankOneFactor, SymMatrix, DEFAULT_PSD_TOL};

/// Unlearning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlearnConfig {
    /// Learning rate.
    pub eta: f64,
    /// Weight of the forget-set ascent term, in `[0, 1]`.
    pub alpha: f64,
    /// Expected minibatch size `B` of each set.
    pub batch: usize,
    pub n_retain: usize,
    pub n_forget: usize,
}

impl UnlearnConfig {
    pub fn new(eta: f64, alpha: f64, batch: usize, n_retain: usize, n_forget: usize) -> Result<Self> {
        let cfg = Self {
            eta,
            alpha,
            batch,
            n_retain,
            n_forget,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.n_retain == 0 {
            return Err(Error::EmptyRetainSet);
        }
        if self.batch == 0 || self.batch > self.n_retain || (self.n_forget > 0 && self.batch > self.n_forget) {
            return Err(Error::InvalidBatch {
                batch: self.batch,
                n: if self.n_forget > 0 {
                    self.n_retain.min(self.n_forget)
                } else {
                    self.n_retain
                },
            });
        }
        Ok(())
    }

    /// Checks that the config describes `ensemble`.
    pub fn check_matches(&self, ensemble: &HessianEnsemble) -> Result<()> {
        if ensemble.n_retain() != self.n_retain || ensemble.n_forget() != self.n_forget {
            return Err(Error::InvalidConfig(format!(
                "config expects n_retain={} n_forget={}, ensemble has {} and {}",
                self.n_retain,
                self.n_forget,
                ensemble.n_retain(),
                ensemble.n_forget()
            )));
        }
        Ok(())
    }
}

/// Minibatch noise coefficients and their normalized square roots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub c_r: f64,
    pub c_f: f64,
    /// `sqrt(C_r) / (sqrt(C_r) + sqrt(C_f))`
    pub cp_r: f64,
    /// `1 - cp_r`
    pub cp_f: f64,
}

/// `C_r = eta^2 (1-alpha)^2 (1/n_r)(1/B - 1/n_r)` and the forget analogue;
/// `C_f = 0` when the forget set is empty.
pub fn coefficients(config: &UnlearnConfig) -> Result<Coefficients> {
    let (c_r, c_f) = noise_weights(config)?;
    let (sr, sf) = (c_r.sqrt(), c_f.sqrt());
    if sr + sf <= 0.0 {
        return Err(Error::NoStochasticity);
    }
    let cp_r = sr / (sr + sf);
    Ok(Coefficients {
        c_r,
        c_f,
        cp_r,
        cp_f: 1.0 - cp_r,
    })
}

/// `(C_r, C_f)` without the stochasticity check.
pub(crate) fn noise_weights(config: &UnlearnConfig) -> Result<(f64, f64)> {
    config.validate()?;
    let b = config.batch as f64;
    let nr = config.n_retain as f64;
    let eta2 = config.eta * config.eta;
    let c_r = eta2 * (1.0 - config.alpha).powi(2) / nr * (1.0 / b - 1.0 / nr);
    let c_f = if config.n_forget == 0 {
        0.0
    } else {
        let nf = config.n_forget as f64;
        eta2 * config.alpha.powi(2) / nf * (1.0 / b - 1.0 / nf)
    };
    Ok((c_r, c_f))
}

/// `D_rf = C'_r H_r + C'_f H_f`.
pub fn mix_hessian_pair(h_r: &SymMatrix, h_f: &SymMatrix, config: &UnlearnConfig) -> Result<SymMatrix> {
    let c = coefficients(config)?;
    let mut d = h_r.scaled(c.cp_r);
    d.add_scaled(c.cp_f, h_f)?;
    Ok(d)
}

/// Set means `(H_R, H_F)`; `H_F` is zero for an empty forget set.
pub fn set_means(ensemble: &HessianEnsemble) -> Result<(SymMatrix, SymMatrix)> {
    if ensemble.n_retain() == 0 {
        return Err(Error::EmptyRetainSet);
    }
    let mean = |set: &[SampleHessian]| -> Result<SymMatrix> {
        let mut acc = SymMatrix::zeros(ensemble.dim());
        if set.is_empty() {
            return Ok(acc);
        }
        let w = 1.0 / set.len() as f64;
        for h in set {
            match h {
                SampleHessian::Dense(m) => acc.add_scaled(w, m)?,
                SampleHessian::RankOne(f) => acc.add_outer(w * f.weight, &f.vector)?,
            }
        }
        Ok(acc)
    };
    Ok((mean(ensemble.retain())?, mean(ensemble.forget())?))
}

/// Mean of all pair mix-Hessians, `C'_r H_R + C'_f H_F`.
pub fn mix_hessian(ensemble: &HessianEnsemble, config: &UnlearnConfig) -> Result<SymMatrix> {
    if ensemble.n_forget() == 0 {
        return Err(Error::EmptyForgetSet);
    }
    let c = coefficients(config)?;
    let (h_r, h_f) = set_means(ensemble)?;
    let mut d = h_r.scaled(c.cp_r);
    d.add_scaled(c.cp_f, &h_f)?;
    Ok(d)
}

/// Which evaluation route the coherence computations take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoherencePath {
    /// Factored when every member is rank-one, dense otherwise.
    #[default]
    Auto,
    Dense,
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceOptions {
    /// Upper bound on `n_r * n_f`; the dense path caches one `d x d` square
    /// root per pair.
    pub max_pairs: usize,
    pub path: CoherencePath,
    pub psd_tol: f64,
}

impl Default for CoherenceOptions {
    fn default() -> Self {
        Self {
            max_pairs: 10_000,
            path: CoherencePath::Auto,
            psd_tol: DEFAULT_PSD_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceResult {
    /// Coherence matrix (pairs or samples).
    pub matrix_s: SymMatrix,
    pub sigma: f64,
    /// `lambda_max(S)`.
    pub lambda_max_s: f64,
    /// Largest eigenvalue among the individual (pair) Hessians.
    pub max_pair_lambda: f64,
    /// `lambda_max` of the mean (mix-)Hessian.
    pub lambda_max_d: f64,
}

fn finish(matrix_s: SymMatrix, max_pair_lambda: f64, lambda_max_d: f64) -> Result<CoherenceResult> {
    if !(max_pair_lambda > 0.0) {
        return Err(Error::DegenerateEnsemble);
    }
    let lambda_max_s = matker::lambda_max(&matrix_s)?;
    Ok(CoherenceResult {
        matrix_s,
        sigma: lambda_max_s / max_pair_lambda,
        lambda_max_s,
        max_pair_lambda,
        lambda_max_d,
    })
}

fn factors(set: &[SampleHessian]) -> Option<Vec<&RankOneFactor>> {
    set.iter().map(SampleHessian::as_rank_one).collect()
}

/// Single-set coherence: `S_ij = ||H_i^{1/2} H_j^{1/2}||_F`,
/// `sigma = lambda_max(S) / max_i lambda_max(H_i)`.
pub fn single_coherence(hessians: &[SampleHessian]) -> Result<CoherenceResult> {
    single_coherence_with(hessians, &CoherenceOptions::default())
}

pub fn single_coherence_with(hessians: &[SampleHessian], opts: &CoherenceOptions) -> Result<CoherenceResult> {
    let first = hessians.first().ok_or(Error::EmptyRetainSet)?;
    let dim = first.dim();
    let n = hessians.len();
    let ensemble = HessianEnsemble::new(dim, hessians.to_vec(), Vec::new())?;
    let (mean, _) = set_means(&ensemble)?;
    let lambda_max_d = matker::lambda_max(&mean)?;

    let use_factored = match opts.path {
        CoherencePath::Dense => false,
        CoherencePath::Factored | CoherencePath::Auto => factors(hessians).is_some(),
    };
    if opts.path == CoherencePath::Factored && !use_factored {
        return Err(Error::InvalidConfig("factored path needs rank-one Hessians".into()));
    }

    let (s, max_lambda) = if use_factored {
        let fs = factors(hessians).expect("checked");
        let s = SymMatrix::from_fn(n, |i, j| fs[i].frob_sqrt_product(fs[j]))?;
        let max_lambda = fs.iter().map(|f| f.eigenvalue()).fold(0.0, f64::max);
        (s, max_lambda)
    } else {
        let dense: Vec<SymMatrix> = hessians.iter().map(SampleHessian::densify).collect();
        let roots = dense
            .par_iter()
            .map(|h| matker::psd_sqrt(h, opts.psd_tol))
            .collect::<Result<Vec<_>>>()?;
        let entries = pairwise_entries(n, |i, j| matker::frob_product(&roots[i], &roots[j]))?;
        let s = SymMatrix::from_fn(n, |i, j| entries[i * n + j])?;
        let max_lambda = dense
            .iter()
            .map(matker::lambda_max)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        (s, max_lambda)
    };
    finish(s, max_lambda, lambda_max_d)
}

/// Fills the symmetric `n x n` table `f(i, j)` in parallel. Each entry is
/// computed independently, so the result does not depend on scheduling.
fn pairwise_entries(n: usize, f: impl Fn(usize, usize) -> Result<f64> + Sync) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| f(i, j)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let j = i + k;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// Unlearning coherence over all retain/forget pairs.
pub fn mix_coherence(ensemble: &HessianEnsemble, config: &UnlearnConfig) -> Result<CoherenceResult> {
    mix_coherence_with(ensemble, config, &CoherenceOptions::default())
}

pub fn mix_coherence_with(
    ensemble: &HessianEnsemble,
    config: &UnlearnConfig,
    opts: &CoherenceOptions,
) -> Result<CoherenceResult> {
    config.check_matches(ensemble)?;
    let (n_r, n_f) = (ensemble.n_retain(), ensemble.n_forget());
    if n_f == 0 {
        return Err(Error::EmptyForgetSet);
    }
    let pairs = n_r * n_f;
    if pairs > opts.max_pairs {
        return Err(Error::TooManyPairs {
            pairs,
            max_pairs: opts.max_pairs,
        });
    }
    let c = coefficients(config)?;

    let fr = factors(ensemble.retain());
    let ff = factors(ensemble.forget());
    let have_factors = fr.is_some() && ff.is_some();
    let use_factored = match opts.path {
        CoherencePath::Dense => false,
        CoherencePath::Factored | CoherencePath::Auto => have_factors,
    };
    if opts.path == CoherencePath::Factored && !use_factored {
        return Err(Error::InvalidConfig("factored path needs rank-one Hessians".into()));
    }

    if use_factored {
        let fr = fr.expect("checked");
        let ff = ff.expect("checked");
        let all: Vec<&RankOneFactor> = fr.iter().chain(&ff).copied().collect();
        let n = all.len();
        // Tr(H_a H_b) for every pair of samples, retain first.
        let gram = pairwise_entries(n, |a, b| Ok(all[a].trace_product(all[b])))?;
        let t = |a: usize, b: usize| gram[a * n + b];
        let (wr, wf) = (c.cp_r, c.cp_f);
        let entries = pairwise_entries(pairs, |p, q| {
            let (r, f) = (p / n_f, n_r + p % n_f);
            let (r2, f2) = (q / n_f, n_r + q % n_f);
            let tr = wr * wr * t(r, r2) + wr * wf * (t(r, f2) + t(f, r2)) + wf * wf * t(f, f2);
            Ok(tr.max(0.0).sqrt())
        })?;
        let s = SymMatrix::from_fn(pairs, |i, j| entries[i * pairs + j])?;
        let max_pair = (0..pairs)
            .into_par_iter()
            .map(|p| matker::lowrank_lambda_max(&[(wr, fr[p / n_f]), (wf, ff[p % n_f])]))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        // lambda_max(D) from the Gram matrix of all factors.
        let scaled: Vec<(f64, &RankOneFactor)> = fr
            .iter()
            .map(|f| (wr / n_r as f64, *f))
            .chain(ff.iter().map(|f| (wf / n_f as f64, *f)))
            .collect();
        let lambda_d = matker::lowrank_lambda_max(&scaled)?;
        finish(s, max_pair, lambda_d)
    } else {
        let retain: Vec<SymMatrix> = ensemble.retain().iter().map(SampleHessian::densify).collect();
        let forget: Vec<SymMatrix> = ensemble.forget().iter().map(SampleHessian::densify).collect();
        let mixes: Vec<SymMatrix> = (0..pairs)
            .map(|p| {
                let mut d = retain[p / n_f].scaled(c.cp_r);
                d.add_scaled(c.cp_f, &forget[p % n_f])?;
                Ok(d)
            })
            .collect::<Result<_>>()?;
        let roots = mixes
            .par_iter()
            .map(|d| matker::psd_sqrt(d, opts.psd_tol))
            .collect::<Result<Vec<_>>>()?;
        let entries = pairwise_entries(pairs, |p, q| matker::frob_product(&roots[p], &roots[q]))?;
        let s = SymMatrix::from_fn(pairs, |i, j| entries[i * pairs + j])?;
        let max_pair = mixes
            .par_iter()
            .map(matker::lambda_max)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let lambda_d = matker::lambda_max(&mix_hessian(ensemble, config)?)?;
        finish(s, max_pair, lambda_d)
    }
}
