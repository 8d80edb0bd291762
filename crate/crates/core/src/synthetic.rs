//! Explicit Hessian ensembles with known spectra and coherence.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::coherence::{coefficients, UnlearnConfig};
use crate::ensemble::{HessianEnsemble, SampleHessian};
use crate::error::{shape_err, Error, Result};
use crate::matker::RankOneFactor;

/// Rank-one family with `q` aligned samples per set.
///
/// Each set has `n` samples: the first `q` are `m e_1 e_1^T`, sample
/// `i >= q` is `m e_{i-q+1} e_{i-q+1}^T` (0-based axes), with `m = 2n/q`.
/// The set mean then has top eigenvalue exactly `q m / n = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QConstructionSpec {
    pub n: usize,
    pub q: usize,
    /// Ambient dimension; `None` means `n - q + 2`.
    pub dim: Option<usize>,
}

impl QConstructionSpec {
    pub fn new(n: usize, q: usize) -> Self {
        Self { n, q, dim: None }
    }

    pub fn m(&self) -> f64 {
        2.0 * self.n as f64 / self.q as f64
    }

    pub fn min_dim(&self) -> usize {
        self.n - self.q + 1
    }

    pub fn resolved_dim(&self) -> usize {
        self.dim.unwrap_or(self.n - self.q + 2)
    }
}

pub fn build_q_construction(spec: &QConstructionSpec) -> Result<HessianEnsemble> {
    if spec.q == 0 || spec.q > spec.n {
        return Err(Error::InvalidConfig(format!(
            "q must lie in [1, n={}], got {}",
            spec.n, spec.q
        )));
    }
    let dim = spec.resolved_dim();
    if dim < spec.min_dim() {
        return Err(shape_err(format!("dim >= {}", spec.min_dim()), dim));
    }
    let m = spec.m();
    let set = (0..spec.n)
        .map(|i| {
            let axis = if i < spec.q { 0 } else { i - spec.q + 1 };
            RankOneFactor::axis(dim, axis, m).map(SampleHessian::from)
        })
        .collect::<Result<Vec<_>>>()?;
    HessianEnsemble::new(dim, set.clone(), set)
}

/// Target of the matching construction: an ensemble whose mix-Hessian has
/// top eigenvalue `lambda1_d_target` and whose coherence is `sigma_target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingSpec {
    pub sigma_target: f64,
    pub lambda1_d_target: f64,
    pub config: UnlearnConfig,
    pub dim: usize,
}

/// Tolerance on the integrality of `sigma / n_f`.
pub const INTEGRALITY_TOL: f64 = 1e-9;

impl MatchingSpec {
    /// Number of aligned retain samples, `sigma / n_f`.
    pub fn aligned_count(&self) -> Result<usize> {
        let nf = self.config.n_forget;
        if nf == 0 {
            return Err(Error::EmptyForgetSet);
        }
        let ratio = self.sigma_target / nf as f64;
        let rounded = ratio.round();
        if !ratio.is_finite() || (ratio - rounded).abs() > INTEGRALITY_TOL {
            return Err(Error::InfeasibleSpec(format!("sigma/n_f = {ratio} is not an integer")));
        }
        let count = rounded as usize;
        if count == 0 || count > self.config.n_retain {
            return Err(Error::InfeasibleSpec(format!(
                "sigma/n_f = {count} must lie in [1, n_r={}]",
                self.config.n_retain
            )));
        }
        Ok(count)
    }
}

/// Retain samples `0..count` get `m e_1 e_1^T` with
/// `m = lambda1 n_r / (C'_r count)`; every other Hessian is zero.
pub fn build_matching_construction(spec: &MatchingSpec) -> Result<HessianEnsemble> {
    spec.config.validate()?;
    if !(spec.lambda1_d_target > 0.0 && spec.lambda1_d_target.is_finite()) {
        return Err(Error::InfeasibleSpec(format!(
            "target eigenvalue must be positive, got {}",
            spec.lambda1_d_target
        )));
    }
    if spec.dim == 0 {
        return Err(shape_err("dim >= 1", 0));
    }
    let count = spec.aligned_count()?;
    let c = coefficients(&spec.config)?;
    if c.cp_r <= 0.0 {
        return Err(Error::NoStochasticity);
    }
    let m = spec.lambda1_d_target * spec.config.n_retain as f64 / (c.cp_r * count as f64);
    let retain = (0..spec.config.n_retain)
        .map(|i| RankOneFactor::axis(spec.dim, 0, if i < count { m } else { 0.0 }).map(SampleHessian::from))
        .collect::<Result<Vec<_>>>()?;
    let forget = (0..spec.config.n_forget)
        .map(|_| RankOneFactor::axis(spec.dim, 0, 0.0).map(SampleHessian::from))
        .collect::<Result<Vec<_>>>()?;
    HessianEnsemble::new(spec.dim, retain, forget)
}

/// Rank-one Hessians `w v v^T` with standard normal `v` and `w` uniform in
/// `[w_lo, w_hi)`. Intended for property tests.
pub fn random_rank_one_ensemble<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    n_retain: usize,
    n_forget: usize,
    (w_lo, w_hi): (f64, f64),
) -> Result<HessianEnsemble> {
    let mut draw = || -> Result<SampleHessian> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let w = if w_hi > w_lo {
            rng.random_range(w_lo..w_hi)
        } else {
            w_lo
        };
        Ok(RankOneFactor::new(v, w)?.into())
    };
    let retain = (0..n_retain).map(|_| draw()).collect::<Result<Vec<_>>>()?;
    let forget = (0..n_forget).map(|_| draw()).collect::<Result<Vec<_>>>()?;
    HessianEnsemble::new(dim, retain, forget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::{mix_coherence, mix_coherence_with, mix_hessian, CoherenceOptions, CoherencePath};
    use crate::matker;
    use crate::stability::{convergence_threshold, full_hessians, ConvergenceForm};

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    fn fig_config(b: usize) -> UnlearnConfig {
        UnlearnConfig::new(0.5, 0.1, b, 50, 50).unwrap()
    }

    #[test]
    fn q_construction_eigenvalues() {
        let e = build_q_construction(&QConstructionSpec::new(50, 25)).unwrap();
        assert_eq!(e.dim(), 27);
        let (hr, hf) = full_hessians(&e).unwrap();
        assert!(close(matker::lambda_max(&hr).unwrap(), 2.0, 1e-14));
        assert!(close(matker::lambda_max(&hf).unwrap(), 2.0, 1e-14));
        let d = mix_hessian(&e, &fig_config(10)).unwrap();
        assert!(close(matker::lambda_max(&d).unwrap(), 2.0, 1e-14));
        for n in [3, 10, 50] {
            for q in 1..=n {
                let e = build_q_construction(&QConstructionSpec::new(n, q)).unwrap();
                let r = mix_coherence(&e, &UnlearnConfig::new(0.5, 0.1, 1, n, n).unwrap()).unwrap();
                assert!(close(r.lambda_max_d, 2.0, 1e-12), "n={n} q={q}");
            }
        }
    }

    #[test]
    fn q_construction_shapes() {
        let e = build_q_construction(&QConstructionSpec::new(4, 1)).unwrap();
        assert_eq!(e.dim(), 5);
        let axes: Vec<usize> = e
            .retain()
            .iter()
            .map(|h| h.as_rank_one().unwrap().vector.iter().position(|&x| x == 1.0).unwrap())
            .collect();
        assert_eq!(axes, vec![0, 1, 2, 3]);
        assert_eq!(e.retain(), e.forget());

        let all = build_q_construction(&QConstructionSpec::new(6, 6)).unwrap();
        for h in all.retain() {
            let f = h.as_rank_one().unwrap();
            assert_eq!(f.weight, 2.0);
            assert_eq!(f.vector[0], 1.0);
        }
        let tight = QConstructionSpec {
            n: 6,
            q: 2,
            dim: Some(5),
        };
        assert!(build_q_construction(&tight).is_ok());
        let small = QConstructionSpec { dim: Some(4), ..tight };
        assert!(matches!(build_q_construction(&small), Err(Error::Shape { .. })));
    }

    #[test]
    fn q_construction_sigma_monotone() {
        let cfg = fig_config(10);
        let sigmas: Vec<f64> = [1, 2, 5, 10, 25, 50]
            .iter()
            .map(|&q| {
                mix_coherence(&build_q_construction(&QConstructionSpec::new(50, q)).unwrap(), &cfg)
                    .unwrap()
                    .sigma
            })
            .collect();
        for w in sigmas.windows(2) {
            assert!(w[0] <= w[1] * (1.0 + 1e-12), "{sigmas:?}");
        }
        // Perfect alignment: every pair Hessian equals 2 e1 e1^T, S is all
        // equal entries, sigma is the pair count.
        assert!(close(sigmas[5], 2500.0, 1e-10));
    }

    #[test]
    fn q_construction_sigma_values() {
        // Closed form for C'_r = 0.9 computed by hand from the block
        // structure of S at n = 50.
        let want = [
            (1, 79.13),
            (2, 102.42),
            (5, 251.39),
            (10, 501.73),
            (25, 1252.18),
            (50, 2500.0),
        ];
        for (q, s) in want {
            let e = build_q_construction(&QConstructionSpec::new(50, q)).unwrap();
            let r = mix_coherence(&e, &fig_config(10)).unwrap();
            assert!((r.sigma - s).abs() < 0.01, "q={q}: {}", r.sigma);
        }
    }

    #[test]
    fn q_construction_paths_agree() {
        let e = build_q_construction(&QConstructionSpec::new(8, 3)).unwrap();
        let cfg = UnlearnConfig::new(0.5, 0.1, 2, 8, 8).unwrap();
        let dense = mix_coherence_with(
            &e,
            &cfg,
            &CoherenceOptions {
                path: CoherencePath::Dense,
                ..Default::default()
            },
        )
        .unwrap();
        let fact = mix_coherence(&e, &cfg).unwrap();
        assert!(close(dense.sigma, fact.sigma, 1e-9));
        assert!(close(dense.lambda_max_d, fact.lambda_max_d, 1e-12));
    }

    #[test]
    fn matching_hits_targets() {
        let cfg = UnlearnConfig::new(0.5, 0.1, 10, 50, 50).unwrap();
        for (sigma, lam) in [(100.0, 0.7), (250.0, 1.3), (2500.0, 0.2), (50.0, 3.0)] {
            let spec = MatchingSpec {
                sigma_target: sigma,
                lambda1_d_target: lam,
                config: cfg,
                dim: 2,
            };
            let e = build_matching_construction(&spec).unwrap();
            let r = mix_coherence(&e, &cfg).unwrap();
            assert!(close(r.lambda_max_d, lam, 1e-9));
            assert!(close(r.sigma, sigma, 1e-9));
        }
    }

    #[test]
    fn matching_rejects_infeasible() {
        let cfg = UnlearnConfig::new(0.5, 0.1, 10, 50, 50).unwrap();
        let mut spec = MatchingSpec {
            sigma_target: 75.0,
            lambda1_d_target: 1.0,
            config: cfg,
            dim: 1,
        };
        assert!(matches!(
            build_matching_construction(&spec),
            Err(Error::InfeasibleSpec(_))
        ));
        spec.sigma_target = 100.0 + 1e-6;
        assert!(matches!(
            build_matching_construction(&spec),
            Err(Error::InfeasibleSpec(_))
        ));
        spec.sigma_target = 100.0 + 1e-11;
        assert!(build_matching_construction(&spec).is_ok());
        spec.sigma_target = 50.0 * 51.0;
        assert!(matches!(
            build_matching_construction(&spec),
            Err(Error::InfeasibleSpec(_))
        ));
        spec.config = UnlearnConfig::new(0.5, 0.1, 50, 50, 50).unwrap();
        spec.sigma_target = 100.0;
        assert_eq!(build_matching_construction(&spec).unwrap_err(), Error::NoStochasticity);
    }

    #[test]
    fn matching_mix_hessians_commute() {
        let cfg = UnlearnConfig::new(0.5, 0.3, 5, 20, 10).unwrap();
        let spec = MatchingSpec {
            sigma_target: 30.0,
            lambda1_d_target: convergence_threshold(&cfg, 30.0, ConvergenceForm::Proof).unwrap() * 0.5,
            config: cfg,
            dim: 3,
        };
        let e = build_matching_construction(&spec).unwrap();
        let dense: Vec<_> = e.retain().iter().chain(e.forget()).map(|h| h.densify()).collect();
        for a in &dense {
            for b in &dense {
                assert!(a.commutator(b).unwrap().norm() <= 1e-12);
            }
        }
    }
}
