//! Monte-Carlo simulation of the linearized unlearning dynamics.
//!
//! Each step draws independent Bernoulli masks with inclusion probability
//! `B/n` per set and applies
//! `w <- w - eta [(1-alpha)/B sum_{r in mask} H_r w - alpha/B sum_{f in mask} H_f w]`.
//! The `1/B` normalization stays fixed even when a mask comes up empty.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::coherence::{mix_coherence, UnlearnConfig};
use crate::ensemble::HessianEnsemble;
use crate::error::{shape_err, Error, Result};
use crate::seed::{derive_seed, format_sig, rng_from_seed, SimRng};
use crate::stability::{
    convergence_threshold, divergence_threshold, sigma_at_convergence, sigma_at_divergence, ConvergenceForm,
};
use crate::synthetic::{build_q_construction, QConstructionSpec};

/// `n` independent draws, each true with probability `batch / n`.
pub fn bernoulli_mask<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Result<Vec<bool>> {
    if batch == 0 || batch > n {
        return Err(Error::InvalidBatch { batch, n });
    }
    let p = batch as f64 / n as f64;
    Ok((0..n).map(|_| rng.random_bool(p)).collect())
}

/// One unlearning step on `w` with the given masks.
pub fn unlearn_step(
    w: &[f64],
    ensemble: &HessianEnsemble,
    (retain_mask, forget_mask): (&[bool], &[bool]),
    config: &UnlearnConfig,
) -> Result<Vec<f64>> {
    let mut out = w.to_vec();
    unlearn_step_into(w, ensemble, (retain_mask, forget_mask), config, &mut out)?;
    Ok(out)
}

fn unlearn_step_into(
    w: &[f64],
    ensemble: &HessianEnsemble,
    (retain_mask, forget_mask): (&[bool], &[bool]),
    config: &UnlearnConfig,
    out: &mut [f64],
) -> Result<()> {
    if w.len() != ensemble.dim() {
        return Err(shape_err(ensemble.dim(), w.len()));
    }
    if retain_mask.len() != ensemble.n_retain() {
        return Err(shape_err(ensemble.n_retain(), retain_mask.len()));
    }
    if forget_mask.len() != ensemble.n_forget() {
        return Err(shape_err(ensemble.n_forget(), forget_mask.len()));
    }
    out.copy_from_slice(w);
    let b = config.batch as f64;
    let descent = -config.eta * (1.0 - config.alpha) / b;
    let ascent = config.eta * config.alpha / b;
    for (h, _) in ensemble.retain().iter().zip(retain_mask).filter(|(_, &m)| m) {
        h.apply_add(descent, w, out)?;
    }
    if ascent != 0.0 {
        for (h, _) in ensemble.forget().iter().zip(forget_mask).filter(|(_, &m)| m) {
            h.apply_add(ascent, w, out)?;
        }
    }
    Ok(())
}

/// Draws `w_0 ~ N(0, I)`.
fn initial_point(dim: usize, rng: &mut SimRng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fresh masks for both sets. An empty forget set yields an empty mask.
fn draw_masks(
    ensemble: &HessianEnsemble,
    config: &UnlearnConfig,
    rng: &mut SimRng,
    retain: &mut Vec<bool>,
    forget: &mut Vec<bool>,
) -> Result<()> {
    *retain = bernoulli_mask(ensemble.n_retain(), config.batch, rng)?;
    *forget = if ensemble.n_forget() == 0 {
        Vec::new()
    } else {
        bernoulli_mask(ensemble.n_forget(), config.batch, rng)?
    };
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryOptions {
    pub steps: usize,
    /// `||w_steps|| / ||w_0||` at or above this marks divergence.
    pub divergence_ratio: f64,
    /// Stop once the ratio is exceeded, padding the remaining norms.
    pub early_exit: bool,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            divergence_ratio: 1000.0,
            early_exit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `||w_k||` for `k = 0..=steps`; may saturate to infinity.
    pub norms: Vec<f64>,
    /// `ln ||w_k||`, finite even where `norms` overflows.
    pub log_norms: Vec<f64>,
    pub diverged: bool,
    pub seed: u64,
}

impl Trajectory {
    /// `ln(||w_steps|| / ||w_0||)`.
    pub fn log_ratio(&self) -> f64 {
        self.log_norms.last().expect("nonempty") - self.log_norms[0]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Simulates one trajectory from a standard normal start.
///
/// The iterate is renormalized after every step and its scale tracked in log
/// space, so large growth never overflows. A non-finite iterate counts as
/// diverged at that step.
pub fn run_trajectory(
    ensemble: &HessianEnsemble,
    config: &UnlearnConfig,
    opts: &TrajectoryOptions,
    seed: u64,
) -> Result<Trajectory> {
    config.check_matches(ensemble)?;
    config.validate()?;
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut w = initial_point(ensemble.dim(), &mut rng);
    let n0 = norm(&w);
    let mut log_norms = Vec::with_capacity(opts.steps + 1);
    log_norms.push(n0.ln());
    if n0 > 0.0 {
        w.iter_mut().for_each(|x| *x /= n0);
    }
    let threshold = opts.divergence_ratio.ln();
    let (mut rm, mut fm) = (Vec::new(), Vec::new());
    let mut next = vec![0.0; w.len()];
    let mut diverged = false;
    let mut log_scale = log_norms[0];
    for _ in 0..opts.steps {
        draw_masks(ensemble, config, &mut rng, &mut rm, &mut fm)?;
        unlearn_step_into(&w, ensemble, (&rm, &fm), config, &mut next)?;
        let n = norm(&next);
        if !n.is_finite() {
            diverged = true;
            log_scale = f64::INFINITY;
            log_norms.push(log_scale);
            break;
        }
        log_scale += n.ln();
        log_norms.push(log_scale);
        if n == 0.0 {
            break;
        }
        for (a, b) in w.iter_mut().zip(&next) {
            *a = b / n;
        }
        if opts.early_exit && log_scale - log_norms[0] >= threshold {
            break;
        }
    }
    let last = *log_norms.last().expect("nonempty");
    log_norms.resize(opts.steps + 1, last);
    diverged |= last - log_norms[0] >= threshold;
    Ok(Trajectory {
        norms: log_norms.iter().map(|l| l.exp()).collect(),
        log_norms,
        diverged,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Diverge,
    Converge,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Diverge => "DIVERGE",
            Outcome::Converge => "CONVERGE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MajorityResult {
    pub n_repeats: usize,
    pub n_diverged: usize,
    pub outcome: Outcome,
}

/// Majority vote over `repeats` trajectories; exactly half counts as
/// divergence. Repeat `i` uses `derive_seed(seed, i)`.
pub fn majority_outcome(
    ensemble: &HessianEnsemble,
    config: &UnlearnConfig,
    opts: &TrajectoryOptions,
    repeats: usize,
    seed: u64,
) -> Result<MajorityResult> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let flags = (0..repeats)
        .into_par_iter()
        .map(|i| run_trajectory(ensemble, config, opts, derive_seed(seed, i as u64)).map(|t| t.diverged))
        .collect::<Result<Vec<bool>>>()?;
    let n_diverged = flags.iter().filter(|&&d| d).count();
    Ok(MajorityResult {
        n_repeats: repeats,
        n_diverged,
        outcome: vote(n_diverged, repeats),
    })
}

fn vote(n_diverged: usize, repeats: usize) -> Outcome {
    if 2 * n_diverged >= repeats {
        Outcome::Diverge
    } else {
        Outcome::Converge
    }
}

/// Grid and dynamics settings for [`boundary_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub q_list: Vec<usize>,
    pub b_list: Vec<usize>,
    pub eta: f64,
    pub alpha: f64,
    pub n_retain: usize,
    pub n_forget: usize,
    pub trajectory: TrajectoryOptions,
    pub repeats: usize,
    pub master_seed: u64,
}

impl SweepSpec {
    pub fn config(&self, batch: usize) -> Result<UnlearnConfig> {
        UnlearnConfig::new(self.eta, self.alpha, batch, self.n_retain, self.n_forget)
    }

    /// `(q, b)` in cell order: `q` outer, `b` inner.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.q_list
            .iter()
            .flat_map(|&q| self.b_list.iter().map(move |&b| (q, b)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub q: usize,
    pub batch: usize,
    /// Undefined when full-batch sampling removes all minibatch noise.
    pub sigma: Option<f64>,
    pub lambda_max_d: Option<f64>,
    pub thr_div: Option<f64>,
    pub thr_conv_statement: Option<f64>,
    pub thr_conv_proof: Option<f64>,
    pub n_repeats: usize,
    pub n_diverged: usize,
    pub outcome: Outcome,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedThreshold { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Simulates one grid cell with the given seed.
pub fn sweep_cell(spec: &SweepSpec, q: usize, batch: usize, seed: u64) -> Result<SweepCell> {
    if spec.n_retain != spec.n_forget {
        return Err(Error::InvalidConfig(format!(
            "the Q-construction needs n_retain == n_forget, got {} and {}",
            spec.n_retain, spec.n_forget
        )));
    }
    let config = spec.config(batch)?;
    let ensemble = build_q_construction(&QConstructionSpec::new(spec.n_retain, q))?;
    let coh = match mix_coherence(&ensemble, &config) {
        Ok(c) => Some(c),
        Err(Error::NoStochasticity) => None,
        Err(e) => return Err(e),
    };
    let sigma = coh.as_ref().map(|c| c.sigma);
    let thr = |f: &dyn Fn(f64) -> Result<f64>| -> Result<Option<f64>> {
        match sigma {
            Some(s) => defined(f(s)),
            None => Ok(None),
        }
    };
    let majority = majority_outcome(&ensemble, &config, &spec.trajectory, spec.repeats, seed)?;
    Ok(SweepCell {
        q,
        batch,
        sigma,
        lambda_max_d: coh.as_ref().map(|c| c.lambda_max_d),
        thr_div: thr(&|s| divergence_threshold(&config, s))?,
        thr_conv_statement: thr(&|s| convergence_threshold(&config, s, ConvergenceForm::Statement))?,
        thr_conv_proof: thr(&|s| convergence_threshold(&config, s, ConvergenceForm::Proof))?,
        n_repeats: majority.n_repeats,
        n_diverged: majority.n_diverged,
        outcome: majority.outcome,
    })
}

/// Runs every `(q, b)` cell of the grid. Cell `i` (in [`SweepSpec::cells`]
/// order) is seeded with `derive_seed(master_seed, i)`, so the result does
/// not depend on the number of worker threads.
pub fn boundary_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    spec.cells()
        .into_par_iter()
        .enumerate()
        .map(|(i, (q, b))| sweep_cell(spec, q, b, derive_seed(spec.master_seed, i as u64)))
        .collect()
}

pub const SWEEP_CSV_HEADER: &str =
    "q,batch,sigma,lambda_max_D,thr_div,thr_conv_statement,thr_conv_proof,n_repeats,n_diverged,outcome";

/// CSV rows with 12 significant digits; undefined values are blank.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let num = |v: Option<f64>| v.map(|x| format_sig(x, 12)).unwrap_or_default();
    let mut out = String::new();
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            c.q,
            c.batch,
            num(c.sigma),
            num(c.lambda_max_d),
            num(c.thr_div),
            num(c.thr_conv_statement),
            num(c.thr_conv_proof),
            c.n_repeats,
            c.n_diverged,
            c.outcome.name()
        );
    }
    out
}

/// Coherence values at which the thresholds equal a given eigenvalue.
#[derive(Clone, Copy)]
pub struct SigmaBoundaries {
    pub divergence: fn(&UnlearnConfig, f64) -> Result<f64>,
    pub convergence: fn(&UnlearnConfig, f64, ConvergenceForm) -> Result<f64>,
}

impl Default for SigmaBoundaries {
    fn default() -> Self {
        Self {
            divergence: sigma_at_divergence,
            convergence: sigma_at_convergence,
        }
    }
}

/// One batch size of the threshold curves, in coherence units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub batch: usize,
    pub sigma_div: f64,
    pub sigma_conv_statement: f64,
    pub sigma_conv_proof: f64,
}

/// Samples the threshold curves at eigenvalue `lambda` over `b_list`,
/// skipping batch sizes where they are undefined.
pub fn threshold_curves(spec: &SweepSpec, lambda: f64, boundaries: &SigmaBoundaries) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for &b in &spec.b_list {
        let cfg = spec.config(b)?;
        let div = match defined((boundaries.divergence)(&cfg, lambda))? {
            Some(v) => v,
            None => continue,
        };
        out.push(CurvePoint {
            batch: b,
            sigma_div: div,
            sigma_conv_statement: (boundaries.convergence)(&cfg, lambda, ConvergenceForm::Statement)?,
            sigma_conv_proof: (boundaries.convergence)(&cfg, lambda, ConvergenceForm::Proof)?,
        });
    }
    Ok(out)
}

/// Bracketing verdict for one batch size and convergence form.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketRow {
    pub batch: usize,
    pub form: ConvergenceForm,
    /// Band `[lo, hi]` spanned by the two curves.
    pub lo: f64,
    pub hi: f64,
    /// Largest coherence with a diverging majority.
    pub max_diverged_sigma: Option<f64>,
    /// Smallest coherence with a converging majority.
    pub min_converged_sigma: Option<f64>,
    /// Cells on the wrong side of the band: `(q, sigma, outcome)`.
    pub violations: Vec<(usize, f64, Outcome)>,
}

impl BracketRow {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketReport {
    pub rows: Vec<BracketRow>,
}

impl BracketReport {
    pub fn form_passes(&self, form: ConvergenceForm) -> bool {
        self.rows.iter().filter(|r| r.form == form).all(BracketRow::passed)
    }

    /// True when some convergence form brackets every checked batch size.
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && ConvergenceForm::ALL.iter().any(|&f| self.form_passes(f))
    }
}

/// Checks that the empirical Diverge/Converge transition lies between the
/// divergence and convergence curves for every batch size `>= min_batch`.
///
/// Small coherence destabilizes, so a cell below the band must diverge and a
/// cell above it must converge; cells inside the band may go either way.
pub fn check_bracketing(
    cells: &[SweepCell],
    spec: &SweepSpec,
    min_batch: usize,
    boundaries: &SigmaBoundaries,
) -> Result<BracketReport> {
    let mut rows = Vec::new();
    for &b in spec.b_list.iter().filter(|&&b| b >= min_batch) {
        let cfg = spec.config(b)?;
        let in_b: Vec<(&SweepCell, f64, f64)> = cells
            .iter()
            .filter(|c| c.batch == b)
            .filter_map(|c| Some((c, c.sigma?, c.lambda_max_d?)))
            .collect();
        if in_b.is_empty() {
            continue;
        }
        for form in ConvergenceForm::ALL {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut violations = Vec::new();
            for (c, sigma, lambda) in &in_b {
                let (sigma, lambda) = (*sigma, *lambda);
                let div = (boundaries.divergence)(&cfg, lambda)?;
                let conv = (boundaries.convergence)(&cfg, lambda, form)?;
                let (l, h) = (div.min(conv), div.max(conv));
                lo = lo.min(l);
                hi = hi.max(h);
                let wrong = match c.outcome {
                    Outcome::Converge => sigma < l,
                    Outcome::Diverge => sigma > h,
                };
                if wrong {
                    violations.push((c.q, sigma, c.outcome));
                }
            }
            let pick = |o: Outcome| in_b.iter().filter(move |(c, _, _)| c.outcome == o).map(|(_, s, _)| *s);
            rows.push(BracketRow {
                batch: b,
                form,
                lo,
                hi,
                max_diverged_sigma: pick(Outcome::Diverge).reduce(f64::max),
                min_converged_sigma: pick(Outcome::Converge).reduce(f64::min),
                violations,
            });
        }
    }
    Ok(BracketReport { rows })
}

/// Empirical mean of `||w_k||^2` and its standard error at each `k` in `ks`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub k: usize,
    pub mean: f64,
    pub std_err: f64,
}

/// Estimates `E||w_k||^2` from `n_traj` unnormalized trajectories;
/// trajectory `i` uses `derive_seed(seed, i)`.
pub fn second_moment_mc(
    ensemble: &HessianEnsemble,
    config: &UnlearnConfig,
    ks: &[usize],
    n_traj: usize,
    seed: u64,
) -> Result<Vec<MomentEstimate>> {
    config.check_matches(ensemble)?;
    config.validate()?;
    if n_traj < 2 {
        return Err(Error::InvalidConfig("need at least two trajectories".into()));
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let samples = (0..n_traj)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let mut w = initial_point(ensemble.dim(), &mut rng);
            let mut next = vec![0.0; w.len()];
            let (mut rm, mut fm) = (Vec::new(), Vec::new());
            let mut sq = Vec::with_capacity(k_max + 1);
            sq.push(w.iter().map(|x| x * x).sum());
            for _ in 0..k_max {
                draw_masks(ensemble, config, &mut rng, &mut rm, &mut fm)?;
                unlearn_step_into(&w, ensemble, (&rm, &fm), config, &mut next)?;
                std::mem::swap(&mut w, &mut next);
                sq.push(w.iter().map(|x| x * x).sum());
            }
            Ok(sq)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_traj as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            MomentEstimate {
                k,
                mean,
                std_err: (var / n).sqrt(),
            }
        })
        .collect())
}
