//! Linear stability of the unlearning iteration.
//!
//! Around a minimum the update is `w_{k+1} = J_k w_k` with a random operator
//! whose mean is `J = I - eta (1-alpha) H_R + eta alpha H_F`. Minibatch noise
//! enters through the recurrence `N_k = C_f sum_f H_f N_{k-1} H_f +
//! C_r sum_r H_r N_{k-1} H_r` with `N_0 = I`, and the exact second moment
//! obeys `V_{k+1} = J V_k J + C_r sum_r H_r V_k H_r + C_f sum_f H_f V_k H_f`
//! with `E||w_k||^2 = Tr(V_k)` for `w_0 ~ N(0, I)`.

use std::fmt;
use std::str::FromStr;

use crate::coherence::{coefficients, noise_weights, set_means, UnlearnConfig};
use crate::ensemble::HessianEnsemble;
use crate::error::{Error, Result};
use crate::matker::{self, SymMatrix};
use crate::seed::format_sig;

/// Set-mean Hessians `(H_R, H_F)`; `H_F` is zero for an empty forget set.
pub fn full_hessians(ensemble: &HessianEnsemble) -> Result<(SymMatrix, SymMatrix)> {
    set_means(ensemble)
}

/// The mean update operator `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct JOperator {
    pub matrix: SymMatrix,
    pub eta: f64,
    pub alpha: f64,
    eigenvalues: Vec<f64>,
}

impl JOperator {
    pub fn new(ensemble: &HessianEnsemble, config: &UnlearnConfig) -> Result<Self> {
        config.validate()?;
        let (h_r, h_f) = full_hessians(ensemble)?;
        let mut j = SymMatrix::identity(ensemble.dim());
        j.add_scaled(-config.eta * (1.0 - config.alpha), &h_r)?;
        j.add_scaled(config.eta * config.alpha, &h_f)?;
        let eigenvalues = matker::sym_eig(&j)?.values;
        Ok(Self {
            matrix: j,
            eta: config.eta,
            alpha: config.alpha,
            eigenvalues,
        })
    }

    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, l| m.max(l.abs()))
    }

    /// `1 - max |lambda(J)|`; negative when `J` expands some direction.
    pub fn epsilon(&self) -> f64 {
        1.0 - self.spectral_radius()
    }

    /// `Tr(J^{2k})`.
    pub fn trace_even_power(&self, k: usize) -> f64 {
        self.eigenvalues.iter().map(|l| (l * l).powi(k as i32)).sum()
    }
}

/// Default number of `N_k` matrices kept by [`noise_recurrence`].
pub const DEFAULT_STORE_K: usize = 50;
/// Largest dimension for which matrices are kept by default.
pub const DEFAULT_STORE_MAX_DIM: usize = 64;

/// Traces of `N_0..=N_{k_max}`, plus the leading matrices when stored.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSequence {
    pub traces: Vec<f64>,
    /// `N_0..=N_j` for `j = min(k_max, store_limit)`; empty if storage is off.
    pub matrices: Vec<SymMatrix>,
}

impl NoiseSequence {
    pub fn dim(&self) -> f64 {
        self.traces[0]
    }
}

/// `out = C_r sum_r H_r X H_r + C_f sum_f H_f X H_f`, summed in index order.
fn noise_map(ensemble: &HessianEnsemble, (c_r, c_f): (f64, f64), x: &SymMatrix) -> Result<SymMatrix> {
    let mut out = SymMatrix::zeros(ensemble.dim());
    if c_r != 0.0 {
        for h in ensemble.retain() {
            h.add_congruence(c_r, x, &mut out)?;
        }
    }
    if c_f != 0.0 {
        for h in ensemble.forget() {
            h.add_congruence(c_f, x, &mut out)?;
        }
    }
    Ok(out)
}

fn check_psd(m: &SymMatrix) -> Result<()> {
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    // Cheap necessary condition; a full eigendecomposition per step would
    // dominate the recurrence.
    for i in 0..m.dim() {
        if m.get(i, i) < -1e-9 * scale {
            return Err(Error::NotPsd {
                eigenvalue: m.get(i, i),
                threshold: 1e-9 * scale,
            });
        }
    }
    Ok(())
}

/// Runs the noise recurrence up to `k_max`, storing matrices by default for
/// `k <= 50` when `d <= 64`.
pub fn noise_recurrence(ensemble: &HessianEnsemble, config: &UnlearnConfig, k_max: usize) -> Result<NoiseSequence> {
    let store = if ensemble.dim() <= DEFAULT_STORE_MAX_DIM {
        Some(DEFAULT_STORE_K)
    } else {
        None
    };
    noise_recurrence_with(ensemble, config, k_max, store)
}

pub fn noise_recurrence_with(
    ensemble: &HessianEnsemble,
    config: &UnlearnConfig,
    k_max: usize,
    store_limit: Option<usize>,
) -> Result<NoiseSequence> {
    config.check_matches(ensemble)?;
    coefficients(config)?;
    let c = noise_weights(config)?;
    let mut n = SymMatrix::identity(ensemble.dim());
    let mut traces = Vec::with_capacity(k_max + 1);
    let mut matrices = Vec::new();
    traces.push(n.trace());
    if store_limit.is_some() {
        matrices.push(n.clone());
    }
    for k in 1..=k_max {
        n = noise_map(ensemble, c, &n)?;
        check_psd(&n)?;
        traces.push(n.trace());
        if store_limit.is_some_and(|lim| k <= lim) {
            matrices.push(n.clone());
        }
    }
    Ok(NoiseSequence { traces, matrices })
}

/// `E||w_k||^2` for `k = 0..=k_max` under `w_0 ~ N(0, I)`. Also defined
/// without minibatch noise, where it reduces to `Tr(J^{2k})`.
pub fn exact_second_moment(ensemble: &HessianEnsemble, config: &UnlearnConfig, k_max: usize) -> Result<Vec<f64>> {
    config.check_matches(ensemble)?;
    let c = noise_weights(config)?;
    let j = JOperator::new(ensemble, config)?;
    let mut v = SymMatrix::identity(ensemble.dim());
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(v.trace());
    for _ in 0..k_max {
        let mut next = j.matrix.congruence(&v)?;
        next.add_scaled(1.0, &noise_map(ensemble, c, &v)?)?;
        v = next;
        out.push(v.trace());
    }
    Ok(out)
}

fn threshold_radicands(config: &UnlearnConfig) -> Result<(f64, f64)> {
    config.validate()?;
    let (b, nr, nf) = (config.batch, config.n_retain, config.n_forget);
    if nf == 0 || b >= nr || b >= nf {
        return Err(Error::UndefinedThreshold {
            batch: b,
            n_retain: nr,
            n_forget: nf,
        });
    }
    let b = b as f64;
    Ok((nr as f64 / b - 1.0, nf as f64 / b - 1.0))
}

/// `sqrt(2) sigma / [eta ((1-alpha) n_f sqrt(n_r/B - 1) + alpha n_r sqrt(n_f/B - 1))]`.
/// Mix-Hessian eigenvalues at or above it force divergence.
pub fn divergence_threshold(config: &UnlearnConfig, sigma: f64) -> Result<f64> {
    Ok(std::f64::consts::SQRT_2 * sigma / (config.eta * divergence_denominator(config)?))
}

fn divergence_denominator(config: &UnlearnConfig) -> Result<f64> {
    let (rr, rf) = threshold_radicands(config)?;
    let (nr, nf) = (config.n_retain as f64, config.n_forget as f64);
    Ok((1.0 - config.alpha) * nf * rr.sqrt() + config.alpha * nr * rf.sqrt())
}

/// Two published variants of the convergence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvergenceForm {
    /// `2 sigma / (eta C'_r (sigma + K))`
    #[default]
    Statement,
    /// `(2 sigma / eta) C'_r (1 - alpha) / (sigma + K)`
    Proof,
}

impl ConvergenceForm {
    pub const ALL: [ConvergenceForm; 2] = [ConvergenceForm::Statement, ConvergenceForm::Proof];

    pub fn name(self) -> &'static str {
        match self {
            ConvergenceForm::Statement => "statement",
            ConvergenceForm::Proof => "proof",
        }
    }
}

impl FromStr for ConvergenceForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "statement" => Ok(ConvergenceForm::Statement),
            "proof" => Ok(ConvergenceForm::Proof),
            _ => Err(Error::InvalidConfig(format!("unknown convergence form '{s}'"))),
        }
    }
}

/// `K = n_f (n_r / B - 1)`.
fn k_term(config: &UnlearnConfig) -> Result<f64> {
    let (rr, _) = threshold_radicands(config)?;
    Ok(config.n_forget as f64 * rr)
}

/// Mix-Hessian eigenvalue at or below which a converging ensemble exists.
pub fn convergence_threshold(config: &UnlearnConfig, sigma: f64, form: ConvergenceForm) -> Result<f64> {
    let k = k_term(config)?;
    let c = coefficients(config)?;
    Ok(match form {
        ConvergenceForm::Statement => 2.0 * sigma / (config.eta * c.cp_r * (sigma + k)),
        ConvergenceForm::Proof => 2.0 * sigma / config.eta * c.cp_r * (1.0 - config.alpha) / (sigma + k),
    })
}

/// Coherence at which [`divergence_threshold`] equals `lambda`.
pub fn sigma_at_divergence(config: &UnlearnConfig, lambda: f64) -> Result<f64> {
    Ok(lambda * config.eta * divergence_denominator(config)? / std::f64::consts::SQRT_2)
}

/// Coherence at which [`convergence_threshold`] equals `lambda`; infinite
/// when no finite coherence reaches it.
pub fn sigma_at_convergence(config: &UnlearnConfig, lambda: f64, form: ConvergenceForm) -> Result<f64> {
    let k = k_term(config)?;
    let c = coefficients(config)?;
    let le = lambda * config.eta;
    Ok(match form {
        ConvergenceForm::Statement => {
            let den = 2.0 - le * c.cp_r;
            if den <= 0.0 {
                f64::INFINITY
            } else {
                le * c.cp_r * k / den
            }
        }
        ConvergenceForm::Proof => {
            let den = 2.0 * c.cp_r * (1.0 - config.alpha) - le;
            if den <= 0.0 {
                f64::INFINITY
            } else {
                le * k / den
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    PredictDiverge,
    ConvergencePossible,
    Indeterminate,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::PredictDiverge => "PredictDiverge",
            Classification::ConvergencePossible => "ConvergencePossible",
            Classification::Indeterminate => "Indeterminate",
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Classification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "PredictDiverge" => Ok(Classification::PredictDiverge),
            "ConvergencePossible" => Ok(Classification::ConvergencePossible),
            "Indeterminate" => Ok(Classification::Indeterminate),
            _ => Err(Error::InvalidConfig(format!("unknown classification '{s}'"))),
        }
    }
}

/// Orders `lambda_max_d` against precomputed thresholds.
pub fn classify_with(lambda_max_d: f64, thr_div: f64, thr_conv: f64) -> Classification {
    if lambda_max_d >= thr_div {
        Classification::PredictDiverge
    } else if lambda_max_d <= thr_conv {
        Classification::ConvergencePossible
    } else {
        Classification::Indeterminate
    }
}

pub fn classify(
    lambda_max_d: f64,
    config: &UnlearnConfig,
    sigma: f64,
    form: ConvergenceForm,
) -> Result<Classification> {
    let div = divergence_threshold(config, sigma)?;
    let conv = convergence_threshold(config, sigma, form)?;
    Ok(classify_with(lambda_max_d, div, conv))
}

/// Range of the binomial sum in the upper bound.
///
/// `Exclusive` sums `r = 0..k-1`; `Inclusive` adds the `r = k` term
/// `Tr(N_k)`, which the induction step actually produces. Only the inclusive
/// sum is a valid bound in general: the exclusive one drops the current noise
/// term and can fall below `E||w_k||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundSum {
    Exclusive,
    #[default]
    Inclusive,
}

/// `ln C(k, r)`.
fn ln_binomial(k: usize, r: usize) -> f64 {
    // Summing logs is exact enough for k in the thousands and never overflows.
    let r = r.min(k - r);
    (0..r).map(|i| ((k - i) as f64 / (i + 1) as f64).ln()).sum()
}

/// `sum_r C(k, r) (1-eps)^{2(k-r)} Tr(N_r)` with `eps` taken from `J`.
pub fn upper_bound_trace(noise: &NoiseSequence, j: &JOperator, k: usize, sum: BoundSum) -> Result<f64> {
    let rho = j.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::BoundInapplicable { spectral_radius: rho });
    }
    upper_bound_trace_eps(&noise.traces, 1.0 - rho, k, sum)
}

/// [`upper_bound_trace`] for an explicit `eps` in `(0, 1]`.
pub fn upper_bound_trace_eps(traces: &[f64], eps: f64, k: usize, sum: BoundSum) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::BoundInapplicable {
            spectral_radius: 1.0 - eps,
        });
    }
    let last = match sum {
        BoundSum::Exclusive => k.checked_sub(1),
        BoundSum::Inclusive => Some(k),
    };
    let Some(last) = last else {
        return Ok(0.0);
    };
    if traces.len() <= last {
        return Err(Error::InvalidConfig(format!(
            "need noise traces through k={last}, have {}",
            traces.len()
        )));
    }
    let ln_contract = 2.0 * (1.0 - eps).ln();
    let mut total = 0.0;
    for (r, &t) in traces.iter().enumerate().take(last + 1) {
        if t <= 0.0 {
            continue;
        }
        let power = (k - r) as f64;
        let ln_coef = ln_binomial(k, r) + if power > 0.0 { power * ln_contract } else { 0.0 };
        total += (ln_coef + t.ln()).exp();
    }
    Ok(total)
}

/// Summary record of the stability analysis of one ensemble.
///
/// Serialized as `key=value` lines in a fixed order: `lambda_max_D`, `sigma`,
/// `thr_div`, `thr_conv_statement`, `thr_conv_proof`, `classification`.
/// Undefined thresholds and the classification that depends on them are
/// written as empty values.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub lambda_max_d: f64,
    pub sigma: f64,
    pub thr_div: Option<f64>,
    pub thr_conv_statement: Option<f64>,
    pub thr_conv_proof: Option<f64>,
    pub classification: Option<Classification>,
}

impl StabilityReport {
    pub const KEYS: [&'static str; 6] = [
        "lambda_max_D",
        "sigma",
        "thr_div",
        "thr_conv_statement",
        "thr_conv_proof",
        "classification",
    ];

    /// Builds the report; the classification uses `form`.
    pub fn new(lambda_max_d: f64, sigma: f64, config: &UnlearnConfig, form: ConvergenceForm) -> Result<Self> {
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedThreshold { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        let thr_div = defined(divergence_threshold(config, sigma))?;
        let thr_conv_statement = defined(convergence_threshold(config, sigma, ConvergenceForm::Statement))?;
        let thr_conv_proof = defined(convergence_threshold(config, sigma, ConvergenceForm::Proof))?;
        let conv = match form {
            ConvergenceForm::Statement => thr_conv_statement,
            ConvergenceForm::Proof => thr_conv_proof,
        };
        let classification = match (thr_div, conv) {
            (Some(d), Some(c)) => Some(classify_with(lambda_max_d, d, c)),
            _ => None,
        };
        Ok(Self {
            lambda_max_d,
            sigma,
            thr_div,
            thr_conv_statement,
            thr_conv_proof,
            classification,
        })
    }

    pub fn to_record(&self) -> String {
        let num = |v: Option<f64>| v.map(|x| format_sig(x, 12)).unwrap_or_default();
        let values = [
            num(Some(self.lambda_max_d)),
            num(Some(self.sigma)),
            num(self.thr_div),
            num(self.thr_conv_statement),
            num(self.thr_conv_proof),
            self.classification.map(|c| c.name().to_string()).unwrap_or_default(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses a record written by [`to_record`](Self::to_record). Blank and
    /// `#` lines are skipped; every key must appear exactly once.
    pub fn parse_record(text: &str) -> Result<Self> {
        let mut values: [Option<String>; 6] = Default::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got '{line}'")))?;
            let slot = Self::KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| perr(format!("unknown key '{}'", key.trim())))?;
            if values[slot].is_some() {
                return Err(perr(format!("duplicate key '{key}'")));
            }
            values[slot] = Some(value.trim().to_string());
        }
        let get = |slot: usize| -> Result<&str> {
            values[slot].as_deref().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing key '{}'", Self::KEYS[slot]),
            })
        };
        let num = |slot: usize| -> Result<Option<f64>> {
            let v = get(slot)?;
            if v.is_empty() {
                return Ok(None);
            }
            v.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                line: 0,
                msg: format!("{}: {e}", Self::KEYS[slot]),
            })
        };
        let required = |slot: usize| -> Result<f64> {
            num(slot)?.ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("empty value for '{}'", Self::KEYS[slot]),
            })
        };
        let class = get(5)?;
        Ok(Self {
            lambda_max_d: required(0)?,
            sigma: required(1)?,
            thr_div: num(2)?,
            thr_conv_statement: num(3)?,
            thr_conv_proof: num(4)?,
            classification: if class.is_empty() { None } else { Some(class.parse()?) },
        })
    }
}
