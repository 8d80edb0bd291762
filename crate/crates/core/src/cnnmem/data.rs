use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Generation parameters shared by training and test draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetParams {
    pub d: usize,
    /// `||mu||`; the signal is `mu_norm * e_1`.
    pub mu_norm: f64,
    pub noise_sigma: f64,
}

impl DatasetParams {
    pub fn mu(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        if self.d > 0 {
            mu[0] = self.mu_norm;
        }
        mu
    }

    /// `||mu|| / (sigma sqrt(d))`.
    pub fn snr(&self) -> f64 {
        self.mu_norm / (self.noise_sigma * (self.d as f64).sqrt())
    }
}

/// One input `x = (x^1, x^2)`: one slot holds `y mu`, the other Gaussian
/// noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Label, `+1` or `-1`.
    pub y: f64,
    /// Which slot carries the signal, 1 or 2.
    pub signal_slot: u8,
}

impl Sample {
    pub fn slots(&self) -> [&[f64]; 2] {
        [&self.x1, &self.x2]
    }

    /// The slot holding `y mu`.
    pub fn signal(&self) -> &[f64] {
        if self.signal_slot == 1 {
            &self.x1
        } else {
            &self.x2
        }
    }

    /// The noise slot `xi`.
    pub fn noise(&self) -> &[f64] {
        if self.signal_slot == 1 {
            &self.x2
        } else {
            &self.x1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalNoiseDataset {
    pub samples: Vec<Sample>,
    pub params: DatasetParams,
}

impl SignalNoiseDataset {
    pub fn mu(&self) -> Vec<f64> {
        self.params.mu()
    }

    pub fn snr(&self) -> f64 {
        self.params.snr()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rademacher label, noise `xi ~ N(0, sigma^2 I)`, signal slot uniform.
pub fn draw_sample<R: Rng + ?Sized>(params: &DatasetParams, rng: &mut R) -> Sample {
    let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise: Vec<f64> = (0..params.d)
        .map(|_| params.noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let signal: Vec<f64> = params.mu().into_iter().map(|m| y * m).collect();
    if rng.random_bool(0.5) {
        Sample {
            x1: signal,
            x2: noise,
            y,
            signal_slot: 1,
        }
    } else {
        Sample {
            x1: noise,
            x2: signal,
            y,
            signal_slot: 2,
        }
    }
}

pub fn generate_dataset<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    mu_norm: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<SignalNoiseDataset> {
    if n < 2 || d == 0 {
        return Err(Error::InvalidConfig(format!("need n >= 2 and d >= 1, got n={n} d={d}")));
    }
    if !(noise_sigma > 0.0) || !(mu_norm >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need noise_sigma > 0 and mu_norm >= 0, got {noise_sigma} and {mu_norm}"
        )));
    }
    let params = DatasetParams {
        d,
        mu_norm,
        noise_sigma,
    };
    let samples = (0..n).map(|_| draw_sample(&params, rng)).collect();
    Ok(SignalNoiseDataset { samples, params })
}
