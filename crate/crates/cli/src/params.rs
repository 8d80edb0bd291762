//! Parameter registry shared by the flag parser, the config-file reader and
//! the echoed output header.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::CliError;

pub struct Param {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn p(key: &'static str, default: &'static str, help: &'static str) -> Param {
    Param { key, default, help }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sweep,
    Simulate,
    Coherence,
    Construct,
    CnnTrain,
    CnnHeatmap,
    CoherenceCurve,
}

const SWEEP: &[Param] = &[
    p("eta", "0.5", "unlearning rate"),
    p("alpha", "0.1", "forget-set weight"),
    p("n-r", "50", "retain samples (must equal n-f)"),
    p("n-f", "50", "forget samples"),
    p("q-list", "1,2,5,10,25,50", "Q-construction alignment counts"),
    p("b-list", "2,5,10,20,40", "batch sizes"),
    p("steps", "1000", "steps per trajectory"),
    p("repeats", "10", "trajectories per cell"),
    p(
        "divergence-ratio",
        "1000",
        "final/initial norm ratio that counts as divergence",
    ),
];

const SIMULATE: &[Param] = &[
    p(
        "ensemble",
        "",
        "ensemble file; empty selects the demo Q-construction (n=10, Q=5)",
    ),
    p("eta", "0.5", "unlearning rate"),
    p("alpha", "0.1", "forget-set weight"),
    p("batch", "2", "expected minibatch size"),
    p("steps", "1000", "steps per trajectory"),
    p("repeats", "10", "trajectories"),
    p(
        "divergence-ratio",
        "1000",
        "final/initial norm ratio that counts as divergence",
    ),
];

const COHERENCE: &[Param] = &[
    p(
        "ensemble",
        "",
        "ensemble file; empty selects the demo Q-construction (n=10, Q=5)",
    ),
    p("eta", "0.5", "unlearning rate"),
    p("alpha", "0.1", "forget-set weight"),
    p("batch", "2", "expected minibatch size"),
    p(
        "form",
        "statement",
        "convergence threshold used for the classification: statement or proof",
    ),
    p("path", "auto", "coherence evaluation: auto, dense or factored"),
    p("max-pairs", "10000", "largest retain x forget pair count accepted"),
];

const CONSTRUCT: &[Param] = &[
    p("kind", "q", "construction: q or matching"),
    p("n", "10", "samples per set (q)"),
    p("q", "5", "aligned samples (q)"),
    p("dim", "", "ambient dimension; empty picks the smallest valid one"),
    p("sigma", "100", "target coherence (matching)"),
    p("lambda", "1", "target top eigenvalue of the mix-Hessian (matching)"),
    p("eta", "0.5", "unlearning rate (matching)"),
    p("alpha", "0.1", "forget-set weight (matching)"),
    p("batch", "10", "expected minibatch size (matching)"),
    p("n-r", "50", "retain samples (matching)"),
    p("n-f", "50", "forget samples (matching)"),
];

const CNN_TRAIN: &[Param] = &[
    p("n", "50", "training samples"),
    p("n-forget", "25", "samples moved to the forget set"),
    p("d", "100", "patch dimension"),
    p("signal-norm", "2", "norm of the signal vector"),
    p("noise-sigma", "1", "noise standard deviation"),
    p("m", "10", "filters per class"),
    p("lr", "0.1", "training learning rate"),
    p("epochs", "100", "full-batch training epochs"),
    p("init-scale", "0.01", "standard deviation of the initial weights"),
    p("n-test", "1000", "fresh samples for the test error"),
    p("batch", "5", "unlearning minibatch size"),
    p("unlearn-lr", "0.1", "unlearning rate"),
    p("alpha", "0.3", "forget-set weight"),
    p("steps", "90", "unlearning steps"),
    p("sampling", "bernoulli", "minibatch sampling: bernoulli or fixed"),
];

const CNN_HEATMAP: &[Param] = &[
    p("signal-grid", "0.5,1,1.5,2,2.5,3,3.5,4,4.5,5", "signal norms"),
    p("d-grid", "100,300,500,700,900,1100", "patch dimensions"),
    p("repeats", "20", "repeats per cell"),
    p("n", "50", "training samples"),
    p("n-forget", "25", "samples moved to the forget set"),
    p("noise-sigma", "1", "noise standard deviation"),
    p("n-test", "1000", "fresh samples for the test error"),
    p("m", "10", "filters per class"),
    p("lr", "0.1", "training learning rate"),
    p("epochs", "100", "full-batch training epochs"),
    p("init-scale", "0.01", "standard deviation of the initial weights"),
    p("batch", "5", "unlearning minibatch size"),
    p("unlearn-lr", "0.1", "unlearning rate"),
    p("alpha", "0.3", "forget-set weight"),
    p("steps", "90", "unlearning steps"),
    p("sampling", "bernoulli", "minibatch sampling: bernoulli or fixed"),
];

const COHERENCE_CURVE: &[Param] = &[
    p("snr-list", "0.05,0.1,0.2,0.3,0.4,0.5", "signal-to-noise ratios"),
    p("d", "100", "patch dimension"),
    p("n-r", "10", "retain samples"),
    p("n-f", "10", "forget samples"),
    p("noise-sigma", "1", "noise standard deviation"),
    p("repeats", "20", "repeats per point"),
    p("m", "10", "filters per class"),
    p("lr", "0.1", "training learning rate"),
    p("epochs", "100", "full-batch training epochs"),
    p("init-scale", "0.01", "standard deviation of the initial weights"),
    p("eta", "0.1", "unlearning rate entering the coefficients"),
    p("alpha", "0.3", "forget-set weight"),
    p("batch", "5", "expected minibatch size"),
];

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Sweep,
        Mode::Simulate,
        Mode::Coherence,
        Mode::Construct,
        Mode::CnnTrain,
        Mode::CnnHeatmap,
        Mode::CoherenceCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sweep => "sweep",
            Mode::Simulate => "simulate",
            Mode::Coherence => "coherence",
            Mode::Construct => "construct",
            Mode::CnnTrain => "cnn-train",
            Mode::CnnHeatmap => "cnn-heatmap",
            Mode::CoherenceCurve => "coherence-curve",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Mode::Sweep => "Simulate the Q-construction over a Q x batch grid and write the phase CSV",
            Mode::Simulate => "Run stochastic unlearning trajectories on one ensemble",
            Mode::Coherence => "Compute coherence, thresholds and the predicted regime of one ensemble",
            Mode::Construct => "Write a synthetic ensemble in the ensemble file format",
            Mode::CnnTrain => "Train one two-layer CNN, unlearn its forget set and write the forget-loss trace",
            Mode::CnnHeatmap => "Memorization versus forgetting grid over signal strength and dimension",
            Mode::CoherenceCurve => "Coherence ratio of trained CNN Hessians across signal-to-noise ratios",
        }
    }

    pub fn params(self) -> &'static [Param] {
        match self {
            Mode::Sweep => SWEEP,
            Mode::Simulate => SIMULATE,
            Mode::Coherence => COHERENCE,
            Mode::Construct => CONSTRUCT,
            Mode::CnnTrain => CNN_TRAIN,
            Mode::CnnHeatmap => CNN_HEATMAP,
            Mode::CoherenceCurve => COHERENCE_CURVE,
        }
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown mode '{s}'")))
    }
}

/// Keys accepted in a config file for every mode.
pub const GLOBAL_KEYS: [&str; 5] = ["mode", "seed", "output", "workers", "emit-plot-data"];

/// Parses a flat `key=value` file. Blank lines and `#` comments are
/// skipped; underscores in keys are read as hyphens.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String, usize)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected key=value, got '{line}'", i + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Fully resolved parameters of one mode, in registry order.
#[derive(Debug, Clone)]
pub struct Settings {
    pub mode: Mode,
    pub seed: u64,
    values: Vec<(&'static str, String)>,
    lookup: HashMap<&'static str, usize>,
}

impl Settings {
    pub fn defaults(mode: Mode, seed: u64) -> Self {
        let values: Vec<_> = mode.params().iter().map(|p| (p.key, p.default.to_string())).collect();
        let lookup = values.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
        Self {
            mode,
            seed,
            values,
            lookup,
        }
    }

    /// Overrides `key`; unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let i = *self
            .lookup
            .get(key)
            .ok_or_else(|| CliError::Config(format!("unknown config key '{key}' for mode {}", self.mode.name())))?;
        self.values[i].1 = value.to_string();
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[self.lookup[key]].1
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| CliError::Config(format!("invalid value '{v}' for {key}: {e}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("invalid entry '{s}' in {key}: {e}")))
            })
            .collect()
    }

    /// `# key=value` lines. Stripping the `# ` prefix yields a config file
    /// that reproduces the run.
    pub fn echo(&self) -> String {
        let mut out = format!("# mode={}\n# seed={}\n", self.mode.name(), self.seed);
        for (k, v) in &self.values {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_unique_per_mode() {
        for m in Mode::ALL {
            let mut keys: Vec<_> = m.params().iter().map(|p| p.key).collect();
            keys.extend(GLOBAL_KEYS);
            let n = keys.len();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(keys.len(), n, "{}", m.name());
        }
    }

    #[test]
    fn config_file_skips_comments_and_normalizes_keys() {
        let kv = parse_config_file("# hi\n\nn_r = 5\neta=0.3\n").unwrap();
        assert_eq!(kv[0], ("n-r".into(), "5".into(), 3));
        assert_eq!(kv[1].0, "eta");
        assert!(parse_config_file("oops").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let mut s = Settings::defaults(Mode::Sweep, 0);
        let err = s.set("etta", "1").unwrap_err().to_string();
        assert!(err.contains("etta"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut s = Settings::defaults(Mode::Simulate, 9);
        s.set("eta", "0.25").unwrap();
        let cfg: String = s.echo().lines().map(|l| format!("{}\n", &l[2..])).collect();
        let kv = parse_config_file(&cfg).unwrap();
        let mut t = Settings::defaults(Mode::Simulate, 9);
        for (k, v, _) in kv.iter().filter(|(k, _, _)| k != "mode" && k != "seed") {
            t.set(k, v).unwrap();
        }
        assert_eq!(s.echo(), t.echo());
    }
}
