use std::fmt::Write as _;

use unlearn_core::cnnmem::{
    coherence_curve_csv, coherence_ratio_curve, generate_dataset, heatmap_csv, snr_heatmap, test_error,
    train_full_batch, unlearn_cnn, CoherenceCurveSpec, HeatmapSpec, Sampling, TrainOptions, UnlearnOptions,
};
use unlearn_core::coherence::mix_coherence_with;
use unlearn_core::dynsim::{
    boundary_sweep, majority_outcome, run_trajectory, sweep_csv, SweepCell, SweepSpec, TrajectoryOptions,
};
use unlearn_core::seed::{derive_seed, format_sig, rng_from_seed};
use unlearn_core::stability::{sigma_at_convergence, sigma_at_divergence};
use unlearn_core::synthetic::{build_matching_construction, build_q_construction, MatchingSpec, QConstructionSpec};
use unlearn_core::{
    CoherenceOptions, CoherencePath, ConvergenceForm, Error, HessianEnsemble, StabilityReport, UnlearnConfig,
};

use crate::error::CliError;
use crate::params::{Mode, Settings};

/// Everything a run produces: the main file, optional plot-data files keyed
/// by suffix, and a human summary for stderr.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub body: String,
    pub plot_data: Vec<(&'static str, String)>,
    pub summary: String,
}

pub fn run(s: &Settings) -> Result<RunOutput, CliError> {
    match s.mode {
        Mode::Sweep => sweep(s),
        Mode::Simulate => simulate(s),
        Mode::Coherence => coherence(s),
        Mode::Construct => construct(s),
        Mode::CnnTrain => cnn_train(s),
        Mode::CnnHeatmap => cnn_heatmap(s),
        Mode::CoherenceCurve => coherence_curve(s),
    }
}

fn g(x: f64) -> String {
    format_sig(x, 12)
}

fn trajectory_opts(s: &Settings) -> Result<TrajectoryOptions, CliError> {
    Ok(TrajectoryOptions {
        steps: s.get("steps")?,
        divergence_ratio: s.get("divergence-ratio")?,
        ..Default::default()
    })
}

fn sweep(s: &Settings) -> Result<RunOutput, CliError> {
    let spec = SweepSpec {
        q_list: s.list("q-list")?,
        b_list: s.list("b-list")?,
        eta: s.get("eta")?,
        alpha: s.get("alpha")?,
        n_retain: s.get("n-r")?,
        n_forget: s.get("n-f")?,
        trajectory: trajectory_opts(s)?,
        repeats: s.get("repeats")?,
        master_seed: s.seed,
    };
    let cells = boundary_sweep(&spec)?;
    let diverged = cells.iter().filter(|c| c.outcome.name() == "DIVERGE").count();
    Ok(RunOutput {
        body: sweep_csv(&cells),
        plot_data: vec![("curves.dat", sweep_plot_data(&spec, &cells)?)],
        summary: format!("{} cells, {diverged} diverged", cells.len()),
    })
}

/// One gnuplot block per Q: the cell's coherence next to the coherence
/// values where each threshold meets the cell's eigenvalue.
fn sweep_plot_data(spec: &SweepSpec, cells: &[SweepCell]) -> Result<String, CliError> {
    let undefined = |r: Result<f64, Error>| match r {
        Ok(v) => Ok(g(v)),
        Err(Error::UndefinedThreshold { .. }) => Ok("NaN".to_string()),
        Err(e) => Err(e),
    };
    let mut out =
        String::from("# batch sigma lambda_max_D sigma_div sigma_conv_statement sigma_conv_proof diverged_fraction\n");
    for &q in &spec.q_list {
        let _ = writeln!(out, "# q={q}");
        for c in cells.iter().filter(|c| c.q == q) {
            let (Some(sigma), Some(lambda)) = (c.sigma, c.lambda_max_d) else {
                continue;
            };
            let cfg = spec.config(c.batch)?;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                c.batch,
                g(sigma),
                g(lambda),
                undefined(sigma_at_divergence(&cfg, lambda))?,
                undefined(sigma_at_convergence(&cfg, lambda, ConvergenceForm::Statement))?,
                undefined(sigma_at_convergence(&cfg, lambda, ConvergenceForm::Proof))?,
                g(c.n_diverged as f64 / c.n_repeats as f64)
            );
        }
        out.push_str("\n\n");
    }
    Ok(out)
}

fn load_ensemble(s: &Settings) -> Result<HessianEnsemble, CliError> {
    let path = s.raw("ensemble");
    if path.is_empty() {
        return Ok(build_q_construction(&QConstructionSpec::new(10, 5))?);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read ensemble file {path}: {e}")))?;
    Ok(HessianEnsemble::parse(&text)?)
}

fn ensemble_config(s: &Settings, e: &HessianEnsemble) -> Result<UnlearnConfig, CliError> {
    Ok(UnlearnConfig::new(
        s.get("eta")?,
        s.get("alpha")?,
        s.get("batch")?,
        e.n_retain(),
        e.n_forget(),
    )?)
}

fn simulate(s: &Settings) -> Result<RunOutput, CliError> {
    let ens = load_ensemble(s)?;
    let cfg = ensemble_config(s, &ens)?;
    let opts = trajectory_opts(s)?;
    let repeats: usize = s.get("repeats")?;
    let mut body = String::from("repeat,seed,log_ratio,diverged\n");
    for i in 0..repeats {
        let seed = derive_seed(s.seed, i as u64);
        let t = run_trajectory(&ens, &cfg, &opts, seed)?;
        let _ = writeln!(body, "{i},{seed},{},{}", g(t.log_ratio()), u8::from(t.diverged));
    }
    let m = majority_outcome(&ens, &cfg, &opts, repeats, s.seed)?;
    Ok(RunOutput {
        body,
        plot_data: Vec::new(),
        summary: format!("{} ({}/{} diverged)", m.outcome.name(), m.n_diverged, m.n_repeats),
    })
}

fn coherence(s: &Settings) -> Result<RunOutput, CliError> {
    let ens = load_ensemble(s)?;
    let cfg = ensemble_config(s, &ens)?;
    let form: ConvergenceForm = s.get("form")?;
    let path = match s.raw("path") {
        "auto" => CoherencePath::Auto,
        "dense" => CoherencePath::Dense,
        "factored" => CoherencePath::Factored,
        other => return Err(CliError::Config(format!("unknown coherence path '{other}'"))),
    };
    let opts = CoherenceOptions {
        path,
        max_pairs: s.get("max-pairs")?,
        ..Default::default()
    };
    let coh = mix_coherence_with(&ens, &cfg, &opts)?;
    let report = StabilityReport::new(coh.lambda_max_d, coh.sigma, &cfg, form)?;
    let summary = report
        .classification
        .map_or("no threshold defined at this batch size".to_string(), |c| {
            c.name().to_string()
        });
    Ok(RunOutput {
        body: report.to_record(),
        plot_data: Vec::new(),
        summary,
    })
}

fn construct(s: &Settings) -> Result<RunOutput, CliError> {
    let dim: Option<usize> = s.opt("dim")?;
    let ens = match s.raw("kind") {
        "q" => build_q_construction(&QConstructionSpec {
            n: s.get("n")?,
            q: s.get("q")?,
            dim,
        })?,
        "matching" => build_matching_construction(&MatchingSpec {
            sigma_target: s.get("sigma")?,
            lambda1_d_target: s.get("lambda")?,
            config: UnlearnConfig::new(
                s.get("eta")?,
                s.get("alpha")?,
                s.get("batch")?,
                s.get("n-r")?,
                s.get("n-f")?,
            )?,
            dim: dim.unwrap_or(1),
        })?,
        other => return Err(CliError::Config(format!("unknown construction '{other}'"))),
    };
    Ok(RunOutput {
        summary: format!("d={} n_r={} n_f={}", ens.dim(), ens.n_retain(), ens.n_forget()),
        body: ens.to_text(),
        plot_data: Vec::new(),
    })
}

fn train_opts(s: &Settings) -> Result<TrainOptions, CliError> {
    Ok(TrainOptions {
        m: s.get("m")?,
        lr: s.get("lr")?,
        epochs: s.get("epochs")?,
        init_scale: s.get("init-scale")?,
    })
}

fn unlearn_opts(s: &Settings) -> Result<UnlearnOptions, CliError> {
    let sampling = match s.raw("sampling") {
        "bernoulli" => Sampling::Bernoulli,
        "fixed" => Sampling::FixedSize,
        other => return Err(CliError::Config(format!("unknown sampling '{other}'"))),
    };
    Ok(UnlearnOptions {
        batch: s.get("batch")?,
        lr: s.get("unlearn-lr")?,
        alpha: s.get("alpha")?,
        steps: s.get("steps")?,
        sampling,
    })
}

fn cnn_train(s: &Settings) -> Result<RunOutput, CliError> {
    let n: usize = s.get("n")?;
    let n_forget: usize = s.get("n-forget")?;
    if n_forget == 0 || n_forget >= n {
        return Err(CliError::Config(format!(
            "n-forget must lie in [1, n), got {n_forget} with n={n}"
        )));
    }
    let unlearn = unlearn_opts(s)?;
    let mut rng = rng_from_seed(s.seed);
    let ds = generate_dataset(n, s.get("d")?, s.get("signal-norm")?, s.get("noise-sigma")?, &mut rng)?;
    let trained = train_full_batch(&ds, &train_opts(s)?, &mut rng)?;
    let err = test_error(&trained.model, s.get("n-test")?, &ds.params, &mut rng)?;
    let (retain, forget) = ds.samples.split_at(n - n_forget);
    let trace = unlearn_cnn(&trained.model, retain, forget, &unlearn, &mut rng)?;
    let mut body = String::from("step,forget_loss\n");
    for (k, l) in trace.forget_losses.iter().enumerate() {
        let _ = writeln!(body, "{k},{}", g(*l));
    }
    Ok(RunOutput {
        body,
        plot_data: Vec::new(),
        summary: format!(
            "snr={} train_loss={} test_error={}{}",
            g(ds.snr()),
            g(trained.train_loss),
            g(err),
            if trace.diverged { " (unlearning diverged)" } else { "" }
        ),
    })
}

fn cnn_heatmap(s: &Settings) -> Result<RunOutput, CliError> {
    let spec = HeatmapSpec {
        signal_grid: s.list("signal-grid")?,
        d_grid: s.list("d-grid")?,
        repeats: s.get("repeats")?,
        master_seed: s.seed,
        n: s.get("n")?,
        n_forget: s.get("n-forget")?,
        noise_sigma: s.get("noise-sigma")?,
        n_test: s.get("n-test")?,
        train: train_opts(s)?,
        unlearn: unlearn_opts(s)?,
    };
    let cells = snr_heatmap(&spec)?;
    // Signal-outer order, so each signal norm is one gnuplot scan line.
    let mut dat = String::from("# signal_norm d snr train_loss test_error forget_loss\n");
    for (i, c) in cells.iter().enumerate() {
        if i > 0 && i % spec.d_grid.len() == 0 {
            dat.push('\n');
        }
        let _ = writeln!(
            dat,
            "{} {} {} {} {} {}",
            g(c.signal_norm),
            c.d,
            g(c.snr),
            g(c.train_loss),
            g(c.test_error),
            g(c.forget_loss)
        );
    }
    let failed: usize = cells.iter().map(|c| c.n_failed).sum();
    Ok(RunOutput {
        body: heatmap_csv(&cells),
        plot_data: vec![("grid.dat", dat)],
        summary: format!("{} cells, {failed} failed repeats", cells.len()),
    })
}

fn coherence_curve(s: &Settings) -> Result<RunOutput, CliError> {
    let spec = CoherenceCurveSpec {
        snr_list: s.list("snr-list")?,
        d: s.get("d")?,
        n_retain: s.get("n-r")?,
        n_forget: s.get("n-f")?,
        noise_sigma: s.get("noise-sigma")?,
        repeats: s.get("repeats")?,
        master_seed: s.seed,
        train: train_opts(s)?,
        eta: s.get("eta")?,
        alpha: s.get("alpha")?,
        batch: s.get("batch")?,
    };
    let pts = coherence_ratio_curve(&spec)?;
    let mut dat = String::from("# snr ratio lambda_max_S max_pair_lambda\n");
    for p in &pts {
        let _ = writeln!(
            dat,
            "{} {} {} {}",
            g(p.snr),
            g(p.ratio),
            g(p.lambda_max_s),
            g(p.max_pair_lambda)
        );
    }
    let skipped: usize = pts.iter().map(|p| p.n_skipped).sum();
    Ok(RunOutput {
        body: coherence_curve_csv(&pts),
        plot_data: vec![("curve.dat", dat)],
        summary: format!("{} points, {skipped} skipped repeats", pts.len()),
    })
}
