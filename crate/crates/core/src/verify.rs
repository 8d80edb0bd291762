//! End-to-end verification criteria shared by the acceptance test target
//! and the `verify` subcommand.

use std::fmt;

use rand::Rng;

use crate::cnnmem::{
    self, coherence_ratio_curve, generate_dataset, heatmap_csv, sample_hessian, sample_loss_and_grad, snr_heatmap,
    spearman, CnnModel, CoherenceCurveSpec, HeatmapSpec, Sample,
};
use crate::coherence::{mix_coherence, mix_coherence_with, CoherenceOptions, CoherencePath, UnlearnConfig};
use crate::dynsim::{
    boundary_sweep, check_bracketing, run_trajectory, second_moment_mc, sweep_csv, SigmaBoundaries, SweepSpec,
    TrajectoryOptions,
};
use crate::ensemble::{HessianEnsemble, SampleHessian};
use crate::error::Result;
use crate::matker::{self, SymMatrix};
use crate::seed::{derive_seed, rng_from_seed};
use crate::stability::{
    convergence_threshold, exact_second_moment, noise_recurrence, sigma_at_convergence, sigma_at_divergence,
    upper_bound_trace, BoundSum, ConvergenceForm, JOperator,
};
use crate::synthetic::{build_matching_construction, random_rank_one_ensemble, MatchingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Reduced repeat and trajectory counts; finishes in a few minutes.
    Quick,
    /// The documented acceptance settings.
    Full,
}

#[derive(Clone, Copy)]
pub struct VerifyOptions {
    pub scale: Scale,
    pub seed: u64,
    /// Curves used by the bracketing criterion; replaced by the mutation
    /// fixture.
    pub boundaries: SigmaBoundaries,
}

impl VerifyOptions {
    pub fn new(scale: Scale, seed: u64) -> Self {
        Self {
            scale,
            seed,
            boundaries: SigmaBoundaries::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} [{}] {}: {}", self.id, self.name, self.detail)
    }
}

fn report(id: u8, name: &'static str, outcome: Result<(bool, String)>) -> CriterionReport {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionReport {
        id,
        name,
        passed,
        detail,
    }
}

pub const CRITERIA: [(u8, &str); 8] = [
    (1, "boundary-bracketing"),
    (2, "second-moment-orderings"),
    (3, "matching-construction"),
    (4, "monte-carlo-agreement"),
    (5, "cnn-numerics"),
    (6, "memorization-forgetting-overlap"),
    (7, "coherence-snr-trend"),
    (8, "determinism"),
];

/// Divergence curve shifted by a factor of four, as if the threshold formula
/// had lost a factor. The bracketing criterion must reject it.
pub fn tampered_boundaries() -> SigmaBoundaries {
    fn div(cfg: &UnlearnConfig, lambda: f64) -> Result<f64> {
        Ok(4.0 * sigma_at_divergence(cfg, lambda)?)
    }
    SigmaBoundaries {
        divergence: div,
        convergence: sigma_at_convergence,
    }
}

pub fn phase_sweep_spec(eta: f64, seed: u64) -> SweepSpec {
    SweepSpec {
        q_list: vec![1, 2, 5, 10, 25, 50],
        b_list: vec![2, 5, 10, 20, 40],
        eta,
        alpha: 0.1,
        n_retain: 50,
        n_forget: 50,
        trajectory: TrajectoryOptions::default(),
        repeats: 10,
        master_seed: seed,
    }
}

/// Criterion 1 plus the CSVs it produced, one per learning rate.
pub fn boundary_bracketing(opts: &VerifyOptions) -> (CriterionReport, Vec<String>) {
    let mut csvs = Vec::new();
    let outcome = (|| -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for (i, eta) in [0.5, 0.8].into_iter().enumerate() {
            let spec = phase_sweep_spec(eta, derive_seed(opts.seed, i as u64));
            let cells = boundary_sweep(&spec)?;
            csvs.push(sweep_csv(&cells));
            let rep = check_bracketing(&cells, &spec, 10, &opts.boundaries)?;
            let forms: Vec<&str> = ConvergenceForm::ALL
                .iter()
                .filter(|&&f| rep.form_passes(f))
                .map(|f| f.name())
                .collect();
            ok &= rep.passed();
            let bad: Vec<String> = rep
                .rows
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("B={}/{}: {} cells outside", r.batch, r.form.name(), r.violations.len()))
                .collect();
            parts.push(format!(
                "eta={eta} bracketed by [{}]{}",
                forms.join(","),
                if bad.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", bad.join("; "))
                }
            ));
        }
        Ok((ok, parts.join("; ")))
    })();
    (report(1, "boundary-bracketing", outcome), csvs)
}

/// Criterion 2: lower and upper second-moment bounds on random instances.
pub fn second_moment_orderings(opts: &VerifyOptions) -> CriterionReport {
    let outcome = (|| -> Result<(bool, String)> {
        let mut rng = rng_from_seed(derive_seed(opts.seed, 2));
        let (mut lower_bad, mut upper_bad, mut with_upper) = (0, 0, 0);
        let k_max = 15;
        for _ in 0..50 {
            let d = rng.random_range(1..=5);
            let nr = rng.random_range(2..=6);
            let nf = rng.random_range(2..=6);
            let batch = rng.random_range(1..nr.min(nf));
            let eta = rng.random_range(0.05..1.0);
            let alpha = rng.random_range(0.0..0.6);
            let ens = random_rank_one_ensemble(&mut rng, d, nr, nf, (0.1, 1.0))?;
            let cfg = UnlearnConfig::new(eta, alpha, batch, nr, nf)?;
            let v = exact_second_moment(&ens, &cfg, k_max)?;
            let noise = noise_recurrence(&ens, &cfg, k_max)?;
            let j = JOperator::new(&ens, &cfg)?;
            let upper_ok = j.spectral_radius() < 1.0;
            with_upper += usize::from(upper_ok);
            for (k, &vk) in v.iter().enumerate().skip(1) {
                let lower = j.trace_even_power(k) + noise.traces[k];
                if lower > vk * (1.0 + 1e-8) {
                    lower_bad += 1;
                }
                if upper_ok && vk > upper_bound_trace(&noise, &j, k, BoundSum::Inclusive)? * (1.0 + 1e-8) {
                    upper_bad += 1;
                }
            }
        }
        Ok((
            lower_bad == 0 && upper_bad == 0,
            format!(
                "50 instances, k<=15: lower-bound violations {lower_bad}, upper-bound violations {upper_bad} \
                 ({with_upper} instances met the contraction precondition)"
            ),
        ))
    })();
    report(2, "second-moment-orderings", outcome)
}

/// Criterion 3: the matching construction hits its targets and converges.
pub fn matching_construction(opts: &VerifyOptions) -> CriterionReport {
    let outcome = (|| -> Result<(bool, String)> {
        let cases = [
            (UnlearnConfig::new(0.5, 0.1, 10, 50, 50)?, 100.0),
            (UnlearnConfig::new(0.5, 0.1, 10, 50, 50)?, 250.0),
            (UnlearnConfig::new(0.8, 0.3, 5, 20, 10)?, 30.0),
        ];
        let mut ok = true;
        let mut worst_rel: f64 = 0.0;
        let mut converged = 0;
        let mut runs = 0;
        for (ci, (cfg, sigma)) in cases.iter().enumerate() {
            let thr = convergence_threshold(cfg, *sigma, ConvergenceForm::Proof)?;
            for (fi, frac) in [0.5, 0.9].into_iter().enumerate() {
                let spec = MatchingSpec {
                    sigma_target: *sigma,
                    lambda1_d_target: frac * thr,
                    config: *cfg,
                    dim: 1,
                };
                let ens = build_matching_construction(&spec)?;
                let coh = mix_coherence(&ens, cfg)?;
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
                worst_rel = worst_rel.max(rel(coh.lambda_max_d, spec.lambda1_d_target));
                worst_rel = worst_rel.max(rel(coh.sigma, *sigma));
                // Normalized S is 1 on pairs with an aligned retain sample
                // and 0 elsewhere.
                let count = spec.aligned_count()?;
                let pairs = cfg.n_retain * cfg.n_forget;
                for p in 0..pairs {
                    for q in 0..pairs {
                        let want = if p / cfg.n_forget < count && q / cfg.n_forget < count {
                            1.0
                        } else {
                            0.0
                        };
                        let got = coh.matrix_s.get(p, q) / coh.max_pair_lambda;
                        worst_rel = worst_rel.max((got - want).abs());
                    }
                }
                let seed = derive_seed(opts.seed, (10 * ci + fi) as u64);
                for r in 0..10 {
                    let t = run_trajectory(&ens, cfg, &TrajectoryOptions::default(), derive_seed(seed, r))?;
                    runs += 1;
                    if t.log_ratio() < 0.0 {
                        converged += 1;
                    }
                }
            }
        }
        ok &= worst_rel <= 1e-9;
        ok &= converged == runs;
        Ok((
            ok,
            format!("max relative error {worst_rel:.2e}; {converged}/{runs} trajectories ended below their start"),
        ))
    })();
    report(3, "matching-construction", outcome)
}

/// Criterion 4: Monte-Carlo second moments against the exact recursion.
pub fn monte_carlo_agreement(opts: &VerifyOptions) -> CriterionReport {
    let n_traj = match opts.scale {
        Scale::Quick => 2_000,
        Scale::Full => 10_000,
    };
    let outcome = (|| -> Result<(bool, String)> {
        let mut rng = rng_from_seed(derive_seed(opts.seed, 4));
        let ks = [1, 10, 50];
        let mut worst: f64 = 0.0;
        for e in 0..10 {
            let d = rng.random_range(2..=4);
            let nr = rng.random_range(3..=5);
            let nf = rng.random_range(2..=4);
            let ens = random_rank_one_ensemble(&mut rng, d, nr, nf, (0.2, 1.0))?;
            // Keep the mean operator contracting so the moments stay finite
            // and the estimate is not dominated by rare blow-ups.
            let cfg0 = UnlearnConfig::new(1.0, 0.2, 1, nr, nf)?;
            let top = mix_coherence(&ens, &cfg0)?.lambda_max_d;
            let eta = rng.random_range(0.1..0.5) / top;
            let cfg = UnlearnConfig::new(eta, 0.2, rng.random_range(1..nr.min(nf)), nr, nf)?;
            let exact = exact_second_moment(&ens, &cfg, 50)?;
            for m in second_moment_mc(&ens, &cfg, &ks, n_traj, derive_seed(opts.seed, 100 + e))? {
                worst = worst.max((m.mean - exact[m.k]).abs() / m.std_err);
            }
        }
        Ok((
            worst <= 3.0,
            format!("10 ensembles x {n_traj} trajectories at k=1,10,50: worst deviation {worst:.2} standard errors"),
        ))
    })();
    report(4, "monte-carlo-agreement", outcome)
}

/// Hessian of one sample built block by block from the signal `mu` and
/// noise `xi`, without going through the network gradient:
/// entry `((j,r,a),(j',r',b)) = ell2 * s_j s_j' / m^2 * g_jr[a] g_j'r'[b]`
/// with `g_jr = 1{<w_jr, y mu> > 0} mu + 1{<w_jr, xi> > 0} y xi`.
fn block_formula_hessian(model: &CnnModel, s: &Sample, mu: &[f64]) -> SymMatrix {
    let (m, d) = (model.m(), model.d());
    let y = s.y;
    let xi = s.noise();
    let f = model.forward(s).expect("dims");
    let sg = 1.0 / (1.0 + (y * f).exp());
    let ell2 = sg * (1.0 - sg);
    let mut g = vec![0.0; 2 * m * d];
    for j in 0..2 {
        for r in 0..m {
            let w = model.filter(j, r);
            let sig_on = matker::dot(w, &mu.iter().map(|x| y * x).collect::<Vec<_>>()) > 0.0;
            let noise_on = matker::dot(w, xi) > 0.0;
            for a in 0..d {
                let mut v = 0.0;
                if sig_on {
                    v += mu[a];
                }
                if noise_on {
                    v += y * xi[a];
                }
                g[(j * m + r) * d + a] = v;
            }
        }
    }
    let n = 2 * m * d;
    SymMatrix::from_fn(n, |p, q| {
        let jp = if p / (m * d) == 0 { 1.0 } else { -1.0 };
        let jq = if q / (m * d) == 0 { 1.0 } else { -1.0 };
        ell2 * jp * jq / (m * m) as f64 * g[p] * g[q]
    })
    .expect("square")
}

fn min_abs_preactivation(model: &CnnModel, s: &Sample) -> f64 {
    let mut out = f64::INFINITY;
    for j in 0..2 {
        for r in 0..model.m() {
            for x in s.slots() {
                out = out.min(matker::dot(model.filter(j, r), x).abs());
            }
        }
    }
    out
}

/// Criterion 5: gradient, Hessian factor and rank-one coherence checks.
pub fn cnn_numerics(opts: &VerifyOptions) -> CriterionReport {
    let outcome = (|| -> Result<(bool, String)> {
        let mut rng = rng_from_seed(derive_seed(opts.seed, 5));
        let (d, m) = (6, 3);

        // Gradient vs central differences on 20 kink-free probes.
        let mut probes = 0;
        let mut grad_err: f64 = 0.0;
        while probes < 20 {
            let ds = generate_dataset(2, d, 2.0, 1.0, &mut rng)?;
            let s = &ds.samples[0];
            let model = CnnModel::random(m, d, 0.5, &mut rng);
            if min_abs_preactivation(&model, s) < 1e-3 {
                continue;
            }
            probes += 1;
            let (_, g) = sample_loss_and_grad(&model, s)?;
            let h = 1e-5;
            let gmax = g.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-12);
            for (i, gi) in g.iter().enumerate() {
                let mut p = model.clone();
                p.params_mut()[i] += h;
                let mut q = model.clone();
                q.params_mut()[i] -= h;
                let fd = (sample_loss_and_grad(&p, s)?.0 - sample_loss_and_grad(&q, s)?.0) / (2.0 * h);
                grad_err = grad_err.max((fd - gi).abs() / gmax);
            }
        }

        // Densified factor vs the block formula, entry by entry.
        let ds = generate_dataset(8, d, 1.5, 1.0, &mut rng)?;
        let model = CnnModel::random(m, d, 0.5, &mut rng);
        let mu = ds.mu();
        let mut block_err: f64 = 0.0;
        let mut factors = Vec::new();
        for s in &ds.samples {
            let h = sample_hessian(&model, s)?;
            let dense = h.to_rank_one()?.densify();
            let want = block_formula_hessian(&model, s, &mu);
            let scale = want.as_dmatrix().amax().max(1e-300);
            block_err = block_err.max((dense.as_dmatrix() - want.as_dmatrix()).amax() / scale);
            factors.push(SampleHessian::from(h.to_rank_one()?));
        }

        // Coherence entries: rank-one identity vs dense square roots.
        let (retain, forget) = factors.split_at(4);
        let ens = HessianEnsemble::new(2 * m * d, retain.to_vec(), forget.to_vec())?;
        let cfg = UnlearnConfig::new(0.1, 0.3, 2, 4, 4)?;
        let with = |path| CoherenceOptions {
            path,
            ..Default::default()
        };
        let mut coh_err: f64 = 0.0;
        let fast = mix_coherence_with(&ens, &cfg, &with(CoherencePath::Factored))?;
        let dense = mix_coherence_with(&ens, &cfg, &with(CoherencePath::Dense))?;
        let single_fast = cnnmem_single(&factors, CoherencePath::Factored)?;
        let single_dense = cnnmem_single(&factors, CoherencePath::Dense)?;
        for (a, b) in [(&fast.matrix_s, &dense.matrix_s), (&single_fast, &single_dense)] {
            for (x, y) in a.as_dmatrix().iter().zip(b.as_dmatrix().iter()) {
                coh_err = coh_err.max((x - y).abs() / y.abs().max(1e-300));
            }
        }
        Ok((
            grad_err <= 1e-5 && block_err <= 1e-10 && coh_err <= 1e-9,
            format!(
                "gradient {grad_err:.2e} (20 probes), Hessian blocks {block_err:.2e}, coherence entries {coh_err:.2e}"
            ),
        ))
    })();
    report(5, "cnn-numerics", outcome)
}

fn cnnmem_single(factors: &[SampleHessian], path: CoherencePath) -> Result<SymMatrix> {
    let opts = CoherenceOptions {
        path,
        ..Default::default()
    };
    Ok(crate::coherence::single_coherence_with(factors, &opts)?.matrix_s)
}

pub fn heatmap_check_spec(scale: Scale, seed: u64) -> HeatmapSpec {
    HeatmapSpec {
        signal_grid: vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
        d_grid: vec![100, 500, 1100],
        repeats: match scale {
            Scale::Quick => 4,
            Scale::Full => 20,
        },
        master_seed: seed,
        ..Default::default()
    }
}

/// Criterion 6 plus the heatmap CSV it produced.
pub fn memorization_overlap(opts: &VerifyOptions) -> (CriterionReport, String) {
    let mut csv = String::new();
    let outcome = (|| -> Result<(bool, String)> {
        let spec = heatmap_check_spec(opts.scale, derive_seed(opts.seed, 6));
        let cells = snr_heatmap(&spec)?;
        csv = heatmap_csv(&cells);
        let fit: Vec<_> = cells.iter().filter(|c| c.train_loss <= cnnmem::LOSS_TARGET).collect();
        let te: Vec<f64> = fit.iter().map(|c| c.test_error).collect();
        let fl: Vec<f64> = fit.iter().map(|c| c.forget_loss).collect();
        let rho = spearman(&te, &fl);
        let mut ends = Vec::new();
        let mut ends_ok = true;
        for &d in &spec.d_grid {
            let col: Vec<_> = cells.iter().filter(|c| c.d == d).collect();
            let lo = col.iter().min_by(|a, b| a.snr.total_cmp(&b.snr)).expect("nonempty");
            let hi = col.iter().max_by(|a, b| a.snr.total_cmp(&b.snr)).expect("nonempty");
            ends_ok &= lo.forget_loss > hi.forget_loss;
            ends.push(format!("d={d}: {:.3}>{:.3}", lo.forget_loss, hi.forget_loss));
        }
        let rho_ok = rho.is_some_and(|r| r >= 0.5);
        Ok((
            rho_ok && ends_ok,
            format!(
                "spearman {} over {} fitted cells; forget loss low vs high SNR {}",
                rho.map_or("undefined".to_string(), |r| format!("{r:.3}")),
                fit.len(),
                ends.join(", ")
            ),
        ))
    })();
    (report(6, "memorization-forgetting-overlap", outcome), csv)
}

/// Criterion 7: coherence ratio grows from the lowest to the highest SNR.
pub fn coherence_trend(opts: &VerifyOptions) -> CriterionReport {
    let outcome = (|| -> Result<(bool, String)> {
        let spec = CoherenceCurveSpec {
            master_seed: derive_seed(opts.seed, 7),
            ..Default::default()
        };
        let pts = coherence_ratio_curve(&spec)?;
        let first = pts.first().expect("nonempty");
        let last = pts.last().expect("nonempty");
        let curve: Vec<String> = pts.iter().map(|p| format!("{:.2}", p.ratio)).collect();
        Ok((
            last.ratio > first.ratio,
            format!("ratio at snr {} -> {}: {}", first.snr, last.snr, curve.join(" ")),
        ))
    })();
    report(7, "coherence-snr-trend", outcome)
}

/// Criterion 8: reruns compare byte for byte. Criterion 1 is rerun on a
/// two-thread pool to also cover scheduling.
pub fn determinism(opts: &VerifyOptions, sweeps: &[String], heatmap: &str) -> CriterionReport {
    let outcome = (|| -> Result<(bool, String)> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .map_err(|e| crate::Error::InvalidConfig(e.to_string()))?;
        let (_, again1) = pool.install(|| boundary_bracketing(opts));
        let (_, again2) = memorization_overlap(opts);
        let same1 = again1 == sweeps && !sweeps.is_empty();
        let same2 = again2 == heatmap && !heatmap.is_empty();
        Ok((
            same1 && same2,
            format!(
                "sweep CSVs {}, heatmap CSV {}",
                if same1 { "identical" } else { "differ" },
                if same2 { "identical" } else { "differ" }
            ),
        ))
    })();
    report(8, "determinism", outcome)
}

/// Runs the selected criteria in order; criterion 8 reuses the outputs of
/// 1 and 6, running them first if they were not selected.
pub fn run_criteria(
    opts: &VerifyOptions,
    ids: &[u8],
    mut on_report: impl FnMut(&CriterionReport),
) -> Vec<CriterionReport> {
    let mut out = Vec::new();
    let mut sweeps: Option<Vec<String>> = None;
    let mut heatmap: Option<String> = None;
    let mut emit = |r: CriterionReport, out: &mut Vec<CriterionReport>| {
        on_report(&r);
        out.push(r);
    };
    for &id in ids {
        match id {
            1 => {
                let (r, csv) = boundary_bracketing(opts);
                sweeps = Some(csv);
                emit(r, &mut out);
            }
            2 => emit(second_moment_orderings(opts), &mut out),
            3 => emit(matching_construction(opts), &mut out),
            4 => emit(monte_carlo_agreement(opts), &mut out),
            5 => emit(cnn_numerics(opts), &mut out),
            6 => {
                let (r, csv) = memorization_overlap(opts);
                heatmap = Some(csv);
                emit(r, &mut out);
            }
            7 => emit(coherence_trend(opts), &mut out),
            8 => {
                let f1 = sweeps.take().unwrap_or_else(|| boundary_bracketing(opts).1);
                let f2 = heatmap.take().unwrap_or_else(|| memorization_overlap(opts).1);
                emit(determinism(opts, &f1, &f2), &mut out);
            }
            _ => {}
        }
    }
    out
}
