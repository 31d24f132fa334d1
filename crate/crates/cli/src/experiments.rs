//! Experiment runners: Monte Carlo risks overlaid on their limits.

use crate::config::{ConfigError, ExperimentKind, LoadedConfig, RatioChoice, RiskMode, TauChoice};
use hps_core::estimators::{
    bias_variance_from_grams, empirical_bias_variance, excess_risk, fit_avg, fit_hps, fit_hps_fixed_a, fit_ols, fit_ridge, select_hyperparam, SearchConfig,
};
use hps_core::freeaddition::{deformed_mp_limits, model_shift_limits};
use hps_core::model::{draw_beta0, generate_dataset, sample_design, shift_spectrum, NoiseLaw};
use hps_core::montecarlo::{mean_stderr, run_replicates};
use hps_core::multitask::{fit_multitask_hps, multitask_risk_limit, task_gram};
use hps_core::progressive::{progressive_hps, ProgressiveConfig, StopReason};
use hps_core::regimes::{classify_model_shift, limit_curve_crossing, pooled_limit};
use hps_core::rng::{derive_seed, StreamRng};
use hps_core::selfconsistent::{bias_estimate_pi, variance_limit};
use hps_core::SampleSizes;
use hps_core::{CovarianceSpec, Dataset, Mat, RandomEffectSpec, TaskSpec, Vector};
use rand::RngCore;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numeric failure: {0}")]
    Numeric(#[from] hps_core::Error),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Numeric(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

/// One line of the result table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub grid_param: String,
    pub grid_value: f64,
    pub empirical_mean: f64,
    pub empirical_stderr: f64,
    pub theory_value: f64,
    pub rel_dev: f64,
    pub replicates: usize,
    pub seed_base: u64,
}

impl Row {
    pub fn new(grid_param: impl Into<String>, grid_value: f64, samples: &[f64], theory_value: f64, seed_base: u64) -> Self {
        let (empirical_mean, empirical_stderr) = if samples.is_empty() { (f64::NAN, f64::NAN) } else { mean_stderr(samples) };
        Row {
            grid_param: grid_param.into(),
            grid_value,
            empirical_mean,
            empirical_stderr,
            theory_value,
            rel_dev: rel_dev(empirical_mean, theory_value),
            replicates: samples.len(),
            seed_base,
        }
    }
}

pub fn rel_dev(empirical: f64, theory: f64) -> f64 {
    if empirical.is_finite() && theory.is_finite() && theory != 0.0 {
        (empirical - theory) / theory.abs()
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub report: Value,
}

/// Runs the configured experiment. The config must already be validated.
pub fn run_experiment(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    match cfg.config.experiment {
        ExperimentKind::VarianceCovshift => variance_covshift(cfg),
        ExperimentKind::ModelShift => model_shift(cfg),
        ExperimentKind::CombinedShift => combined_shift(cfg),
        ExperimentKind::Baselines => baselines(cfg),
        ExperimentKind::Multitask => multitask(cfg),
        ExperimentKind::Progressive => progressive(cfg),
        ExperimentKind::Regimes => regimes(cfg),
    }
}

fn collect<T>(results: Vec<hps_core::Result<T>>) -> Result<Vec<T>, RunError> {
    results.into_iter().collect::<hps_core::Result<Vec<T>>>().map_err(RunError::from)
}

fn fixed_ratio(cfg: &LoadedConfig) -> Result<f64, RunError> {
    match cfg.config.a {
        RatioChoice::Value(a) => Ok(a),
        RatioChoice::Keyword(_) => Err(cfg.invalid("a", "this experiment needs a fixed ratio").into()),
    }
}

fn label(param: &str, mu: f64) -> String {
    format!("{param}@mu={mu}")
}

/// Coefficients for one replicate: shared direction plus two task-specific perturbations.
fn draw_pair(p: usize, norm: f64, mu: f64, rng: &mut StreamRng) -> (Vector, Vector) {
    let spec = RandomEffectSpec::new(draw_beta0(p, norm, rng), mu).expect("mu validated");
    let b1 = spec.sample(rng);
    let b2 = spec.sample(rng);
    (b1, b2)
}

fn variance_covshift(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let (cov1, cov2) = (cfg.source_cov()?, cfg.target_cov()?);
    let n2 = cfg.n2()?;
    let a = fixed_ratio(cfg)?;
    let lambdas = shift_spectrum(&cov1, &cov2)?.singular_values;
    let zero = Vector::zeros(c.p);
    let mut rows = Vec::new();
    for (k, n1) in cfg.n1_grid()?.into_iter().enumerate() {
        let sizes = SampleSizes::from_counts(c.p, n1, n2)?;
        let theory = variance_limit(a, &lambdas, &sizes, c.sigma)?;
        let seed = derive_seed(c.master_seed, k as u64);
        let emp = collect(run_replicates(seed, c.replicates, |_, rng| {
            let x1 = sample_design(&cov1, n1, c.noise_law, rng);
            let x2 = sample_design(&cov2, n2, c.noise_law, rng);
            empirical_bias_variance(&x1, &x2, &zero, &zero, &cov2, a, c.sigma).map(|r| r.variance)
        }))?;
        rows.push(Row::new("n1", n1 as f64, &emp, theory, seed));
    }
    let report = json!({
        "shift_singular_values": { "max": lambdas[0], "min": lambdas[lambdas.len() - 1] },
        "a": a,
    });
    Ok(Outcome { rows, report })
}

/// Unconditional limit of HPS at ratio `a` under the random-effect model with a
/// shared covariance: `sigma^2 L1(a) + L2(a) E|Sigma^{1/2}(beta1 - a beta2)|^2`.
fn model_shift_theory(a: f64, sizes: &SampleSizes, cov: &CovarianceSpec, mu: f64, sigma: f64, norm: f64) -> hps_core::Result<f64> {
    let lim = model_shift_limits(a, sizes)?;
    let p = sizes.p;
    let per_coord = cov.trace() / p;
    let gap = ((1.0 - a).powi(2) * norm * norm + (1.0 + a * a) * mu * mu) * per_coord;
    Ok(lim.variance(sigma) + lim.bias(gap))
}

fn model_shift(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let cov = cfg.target_cov()?;
    let n2 = cfg.n2()?;
    let grid = cfg.n1_grid()?;
    let mus = cfg.mus()?;
    let mut rows = Vec::new();
    let mut regimes = Vec::new();
    let reference_a = match c.a {
        RatioChoice::Value(a) => a,
        RatioChoice::Keyword(_) => 1.0,
    };
    for (j, mu) in mus.iter().copied().enumerate() {
        for (k, n1) in grid.iter().copied().enumerate() {
            let sizes = SampleSizes::from_counts(c.p, n1, n2)?;
            let theory = model_shift_theory(reference_a, &sizes, &cov, mu, c.sigma, c.beta0_norm)?;
            let seed = derive_seed(c.master_seed, (j * grid.len() + k) as u64);
            let emp = collect(run_replicates(seed, c.replicates, |_, rng| {
                let (b1, b2) = draw_pair(c.p, c.beta0_norm, mu, rng);
                hps_risk(c.a, c.risk, &cov, &cov, n1, n2, &b1, &b2, c.sigma, c.noise_law, rng)
            }))?;
            rows.push(Row::new(label("n1", mu), n1 as f64, &emp, theory, seed));
        }
        let v = classify_model_shift(mu, c.sigma, c.p as f64, n2 as f64)?;
        regimes.push(json!({ "mu": mu, "regime": v.regime, "rho_p": v.rho.map(|r| r * c.p as f64) }));
    }
    // Target-only OLS reference.
    let seed = derive_seed(c.master_seed, (mus.len() * grid.len()) as u64);
    let ols = collect(run_replicates(seed, c.replicates, |_, rng| {
        let x2 = sample_design(&cov, n2, c.noise_law, rng);
        let zero = Vector::zeros(c.p);
        empirical_bias_variance(&Mat::zeros(1, c.p), &x2, &zero, &zero, &cov, 0.0, c.sigma).map(|r| r.variance)
    }))?;
    let ols_theory = c.sigma * c.sigma * c.p as f64 / (n2 - c.p) as f64;
    rows.push(Row::new("ols", n2 as f64, &ols, ols_theory, seed));
    Ok(Outcome { rows, report: json!({ "regimes": regimes, "ols_limit": ols_theory, "reference_a": reference_a }) })
}

/// Target excess risk of one replicate, by decomposition or by fitting.
#[allow(clippy::too_many_arguments)]
fn hps_risk(
    a: RatioChoice,
    mode: RiskMode,
    cov1: &CovarianceSpec,
    cov2: &CovarianceSpec,
    n1: usize,
    n2: usize,
    b1: &Vector,
    b2: &Vector,
    sigma: f64,
    law: NoiseLaw,
    rng: &mut StreamRng,
) -> hps_core::Result<f64> {
    match (a, mode) {
        (RatioChoice::Value(a), RiskMode::Decomposed) => {
            let x1 = sample_design(cov1, n1, law, rng);
            let x2 = sample_design(cov2, n2, law, rng);
            empirical_bias_variance(&x1, &x2, b1, b2, cov2, a, sigma).map(|r| r.excess_risk)
        }
        (choice, _) => {
            let d1 = generate_dataset(&TaskSpec::new(n1, cov1.clone(), b1.clone(), sigma)?, law, rng);
            let d2 = generate_dataset(&TaskSpec::new(n2, cov2.clone(), b2.clone(), sigma)?, law, rng);
            let beta = match choice {
                RatioChoice::Value(a) => fit_hps_fixed_a(&d1, &d2, a)?.beta_hat,
                RatioChoice::Keyword(_) => fit_hps(&d1, &d2, &SearchConfig::default())?.beta_hat,
            };
            Ok(excess_risk(&beta, b2, cov2))
        }
    }
}

fn combined_shift(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let (cov1, cov2) = (cfg.source_cov()?, cfg.target_cov()?);
    let n2 = cfg.n2()?;
    let a = fixed_ratio(cfg)?;
    let grid = cfg.n1_grid()?;
    let lambdas = shift_spectrum(&cov1, &cov2)?.singular_values;
    let mut rows = Vec::new();
    let mut band_report = Vec::new();
    for (j, mu) in cfg.mus()?.into_iter().enumerate() {
        for (k, n1) in grid.iter().copied().enumerate() {
            let sizes = SampleSizes::from_counts(c.p, n1, n2)?;
            let var_theory = variance_limit(a, &lambdas, &sizes, c.sigma)?;
            let deformed = if cov2.is_identity() && a == 1.0 { Some(deformed_mp_limits(&cov1.eigenvalues(), &sizes)?) } else { None };
            let seed = derive_seed(c.master_seed, (j * grid.len() + k) as u64);
            let reps = collect(run_replicates(seed, c.replicates, |_, rng| {
                let (b1, b2) = draw_pair(c.p, c.beta0_norm, mu, rng);
                let x1 = sample_design(&cov1, n1, c.noise_law, rng);
                let x2 = sample_design(&cov2, n2, c.noise_law, rng);
                let r = empirical_bias_variance(&x1, &x2, &b1, &b2, &cov2, a, c.sigma)?;
                let pi = bias_estimate_pi(a, &cov1, &cov2, &sizes, &b1, &b2)?;
                Ok((r.bias, r.variance, pi.estimate, pi.band))
            }))?;
            let bias: Vec<f64> = reps.iter().map(|r| r.0).collect();
            let var: Vec<f64> = reps.iter().map(|r| r.1).collect();
            let pi_mean = if reps.is_empty() { f64::NAN } else { mean_stderr(&reps.iter().map(|r| r.2).collect::<Vec<_>>()).0 };
            let within = reps.iter().filter(|r| (r.0 - r.2).abs() <= r.3).count();
            let bias_theory = deformed.map(|d| d.bias(mu)).unwrap_or(pi_mean);
            let total: Vec<f64> = reps.iter().map(|r| r.0 + r.1).collect();
            rows.push(Row::new(label("n1:variance", mu), n1 as f64, &var, var_theory, seed));
            rows.push(Row::new(label("n1:bias", mu), n1 as f64, &bias, bias_theory, seed));
            rows.push(Row::new(label("n1:total", mu), n1 as f64, &total, bias_theory + var_theory, seed));
            rows.push(Row::new(label("n1:pi_bias", mu), n1 as f64, &bias, pi_mean, seed));
            band_report.push(json!({
                "mu": mu,
                "n1": n1,
                "within_band": within,
                "replicates": reps.len(),
                "deformed_variance": deformed.map(|d| d.variance(c.sigma)),
            }));
        }
    }
    Ok(Outcome { rows, report: json!({ "band": band_report, "a": a }) })
}

fn baselines(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let (cov1, cov2) = (cfg.source_cov()?, cfg.target_cov()?);
    let n2 = cfg.n2()?;
    let grid = cfg.n1_grid()?;
    let names = ["ols", "ridge", "avg", "hps"];
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let ols_theory = if n2 > c.p + 1 && c.noise_law == NoiseLaw::Gaussian { c.sigma * c.sigma * c.p as f64 / (n2 - c.p - 1) as f64 } else { f64::NAN };
    for (j, mu) in cfg.mus()?.into_iter().enumerate() {
        for (k, n1) in grid.iter().copied().enumerate() {
            let seed = derive_seed(c.master_seed, (j * grid.len() + k) as u64);
            let reps = collect(run_replicates(seed, c.replicates, |_, rng| {
                let (b1, b2) = draw_pair(c.p, c.beta0_norm, mu, rng);
                let d1 = generate_dataset(&TaskSpec::new(n1, cov1.clone(), b1, c.sigma)?, c.noise_law, rng);
                let t2 = TaskSpec::new(n2, cov2.clone(), b2.clone(), c.sigma)?;
                let d2 = generate_dataset(&t2, c.noise_law, rng);
                let val = generate_dataset(&t2, c.noise_law, rng);
                baseline_risks(&d1, &d2, &val, &b2, &cov2)
            }))?;
            for (e, name) in names.iter().enumerate() {
                let vals: Vec<f64> = reps.iter().map(|r| r[e]).filter(|v| v.is_finite()).collect();
                let theory = if e == 0 { ols_theory } else { f64::NAN };
                rows.push(Row::new(label(name, mu), n1 as f64, &vals, theory, seed));
            }
            let wins: Vec<f64> = (0..3)
                .map(|e| {
                    let valid: Vec<&[f64; 4]> = reps.iter().filter(|r| r[e].is_finite()).collect();
                    valid.iter().filter(|r| r[3] <= r[e]).count() as f64 / valid.len().max(1) as f64
                })
                .collect();
            summary.push(json!({ "mu": mu, "n1": n1, "hps_win_rate": { "ols": wins[0], "ridge": wins[1], "avg": wins[2] } }));
        }
    }
    Ok(Outcome { rows, report: json!({ "comparisons": summary }) })
}

/// Excess risks of target OLS, tuned ridge, tuned averaging and HPS. Averaging
/// needs a well-posed source fit and is NaN otherwise.
pub fn baseline_risks(d1: &Dataset, d2: &Dataset, val: &Dataset, beta2: &Vector, cov2: &CovarianceSpec) -> hps_core::Result<[f64; 4]> {
    let ols2 = fit_ols(d2)?;
    let n2 = d2.n() as f64;
    let ridge: Vec<(f64, Vector)> = std::iter::once(0.0)
        .chain((0..25).map(|j| n2 * 10f64.powf(-4.0 + 0.25 * j as f64)))
        .map(|k| fit_ridge(d2, k).map(|b| (k, b)))
        .collect::<hps_core::Result<_>>()?;
    let (ri, _) = select_hyperparam(&ridge, val).expect("non-empty grid");
    let avg = if d1.n() > d1.p() {
        let ols1 = fit_ols(d1)?;
        let cands: Vec<(f64, Vector)> = (0..=20).map(|j| j as f64 / 20.0).map(|b| (b, fit_avg(&ols1, &ols2, b))).collect();
        let (ai, _) = select_hyperparam(&cands, val).expect("non-empty grid");
        excess_risk(&cands[ai].1, beta2, cov2)
    } else {
        f64::NAN
    };
    let hps = fit_tuned_hps(d1, d2, val)?;
    Ok([excess_risk(&ols2, beta2, cov2), excess_risk(&ridge[ri].1, beta2, cov2), avg, excess_risk(&hps, beta2, cov2)])
}

/// Task-weighted, ridge-regularized HPS with `(b, k)` chosen on `val`.
///
/// The weighted objective is plain HPS on rescaled data: source rows scaled by
/// `sqrt(b)`, target rows by `sqrt(1 - b)`, and `sqrt(k/2) I` appended to the
/// target design with zero responses. `b = 1/2, k = 0` is unweighted HPS.
pub fn fit_tuned_hps(d1: &Dataset, d2: &Dataset, val: &Dataset) -> hps_core::Result<Vector> {
    let p = d2.p();
    let n2 = d2.n() as f64;
    let ks: Vec<f64> = std::iter::once(0.0).chain((0..13).map(|j| n2 * 10f64.powf(-4.0 + 0.5 * j as f64))).collect();
    let search = SearchConfig::default();
    let mut cands = Vec::new();
    for b in (1..10).map(|j| j as f64 / 10.0) {
        let src = Dataset::new(&d1.x * b.sqrt(), &d1.y * b.sqrt())?;
        for k in &ks {
            let w = (1.0 - b).sqrt();
            let ridge = (k / 2.0).sqrt();
            let mut x = Mat::zeros(d2.n() + p, p);
            x.rows_mut(0, d2.n()).copy_from(&(&d2.x * w));
            x.rows_mut(d2.n(), p).fill_diagonal(ridge);
            let mut y = Vector::zeros(d2.n() + p);
            y.rows_mut(0, d2.n()).copy_from(&(&d2.y * w));
            let tgt = Dataset::new(x, y)?;
            // Ties go to the candidate closest to the unweighted fit.
            cands.push(((b - 0.5).abs() + k, fit_hps(&src, &tgt, &search)?.beta_hat));
        }
    }
    let (i, _) = select_hyperparam(&cands, val).expect("non-empty grid");
    Ok(cands.swap_remove(i).1)
}

fn multitask(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let cov = cfg.target_cov()?;
    let n = c.n.expect("validated");
    let t = c.t.expect("validated");
    let ranks = cfg.ranks()?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let unit = c.sigma * c.sigma * c.p as f64 / (n - c.p) as f64;
    for (j, mu) in cfg.mus()?.into_iter().enumerate() {
        let seed = derive_seed(c.master_seed, j as u64);
        let reps = collect(run_replicates(seed, c.replicates, |_, rng| {
            let spec = RandomEffectSpec::new(draw_beta0(c.p, c.beta0_norm, rng), mu)?;
            let b = spec.sample_matrix(t, rng);
            let x = sample_design(&cov, n, c.noise_law, rng);
            let noise = hps_core::model::sample_standard::<f64, _>(n, t, NoiseLaw::Gaussian, rng);
            let ys = &x * &b + noise * c.sigma;
            let gram = task_gram(&b, &cov);
            ranks
                .iter()
                .map(|r| {
                    let fit = fit_multitask_hps(&x, &ys, *r)?;
                    let risk: f64 = match c.risk {
                        RiskMode::Decomposed => fit.decomposed_risks(&b, &cov, c.sigma).iter().map(|(bi, vi)| bi + vi).sum(),
                        RiskMode::Realized => fit.excess_risks(&b, &cov).iter().sum(),
                    };
                    let lim = multitask_risk_limit(&gram, *r, c.p as f64, n as f64, c.sigma)?;
                    Ok((risk / t as f64, lim.averaged))
                })
                .collect::<hps_core::Result<Vec<(f64, f64)>>>()
        }))?;
        for (i, r) in ranks.iter().enumerate() {
            let emp: Vec<f64> = reps.iter().map(|v| v[i].0).collect();
            let theory = if reps.is_empty() {
                // Rank-one-plus-identity approximation of the task Gram.
                let spread = mu * mu * cov.trace() / c.p as f64;
                (1.0 - *r as f64 / t as f64) * spread + unit * *r as f64 / t as f64
            } else {
                mean_stderr(&reps.iter().map(|v| v[i].1).collect::<Vec<_>>()).0
            };
            rows.push(Row::new(label("r", mu), *r as f64, &emp, theory, seed));
        }
        let advice = hps_core::regimes::optimal_width_multitask(mu, c.sigma, c.p as f64, n as f64, cov.trace(), t)?;
        summary.push(json!({ "mu": mu, "r_star": advice.r_star, "positive_transfer": advice.positive_transfer, "mu2_threshold": advice.threshold }));
    }
    Ok(Outcome { rows, report: json!({ "width": summary, "ols_limit": unit }) })
}

/// Stopping size predicted by applying the stopping rule to the pooled limit curve.
pub fn predicted_stop(sizes: &[usize], mu: f64, sigma: f64, p: usize, n2: usize, patience: usize) -> hps_core::Result<usize> {
    let mut prev = f64::INFINITY;
    let mut rises = 0;
    for s in sizes {
        let v = pooled_limit(*s as f64, mu, sigma, p as f64, n2 as f64)?;
        rises = if v > prev { rises + 1 } else { 0 };
        if rises >= patience {
            return Ok(*s);
        }
        prev = v;
    }
    Ok(*sizes.last().expect("non-empty plan"))
}

/// Outcome of one progressive run.
#[derive(Debug, Clone, Serialize)]
pub struct ProgressiveRun {
    pub stop_size: usize,
    pub reason: StopReason,
    pub best_size: usize,
    pub target_excess_risk: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn progressive_replicate(
    p: usize,
    pool: usize,
    n2: usize,
    n_val: usize,
    mu: f64,
    sigma: f64,
    norm: f64,
    cov1: &CovarianceSpec,
    cov2: &CovarianceSpec,
    law: NoiseLaw,
    pcfg: &ProgressiveConfig<f64>,
    tau: Option<TauChoice>,
    rng: &mut StreamRng,
) -> hps_core::Result<ProgressiveRun> {
    let (b1, b2) = draw_pair(p, norm, mu, rng);
    let d1 = generate_dataset(&TaskSpec::new(pool, cov1.clone(), b1, sigma)?, law, rng);
    let t2 = TaskSpec::new(n2, cov2.clone(), b2.clone(), sigma)?;
    let d2 = generate_dataset(&t2, law, rng);
    let val = generate_dataset(&TaskSpec::new(n_val, cov2.clone(), b2.clone(), sigma)?, law, rng);
    let threshold = match tau {
        None => None,
        Some(TauChoice::Value(v)) => Some(v),
        Some(TauChoice::Keyword(_)) => Some(val.mse(&fit_ols(&d2)?)),
    };
    let cfg = ProgressiveConfig { threshold, ..*pcfg };
    let (trace, sol) = progressive_hps(&d1, &d2, &val, &cfg, rng.next_u64())?;
    Ok(ProgressiveRun {
        stop_size: trace.stop_size(),
        reason: trace.stop_reason,
        best_size: trace.stage_sizes[trace.best_stage],
        target_excess_risk: excess_risk(&sol.beta_hat, &b2, cov2),
    })
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn progressive(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let (cov1, cov2) = (cfg.source_cov()?, cfg.target_cov()?);
    let pool = cfg.n1_grid()?[0];
    let n2 = cfg.n2()?;
    let batches = c.batches.expect("validated");
    let pcfg = ProgressiveConfig { patience: c.patience, ..ProgressiveConfig::new(batches) };
    let plan: Vec<usize> = (1..=batches).map(|i| i * pool / batches).collect();
    let isotropic = cov1.is_identity() && cov2.is_identity();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (j, mu) in cfg.mus()?.into_iter().enumerate() {
        let seed = derive_seed(c.master_seed, j as u64);
        let runs = collect(run_replicates(seed, c.replicates, |_, rng| {
            progressive_replicate(c.p, pool, n2, c.n_val.unwrap_or(n2), mu, c.sigma, c.beta0_norm, &cov1, &cov2, c.noise_law, &pcfg, c.tau, rng)
        }))?;
        let stops: Vec<f64> = runs.iter().map(|r| r.stop_size as f64).collect();
        let theory = if isotropic && c.tau.is_none() { predicted_stop(&plan, mu, c.sigma, c.p, n2, c.patience)? as f64 } else { f64::NAN };
        rows.push(Row::new("stop_n1@mu", mu, &stops, theory, seed));
        let verdict = classify_model_shift(mu, c.sigma, c.p as f64, n2 as f64)?;
        let exhausted = runs.iter().filter(|r| r.reason == StopReason::Exhausted).count();
        summary.push(json!({
            "mu": mu,
            "regime": verdict.regime,
            "rho_p": verdict.rho.map(|r| r * c.p as f64),
            "median_stop_n1": median(&mut stops.clone()),
            "exhausted_fraction": exhausted as f64 / runs.len().max(1) as f64,
            "runs": runs,
        }));
    }
    Ok(Outcome { rows, report: json!({ "plan": plan, "summary": summary }) })
}

/// Monte Carlo estimate of the source size at which pooled HPS (`a = 1`) stops
/// beating target-only OLS. Designs are nested across the grid within each
/// replicate, and the OLS term shares the target design (common random numbers).
/// Returns the linearly interpolated crossing and the mean risk gap per grid point.
#[allow(clippy::too_many_arguments)]
pub fn mc_crossing(p: usize, n2: usize, mu: f64, sigma: f64, norm: f64, grid: &[usize], reps: usize, seed: u64) -> hps_core::Result<(Option<f64>, Vec<f64>)> {
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    let cov = CovarianceSpec::identity(p);
    let max = *grid.last().expect("non-empty grid");
    let gaps = run_replicates(seed, reps, |_, rng| {
        let (b1, b2) = draw_pair(p, norm, mu, rng);
        let x2 = sample_design(&cov, n2, NoiseLaw::Gaussian, rng);
        let x1 = sample_design(&cov, max, NoiseLaw::Gaussian, rng);
        let g2 = x2.tr_mul(&x2);
        let ols = bias_variance_from_grams(&Mat::zeros(p, p), &g2, &b1, &b2, &cov, 0.0, sigma)?.variance;
        let mut g1 = Mat::zeros(p, p);
        let mut done = 0;
        let mut out = Vec::with_capacity(grid.len());
        for n1 in &grid {
            let block = x1.rows(done, n1 - done);
            g1 += block.tr_mul(&block);
            done = *n1;
            let r = bias_variance_from_grams(&g1, &g2, &b1, &b2, &cov, 1.0, sigma)?;
            out.push(r.excess_risk - ols);
        }
        Ok(out)
    });
    let gaps = gaps.into_iter().collect::<hps_core::Result<Vec<Vec<f64>>>>()?;
    let mean: Vec<f64> = (0..grid.len()).map(|i| gaps.iter().map(|g| g[i]).sum::<f64>() / gaps.len() as f64).collect();
    let mut crossing = None;
    for i in 1..grid.len() {
        if mean[i - 1] < 0.0 && mean[i] >= 0.0 {
            let (x0, x1) = (grid[i - 1] as f64, grid[i] as f64);
            crossing = Some(x0 + (x1 - x0) * (-mean[i - 1]) / (mean[i] - mean[i - 1]));
            break;
        }
    }
    Ok((crossing, mean))
}

fn regimes(cfg: &LoadedConfig) -> Result<Outcome, RunError> {
    let c = &cfg.config;
    let n2 = cfg.n2()?;
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    for (j, mu) in cfg.mus()?.into_iter().enumerate() {
        let v = classify_model_shift(mu, c.sigma, c.p as f64, n2 as f64)?;
        let curve = limit_curve_crossing(mu, c.sigma, c.p as f64, n2 as f64)?;
        let rho_p = v.rho.map(|r| r * c.p as f64).unwrap_or(f64::NAN);
        let seed = derive_seed(c.master_seed, j as u64);
        let mut gaps = Vec::new();
        let mut emp = Vec::new();
        if c.replicates > 0 {
            let grid = cfg.n1_grid()?;
            let (crossing, mean) = mc_crossing(c.p, n2, mu, c.sigma, c.beta0_norm, &grid, c.replicates, seed)?;
            gaps = mean;
            emp.push(crossing.unwrap_or(f64::NAN));
        }
        let mut row = Row::new("crossing_n1@mu", mu, &emp, rho_p, seed);
        row.replicates = if emp.is_empty() { 0 } else { c.replicates };
        rows.push(row);
        verdicts.push(json!({
            "mu": mu,
            "regime": v.regime,
            "rho": v.rho,
            "rho_p": v.rho.map(|r| r * c.p as f64),
            "limit_curve_crossing": curve,
            "mu2_low": v.mu2_low,
            "mu2_high": v.mu2_high,
            "coefficients": v.coefficients,
            "positive_window": v.positive_window,
            "outside_proven_range": v.outside_proven_range,
            "mc_mean_gap": gaps,
        }));
    }
    let text: Vec<String> = verdicts
        .iter()
        .map(|v| {
            let regime = v["regime"].as_str().unwrap_or("?").to_string();
            match v["rho_p"].as_f64() {
                Some(r) => format!("mu={} {} (n1* = {:.1})", v["mu"], regime, r),
                None => format!("mu={} {}", v["mu"], regime),
            }
        })
        .collect();
    Ok(Outcome { rows, report: json!({ "verdicts": verdicts, "summary": text }) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let singular = RunError::Numeric(hps_core::Error::Singular { context: "test", condition: 1e20 });
        assert_eq!(singular.exit_code(), 3);
        let input = RunError::Numeric(hps_core::Error::InvalidInput("n2 <= p".into()));
        assert_eq!(input.exit_code(), 2);
    }

    #[test]
    fn rel_dev_handles_degenerate_theory() {
        assert!(rel_dev(1.0, 0.0).is_nan());
        assert!(rel_dev(f64::NAN, 1.0).is_nan());
        assert!((rel_dev(1.1, 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stopping_rule_on_limit_curve() {
        let plan: Vec<usize> = (1..=10).map(|i| i * 300).collect();
        // No model shift: the pooled limit only decreases.
        assert_eq!(predicted_stop(&plan, 0.0, 0.5, 100, 300, 1).unwrap(), 3000);
        // Always negative: the first increase comes right away.
        assert_eq!(predicted_stop(&plan, 0.45, 0.5, 100, 300, 1).unwrap(), 600);
    }

    #[test]
    fn crossing_is_deterministic() {
        let grid = [60, 120, 240, 480];
        let a = mc_crossing(20, 60, 0.3, 0.5, 1.0, &grid, 8, 5).unwrap();
        let b = mc_crossing(20, 60, 0.3, 0.5, 1.0, &grid, 8, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), grid.len());
    }
}
