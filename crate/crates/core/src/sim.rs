//! Data-generating processes and the replication study harness.
//!
//! Panels are generated with unit-level heterogeneity in the treatment
//! process: each unit draws a persistent shock that shifts its treatment
//! propensity and also enters the outcome, so pooling over units without
//! accounting for it confounds the treatment effect. The study harness runs
//! seeded replications comparing three weighting estimators of the same
//! marginal structural model:
//!
//! - `IPTW-FE` — propensities from the fixed-effects fit,
//! - `IPTW-T`  — the exact propensities the generator used,
//! - `IPTW`    — propensities from the pooled fit without unit effects.
//!
//! Reproducibility contract: every replication draws from its own stream of
//! one ChaCha20 generator, keyed by the master seed with the stream id set to
//! `replication index + 1` (stream 0 is reserved). Replications may execute
//! on any number of threads; results are collected by replication index and
//! aggregated in index order, so output is bitwise independent of scheduling.

use crate::link::expit;
use crate::msm::{fit_msm_wls, HistoryFeature, MsmSpec, VarianceFlavor};
use crate::panel::{build_design, LagSpec, PanelDataset};
use crate::ps::{
    fit_fixed_effects_mle, fit_marginal_model, fit_pooled_mle, ProbGrid, PsSpec,
};
use crate::weights::{apply_trimming, compute_weights, Trimming, WeightSpec};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lags in the weight window of the study's estimating equation: the final
/// period plus the three before it.
pub const STUDY_WEIGHT_LAGS: usize = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least two successful replications, have {0}")]
    TooFewReplications(usize),
}

/// The estimators the study can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "IPTW-FE")]
    IptwFe,
    #[serde(rename = "IPTW-T")]
    IptwTrue,
    #[serde(rename = "IPTW")]
    Iptw,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::IptwFe => write!(f, "IPTW-FE"),
            Estimator::IptwTrue => write!(f, "IPTW-T"),
            Estimator::Iptw => write!(f, "IPTW"),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "IPTW-FE" | "IPTWFE" => Ok(Estimator::IptwFe),
            "IPTW-T" | "IPTWT" => Ok(Estimator::IptwTrue),
            "IPTW" => Ok(Estimator::Iptw),
            other => Err(format!("unknown estimator '{other}'")),
        }
    }
}

/// The two estimands every study reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    FinalPeriod,
    Cumulative,
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimand::FinalPeriod => write!(f, "final_period"),
            Estimand::Cumulative => write!(f, "cumulative"),
        }
    }
}

/// Study configuration. The serialized names are the flat keys of the config
/// file and the CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Number of units.
    #[serde(rename = "n")]
    pub units: usize,
    /// Ratio of units to periods; the period count is `round(n / rho)`.
    #[serde(rename = "rho")]
    pub unit_period_ratio: f64,
    /// Half-width of the uniform unit-effect distribution.
    #[serde(rename = "a")]
    pub heterogeneity: f64,
    /// Number of time-varying covariates.
    #[serde(rename = "p")]
    pub n_covariates: usize,
    /// Coefficient on last period's treatment in the treatment model.
    #[serde(rename = "phi", default = "default_persistence")]
    pub treatment_persistence: f64,
    /// Covariate coefficients in the treatment model; defaults depend on `p`.
    #[serde(rename = "beta", default)]
    pub treatment_covariate_effects: Option<Vec<f64>>,
    /// True final-period effect.
    #[serde(rename = "tau_f", default = "default_effect_final")]
    pub effect_final: f64,
    /// True cumulative effect of the three periods before the final one.
    #[serde(rename = "tau_c", default = "default_effect_cumulative")]
    pub effect_cumulative: f64,
    /// Covariate coefficients in the outcome model; defaults depend on `p`.
    #[serde(rename = "gamma_out", default)]
    pub outcome_covariate_effects: Option<Vec<f64>>,
    /// Common correlation between covariate columns.
    #[serde(rename = "sigma_offdiag", default = "default_correlation")]
    pub covariate_correlation: f64,
    #[serde(rename = "reps")]
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Strategy for units the fixed-effects fit cannot identify.
    #[serde(default)]
    pub trimming: Trimming,
    #[serde(default = "default_true")]
    pub stabilized: bool,
    /// Extra leading periods generated and discarded.
    #[serde(default)]
    pub burn_in: usize,
}

fn default_persistence() -> f64 {
    0.3
}

fn default_effect_final() -> f64 {
    1.0
}

fn default_effect_cumulative() -> f64 {
    0.3
}

fn default_correlation() -> f64 {
    0.2
}

fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::IptwFe, Estimator::IptwTrue, Estimator::Iptw]
}

fn default_ci_level() -> f64 {
    0.90
}

fn default_true() -> bool {
    true
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            units: 500,
            unit_period_ratio: 10.0,
            heterogeneity: 1.0,
            n_covariates: 2,
            treatment_persistence: default_persistence(),
            treatment_covariate_effects: None,
            effect_final: default_effect_final(),
            effect_cumulative: default_effect_cumulative(),
            outcome_covariate_effects: None,
            covariate_correlation: default_correlation(),
            replications: 500,
            master_seed: 94_720,
            estimators: default_estimators(),
            ci_level: default_ci_level(),
            trimming: Trimming::DropUnits,
            stabilized: default_true(),
            burn_in: 0,
        }
    }
}

impl SimConfig {
    /// Period count implied by the unit count and the ratio.
    pub fn n_periods(&self) -> usize {
        (self.units as f64 / self.unit_period_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.units == 0 {
            return Err(SimError::InvalidConfig("n must be positive".into()));
        }
        if !(self.unit_period_ratio > 0.0) {
            return Err(SimError::InvalidConfig("rho must be positive".into()));
        }
        let t = self.n_periods();
        if t < 4 {
            return Err(SimError::InvalidConfig(format!(
                "n/rho gives {t} periods; the cumulative window needs at least 4"
            )));
        }
        if self.burn_in > 0 && t < 5 {
            return Err(SimError::InvalidConfig(
                "burn-in drops the first modeled period; need at least 5 periods".into(),
            ));
        }
        if self.heterogeneity < 0.0 {
            return Err(SimError::InvalidConfig("a must be non-negative".into()));
        }
        if !(self.covariate_correlation > -1.0 && self.covariate_correlation < 1.0) {
            return Err(SimError::InvalidConfig("sigma_offdiag must lie in (-1, 1)".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(SimError::InvalidConfig("ci_level must lie in (0, 1)".into()));
        }
        if self.estimators.is_empty() {
            return Err(SimError::InvalidConfig("at least one estimator required".into()));
        }
        self.resolved_treatment_effects()?;
        self.resolved_outcome_effects()?;
        Ok(())
    }

    /// Treatment-model covariate coefficients, defaulted by covariate count.
    pub fn resolved_treatment_effects(&self) -> Result<Vec<f64>, SimError> {
        resolve_effects(
            &self.treatment_covariate_effects,
            self.n_covariates,
            &[-0.5, -0.5],
            &[-0.5, -0.5, 1.0, -0.5],
            "beta",
        )
    }

    /// Outcome-model covariate coefficients, defaulted by covariate count.
    pub fn resolved_outcome_effects(&self) -> Result<Vec<f64>, SimError> {
        resolve_effects(
            &self.outcome_covariate_effects,
            self.n_covariates,
            &[1.0, 0.5],
            &[1.0, 0.5, 1.0, 1.0],
            "gamma_out",
        )
    }

    /// Lag handling for every estimation design in the study. Without
    /// burn-in the generator starts each unit untreated, so the first
    /// period's lag is known to be zero; with burn-in the pre-sample history
    /// is discarded and the first period is dropped instead.
    pub fn estimation_lag_spec(&self) -> LagSpec {
        LagSpec {
            treatment_lags: 1,
            covariate_lags: 0,
            covariate_indices: None,
            initial_treatment: if self.burn_in == 0 { Some(0) } else { None },
        }
    }
}

fn resolve_effects(
    given: &Option<Vec<f64>>,
    p: usize,
    two: &[f64],
    four: &[f64],
    name: &str,
) -> Result<Vec<f64>, SimError> {
    match given {
        Some(v) => {
            if v.len() != p {
                return Err(SimError::InvalidConfig(format!(
                    "{name} has {} entries for {p} covariates",
                    v.len()
                )));
            }
            Ok(v.clone())
        }
        None if p == 2 => Ok(two.to_vec()),
        None if p == 4 => Ok(four.to_vec()),
        None if p == 0 => Ok(Vec::new()),
        None => Err(SimError::InvalidConfig(format!(
            "no default {name} for p = {p}; supply it explicitly"
        ))),
    }
}

/// Everything the generator knew that an analyst would not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub unit_effects: Vec<f64>,
    /// Exact treatment probabilities along the realized path, units by
    /// periods.
    pub propensities: Array2<f64>,
    /// Treatment in the period immediately before the kept window (all zero
    /// without burn-in).
    pub initial_lag: Vec<u8>,
    pub effect_final: f64,
    pub effect_cumulative: f64,
}

impl Truth {
    /// The exact propensities as a grid covering every period.
    pub fn propensity_grid(&self) -> ProbGrid {
        ProbGrid::new(0, self.propensities.clone())
    }

    pub fn value_of(&self, estimand: Estimand) -> f64 {
        match estimand {
            Estimand::FinalPeriod => self.effect_final,
            Estimand::Cumulative => self.effect_cumulative,
        }
    }
}

/// One replication's generator, keyed by the master seed and the replication
/// index (stream `rep + 1`; stream 0 is reserved for non-replication use).
pub fn replication_rng(master_seed: u64, rep: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

/// Draw one panel. Draw order within the stream: unit effects, covariates
/// (unit-major, then period, then column), treatment path, outcome noise.
pub fn generate_panel(
    config: &SimConfig,
    rep: usize,
) -> Result<(PanelDataset, Truth), SimError> {
    config.validate()?;
    let mut rng = replication_rng(config.master_seed, rep);
    let n = config.units;
    let t = config.n_periods();
    let p = config.n_covariates;
    let t_gen = t + config.burn_in;
    let beta = config.resolved_treatment_effects()?;
    let gamma = config.resolved_outcome_effects()?;

    let unit_effects: Vec<f64> = (0..n)
        .map(|_| config.heterogeneity * (2.0 * rng.random::<f64>() - 1.0))
        .collect();

    // Correlated covariates: mean -1/2, unit variance, common off-diagonal
    // correlation, drawn via the Cholesky factor.
    let chol = covariate_cholesky(p, config.covariate_correlation)?;
    let mut covariates_gen = Array3::<f64>::zeros((n, t_gen, p));
    let mut z = vec![0.0f64; p];
    for i in 0..n {
        for s in 0..t_gen {
            for zj in z.iter_mut() {
                *zj = StandardNormal.sample(&mut rng);
            }
            for j in 0..p {
                let mut x = -0.5;
                for (k, zk) in z.iter().enumerate().take(j + 1) {
                    x += chol[(j, k)] * zk;
                }
                covariates_gen[[i, s, j]] = x;
            }
        }
    }

    let mut treatment_gen = Array2::<u8>::zeros((n, t_gen));
    let mut propensities_gen = Array2::<f64>::zeros((n, t_gen));
    for i in 0..n {
        let mut lag = 0u8;
        for s in 0..t_gen {
            let mut eta = unit_effects[i] + config.treatment_persistence * f64::from(lag);
            for j in 0..p {
                eta += beta[j] * covariates_gen[[i, s, j]];
            }
            let pi = expit(eta);
            propensities_gen[[i, s]] = pi;
            let d = u8::from(rng.random::<f64>() < pi);
            treatment_gen[[i, s]] = d;
            lag = d;
        }
    }

    // Keep the last `t` periods.
    let b = config.burn_in;
    let treatment = treatment_gen.slice(ndarray::s![.., b..]).to_owned();
    let covariates = covariates_gen.slice(ndarray::s![.., b.., ..]).to_owned();
    let propensities = propensities_gen.slice(ndarray::s![.., b..]).to_owned();
    let initial_lag: Vec<u8> = if b == 0 {
        vec![0; n]
    } else {
        (0..n).map(|i| treatment_gen[[i, b - 1]]).collect()
    };

    let mut outcome = Array1::<f64>::zeros(n);
    for i in 0..n {
        let noise: f64 = StandardNormal.sample(&mut rng);
        let mut y = unit_effects[i] + config.effect_final * f64::from(treatment[[i, t - 1]]);
        for lag in 1..=3 {
            y += config.effect_cumulative * f64::from(treatment[[i, t - 1 - lag]]);
        }
        // Outcome loads on the time-averaged covariates.
        for j in 0..p {
            let mean_x =
                (0..t).map(|s| covariates[[i, s, j]]).sum::<f64>() / t as f64;
            y += gamma[j] * mean_x;
        }
        outcome[i] = y + noise;
    }

    let data = PanelDataset::new(
        treatment,
        covariates,
        (0..p).map(|j| format!("x{}", j + 1)).collect(),
        Some(outcome),
        (0..n).map(|i| format!("u{:05}", i + 1)).collect(),
        (1..=t as i64).collect(),
    )
    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let truth = Truth {
        unit_effects,
        propensities,
        initial_lag,
        effect_final: config.effect_final,
        effect_cumulative: config.effect_cumulative,
    };
    Ok((data, truth))
}

/// Exact treatment probabilities along the realized path, recomputed from
/// the truth record and the panel.
pub fn true_propensities(config: &SimConfig, truth: &Truth, data: &PanelDataset) -> Array2<f64> {
    let n = data.n_units();
    let t = data.n_periods();
    let p = data.n_covariates();
    let beta = config.resolved_treatment_effects().expect("validated config");
    let mut probs = Array2::<f64>::zeros((n, t));
    for i in 0..n {
        let mut lag = truth.initial_lag[i];
        for s in 0..t {
            let mut eta =
                truth.unit_effects[i] + config.treatment_persistence * f64::from(lag);
            for j in 0..p {
                eta += beta[j] * data.covariates()[[i, s, j]];
            }
            probs[[i, s]] = expit(eta);
            lag = data.treatment()[[i, s]];
        }
    }
    probs
}

fn covariate_cholesky(p: usize, correlation: f64) -> Result<nalgebra::DMatrix<f64>, SimError> {
    if p == 0 {
        return Ok(nalgebra::DMatrix::zeros(0, 0));
    }
    let sigma = nalgebra::DMatrix::from_fn(p, p, |a, b| if a == b { 1.0 } else { correlation });
    nalgebra::Cholesky::new(sigma)
        .map(|c| c.l())
        .ok_or_else(|| SimError::InvalidConfig("covariate correlation is not positive definite".into()))
}

/// Point estimate and interval for one estimand in one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepEstimate {
    pub final_period: TermEstimate,
    pub cumulative: TermEstimate,
    pub n_effective: usize,
}

impl RepEstimate {
    pub fn term(&self, estimand: Estimand) -> &TermEstimate {
        match estimand {
            Estimand::FinalPeriod => &self.final_period,
            Estimand::Cumulative => &self.cumulative,
        }
    }
}

/// A replication where an estimator errored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replication: usize,
    pub estimator: Estimator,
    pub message: String,
}

/// Aggregate metrics for one estimator and estimand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub estimand: Estimand,
    pub truth: f64,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_std_error: f64,
    pub coverage: f64,
    pub n_used: usize,
    pub n_failures: usize,
}

/// The study output: summary rows plus the full per-replication estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub n_periods: usize,
    pub summaries: Vec<SummaryRow>,
    /// Outer index follows `config.estimators`; inner index is the
    /// replication; `None` marks a failure.
    pub estimates: Vec<Vec<Option<RepEstimate>>>,
    pub failures: Vec<FailureRecord>,
}

impl SimResult {
    pub fn summary(&self, estimator: Estimator, estimand: Estimand) -> Option<&SummaryRow> {
        self.summaries
            .iter()
            .find(|s| s.estimator == estimator && s.estimand == estimand)
    }
}

/// Aggregate estimates against the truth: mean bias, spread with denominator
/// `n - 1`, mean reported standard error, and interval coverage.
pub fn summarize(
    estimates: &[TermEstimate],
    truth: f64,
) -> Result<(f64, f64, f64, f64), SimError> {
    let n = estimates.len();
    if n < 2 {
        return Err(SimError::TooFewReplications(n));
    }
    let nf = n as f64;
    let mean = estimates.iter().map(|e| e.estimate).sum::<f64>() / nf;
    let var = estimates.iter().map(|e| (e.estimate - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let mean_se = estimates.iter().map(|e| e.std_error).sum::<f64>() / nf;
    let hits = estimates
        .iter()
        .filter(|e| e.ci_lower <= truth && truth <= e.ci_upper)
        .count();
    Ok((mean - truth, var.sqrt(), mean_se, hits as f64 / nf))
}

/// Run one estimator on one generated panel.
fn run_estimator(
    estimator: Estimator,
    config: &SimConfig,
    data: &PanelDataset,
    truth: &Truth,
    numerator: Option<&ProbGrid>,
    msm_spec: &MsmSpec,
) -> Result<RepEstimate, String> {
    let lag_spec = config.estimation_lag_spec();
    let weight_spec = WeightSpec {
        k: STUDY_WEIGHT_LAGS,
        stabilized: config.stabilized,
        trimming: match estimator {
            Estimator::IptwFe => config.trimming,
            // The benchmarks have no non-identified units to resolve.
            Estimator::IptwTrue | Estimator::Iptw => Trimming::None,
        },
    };

    let (grid, included) = match estimator {
        Estimator::IptwFe => {
            let design = build_design(data, &lag_spec).map_err(|e| e.to_string())?;
            let fit = fit_fixed_effects_mle(&design, data.treatment(), &PsSpec::default())
                .map_err(|e| e.to_string())?;
            let trimmed = apply_trimming(&fit, &design, data.treatment(), &weight_spec)
                .map_err(|e| e.to_string())?;
            (trimmed.probs, Some(trimmed.included))
        }
        Estimator::IptwTrue => (truth.propensity_grid(), None),
        Estimator::Iptw => {
            let design = build_design(data, &lag_spec).map_err(|e| e.to_string())?;
            let fit = fit_pooled_mle(&design, data.treatment(), &PsSpec::default())
                .map_err(|e| e.to_string())?;
            (fit.fitted, None)
        }
    };

    let weights = compute_weights(
        &grid,
        numerator,
        data.treatment(),
        &weight_spec,
        included.as_deref(),
    )
    .map_err(|e| e.to_string())?;
    let fit = fit_msm_wls(data, &weights, msm_spec).map_err(|e| e.to_string())?;

    let pull = |name: &str| -> Result<TermEstimate, String> {
        let term = fit.term(name).ok_or_else(|| format!("missing term {name}"))?;
        Ok(TermEstimate {
            estimate: term.estimate,
            std_error: term.std_error,
            ci_lower: term.ci_lower,
            ci_upper: term.ci_upper,
        })
    };
    Ok(RepEstimate {
        final_period: pull(&msm_spec.features[0].name)?,
        cumulative: pull(&msm_spec.features[1].name)?,
        n_effective: fit.n_effective,
    })
}

/// Run the full study: replications in parallel, aggregation in replication
/// order.
pub fn run_study(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let msm_spec = MsmSpec {
        features: vec![HistoryFeature::final_period(), HistoryFeature::trailing_sum(1, 3)],
        include_intercept: true,
        confidence_level: config.ci_level,
        variance: VarianceFlavor::Hc2,
    };

    type RepOutcome = Vec<Result<RepEstimate, String>>;
    let outcomes: Vec<Result<RepOutcome, SimError>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let (data, truth) = generate_panel(config, rep)?;
            let numerator = if config.stabilized {
                let initial = config.estimation_lag_spec().initial_treatment;
                Some(
                    fit_marginal_model(data.treatment(), 1, initial)
                        .map_err(|e| e.to_string()),
                )
            } else {
                None
            };
            let per_estimator = config
                .estimators
                .iter()
                .map(|&estimator| {
                    let numerator_grid = match &numerator {
                        Some(Ok(fit)) => Some(&fit.fitted),
                        Some(Err(e)) => return Err(format!("numerator model: {e}")),
                        None => None,
                    };
                    run_estimator(estimator, config, &data, &truth, numerator_grid, &msm_spec)
                })
                .collect();
            Ok(per_estimator)
        })
        .collect();

    let mut estimates: Vec<Vec<Option<RepEstimate>>> =
        vec![Vec::with_capacity(config.replications); config.estimators.len()];
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        let per_estimator = outcome?;
        for (e_idx, result) in per_estimator.into_iter().enumerate() {
            match result {
                Ok(est) => estimates[e_idx].push(Some(est)),
                Err(message) => {
                    failures.push(FailureRecord {
                        replication: rep,
                        estimator: config.estimators[e_idx],
                        message,
                    });
                    estimates[e_idx].push(None);
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for (e_idx, &estimator) in config.estimators.iter().enumerate() {
        let successes: Vec<&RepEstimate> =
            estimates[e_idx].iter().flatten().collect();
        let n_failures = config.replications - successes.len();
        for estimand in [Estimand::FinalPeriod, Estimand::Cumulative] {
            let truth = match estimand {
                Estimand::FinalPeriod => config.effect_final,
                Estimand::Cumulative => config.effect_cumulative,
            };
            let terms: Vec<TermEstimate> =
                successes.iter().map(|r| r.term(estimand).clone()).collect();
            let (bias, sd, mean_se, coverage) = match summarize(&terms, truth) {
                Ok(s) => s,
                Err(_) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            };
            summaries.push(SummaryRow {
                estimator,
                estimand,
                truth,
                bias,
                empirical_sd: sd,
                mean_std_error: mean_se,
                coverage,
                n_used: terms.len(),
                n_failures,
            });
        }
    }

    Ok(SimResult {
        config: config.clone(),
        n_periods: config.n_periods(),
        summaries,
        estimates,
        failures,
    })
}
