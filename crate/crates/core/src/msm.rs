//! The marginal structural model layer: weighted least squares on
//! treatment-history features, estimating-equation ("sandwich") and HC2
//! covariance, the nonparametric final-period estimator, and the two-step
//! pipeline that ties propensity fitting, trimming, and weighting together.
//!
//! With an identity link the weighted estimating equation
//! `sum_i W_i h_i (Y_i - h_i' g) = 0` is exactly weighted least squares of
//! the outcome on the feature vector `h`. The covariance is the standard
//! sandwich `G^-1 Omega G^-1 / n` with `G = -n^-1 sum W h h'` and
//! `Omega = n^-1 sum U U'`; the HC2 flavor divides each squared residual by
//! one minus that unit's leverage in the weighted regression (MacKinnon &
//! White 1985).

use crate::link::normal_critical_value;
use crate::panel::{build_design, LagSpec, PanelDataset};
use crate::ps::{fit_fixed_effects_mle, fit_marginal_model, PsFit, PsSpec};
use crate::weights::{apply_trimming, compute_weights, WeightError, WeightSet, WeightSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative singular-value cutoff for rank decisions in the linear solves.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MsmError {
    #[error("feature columns are collinear on the included units")]
    RankDeficient,
    #[error("{included} included units cannot identify {parameters} parameters")]
    TooFewUnits { included: usize, parameters: usize },
    #[error("bread matrix of the sandwich is singular")]
    SingularBread,
    #[error("unit {0} has leverage one; HC2 is undefined")]
    LeverageOne(usize),
    #[error("no treated units in the final period")]
    NoTreatedAtT,
    #[error("no control units in the final period")]
    NoControlAtT,
    #[error("unit {unit} has degenerate propensity {value}; trim before estimating")]
    DegeneratePropensity { unit: usize, value: f64 },
    #[error("panel carries no outcome; the estimating equation needs one")]
    MissingOutcome,
    #[error("{0}")]
    ShapeMismatch(String),
}

/// Stage-tagged error for the two-step pipeline.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("design stage: {0}")]
    Design(#[from] crate::panel::PanelError),
    #[error("propensity stage: {0}")]
    Propensity(#[from] crate::ps::PsError),
    #[error("weighting stage: {0}")]
    Weighting(#[from] WeightError),
    #[error("estimation stage: {0}")]
    Estimation(#[from] MsmError),
}

/// A treatment-history feature: the sum of the treatment indicators at the
/// given lags before the final period (lag 0 is the final period itself).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryFeature {
    pub name: String,
    pub lags: Vec<usize>,
}

impl HistoryFeature {
    /// Indicator of treatment in the final period.
    pub fn final_period() -> Self {
        Self { name: "final_period".into(), lags: vec![0] }
    }

    /// Sum of treatment over lags `from..=to` before the final period.
    pub fn trailing_sum(from: usize, to: usize) -> Self {
        Self {
            name: format!("cumulative_lag{from}_{to}"),
            lags: (from..=to).collect(),
        }
    }

    fn evaluate(&self, data: &PanelDataset, unit: usize) -> f64 {
        let last = data.n_periods() - 1;
        self.lags
            .iter()
            .map(|&j| f64::from(data.treatment()[[unit, last - j]]))
            .sum()
    }

    fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }
}

/// Covariance flavor for the fitted coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceFlavor {
    /// Plain estimating-equation sandwich.
    EqSandwich,
    /// Leverage-corrected meat (squared residuals over `1 - h_ii`).
    Hc2,
}

impl std::str::FromStr for VarianceFlavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sandwich" | "eq-sandwich" => Ok(VarianceFlavor::EqSandwich),
            "hc2" => Ok(VarianceFlavor::Hc2),
            other => Err(format!("unknown variance flavor '{other}', expected sandwich or hc2")),
        }
    }
}

/// What to estimate and how to report it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsmSpec {
    pub features: Vec<HistoryFeature>,
    pub include_intercept: bool,
    pub confidence_level: f64,
    pub variance: VarianceFlavor,
}

impl Default for MsmSpec {
    fn default() -> Self {
        Self {
            features: vec![HistoryFeature::final_period(), HistoryFeature::trailing_sum(1, 3)],
            include_intercept: true,
            confidence_level: 0.90,
            variance: VarianceFlavor::Hc2,
        }
    }
}

impl MsmSpec {
    pub fn n_parameters(&self) -> usize {
        self.features.len() + usize::from(self.include_intercept)
    }

    pub fn max_lag(&self) -> usize {
        self.features.iter().map(HistoryFeature::max_lag).max().unwrap_or(0)
    }
}

/// One fitted term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsmTerm {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// The fitted marginal structural model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsmFit {
    pub terms: Vec<MsmTerm>,
    /// Row-major covariance of the coefficient vector.
    pub vcov: Vec<Vec<f64>>,
    pub confidence_level: f64,
    pub variance: VarianceFlavor,
    pub n_effective: usize,
    pub weight_diagnostics: Option<crate::weights::WeightDiagnostics>,
    pub ps_score_norm: Option<f64>,
}

impl MsmFit {
    pub fn estimates(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.estimate).collect()
    }

    pub fn term(&self, name: &str) -> Option<&MsmTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Intermediate quantities of the weighted regression that both covariance
/// flavors consume.
pub struct WlsInternals {
    /// `m x J` feature matrix over included units, intercept first.
    pub design: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub residuals: DVector<f64>,
    pub coefficients: DVector<f64>,
    /// `(X' W X)^-1`.
    pub xtwx_inv: DMatrix<f64>,
}

/// Weighted least squares of the outcome on the history features over the
/// included units.
pub fn fit_msm_wls(
    data: &PanelDataset,
    weights: &WeightSet,
    spec: &MsmSpec,
) -> Result<MsmFit, MsmError> {
    let outcome = data.outcome().ok_or(MsmError::MissingOutcome)?;
    if weights.weights.len() != data.n_units() {
        return Err(MsmError::ShapeMismatch(format!(
            "weights cover {} units, panel has {}",
            weights.weights.len(),
            data.n_units()
        )));
    }
    if spec.max_lag() >= data.n_periods() {
        return Err(MsmError::ShapeMismatch(format!(
            "feature lag {} exceeds the panel's {} periods",
            spec.max_lag(),
            data.n_periods()
        )));
    }

    let included: Vec<usize> =
        (0..data.n_units()).filter(|&i| weights.included[i]).collect();
    let m = included.len();
    let j = spec.n_parameters();
    if m < j + 1 {
        return Err(MsmError::TooFewUnits { included: m, parameters: j });
    }

    let mut design = DMatrix::<f64>::zeros(m, j);
    let mut y = DVector::<f64>::zeros(m);
    let mut w = DVector::<f64>::zeros(m);
    for (row, &i) in included.iter().enumerate() {
        let mut col = 0;
        if spec.include_intercept {
            design[(row, 0)] = 1.0;
            col = 1;
        }
        for feature in &spec.features {
            design[(row, col)] = feature.evaluate(data, i);
            col += 1;
        }
        y[row] = outcome[i];
        w[row] = weights.weights[i];
    }

    let internals = solve_wls(design, y, w)?;
    let vcov = match spec.variance {
        VarianceFlavor::EqSandwich => sandwich_variance(&internals),
        VarianceFlavor::Hc2 => hc2_variance(&internals)?,
    };

    let mut names = Vec::with_capacity(j);
    if spec.include_intercept {
        names.push("intercept".to_string());
    }
    names.extend(spec.features.iter().map(|f| f.name.clone()));

    let z = normal_critical_value(spec.confidence_level);
    let terms = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let estimate = internals.coefficients[c];
            let std_error = vcov[(c, c)].max(0.0).sqrt();
            MsmTerm {
                name: name.clone(),
                estimate,
                std_error,
                ci_lower: estimate - z * std_error,
                ci_upper: estimate + z * std_error,
            }
        })
        .collect();

    Ok(MsmFit {
        terms,
        vcov: (0..j).map(|r| (0..j).map(|c| vcov[(r, c)]).collect()).collect(),
        confidence_level: spec.confidence_level,
        variance: spec.variance,
        n_effective: m,
        weight_diagnostics: Some(weights.diagnostics.clone()),
        ps_score_norm: None,
    })
}

/// Solve the weighted normal equations through a rank-revealing SVD of the
/// square-root-weighted design.
fn solve_wls(
    design: DMatrix<f64>,
    y: DVector<f64>,
    w: DVector<f64>,
) -> Result<WlsInternals, MsmError> {
    let m = design.nrows();
    let j = design.ncols();
    let mut scaled = design.clone();
    let mut y_scaled = y.clone();
    for row in 0..m {
        let s = w[row].max(0.0).sqrt();
        for col in 0..j {
            scaled[(row, col)] *= s;
        }
        y_scaled[row] *= s;
    }

    let svd = scaled.svd(true, true);
    let s_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * s_max)
        .count();
    if rank < j || s_max == 0.0 {
        return Err(MsmError::RankDeficient);
    }
    let coefficients = svd
        .solve(&y_scaled, RANK_TOLERANCE * s_max)
        .map_err(|_| MsmError::RankDeficient)?;

    // (X'WX)^-1 = V S^-2 V'.
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut xtwx_inv = DMatrix::<f64>::zeros(j, j);
    for a in 0..j {
        for b in 0..j {
            let mut acc = 0.0;
            for k in 0..j {
                let s = svd.singular_values[k];
                acc += v_t[(k, a)] * v_t[(k, b)] / (s * s);
            }
            xtwx_inv[(a, b)] = acc;
        }
    }

    let residuals = &y - &design * &coefficients;
    Ok(WlsInternals { design, weights: w, residuals, coefficients, xtwx_inv })
}

/// Plain estimating-equation sandwich: `(X'WX)^-1 [sum W^2 e^2 x x'] (X'WX)^-1`.
///
/// Equivalent to `G^-1 Omega G^-1 / m` for `G = -m^-1 X'WX` and
/// `Omega = m^-1 sum U U'` with `U_i = W_i x_i e_i`, so the result is the
/// covariance of the coefficients themselves.
pub fn sandwich_variance(fit: &WlsInternals) -> DMatrix<f64> {
    let meat = meat_matrix(fit, |_| 1.0);
    symmetrize(&fit.xtwx_inv * meat * &fit.xtwx_inv)
}

/// HC2 sandwich: squared residuals scaled by `1 / (1 - h_ii)` with `h_ii`
/// the leverage in the weighted regression.
pub fn hc2_variance(fit: &WlsInternals) -> Result<DMatrix<f64>, MsmError> {
    let leverages = leverage(fit);
    for (i, &h) in leverages.iter().enumerate() {
        if h >= 1.0 - 1e-12 {
            return Err(MsmError::LeverageOne(i));
        }
    }
    let meat = meat_matrix(fit, |i| 1.0 / (1.0 - leverages[i]));
    Ok(symmetrize(&fit.xtwx_inv * meat * &fit.xtwx_inv))
}

/// Leverage of each included unit in the weighted regression:
/// `h_ii = w_i x_i' (X'WX)^-1 x_i`.
pub fn leverage(fit: &WlsInternals) -> Vec<f64> {
    let m = fit.design.nrows();
    let j = fit.design.ncols();
    (0..m)
        .map(|i| {
            let mut h = 0.0;
            for a in 0..j {
                for b in 0..j {
                    h += fit.design[(i, a)] * fit.xtwx_inv[(a, b)] * fit.design[(i, b)];
                }
            }
            h * fit.weights[i]
        })
        .collect()
}

fn meat_matrix(fit: &WlsInternals, scale: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let m = fit.design.nrows();
    let j = fit.design.ncols();
    let mut meat = DMatrix::<f64>::zeros(j, j);
    for i in 0..m {
        let u = fit.weights[i] * fit.residuals[i];
        let s = u * u * scale(i);
        for a in 0..j {
            for b in 0..=a {
                meat[(a, b)] += s * fit.design[(i, a)] * fit.design[(i, b)];
            }
        }
    }
    for a in 0..j {
        for b in (a + 1)..j {
            meat[(a, b)] = meat[(b, a)];
        }
    }
    meat
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            out[(a, b)] = 0.5 * (m[(a, b)] + m[(b, a)]);
        }
    }
    out
}

/// Result of the nonparametric final-period contrast.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimpleFit {
    pub effect: f64,
    pub std_error: f64,
}

/// Ratio-normalized inverse-probability contrast of the final-period
/// treatment: weighted treated mean minus weighted control mean, each
/// normalized by its realized weight mass. The standard error plugs the
/// estimates into the influence function, including the weight-mass
/// normalization from the estimating-equation expansion.
pub fn simple_estimator(
    data: &PanelDataset,
    propensities: &[f64],
) -> Result<SimpleFit, MsmError> {
    let outcome = data.outcome().ok_or(MsmError::MissingOutcome)?;
    let n = data.n_units();
    if propensities.len() != n {
        return Err(MsmError::ShapeMismatch(format!(
            "{} propensities for {} units",
            propensities.len(),
            n
        )));
    }
    let d_final = data.final_treatment();
    if !d_final.iter().any(|&d| d == 1) {
        return Err(MsmError::NoTreatedAtT);
    }
    if !d_final.iter().any(|&d| d == 0) {
        return Err(MsmError::NoControlAtT);
    }

    let mut mass_treated = 0.0;
    let mut mass_control = 0.0;
    let mut sum_treated = 0.0;
    let mut sum_control = 0.0;
    for i in 0..n {
        let pi = propensities[i];
        if !(pi > 0.0 && pi < 1.0) {
            return Err(MsmError::DegeneratePropensity { unit: i, value: pi });
        }
        if d_final[i] == 1 {
            mass_treated += 1.0 / pi;
            sum_treated += outcome[i] / pi;
        } else {
            mass_control += 1.0 / (1.0 - pi);
            sum_control += outcome[i] / (1.0 - pi);
        }
    }

    let mean_treated = sum_treated / mass_treated;
    let mean_control = sum_control / mass_control;
    let effect = mean_treated - mean_control;

    let nf = n as f64;
    let norm_treated = mass_treated / nf;
    let norm_control = mass_control / nf;
    let mut influence_sq = 0.0;
    for i in 0..n {
        let u = if d_final[i] == 1 {
            (outcome[i] - mean_treated) / (propensities[i] * norm_treated)
        } else {
            -(outcome[i] - mean_control) / ((1.0 - propensities[i]) * norm_control)
        };
        influence_sq += u * u;
    }
    let variance = influence_sq / nf;
    Ok(SimpleFit { effect, std_error: (variance / nf).sqrt() })
}

/// Inputs for the two-step pipeline.
#[derive(Debug, Clone, Default)]
pub struct PipelineSpec {
    pub lag: LagSpec,
    pub ps: PsSpec,
    pub weight: WeightSpec,
    pub msm: MsmSpec,
    /// Lags in the marginal numerator model when stabilizing.
    pub numerator_lags: usize,
}

impl PipelineSpec {
    pub fn new() -> Self {
        Self { numerator_lags: 1, ..Self::default() }
    }
}

/// The two-step estimator end to end: fit the fixed-effects treatment model,
/// resolve non-identified units per the trimming strategy, build the
/// weights (with the marginal numerator when stabilizing), and solve the
/// weighted estimating equation.
pub fn fit_iptw_fe_pipeline(
    data: &PanelDataset,
    spec: &PipelineSpec,
) -> Result<MsmFit, PipelineError> {
    let design = build_design(data, &spec.lag)?;
    let ps_fit = fit_fixed_effects_mle(&design, data.treatment(), &spec.ps)?;
    let trimmed = apply_trimming(&ps_fit, &design, data.treatment(), &spec.weight)?;
    let numerator = if spec.weight.stabilized {
        Some(fit_marginal_model(
            data.treatment(),
            spec.numerator_lags,
            spec.lag.initial_treatment,
        )?)
    } else {
        None
    };
    let weights = compute_weights(
        &trimmed.probs,
        numerator.as_ref().map(|f| &f.fitted),
        data.treatment(),
        &spec.weight,
        Some(&trimmed.included),
    )?;
    let mut fit = fit_msm_wls(data, &weights, &spec.msm)?;
    fit.ps_score_norm = Some(ps_fit.score_norm);
    Ok(fit)
}

/// Convenience wrapper when the propensity fit and weights already exist.
pub fn msm_from_weights(
    data: &PanelDataset,
    ps_fit: Option<&PsFit>,
    weights: &WeightSet,
    spec: &MsmSpec,
) -> Result<MsmFit, MsmError> {
    let mut fit = fit_msm_wls(data, weights, spec)?;
    fit.ps_score_norm = ps_fit.map(|f| f.score_norm);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{Trimming, WeightDiagnostics};
    use ndarray::{Array1, Array2, Array3};

    fn panel_from(treatment: Vec<Vec<u8>>, outcome: Vec<f64>) -> PanelDataset {
        let n = treatment.len();
        let t = treatment[0].len();
        let flat: Vec<u8> = treatment.into_iter().flatten().collect();
        PanelDataset::new(
            Array2::from_shape_vec((n, t), flat).unwrap(),
            Array3::zeros((n, t, 0)),
            vec![],
            Some(Array1::from_vec(outcome)),
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..t as i64).collect(),
        )
        .unwrap()
    }

    fn unit_weights(weights: Vec<f64>) -> WeightSet {
        let n = weights.len();
        WeightSet {
            included: vec![true; n],
            k: 3,
            stabilized: false,
            trimming: Trimming::None,
            diagnostics: WeightDiagnostics {
                min: 1.0,
                max: 1.0,
                mean: 1.0,
                effective_sample_size: n as f64,
                n_dropped: 0,
                n_imputed: 0,
                n_truncated: 0,
            },
            weights,
        }
    }

    fn final_only_spec(variance: VarianceFlavor) -> MsmSpec {
        MsmSpec {
            features: vec![HistoryFeature::final_period()],
            include_intercept: true,
            confidence_level: 0.90,
            variance,
        }
    }

    #[test]
    fn perfect_fit_has_unit_slope_and_zero_variance() {
        let data = panel_from(
            vec![vec![0, 1], vec![0, 0], vec![1, 1], vec![0, 0], vec![1, 1], vec![0, 0]],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        );
        let fit = fit_msm_wls(
            &data,
            &unit_weights(vec![1.0; 6]),
            &final_only_spec(VarianceFlavor::EqSandwich),
        )
        .unwrap();
        assert!(fit.term("intercept").unwrap().estimate.abs() < 1e-12);
        assert!((fit.term("final_period").unwrap().estimate - 1.0).abs() < 1e-12);
        for row in &fit.vcov {
            for v in row {
                assert!(v.abs() < 1e-20);
            }
        }
    }

    #[test]
    fn constant_weights_match_unit_weights() {
        let data = panel_from(
            vec![vec![0, 1], vec![1, 0], vec![1, 1], vec![0, 0], vec![0, 1]],
            vec![3.0, 1.0, 2.5, -1.0, 0.5],
        );
        let a = fit_msm_wls(
            &data,
            &unit_weights(vec![1.0; 5]),
            &final_only_spec(VarianceFlavor::EqSandwich),
        )
        .unwrap();
        let b = fit_msm_wls(
            &data,
            &unit_weights(vec![7.5; 5]),
            &final_only_spec(VarianceFlavor::EqSandwich),
        )
        .unwrap();
        for (ta, tb) in a.terms.iter().zip(&b.terms) {
            assert!((ta.estimate - tb.estimate).abs() < 1e-12);
            assert!((ta.std_error - tb.std_error).abs() < 1e-12);
        }
    }

    #[test]
    fn micro_instance_has_known_solution() {
        // Four units: treated outcomes 3 and 1, control outcomes 1 and -1.
        let data = panel_from(
            vec![vec![1], vec![1], vec![0], vec![0]],
            vec![3.0, 1.0, 1.0, -1.0],
        );
        let fit = fit_msm_wls(
            &data,
            &unit_weights(vec![1.0; 4]),
            &final_only_spec(VarianceFlavor::EqSandwich),
        )
        .unwrap();
        assert!(fit.term("intercept").unwrap().estimate.abs() < 1e-12);
        assert!((fit.term("final_period").unwrap().estimate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn estimating_equation_residual_vanishes() {
        let data = panel_from(
            vec![vec![0, 1], vec![1, 0], vec![1, 1], vec![0, 0], vec![0, 1], vec![1, 1]],
            vec![3.0, 1.0, 2.5, -1.0, 0.5, 4.0],
        );
        let weights = unit_weights(vec![1.0, 2.0, 0.5, 3.0, 1.5, 0.25]);
        let spec = final_only_spec(VarianceFlavor::EqSandwich);
        let fit = fit_msm_wls(&data, &weights, &spec).unwrap();
        let d_final = data.final_treatment();
        let y = data.outcome().unwrap();
        let g = fit.estimates();
        let mut residual = [0.0f64; 2];
        for i in 0..6 {
            let h = [1.0, f64::from(d_final[i])];
            let e = y[i] - g[0] * h[0] - g[1] * h[1];
            residual[0] += weights.weights[i] * h[0] * e / 6.0;
            residual[1] += weights.weights[i] * h[1] * e / 6.0;
        }
        assert!(residual[0].abs() < 1e-10 && residual[1].abs() < 1e-10);
    }

    #[test]
    fn intercept_only_sandwich_matches_textbook_formula() {
        let y = vec![2.0, -1.0, 0.5, 3.25, 1.0, -0.75, 2.5, 0.0, 1.75, -2.0];
        let data = panel_from(vec![vec![1]; 10], y.clone())
            ;
        // Intercept-only regression: drop the feature list.
        let spec = MsmSpec {
            features: vec![],
            include_intercept: true,
            confidence_level: 0.90,
            variance: VarianceFlavor::EqSandwich,
        };
        let fit = fit_msm_wls(&data, &unit_weights(vec![1.0; 10]), &spec).unwrap();
        let mean = y.iter().sum::<f64>() / 10.0;
        // HC0 for the mean: sum of squared residuals over n^2.
        let want = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
        assert!((fit.vcov[0][0] - want).abs() < 1e-14);
    }

    #[test]
    fn hc2_matches_direct_evaluation_on_fixed_instance() {
        let treatment = vec![
            vec![1],
            vec![0],
            vec![1],
            vec![1],
            vec![0],
            vec![0],
            vec![1],
            vec![0],
            vec![1],
            vec![0],
        ];
        let y = vec![2.0, -1.0, 0.5, 3.25, 1.0, -0.75, 2.5, 0.0, 1.75, -2.0];
        let w = vec![1.0, 2.0, 0.5, 1.25, 0.75, 3.0, 1.0, 0.25, 2.0, 1.5];
        let data = panel_from(treatment.clone(), y.clone());
        let fit =
            fit_msm_wls(&data, &unit_weights(w.clone()), &final_only_spec(VarianceFlavor::Hc2))
                .unwrap();

        // Independent direct evaluation from the definition.
        let x: Vec<[f64; 2]> = treatment.iter().map(|r| [1.0, f64::from(r[0])]).collect();
        let mut xtwx = [[0.0f64; 2]; 2];
        for i in 0..10 {
            for a in 0..2 {
                for b in 0..2 {
                    xtwx[a][b] += w[i] * x[i][a] * x[i][b];
                }
            }
        }
        let det = xtwx[0][0] * xtwx[1][1] - xtwx[0][1] * xtwx[1][0];
        let inv = [
            [xtwx[1][1] / det, -xtwx[0][1] / det],
            [-xtwx[1][0] / det, xtwx[0][0] / det],
        ];
        let beta = {
            let mut xtwy = [0.0f64; 2];
            for i in 0..10 {
                for a in 0..2 {
                    xtwy[a] += w[i] * x[i][a] * y[i];
                }
            }
            [
                inv[0][0] * xtwy[0] + inv[0][1] * xtwy[1],
                inv[1][0] * xtwy[0] + inv[1][1] * xtwy[1],
            ]
        };
        let mut meat = [[0.0f64; 2]; 2];
        for i in 0..10 {
            let e = y[i] - beta[0] * x[i][0] - beta[1] * x[i][1];
            let h = w[i]
                * (x[i][0] * (inv[0][0] * x[i][0] + inv[0][1] * x[i][1])
                    + x[i][1] * (inv[1][0] * x[i][0] + inv[1][1] * x[i][1]));
            let u2 = (w[i] * e).powi(2) / (1.0 - h);
            for a in 0..2 {
                for b in 0..2 {
                    meat[a][b] += u2 * x[i][a] * x[i][b];
                }
            }
        }
        let mut want = [[0.0f64; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        want[a][b] += inv[a][p] * meat[p][q] * inv[q][b];
                    }
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (fit.vcov[a][b] - want[a][b]).abs() < 1e-10,
                    "vcov[{a}][{b}]: {} vs {}",
                    fit.vcov[a][b],
                    want[a][b]
                );
            }
        }
    }

    #[test]
    fn equal_leverage_identity_holds_exactly() {
        // Balanced binary design with equal weights: every leverage is J/n.
        let treatment: Vec<Vec<u8>> =
            (0..10).map(|i| vec![u8::from(i % 2 == 0)]).collect();
        let y: Vec<f64> = (0..10).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let data = panel_from(treatment, y);
        let w = unit_weights(vec![1.0; 10]);
        let hc0 = fit_msm_wls(&data, &w, &final_only_spec(VarianceFlavor::EqSandwich)).unwrap();
        let hc2 = fit_msm_wls(&data, &w, &final_only_spec(VarianceFlavor::Hc2)).unwrap();
        let scale = 10.0 / (10.0 - 2.0);
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (hc2.vcov[a][b] - scale * hc0.vcov[a][b]).abs()
                        <= 1e-15 * hc0.vcov[a][b].abs().max(1.0)
                );
            }
        }
        // HC2 never falls below HC0 on the diagonal with interior leverages.
        for a in 0..2 {
            assert!(hc2.vcov[a][a] >= hc0.vcov[a][a]);
        }
    }

    #[test]
    fn saturated_design_reports_leverage_one() {
        let data = panel_from(vec![vec![1], vec![0]], vec![1.0, 0.0]);
        // Two units, two parameters: TooFewUnits guards first, so use three
        // units where one group has a single member.
        let data3 = panel_from(vec![vec![1], vec![0], vec![0]], vec![1.0, 0.0, 0.5]);
        let err = fit_msm_wls(
            &data3,
            &unit_weights(vec![1.0; 3]),
            &final_only_spec(VarianceFlavor::Hc2),
        )
        .unwrap_err();
        assert!(matches!(err, MsmError::LeverageOne(_)), "{err}");
        drop(data);
    }

    #[test]
    fn collinear_features_are_rank_deficient() {
        let data = panel_from(
            vec![vec![0, 1], vec![1, 0], vec![1, 1], vec![0, 0], vec![0, 1]],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
        );
        let spec = MsmSpec {
            features: vec![HistoryFeature::final_period(), HistoryFeature::final_period()],
            include_intercept: true,
            confidence_level: 0.90,
            variance: VarianceFlavor::EqSandwich,
        };
        assert!(matches!(
            fit_msm_wls(&data, &unit_weights(vec![1.0; 5]), &spec),
            Err(MsmError::RankDeficient)
        ));
    }

    #[test]
    fn too_few_units_is_reported() {
        let data = panel_from(vec![vec![1], vec![0]], vec![1.0, 0.0]);
        assert!(matches!(
            fit_msm_wls(
                &data,
                &unit_weights(vec![1.0, 1.0]),
                &final_only_spec(VarianceFlavor::EqSandwich)
            ),
            Err(MsmError::TooFewUnits { .. })
        ));
    }

    #[test]
    fn vcov_is_invariant_to_unit_order() {
        let treatment = vec![vec![0, 1], vec![1, 0], vec![1, 1], vec![0, 0], vec![0, 1]];
        let y = vec![3.0, 1.0, 2.5, -1.0, 0.5];
        let w = vec![1.0, 2.0, 0.5, 3.0, 1.5];
        let data = panel_from(treatment.clone(), y.clone());
        let fit = fit_msm_wls(
            &data,
            &unit_weights(w.clone()),
            &final_only_spec(VarianceFlavor::EqSandwich),
        )
        .unwrap();

        let perm = [4usize, 2, 0, 3, 1];
        let data_p = panel_from(
            perm.iter().map(|&i| treatment[i].clone()).collect(),
            perm.iter().map(|&i| y[i]).collect(),
        );
        let fit_p = fit_msm_wls(
            &data_p,
            &unit_weights(perm.iter().map(|&i| w[i]).collect()),
            &final_only_spec(VarianceFlavor::EqSandwich),
        )
        .unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((fit.vcov[a][b] - fit_p.vcov[a][b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simple_estimator_trivial_cases() {
        // Propensity one half everywhere and outcome equal to treatment.
        let data = panel_from(
            vec![vec![0, 1], vec![0, 0], vec![1, 1], vec![1, 0]],
            vec![1.0, 0.0, 1.0, 0.0],
        );
        let fit = simple_estimator(&data, &[0.5; 4]).unwrap();
        assert!((fit.effect - 1.0).abs() < 1e-12);

        // Constant outcome: zero effect regardless of the weights.
        let data = panel_from(
            vec![vec![0, 1], vec![0, 0], vec![1, 1], vec![1, 0]],
            vec![2.5; 4],
        );
        let fit = simple_estimator(&data, &[0.3, 0.6, 0.2, 0.9]).unwrap();
        assert!(fit.effect.abs() < 1e-12);
    }

    #[test]
    fn simple_estimator_guards() {
        let data = panel_from(vec![vec![1], vec![1]], vec![1.0, 2.0]);
        assert!(matches!(simple_estimator(&data, &[0.5, 0.5]), Err(MsmError::NoControlAtT)));
        let data = panel_from(vec![vec![0], vec![0]], vec![1.0, 2.0]);
        assert!(matches!(simple_estimator(&data, &[0.5, 0.5]), Err(MsmError::NoTreatedAtT)));
        let data = panel_from(vec![vec![1], vec![0]], vec![1.0, 2.0]);
        assert!(matches!(
            simple_estimator(&data, &[0.5, 1.0]),
            Err(MsmError::DegeneratePropensity { .. })
        ));
        assert!(matches!(
            simple_estimator(&data, &[0.0, 0.5]),
            Err(MsmError::DegeneratePropensity { .. })
        ));
    }

    #[test]
    fn exact_enumeration_zeroes_the_simple_moment() {
        // Two units with known propensities; potential outcomes depend on the
        // final period plus a unit shift. Enumerate every treatment path and
        // check the influence terms integrate to zero at the true contrast.
        let pis = [0.4, 0.6];
        let alphas = [-0.405, 0.405];
        let t = 3;
        for (unit, (&pi, &alpha)) in pis.iter().zip(&alphas).enumerate() {
            let mut moment = 0.0;
            for path in 0..(1u32 << t) {
                let bits: Vec<u8> = (0..t).map(|s| ((path >> s) & 1) as u8).collect();
                let prob: f64 = bits
                    .iter()
                    .map(|&b| if b == 1 { pi } else { 1.0 - pi })
                    .product();
                let d_final = bits[t - 1];
                let y1 = 1.0 + alpha;
                let y0 = alpha;
                let tau1 = 1.0; // average of y1 over units: 1 + mean(alpha) = 1
                let tau0 = 0.0;
                let u = if d_final == 1 {
                    (y1 - tau1) / pi - 0.0
                } else {
                    -(y0 - tau0) / (1.0 - pi)
                };
                moment += prob * u;
            }
            // Each unit's moment is alpha - alpha = 0 in expectation.
            assert!(moment.abs() < 1e-12, "unit {unit}: {moment}");
        }
    }

    #[test]
    fn pipeline_smoke_on_generated_panel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let n = 40;
        let t = 10;
        let mut treatment = Array2::<u8>::zeros((n, t));
        for v in treatment.iter_mut() {
            *v = u8::from(rng.random::<f64>() < 0.5);
        }
        let outcome: Vec<f64> = (0..n)
            .map(|i| {
                f64::from(treatment[[i, t - 1]]) + 0.5 * rng.random::<f64>()
            })
            .collect();
        let data = PanelDataset::new(
            treatment,
            Array3::zeros((n, t, 0)),
            vec![],
            Some(Array1::from_vec(outcome)),
            (0..n).map(|i| format!("u{i}")).collect(),
            (0..t as i64).collect(),
        )
        .unwrap();
        let fit = fit_iptw_fe_pipeline(&data, &PipelineSpec::new()).unwrap();
        assert_eq!(fit.terms.len(), 3);
        assert!(fit.n_effective > 0);
    }

    #[test]
    fn pipeline_surfaces_stage_errors() {
        // Every unit degenerate: stage one fails with no variation anywhere.
        let data = panel_from(vec![vec![1, 1, 1, 1, 1]; 5], vec![1.0; 5]);
        let err = fit_iptw_fe_pipeline(&data, &PipelineSpec::new()).unwrap_err();
        assert!(matches!(err, PipelineError::Propensity(_)), "{err}");
    }
}
