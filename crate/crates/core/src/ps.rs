//! Maximum likelihood estimation of the binary treatment model.
//!
//! Three fits share one engine:
//!
//! - [`fit_fixed_effects_mle`] — common slopes plus a free intercept per unit.
//!   The likelihood separates across units given the slopes, so the solver
//!   concentrates: an inner one-dimensional Newton finds each unit's intercept
//!   (the per-unit problem is strictly concave for both links), and an outer
//!   Newton with step halving climbs the profile likelihood in the slopes.
//!   Units that are always treated or never treated over the modeled periods
//!   have no interior intercept optimum; they are excluded from the likelihood
//!   and flagged.
//! - [`fit_pooled_mle`] — one global intercept instead of unit effects; the
//!   same engine with all rows in a single group.
//! - [`fit_marginal_model`] — a pooled logit of treatment on its own lags,
//!   used as the stabilizing numerator for the weights.
//!
//! Convergence means the sup-norm of the full score (slopes and every
//! identified intercept, projected onto the bounds when bounds are active) is
//! below the tolerance. Divergence of the linear predictor past ±30 on an
//! accepted iterate is reported as separation rather than clamped silently;
//! clamping is the job of the trimming layer, where the analyst opts in.

use crate::link::Link;
use crate::panel::{DesignMatrix, PanelDataset};
use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Linear predictors beyond this magnitude on an accepted iterate are treated
/// as evidence of separation.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Error)]
pub enum PsError {
    #[error("no unit has within-unit treatment variation; nothing to fit")]
    NoVariationAnywhere,
    #[error("gradient tolerance not met after {iterations} iterations (score sup-norm {score_norm:.3e})")]
    MaxIterations { iterations: usize, score_norm: f64 },
    #[error("separation detected: |linear predictor| reached {max_eta:.1} while fitting")]
    SeparationDetected { max_eta: f64 },
    #[error("profile information matrix is singular; design columns may be collinear")]
    SingularInformation,
    #[error("{0}")]
    ShapeMismatch(String),
}

/// Controls for the treatment-model fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsSpec {
    pub link: Link,
    /// Convergence threshold on the sup-norm of the full score.
    pub gradient_tolerance: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub step_halving_limit: usize,
    /// Optional box `[a0, a1]` for the unit effects, enforced by projected
    /// inner Newton steps.
    pub unit_effect_bounds: Option<(f64, f64)>,
}

impl Default for PsSpec {
    fn default() -> Self {
        Self {
            link: Link::Logit,
            gradient_tolerance: 1e-8,
            max_outer_iterations: 100,
            max_inner_iterations: 50,
            step_halving_limit: 30,
            unit_effect_bounds: None,
        }
    }
}

impl PsSpec {
    pub fn with_link(link: Link) -> Self {
        Self { link, ..Self::default() }
    }

    fn validate(&self) -> Result<(), PsError> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(PsError::ShapeMismatch("gradient tolerance must be positive".into()));
        }
        if let Some((a0, a1)) = self.unit_effect_bounds {
            if !(a0 < a1) {
                return Err(PsError::ShapeMismatch(format!(
                    "unit effect bounds ({a0}, {a1}) must satisfy a0 < a1"
                )));
            }
        }
        Ok(())
    }

    fn inner_tolerance(&self) -> f64 {
        (self.gradient_tolerance * 1e-2).max(1e-12)
    }
}

/// Which model produced a [`PsFit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsModelKind {
    FixedEffects,
    Pooled,
    /// Pooled logit of treatment on `lags` of itself.
    Marginal { lags: usize },
}

/// Probabilities on a `(unit, period)` grid starting at `t_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    t_offset: usize,
    /// `n_units x (n_periods - t_offset)`.
    values: Array2<f64>,
}

impl ProbGrid {
    pub fn new(t_offset: usize, values: Array2<f64>) -> Self {
        Self { t_offset, values }
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn t_offset(&self) -> usize {
        self.t_offset
    }

    /// Last global period covered, exclusive.
    pub fn n_periods(&self) -> usize {
        self.t_offset + self.values.ncols()
    }

    /// Probability for unit `i` at global period `t`.
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[[i, t - self.t_offset]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }
}

/// A fitted treatment model.
#[derive(Debug, Clone)]
pub struct PsFit {
    pub kind: PsModelKind,
    pub link: Link,
    /// Slope estimates, aligned with the design columns.
    pub coefficients: Vec<f64>,
    pub column_names: Vec<String>,
    /// Intercept per unit. For pooled and marginal fits this is the global
    /// intercept broadcast to every unit; for fixed-effects fits it is NaN on
    /// units without treatment variation.
    pub unit_effects: Vec<f64>,
    /// False exactly for units with no treatment variation over the modeled
    /// periods (fixed-effects fits only; always true for pooled fits).
    pub identified: Vec<bool>,
    pub log_likelihood: f64,
    /// Sup-norm of the full score at the solution.
    pub score_norm: f64,
    pub outer_iterations: usize,
    /// Profile log likelihood after each accepted outer step.
    pub profile_trace: Vec<f64>,
    /// Fitted probabilities on the design grid; NaN rows for units whose
    /// effects are not identified.
    pub fitted: ProbGrid,
}

impl PsFit {
    /// Number of units the fit covers.
    pub fn n_units(&self) -> usize {
        self.unit_effects.len()
    }
}

/// Serialization form of a fit: everything needed for audit and for
/// reconstructing predictions, without the fitted-probability block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsFitRecord {
    pub kind: PsModelKind,
    pub link: Link,
    pub column_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// `null` marks a non-identified unit.
    pub unit_effects: Vec<Option<f64>>,
    pub identified: Vec<bool>,
    pub log_likelihood: f64,
    pub score_norm: f64,
    pub outer_iterations: usize,
    pub t_offset: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_ids: Option<Vec<String>>,
}

impl PsFitRecord {
    pub fn from_fit(fit: &PsFit, unit_ids: Option<Vec<String>>) -> Self {
        Self {
            kind: fit.kind,
            link: fit.link,
            column_names: fit.column_names.clone(),
            coefficients: fit.coefficients.clone(),
            unit_effects: fit
                .unit_effects
                .iter()
                .map(|a| if a.is_finite() { Some(*a) } else { None })
                .collect(),
            identified: fit.identified.clone(),
            log_likelihood: fit.log_likelihood,
            score_norm: fit.score_norm,
            outer_iterations: fit.outer_iterations,
            t_offset: fit.fitted.t_offset(),
            unit_ids,
        }
    }

    /// Rebuild a usable fit by recomputing predictions on `design`.
    pub fn into_fit(self, design: &DesignMatrix) -> Result<PsFit, PsError> {
        let unit_effects: Vec<f64> =
            self.unit_effects.iter().map(|a| a.unwrap_or(f64::NAN)).collect();
        if unit_effects.len() != design.n_units() {
            return Err(PsError::ShapeMismatch(format!(
                "fit covers {} units, design has {}",
                unit_effects.len(),
                design.n_units()
            )));
        }
        let mut fit = PsFit {
            kind: self.kind,
            link: self.link,
            coefficients: self.coefficients,
            column_names: self.column_names,
            unit_effects,
            identified: self.identified,
            log_likelihood: self.log_likelihood,
            score_norm: self.score_norm,
            outer_iterations: self.outer_iterations,
            profile_trace: Vec::new(),
            fitted: ProbGrid::new(design.t_offset(), Array2::zeros((0, 0))),
        };
        fit.fitted = predict_propensity(&fit, design)?;
        Ok(fit)
    }
}

/// Fraction of treated periods per unit.
pub fn nonparametric_unit_means(treatment: &Array2<u8>) -> Vec<f64> {
    let (n, t) = treatment.dim();
    (0..n)
        .map(|i| (0..t).map(|s| f64::from(treatment[[i, s]])).sum::<f64>() / t as f64)
        .collect()
}

/// Evaluate `F(v'b + a_i)` over the design grid. Units with a non-finite
/// effect get NaN.
pub fn predict_propensity(fit: &PsFit, design: &DesignMatrix) -> Result<ProbGrid, PsError> {
    if fit.coefficients.len() != design.n_columns() {
        return Err(PsError::ShapeMismatch(format!(
            "fit has {} coefficients, design has {} columns",
            fit.coefficients.len(),
            design.n_columns()
        )));
    }
    if fit.unit_effects.len() != design.n_units() {
        return Err(PsError::ShapeMismatch(format!(
            "fit covers {} units, design has {}",
            fit.unit_effects.len(),
            design.n_units()
        )));
    }
    let beta = Array1::from_vec(fit.coefficients.clone());
    let eta_base = design.values().dot(&beta);
    let t_eff = design.periods_modeled();
    let mut probs = Array2::<f64>::from_elem((design.n_units(), t_eff), f64::NAN);
    for i in 0..design.n_units() {
        let a = fit.unit_effects[i];
        if !a.is_finite() {
            continue;
        }
        for s in 0..t_eff {
            probs[[i, s]] = fit.link.cdf(eta_base[i * t_eff + s] + a);
        }
    }
    Ok(ProbGrid::new(design.t_offset(), probs))
}

/// Log likelihood of the panel at arbitrary parameter values; units with a
/// non-finite effect are skipped. Used by the finite-difference checks.
pub fn panel_log_likelihood(
    design: &DesignMatrix,
    treatment: &Array2<u8>,
    link: Link,
    coefficients: &[f64],
    unit_effects: &[f64],
) -> f64 {
    let beta = Array1::from_vec(coefficients.to_vec());
    let eta_base = design.values().dot(&beta);
    let t_eff = design.periods_modeled();
    let mut total = 0.0;
    for i in 0..design.n_units() {
        let a = unit_effects[i];
        if !a.is_finite() {
            continue;
        }
        for t in design.t_offset()..design.n_periods() {
            let row = i * t_eff + (t - design.t_offset());
            total += link.log_likelihood(treatment[[i, t]], eta_base[row] + a);
        }
    }
    total
}

/// Analytic score of [`panel_log_likelihood`]: slope block and one entry per
/// unit (NaN-effect units contribute zero and get a zero entry).
pub fn panel_score(
    design: &DesignMatrix,
    treatment: &Array2<u8>,
    link: Link,
    coefficients: &[f64],
    unit_effects: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let beta = Array1::from_vec(coefficients.to_vec());
    let eta_base = design.values().dot(&beta);
    let t_eff = design.periods_modeled();
    let r = design.n_columns();
    let mut slope_score = vec![0.0; r];
    let mut effect_score = vec![0.0; design.n_units()];
    for i in 0..design.n_units() {
        let a = unit_effects[i];
        if !a.is_finite() {
            continue;
        }
        for t in design.t_offset()..design.n_periods() {
            let row = i * t_eff + (t - design.t_offset());
            let s = link.score(treatment[[i, t]], eta_base[row] + a);
            effect_score[i] += s;
            for c in 0..r {
                slope_score[c] += s * design.values()[[row, c]];
            }
        }
    }
    (slope_score, effect_score)
}

/// Re-solve the per-unit intercept problems at fixed slopes. Returns NaN for
/// units without treatment variation.
pub fn concentrated_unit_effects(
    design: &DesignMatrix,
    treatment: &Array2<u8>,
    spec: &PsSpec,
    coefficients: &[f64],
) -> Result<Vec<f64>, PsError> {
    let data = GroupedData::per_unit(design, treatment)?;
    let beta = Array1::from_vec(coefficients.to_vec());
    let eta_base = design.values().dot(&beta);
    let mut effects: Vec<f64> = (0..data.groups.len())
        .map(|g| data.warm_start(g, spec))
        .collect();
    data.groups
        .iter()
        .zip(effects.iter_mut())
        .enumerate()
        .for_each(|(g, (range, a))| {
            if data.identified[g] {
                *a = data.inner_solve(range.clone(), &eta_base, *a, spec).alpha;
            } else {
                *a = f64::NAN;
            }
        });
    Ok(effects)
}

/// Fixed-effects conditional MLE: maximizes the summed log likelihood over
/// common slopes and one intercept per unit, excluding units without
/// treatment variation.
pub fn fit_fixed_effects_mle(
    design: &DesignMatrix,
    treatment: &Array2<u8>,
    spec: &PsSpec,
) -> Result<PsFit, PsError> {
    spec.validate()?;
    let data = GroupedData::per_unit(design, treatment)?;
    if !data.identified.iter().any(|&b| b) {
        return Err(PsError::NoVariationAnywhere);
    }
    let solution = fit_grouped(&data, spec)?;
    Ok(assemble_fit(PsModelKind::FixedEffects, design, spec, solution, None))
}

/// Pooled MLE: a single global intercept in place of the unit effects.
pub fn fit_pooled_mle(
    design: &DesignMatrix,
    treatment: &Array2<u8>,
    spec: &PsSpec,
) -> Result<PsFit, PsError> {
    spec.validate()?;
    let data = GroupedData::pooled(design, treatment)?;
    if !data.identified[0] {
        // A constant treatment column sends the intercept to +/- infinity.
        return Err(PsError::SeparationDetected { max_eta: f64::INFINITY });
    }
    let solution = fit_grouped(&data, spec)?;
    Ok(assemble_fit(PsModelKind::Pooled, design, spec, solution, Some(design.n_units())))
}

/// Marginal numerator model: pooled logit of treatment on `lag_count` of its
/// own lags (intercept only when `lag_count` is zero). `initial_treatment`
/// follows the same convention as [`crate::panel::LagSpec`].
pub fn fit_marginal_model(
    treatment: &Array2<u8>,
    lag_count: usize,
    initial_treatment: Option<u8>,
) -> Result<PsFit, PsError> {
    let design = marginal_design(treatment, lag_count, initial_treatment)?;
    let mut fit = fit_pooled_mle(&design, treatment, &PsSpec::default())?;
    fit.kind = PsModelKind::Marginal { lags: lag_count };
    Ok(fit)
}

/// Lag-only design used by the marginal model.
pub fn marginal_design(
    treatment: &Array2<u8>,
    lag_count: usize,
    initial_treatment: Option<u8>,
) -> Result<DesignMatrix, PsError> {
    let (n, t) = treatment.dim();
    let data = PanelDataset::new(
        treatment.clone(),
        Array3::<f64>::zeros((n, t, 0)),
        Vec::new(),
        None,
        (0..n).map(|i| format!("u{i}")).collect(),
        (0..t as i64).collect(),
    )
    .map_err(|e| PsError::ShapeMismatch(e.to_string()))?;
    let spec = crate::panel::LagSpec {
        treatment_lags: lag_count,
        covariate_lags: 0,
        covariate_indices: Some(Vec::new()),
        initial_treatment,
    };
    crate::panel::build_design(&data, &spec).map_err(|e| PsError::ShapeMismatch(e.to_string()))
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Design rows flattened alongside treatment, grouped by the parameter each
/// intercept belongs to (one group per unit, or one group overall).
struct GroupedData<'a> {
    design: &'a DesignMatrix,
    d: Vec<u8>,
    groups: Vec<Range<usize>>,
    identified: Vec<bool>,
}

struct InnerSolution {
    alpha: f64,
    /// True when the solution sits on an active bound.
    at_bound: bool,
}

struct GroupedSolution {
    coefficients: Vec<f64>,
    group_effects: Vec<f64>,
    log_likelihood: f64,
    score_norm: f64,
    outer_iterations: usize,
    trace: Vec<f64>,
}

impl<'a> GroupedData<'a> {
    fn flatten(design: &DesignMatrix, treatment: &Array2<u8>) -> Result<Vec<u8>, PsError> {
        let (n, t) = treatment.dim();
        if n != design.n_units() || t != design.n_periods() {
            return Err(PsError::ShapeMismatch(format!(
                "treatment is {n}x{t}, design expects {}x{}",
                design.n_units(),
                design.n_periods()
            )));
        }
        Ok(design.rows().iter().map(|&(i, s)| treatment[[i, s]]).collect())
    }

    fn per_unit(design: &'a DesignMatrix, treatment: &Array2<u8>) -> Result<Self, PsError> {
        let d = Self::flatten(design, treatment)?;
        let t_eff = design.periods_modeled();
        let groups: Vec<Range<usize>> =
            (0..design.n_units()).map(|i| i * t_eff..(i + 1) * t_eff).collect();
        let identified = groups.iter().map(|r| has_variation(&d[r.clone()])).collect();
        Ok(Self { design, d, groups, identified })
    }

    fn pooled(design: &'a DesignMatrix, treatment: &Array2<u8>) -> Result<Self, PsError> {
        let d = Self::flatten(design, treatment)?;
        let all = 0..d.len();
        let identified = vec![has_variation(&d[all.clone()])];
        Ok(Self { design, d, groups: vec![all], identified })
    }

    /// Finite warm start: inverse link of the shrunken treated fraction.
    fn warm_start(&self, g: usize, spec: &PsSpec) -> f64 {
        let range = self.groups[g].clone();
        let len = range.len() as f64;
        let treated: f64 = self.d[range].iter().map(|&x| f64::from(x)).sum();
        let a = spec.link.inverse((treated + 0.5) / (len + 1.0));
        project(a, spec.unit_effect_bounds)
    }

    /// One-dimensional Newton with step halving on the strictly concave
    /// per-group problem, projected onto the bounds when given.
    ///
    /// The summed objective carries rounding noise of order `eps * |value|`,
    /// so acceptance allows a decrease within that floor; without the slack,
    /// terminal Newton steps whose true improvement is below the noise get
    /// halved into oblivion on long panels.
    fn inner_solve(
        &self,
        range: Range<usize>,
        eta_base: &Array1<f64>,
        start: f64,
        spec: &PsSpec,
    ) -> InnerSolution {
        let link = spec.link;
        let bounds = spec.unit_effect_bounds;
        let tol = spec.inner_tolerance();
        let objective = |a: f64| -> f64 {
            range.clone().map(|r| link.log_likelihood(self.d[r], eta_base[r] + a)).sum()
        };

        let mut alpha = project(start, bounds);
        let mut value = objective(alpha);
        let noise_floor = 1e-11 * (1.0 + value.abs());
        for _ in 0..spec.max_inner_iterations {
            let mut score = 0.0;
            let mut info = 0.0;
            for r in range.clone() {
                let eta = eta_base[r] + alpha;
                score += link.score(self.d[r], eta);
                info += link.information(self.d[r], eta);
            }
            if projected_score(alpha, score, bounds).abs() <= tol {
                return InnerSolution { alpha, at_bound: on_bound(alpha, bounds) };
            }
            if !(info > 0.0) {
                break;
            }
            let mut step = score / info;
            if step.abs() <= f64::EPSILON * (1.0 + alpha.abs()) {
                break;
            }
            let mut halvings = 0;
            loop {
                let candidate = project(alpha + step, bounds);
                let cand_value = objective(candidate);
                if cand_value >= value - noise_floor || halvings >= spec.step_halving_limit {
                    alpha = candidate;
                    value = cand_value;
                    break;
                }
                step *= 0.5;
                halvings += 1;
            }
        }
        InnerSolution { alpha, at_bound: on_bound(alpha, bounds) }
    }

    /// Solve every identified group's intercept in parallel. Each group only
    /// touches its own rows, so results are independent of thread count.
    fn inner_solve_all(
        &self,
        eta_base: &Array1<f64>,
        effects: &mut [f64],
        at_bound: &mut [bool],
        spec: &PsSpec,
    ) {
        effects
            .par_iter_mut()
            .zip(at_bound.par_iter_mut())
            .enumerate()
            .for_each(|(g, (alpha, bound_flag))| {
                if self.identified[g] {
                    let start = if alpha.is_finite() { *alpha } else { self.warm_start(g, spec) };
                    let sol = self.inner_solve(self.groups[g].clone(), eta_base, start, spec);
                    *alpha = sol.alpha;
                    *bound_flag = sol.at_bound;
                } else {
                    *alpha = f64::NAN;
                    *bound_flag = false;
                }
            });
    }

    fn log_likelihood(&self, link: Link, eta_base: &Array1<f64>, effects: &[f64]) -> f64 {
        let mut total = 0.0;
        for (g, range) in self.groups.iter().enumerate() {
            if !self.identified[g] {
                continue;
            }
            let a = effects[g];
            for r in range.clone() {
                total += link.log_likelihood(self.d[r], eta_base[r] + a);
            }
        }
        total
    }

    /// Largest |linear predictor| over identified groups' rows.
    fn max_abs_eta(&self, eta_base: &Array1<f64>, effects: &[f64]) -> f64 {
        let mut max = 0.0f64;
        for (g, range) in self.groups.iter().enumerate() {
            if !self.identified[g] {
                continue;
            }
            let a = effects[g];
            for r in range.clone() {
                max = max.max((eta_base[r] + a).abs());
            }
        }
        max
    }

    /// True when the current parameters classify every modeled observation
    /// with strictly positive margin, i.e. `eta > 0` wherever `d = 1` and
    /// `eta < 0` wherever `d = 0`. Such a hyperplane exists only for
    /// completely separated data.
    fn perfectly_classified(&self, eta_base: &Array1<f64>, effects: &[f64]) -> bool {
        for (g, range) in self.groups.iter().enumerate() {
            if !self.identified[g] {
                continue;
            }
            let a = effects[g];
            for r in range.clone() {
                let margin = if self.d[r] == 1 { eta_base[r] + a } else { -(eta_base[r] + a) };
                if margin <= 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

fn has_variation(d: &[u8]) -> bool {
    d.iter().any(|&x| x == 1) && d.iter().any(|&x| x == 0)
}

fn project(a: f64, bounds: Option<(f64, f64)>) -> f64 {
    match bounds {
        Some((lo, hi)) => a.clamp(lo, hi),
        None => a,
    }
}

fn on_bound(a: f64, bounds: Option<(f64, f64)>) -> bool {
    matches!(bounds, Some((lo, hi)) if a <= lo || a >= hi)
}

/// Score seen by the convergence check: zero when pressing against an active
/// bound from the inside.
fn projected_score(a: f64, score: f64, bounds: Option<(f64, f64)>) -> f64 {
    if let Some((lo, hi)) = bounds {
        if (a <= lo && score < 0.0) || (a >= hi && score > 0.0) {
            return 0.0;
        }
    }
    score
}

/// Outer Newton on the profile likelihood in the slopes.
///
/// Each accepted iterate first re-solves every group intercept, then checks
/// the full score. The profile gradient is the direct slope score at the
/// concentrated optimum (envelope theorem); the profile information subtracts
/// the per-group rank-one correction `(sum w v)(sum w v)' / sum w` except for
/// groups pinned at a bound, whose intercepts do not move with the slopes.
fn fit_grouped(data: &GroupedData<'_>, spec: &PsSpec) -> Result<GroupedSolution, PsError> {
    let link = spec.link;
    let values = data.design.values();
    let r = values.ncols();
    let n_groups = data.groups.len();

    let mut beta = Array1::<f64>::zeros(r);
    let mut effects = vec![f64::NAN; n_groups];
    let mut at_bound = vec![false; n_groups];
    let mut eta_base = values.dot(&beta);
    data.inner_solve_all(&eta_base, &mut effects, &mut at_bound, spec);
    let mut loglik = data.log_likelihood(link, &eta_base, &effects);
    let mut trace = vec![loglik];

    for iteration in 0..spec.max_outer_iterations {
        // Full score at the current iterate, accumulated in group order.
        let mut slope_score = vec![0.0; r];
        let mut max_effect_score = 0.0f64;
        for (g, range) in data.groups.iter().enumerate() {
            if !data.identified[g] {
                continue;
            }
            let a = effects[g];
            let mut group_score = 0.0;
            for row in range.clone() {
                let s = link.score(data.d[row], eta_base[row] + a);
                group_score += s;
                for c in 0..r {
                    slope_score[c] += s * values[[row, c]];
                }
            }
            max_effect_score =
                max_effect_score.max(projected_score(a, group_score, spec.unit_effect_bounds).abs());
        }
        let score_norm = slope_score
            .iter()
            .fold(max_effect_score, |acc, s| acc.max(s.abs()));

        let max_eta = data.max_abs_eta(&eta_base, &effects);
        if score_norm <= spec.gradient_tolerance {
            // A fitted hyperplane that classifies every observation with
            // strictly positive margin certifies complete separation: the
            // likelihood has no interior maximum even though the score met
            // the tolerance at these finite parameters.
            if max_eta > SEPARATION_ETA || data.perfectly_classified(&eta_base, &effects) {
                return Err(PsError::SeparationDetected { max_eta });
            }
            return Ok(GroupedSolution {
                coefficients: beta.to_vec(),
                group_effects: effects,
                log_likelihood: loglik,
                score_norm,
                outer_iterations: iteration,
                trace,
            });
        }
        if max_eta > SEPARATION_ETA {
            return Err(PsError::SeparationDetected { max_eta });
        }
        if r == 0 {
            // Nothing to move: intercept-only model that has not met the
            // tolerance can only be a failed inner solve.
            return Err(PsError::MaxIterations { iterations: iteration, score_norm });
        }

        // Profile information (negative profile Hessian).
        let mut info = nalgebra::DMatrix::<f64>::zeros(r, r);
        for (g, range) in data.groups.iter().enumerate() {
            if !data.identified[g] {
                continue;
            }
            let a = effects[g];
            let mut wv = vec![0.0; r];
            let mut w_sum = 0.0;
            for row in range.clone() {
                let w = link.information(data.d[row], eta_base[row] + a);
                w_sum += w;
                for c in 0..r {
                    let wvc = w * values[[row, c]];
                    wv[c] += wvc;
                    for c2 in 0..=c {
                        info[(c, c2)] += wvc * values[[row, c2]];
                    }
                }
            }
            if !at_bound[g] && w_sum > 0.0 {
                for c in 0..r {
                    for c2 in 0..=c {
                        info[(c, c2)] -= wv[c] * wv[c2] / w_sum;
                    }
                }
            }
        }
        for c in 0..r {
            for c2 in (c + 1)..r {
                info[(c, c2)] = info[(c2, c)];
            }
        }
        let chol = nalgebra::Cholesky::new(info).ok_or(PsError::SingularInformation)?;
        let direction = chol.solve(&nalgebra::DVector::from_column_slice(&slope_score));

        // Step halving on the profile likelihood; each trial re-solves the
        // intercepts, warm-started from the current ones. Near the optimum
        // the true improvement of the last Newton step falls below the
        // floating-point resolution of the summed likelihood, so acceptance
        // allows a decrease within that noise floor.
        let noise_floor = 1e-11 * (1.0 + loglik.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=spec.step_halving_limit {
            let mut beta_try = beta.clone();
            for c in 0..r {
                beta_try[c] += step * direction[c];
            }
            let eta_try = values.dot(&beta_try);
            let mut effects_try = effects.clone();
            let mut bound_try = at_bound.clone();
            data.inner_solve_all(&eta_try, &mut effects_try, &mut bound_try, spec);
            let loglik_try = data.log_likelihood(link, &eta_try, &effects_try);
            if loglik_try > loglik - noise_floor {
                beta = beta_try;
                eta_base = eta_try;
                effects = effects_try;
                at_bound = bound_try;
                loglik = loglik_try;
                trace.push(loglik);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent direction left at floating-point resolution.
            return Err(PsError::MaxIterations { iterations: iteration + 1, score_norm });
        }
    }

    // Tolerance never met.
    let (slope_score, effect_score) = {
        let mut ss = vec![0.0; r];
        let mut es = 0.0f64;
        for (g, range) in data.groups.iter().enumerate() {
            if !data.identified[g] {
                continue;
            }
            let mut gs = 0.0;
            for row in range.clone() {
                let s = link.score(data.d[row], eta_base[row] + effects[g]);
                gs += s;
                for c in 0..r {
                    ss[c] += s * values[[row, c]];
                }
            }
            es = es.max(projected_score(effects[g], gs, spec.unit_effect_bounds).abs());
        }
        (ss, es)
    };
    let score_norm = slope_score.iter().fold(effect_score, |acc, s| acc.max(s.abs()));
    Err(PsError::MaxIterations { iterations: spec.max_outer_iterations, score_norm })
}

fn assemble_fit(
    kind: PsModelKind,
    design: &DesignMatrix,
    spec: &PsSpec,
    solution: GroupedSolution,
    broadcast_units: Option<usize>,
) -> PsFit {
    // Pooled fits estimate one intercept; expand it to every unit so that
    // prediction is uniform across model kinds.
    let (unit_effects, identified) = match broadcast_units {
        Some(n) => (vec![solution.group_effects[0]; n], vec![true; n]),
        None => {
            let identified = solution.group_effects.iter().map(|a| a.is_finite()).collect();
            (solution.group_effects, identified)
        }
    };
    let mut fit = PsFit {
        kind,
        link: spec.link,
        coefficients: solution.coefficients,
        column_names: design.column_names().to_vec(),
        unit_effects,
        identified,
        log_likelihood: solution.log_likelihood,
        score_norm: solution.score_norm,
        outer_iterations: solution.outer_iterations,
        profile_trace: solution.trace,
        fitted: ProbGrid::new(design.t_offset(), Array2::zeros((0, 0))),
    };
    fit.fitted = predict_propensity(&fit, design).expect("fit and design are conformable");
    fit
}
