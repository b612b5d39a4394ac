//! Treatment-history weights for the marginal structural model.
//!
//! A unit's weight multiplies one factor per period over the last `k+1`
//! periods: `numerator / pi` when treated, `(1 - numerator) / (1 - pi)` when
//! not. Unstabilized weights use numerator 1; stabilized weights use the
//! marginal model's fitted probability, which shrinks the weight spread
//! without changing what the weighted estimating equation identifies.
//!
//! Units whose effects the propensity fit could not identify have no defined
//! weight. The trimming strategies decide what happens to them: drop them,
//! impute their propensities near 0 or 1, or pin their unit effect to a
//! bound. Weight truncation caps the finished weights at an upper quantile
//! instead, the usual guard against unstable weighted estimates (Cole &
//! Hernán 2008).

use crate::panel::PanelDataset;
use crate::ps::{predict_propensity, ProbGrid, PsFit};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("propensity {value} for unit {unit} at period {period} is outside (0, 1)")]
    ProbabilityOutOfRange { unit: usize, period: usize, value: f64 },
    #[error("weight window of {requested} periods exceeds the {available} modeled periods")]
    KTooLarge { requested: usize, available: usize },
    #[error("no units included; cannot summarize weights")]
    EmptyWeightSet,
    #[error("column '{0}' is not constant within every unit")]
    NonConstantBaseline(String),
    #[error("{0}")]
    InvalidSpec(String),
}

/// Trimming strategy for units whose weights are undefined or extreme.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Trimming {
    /// Keep every unit as-is; undefined weights stay undefined.
    None,
    /// Exclude units without treatment variation. The default.
    #[default]
    DropUnits,
    /// Give all-control units propensity `epsilon` and all-treated units
    /// `1 - epsilon` across the weighted periods.
    ImputePs { epsilon: f64 },
    /// Pin the unit effect of all-control units at `lower` and of
    /// all-treated units at `upper`, then evaluate their propensities.
    ClampAlpha { lower: f64, upper: f64 },
    /// Cap finished weights at the nearest-rank `quantile` of the included
    /// weights.
    Truncate { quantile: f64 },
}

/// How to build the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSpec {
    /// Number of lags in the weighted window: the product runs over the final
    /// `k + 1` periods.
    pub k: usize,
    /// Use the marginal model's probabilities as numerators.
    pub stabilized: bool,
    pub trimming: Trimming,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self { k: 3, stabilized: true, trimming: Trimming::DropUnits }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<(), WeightError> {
        match self.trimming {
            Trimming::ImputePs { epsilon } => {
                if !(epsilon > 0.0 && epsilon < 0.5) {
                    return Err(WeightError::InvalidSpec(format!(
                        "impute epsilon {epsilon} must lie in (0, 0.5)"
                    )));
                }
            }
            Trimming::ClampAlpha { lower, upper } => {
                if !(lower < upper) {
                    return Err(WeightError::InvalidSpec(format!(
                        "clamp bounds ({lower}, {upper}) must satisfy lower < upper"
                    )));
                }
            }
            Trimming::Truncate { quantile } => {
                if !(quantile > 0.5 && quantile <= 1.0) {
                    return Err(WeightError::InvalidSpec(format!(
                        "truncation quantile {quantile} must lie in (0.5, 1]"
                    )));
                }
            }
            Trimming::None | Trimming::DropUnits => {}
        }
        Ok(())
    }
}

/// Summary statistics over the included weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub effective_sample_size: f64,
    pub n_dropped: usize,
    pub n_imputed: usize,
    pub n_truncated: usize,
}

/// Finished per-unit weights. Excluded units carry NaN and `included[i] =
/// false`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSet {
    pub weights: Vec<f64>,
    pub included: Vec<bool>,
    pub k: usize,
    pub stabilized: bool,
    pub trimming: Trimming,
    pub diagnostics: WeightDiagnostics,
}

impl WeightSet {
    pub fn n_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    /// Write one row per unit: id, weight, inclusion, strategy.
    pub fn write_csv(
        &self,
        path: &std::path::Path,
        unit_ids: &[String],
    ) -> Result<(), std::io::Error> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["unit_id", "weight", "included", "strategy"])?;
        let strategy = trimming_label(self.trimming);
        for (i, id) in unit_ids.iter().enumerate() {
            writer.write_record([
                id.as_str(),
                &self.weights[i].to_string(),
                if self.included[i] { "true" } else { "false" },
                &strategy,
            ])?;
        }
        writer.flush()
    }

    /// Read a weight file written by [`WeightSet::write_csv`], returning ids
    /// alongside the set (diagnostics are recomputed over included units).
    pub fn read_csv(path: &std::path::Path) -> Result<(Vec<String>, WeightSet), WeightError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| WeightError::InvalidSpec(format!("{}: {e}", path.display())))?;
        let mut unit_ids = Vec::new();
        let mut weights = Vec::new();
        let mut included = Vec::new();
        for record in reader.records() {
            let record =
                record.map_err(|e| WeightError::InvalidSpec(e.to_string()))?;
            unit_ids.push(record.get(0).unwrap_or("").to_string());
            let inc = record.get(2).unwrap_or("false") == "true";
            let w: f64 = if inc {
                record
                    .get(1)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| WeightError::InvalidSpec("bad weight value".into()))?
            } else {
                f64::NAN
            };
            weights.push(w);
            included.push(inc);
        }
        let n_dropped = included.iter().filter(|&&b| !b).count();
        let diagnostics = summarize_weights(&weights, &included, n_dropped, 0, 0)?;
        Ok((
            unit_ids,
            WeightSet {
                weights,
                included,
                k: 0,
                stabilized: false,
                trimming: Trimming::None,
                diagnostics,
            },
        ))
    }
}

fn trimming_label(t: Trimming) -> String {
    match t {
        Trimming::None => "none".into(),
        Trimming::DropUnits => "drop_units".into(),
        Trimming::ImputePs { epsilon } => format!("impute_ps({epsilon})"),
        Trimming::ClampAlpha { lower, upper } => format!("clamp_alpha({lower},{upper})"),
        Trimming::Truncate { quantile } => format!("truncate({quantile})"),
    }
}

/// Propensities after a trimming strategy has been applied, with the unit
/// inclusion mask the weight product should honor.
#[derive(Debug, Clone)]
pub struct TrimmedPropensities {
    pub probs: ProbGrid,
    pub included: Vec<bool>,
    pub report: TrimmingReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrimmingReport {
    pub strategy: Trimming,
    pub n_dropped: usize,
    pub n_imputed: usize,
}

/// Resolve non-identified units according to the strategy.
///
/// `DropUnits` masks them out; `ImputePs` fills their propensity rows with
/// `epsilon` or `1 - epsilon`; `ClampAlpha` assigns the bound to their unit
/// effect and evaluates the fitted link on the design; `None` and `Truncate`
/// leave the probabilities untouched but still exclude units whose weights
/// would be undefined.
pub fn apply_trimming(
    fit: &PsFit,
    design: &crate::panel::DesignMatrix,
    treatment: &Array2<u8>,
    spec: &WeightSpec,
) -> Result<TrimmedPropensities, WeightError> {
    spec.validate()?;
    let n = fit.n_units();
    let mut probs = fit.fitted.clone();
    let mut included = vec![true; n];
    let mut n_dropped = 0;
    let mut n_imputed = 0;

    let degenerate: Vec<usize> = (0..n).filter(|&i| !fit.identified[i]).collect();
    match spec.trimming {
        Trimming::None | Trimming::DropUnits | Trimming::Truncate { .. } => {
            for &i in &degenerate {
                included[i] = false;
                n_dropped += 1;
            }
        }
        Trimming::ImputePs { epsilon } => {
            for &i in &degenerate {
                let all_treated = treatment.row(i).iter().all(|&d| d == 1);
                let value = if all_treated { 1.0 - epsilon } else { epsilon };
                probs.values_mut().row_mut(i).fill(value);
                n_imputed += 1;
            }
        }
        Trimming::ClampAlpha { lower, upper } => {
            if degenerate.is_empty() {
                // Nothing to clamp.
            } else {
                let mut clamped = fit.clone();
                for &i in &degenerate {
                    let all_treated = treatment.row(i).iter().all(|&d| d == 1);
                    clamped.unit_effects[i] = if all_treated { upper } else { lower };
                }
                let grid = predict_propensity(&clamped, design)
                    .map_err(|e| WeightError::InvalidSpec(e.to_string()))?;
                for &i in &degenerate {
                    let row = grid.values().row(i).to_owned();
                    probs.values_mut().row_mut(i).assign(&row);
                    n_imputed += 1;
                }
            }
        }
    }

    Ok(TrimmedPropensities {
        probs,
        included,
        report: TrimmingReport { strategy: spec.trimming, n_dropped, n_imputed },
    })
}

/// Multiply the per-period factors over the final `k + 1` periods.
///
/// `numerators` is `None` for unstabilized weights. `included`, when given,
/// masks units out of the product entirely (their weight is NaN). The
/// `Truncate` strategy, if named in the spec, is applied to the finished
/// weights.
pub fn compute_weights(
    propensities: &ProbGrid,
    numerators: Option<&ProbGrid>,
    treatment: &Array2<u8>,
    spec: &WeightSpec,
    included: Option<&[bool]>,
) -> Result<WeightSet, WeightError> {
    spec.validate()?;
    let (n, t_total) = treatment.dim();
    if propensities.n_units() != n || propensities.n_periods() != t_total {
        return Err(WeightError::InvalidSpec(format!(
            "propensity grid covers {} units to period {}, treatment is {n}x{t_total}",
            propensities.n_units(),
            propensities.n_periods(),
        )));
    }
    if spec.k + 1 > t_total - propensities.t_offset() {
        return Err(WeightError::KTooLarge {
            requested: spec.k + 1,
            available: t_total - propensities.t_offset(),
        });
    }
    let first_weighted = t_total - 1 - spec.k;
    if let Some(bar) = numerators {
        if bar.n_units() != n || bar.n_periods() != t_total {
            return Err(WeightError::InvalidSpec(
                "numerator grid does not match the treatment panel".into(),
            ));
        }
        if spec.k + 1 > t_total - bar.t_offset() {
            return Err(WeightError::KTooLarge {
                requested: spec.k + 1,
                available: t_total - bar.t_offset(),
            });
        }
    }
    if spec.stabilized && numerators.is_none() {
        return Err(WeightError::InvalidSpec(
            "stabilized weights need numerator probabilities".into(),
        ));
    }

    let mask = |i: usize| included.map(|m| m[i]).unwrap_or(true);
    let mut weights = vec![f64::NAN; n];
    let mut final_included = vec![false; n];
    for i in 0..n {
        if !mask(i) {
            continue;
        }
        let mut w = 1.0;
        let mut ok = true;
        for t in first_weighted..t_total {
            let pi = propensities.get(i, t);
            if !(pi > 0.0 && pi < 1.0) {
                if included.is_some() {
                    return Err(WeightError::ProbabilityOutOfRange {
                        unit: i,
                        period: t,
                        value: pi,
                    });
                }
                // Without an explicit mask, undefined rows mark excluded
                // units (e.g. non-identified with Trimming::None).
                if pi.is_nan() {
                    ok = false;
                    break;
                }
                return Err(WeightError::ProbabilityOutOfRange { unit: i, period: t, value: pi });
            }
            // Stabilized factors are (numerator / pi) and
            // ((1 - numerator) / (1 - pi)); unstabilized factors have one in
            // the numerator on both branches.
            let numerator = match numerators {
                Some(bar) if spec.stabilized => {
                    let nb = bar.get(i, t);
                    if !(nb > 0.0 && nb < 1.0) {
                        return Err(WeightError::ProbabilityOutOfRange {
                            unit: i,
                            period: t,
                            value: nb,
                        });
                    }
                    Some(nb)
                }
                _ => None,
            };
            w *= match (treatment[[i, t]] == 1, numerator) {
                (true, Some(nb)) => nb / pi,
                (true, None) => 1.0 / pi,
                (false, Some(nb)) => (1.0 - nb) / (1.0 - pi),
                (false, None) => 1.0 / (1.0 - pi),
            };
        }
        if ok {
            weights[i] = w;
            final_included[i] = true;
        }
    }

    let mut n_truncated = 0;
    if let Trimming::Truncate { quantile } = spec.trimming {
        n_truncated = truncate_weights(&mut weights, &final_included, quantile)?;
    }

    let n_dropped = final_included.iter().filter(|&&b| !b).count();
    let diagnostics = summarize_weights(&weights, &final_included, n_dropped, 0, n_truncated)?;
    Ok(WeightSet {
        weights,
        included: final_included,
        k: spec.k,
        stabilized: spec.stabilized,
        trimming: spec.trimming,
        diagnostics,
    })
}

/// Cap weights at the nearest-rank `quantile` of the included weights.
/// Returns how many weights were lowered.
pub fn truncate_weights(
    weights: &mut [f64],
    included: &[bool],
    quantile: f64,
) -> Result<usize, WeightError> {
    let mut sorted: Vec<f64> = weights
        .iter()
        .zip(included)
        .filter(|(_, &inc)| inc)
        .map(|(&w, _)| w)
        .collect();
    if sorted.is_empty() {
        return Err(WeightError::EmptyWeightSet);
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    // Nearest-rank definition: the smallest value whose cumulative share of
    // the sample is at least `quantile`.
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let cutoff = sorted[rank - 1];
    let mut n_truncated = 0;
    for (w, &inc) in weights.iter_mut().zip(included) {
        if inc && *w > cutoff {
            *w = cutoff;
            n_truncated += 1;
        }
    }
    Ok(n_truncated)
}

fn summarize_weights(
    weights: &[f64],
    included: &[bool],
    n_dropped: usize,
    n_imputed: usize,
    n_truncated: usize,
) -> Result<WeightDiagnostics, WeightError> {
    let ess = effective_sample_size(weights, included)?;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&w, &inc) in weights.iter().zip(included) {
        if inc {
            min = min.min(w);
            max = max.max(w);
            sum += w;
            count += 1;
        }
    }
    Ok(WeightDiagnostics {
        min,
        max,
        mean: sum / count as f64,
        effective_sample_size: ess,
        n_dropped,
        n_imputed,
        n_truncated,
    })
}

/// `(sum w)^2 / sum w^2` over included units.
pub fn effective_sample_size(weights: &[f64], included: &[bool]) -> Result<f64, WeightError> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut any = false;
    for (&w, &inc) in weights.iter().zip(included) {
        if inc {
            any = true;
            sum += w;
            sum_sq += w * w;
        }
    }
    if !any {
        return Err(WeightError::EmptyWeightSet);
    }
    if sum_sq == 0.0 {
        return Ok(0.0);
    }
    Ok(sum * sum / sum_sq)
}

/// A per-unit baseline column for the balance table.
#[derive(Debug, Clone)]
pub struct BaselineColumn {
    pub name: String,
    /// One value per unit.
    pub values: Vec<f64>,
}

/// One row of the balance table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceRow {
    pub column: String,
    /// Weighted treated mean minus weighted control mean, divided by the
    /// unweighted standard deviation over all included units.
    pub standardized_mean_difference: f64,
    pub treated_mean: f64,
    pub control_mean: f64,
}

/// Weighted standardized mean differences of baseline columns between units
/// treated and untreated in the final period.
pub fn balance_check(
    weights: &WeightSet,
    final_treatment: &[u8],
    columns: &[BaselineColumn],
) -> Result<Vec<BalanceRow>, WeightError> {
    let n = weights.weights.len();
    if final_treatment.len() != n {
        return Err(WeightError::InvalidSpec(
            "final treatment length does not match weights".into(),
        ));
    }
    let mut rows = Vec::with_capacity(columns.len());
    for col in columns {
        if col.values.len() != n {
            return Err(WeightError::InvalidSpec(format!(
                "column '{}' length does not match weights",
                col.name
            )));
        }
        let mut w_treated = 0.0;
        let mut w_control = 0.0;
        let mut sum_treated = 0.0;
        let mut sum_control = 0.0;
        let mut pooled = Vec::new();
        for i in 0..n {
            if !weights.included[i] {
                continue;
            }
            let w = weights.weights[i];
            let z = col.values[i];
            pooled.push(z);
            if final_treatment[i] == 1 {
                w_treated += w;
                sum_treated += w * z;
            } else {
                w_control += w;
                sum_control += w * z;
            }
        }
        if pooled.is_empty() {
            return Err(WeightError::EmptyWeightSet);
        }
        let treated_mean = if w_treated > 0.0 { sum_treated / w_treated } else { 0.0 };
        let control_mean = if w_control > 0.0 { sum_control / w_control } else { 0.0 };
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let var = pooled.iter().map(|z| (z - mean).powi(2)).sum::<f64>()
            / (pooled.len() as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        let diff = treated_mean - control_mean;
        let smd = if diff == 0.0 { 0.0 } else { diff / sd };
        rows.push(BalanceRow {
            column: col.name.clone(),
            standardized_mean_difference: smd,
            treated_mean,
            control_mean,
        });
    }
    Ok(rows)
}

/// Pull unit-constant covariate columns out of a panel for the balance
/// table, rejecting columns that vary within a unit.
pub fn baseline_columns_from_panel(
    data: &PanelDataset,
    names: &[String],
) -> Result<Vec<BaselineColumn>, WeightError> {
    let mut columns = Vec::with_capacity(names.len());
    for name in names {
        let j = data
            .covariate_names()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| WeightError::InvalidSpec(format!("no covariate named '{name}'")))?;
        let mut values = Vec::with_capacity(data.n_units());
        for i in 0..data.n_units() {
            let first = data.covariates()[[i, 0, j]];
            for t in 1..data.n_periods() {
                if data.covariates()[[i, t, j]] != first {
                    return Err(WeightError::NonConstantBaseline(name.clone()));
                }
            }
            values.push(first);
        }
        columns.push(BaselineColumn { name: name.clone(), values });
    }
    Ok(columns)
}
