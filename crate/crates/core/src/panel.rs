//! Balanced panel data: the in-memory model, long-format CSV ingestion,
//! validation, and lagged design matrices for the treatment model.
//!
//! A panel holds `n_units x n_periods` binary treatments, an optional block of
//! time-varying covariates, and a single endline outcome per unit. Panels are
//! immutable after construction; every operation here is a pure function of
//! its inputs.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Errors raised while loading, validating, or deriving designs from panels.
#[derive(Debug, Error)]
pub enum PanelError {
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("treatment must be 0 or 1, found {value} at unit '{unit}', period {period}")]
    NonBinaryTreatment {
        unit: String,
        period: i64,
        value: String,
    },
    #[error("outcome varies within unit '{unit}': {first} vs {second}")]
    InconsistentOutcome {
        unit: String,
        first: f64,
        second: f64,
    },
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("treatment lag count {lags} must be smaller than the number of periods {periods}")]
    LagTooLong { lags: usize, periods: usize },
    #[error("{0}")]
    ShapeMismatch(String),
}

/// A balanced panel: every unit observed at every period, binary treatment,
/// and at most one outcome value per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_units: usize,
    n_periods: usize,
    /// `n_units x n_periods`, entries in {0, 1}.
    treatment: Array2<u8>,
    /// `n_units x n_periods x n_covariates`; the covariate block may be empty.
    covariates: Array3<f64>,
    covariate_names: Vec<String>,
    /// Endline outcome, one value per unit, when present.
    outcome: Option<Array1<f64>>,
    unit_ids: Vec<String>,
    period_ids: Vec<i64>,
}

impl PanelDataset {
    /// Assemble a panel from parts, enforcing the shape and value invariants.
    pub fn new(
        treatment: Array2<u8>,
        covariates: Array3<f64>,
        covariate_names: Vec<String>,
        outcome: Option<Array1<f64>>,
        unit_ids: Vec<String>,
        period_ids: Vec<i64>,
    ) -> Result<Self, PanelError> {
        let (n, t) = treatment.dim();
        if n == 0 || t == 0 {
            return Err(PanelError::ShapeMismatch("panel must be non-empty".into()));
        }
        let (cn, ct, _p) = covariates.dim();
        if cn != n || ct != t {
            return Err(PanelError::ShapeMismatch(format!(
                "covariate block is {cn}x{ct}, treatment is {n}x{t}"
            )));
        }
        if covariate_names.len() != covariates.dim().2 {
            return Err(PanelError::ShapeMismatch(
                "covariate names do not match covariate columns".into(),
            ));
        }
        if unit_ids.len() != n || period_ids.len() != t {
            return Err(PanelError::ShapeMismatch("label lengths do not match".into()));
        }
        for ((i, s), &d) in treatment.indexed_iter() {
            if d > 1 {
                return Err(PanelError::NonBinaryTreatment {
                    unit: unit_ids[i].clone(),
                    period: period_ids[s],
                    value: d.to_string(),
                });
            }
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::ParseError("non-finite covariate value".into()));
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(PanelError::ShapeMismatch(
                    "outcome length does not match unit count".into(),
                ));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(PanelError::ParseError("non-finite outcome value".into()));
            }
        }
        Ok(Self {
            n_units: n,
            n_periods: t,
            treatment,
            covariates,
            covariate_names,
            outcome,
            unit_ids,
            period_ids,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.dim().2
    }

    pub fn treatment(&self) -> &Array2<u8> {
        &self.treatment
    }

    pub fn covariates(&self) -> &Array3<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome(&self) -> Option<&Array1<f64>> {
        self.outcome.as_ref()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_ids(&self) -> &[i64] {
        &self.period_ids
    }

    /// Treatment indicator in the final observed period, per unit.
    pub fn final_treatment(&self) -> Vec<u8> {
        (0..self.n_units)
            .map(|i| self.treatment[[i, self.n_periods - 1]])
            .collect()
    }

    /// Number of treated periods per unit.
    pub fn treated_counts(&self) -> Vec<usize> {
        (0..self.n_units)
            .map(|i| (0..self.n_periods).filter(|&t| self.treatment[[i, t]] == 1).count())
            .collect()
    }
}

/// Maps long-format CSV columns onto panel roles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub unit_col: String,
    pub time_col: String,
    pub treat_col: String,
    /// Optional outcome column; values must be constant within a unit or
    /// present only at the final period.
    pub outcome_col: Option<String>,
    pub covariate_cols: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit_col: "unit".into(),
            time_col: "period".into(),
            treat_col: "treatment".into(),
            outcome_col: Some("outcome".into()),
            covariate_cols: Vec::new(),
        }
    }
}

/// Load a long-format CSV (one row per unit-period) into a balanced panel.
///
/// Units are ordered by first appearance, periods ascending. The outcome, if a
/// column is named, may appear on every row (constant within unit) or only on
/// the final period's row; blank cells elsewhere are allowed.
pub fn load_panel_csv(path: &Path, schema: &CsvSchema) -> Result<PanelDataset, PanelError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| PanelError::ParseError(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| PanelError::ParseError(e.to_string()))?
        .clone();
    let col_index = |name: &str| -> Result<usize, PanelError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::ParseError(format!("missing column '{name}'")))
    };

    let unit_idx = col_index(&schema.unit_col)?;
    let time_idx = col_index(&schema.time_col)?;
    let treat_idx = col_index(&schema.treat_col)?;
    let outcome_idx = schema
        .outcome_col
        .as_deref()
        .map(col_index)
        .transpose()?;
    let cov_idx: Vec<usize> = schema
        .covariate_cols
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;

    struct Row {
        unit: String,
        period: i64,
        treat: u8,
        covs: Vec<f64>,
        outcome: Option<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| PanelError::ParseError(e.to_string()))?;
        let get = |idx: usize| record.get(idx).unwrap_or("").trim();

        let unit = get(unit_idx).to_string();
        let period: i64 = get(time_idx).parse().map_err(|_| {
            PanelError::ParseError(format!(
                "row {}: period '{}' is not an integer",
                line + 2,
                get(time_idx)
            ))
        })?;
        let treat_raw = get(treat_idx);
        let treat = match treat_raw {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                // Accept float spellings of exactly 0 or 1, reject the rest.
                match other.parse::<f64>() {
                    Ok(v) if v == 0.0 => 0,
                    Ok(v) if v == 1.0 => 1,
                    _ => {
                        return Err(PanelError::NonBinaryTreatment {
                            unit,
                            period,
                            value: other.to_string(),
                        })
                    }
                }
            }
        };
        let covs = cov_idx
            .iter()
            .map(|&idx| {
                get(idx).parse::<f64>().map_err(|_| {
                    PanelError::ParseError(format!(
                        "row {}: covariate '{}' is not a number",
                        line + 2,
                        get(idx)
                    ))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let outcome = match outcome_idx {
            Some(idx) => {
                let raw = get(idx);
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse::<f64>().map_err(|_| {
                        PanelError::ParseError(format!(
                            "row {}: outcome '{raw}' is not a number",
                            line + 2
                        ))
                    })?)
                }
            }
            None => None,
        };
        rows.push(Row { unit, period, treat, covs, outcome });
    }
    if rows.is_empty() {
        return Err(PanelError::ParseError("no data rows".into()));
    }

    // Units in order of first appearance; periods sorted ascending.
    let mut unit_ids: Vec<String> = Vec::new();
    for r in &rows {
        if !unit_ids.contains(&r.unit) {
            unit_ids.push(r.unit.clone());
        }
    }
    let mut period_ids: Vec<i64> = rows.iter().map(|r| r.period).collect();
    period_ids.sort_unstable();
    period_ids.dedup();

    let n = unit_ids.len();
    let t = period_ids.len();
    let p = cov_idx.len();
    let unit_pos: BTreeMap<&str, usize> =
        unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let period_pos: BTreeMap<i64, usize> =
        period_ids.iter().enumerate().map(|(s, &q)| (q, s)).collect();

    let mut treatment = Array2::<u8>::zeros((n, t));
    let mut covariates = Array3::<f64>::zeros((n, t, p));
    let mut seen = Array2::<bool>::from_elem((n, t), false);
    let mut outcome_vals: Vec<Option<f64>> = vec![None; n];
    let mut any_outcome = false;

    for r in &rows {
        let i = unit_pos[r.unit.as_str()];
        let s = period_pos[&r.period];
        if seen[[i, s]] {
            return Err(PanelError::UnbalancedPanel(format!(
                "duplicate cell for unit '{}', period {}",
                r.unit, r.period
            )));
        }
        seen[[i, s]] = true;
        treatment[[i, s]] = r.treat;
        for (j, v) in r.covs.iter().enumerate() {
            covariates[[i, s, j]] = *v;
        }
        if let Some(y) = r.outcome {
            any_outcome = true;
            match outcome_vals[i] {
                None => outcome_vals[i] = Some(y),
                Some(prev) if prev.to_bits() == y.to_bits() => {}
                Some(prev) => {
                    return Err(PanelError::InconsistentOutcome {
                        unit: r.unit.clone(),
                        first: prev,
                        second: y,
                    })
                }
            }
        }
    }

    for i in 0..n {
        for s in 0..t {
            if !seen[[i, s]] {
                return Err(PanelError::UnbalancedPanel(format!(
                    "unit '{}' missing period {}",
                    unit_ids[i], period_ids[s]
                )));
            }
        }
    }

    let outcome = if any_outcome {
        let filled: Result<Vec<f64>, PanelError> = outcome_vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    PanelError::ParseError(format!("unit '{}' has no outcome value", unit_ids[i]))
                })
            })
            .collect();
        Some(Array1::from_vec(filled?))
    } else {
        None
    };

    PanelDataset::new(
        treatment,
        covariates,
        schema.covariate_cols.clone(),
        outcome,
        unit_ids,
        period_ids,
    )
}

/// Write a panel back to long-format CSV using the given schema names.
///
/// Floats are written in shortest round-trip form, so a write/load cycle
/// reproduces every array bit for bit. The outcome, when present, is written
/// on every row of its unit.
pub fn write_panel_csv(
    data: &PanelDataset,
    path: &Path,
    schema: &CsvSchema,
) -> Result<(), PanelError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| PanelError::ParseError(format!("{}: {e}", path.display())))?;

    let mut header = vec![
        schema.unit_col.clone(),
        schema.time_col.clone(),
        schema.treat_col.clone(),
    ];
    let write_outcome = data.outcome().is_some() && schema.outcome_col.is_some();
    if write_outcome {
        header.push(schema.outcome_col.clone().unwrap());
    }
    header.extend(data.covariate_names().iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| PanelError::ParseError(e.to_string()))?;

    for i in 0..data.n_units() {
        for s in 0..data.n_periods() {
            let mut record = vec![
                data.unit_ids()[i].clone(),
                data.period_ids()[s].to_string(),
                data.treatment()[[i, s]].to_string(),
            ];
            if write_outcome {
                record.push(data.outcome().unwrap()[i].to_string());
            }
            for j in 0..data.n_covariates() {
                record.push(data.covariates()[[i, s, j]].to_string());
            }
            writer
                .write_record(&record)
                .map_err(|e| PanelError::ParseError(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| PanelError::ParseError(e.to_string()))?;
    Ok(())
}

/// Per-unit treatment variation summary and covariate scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Treated-period count per unit, in unit order.
    pub treated_periods: Vec<usize>,
    /// Units treated in every period.
    pub all_treated_units: Vec<String>,
    /// Units treated in no period.
    pub all_control_units: Vec<String>,
    pub covariate_summaries: Vec<CovariateSummary>,
    pub n_units: usize,
    pub n_periods: usize,
    /// True when at least one unit has no within-unit treatment variation.
    pub has_degenerate_units: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSummary {
    pub name: String,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

/// Scan a panel for units without treatment variation and summarize the
/// covariate columns. Never mutates the panel.
pub fn validate(data: &PanelDataset) -> ValidationReport {
    let treated = data.treated_counts();
    let mut all_treated_units = Vec::new();
    let mut all_control_units = Vec::new();
    for (i, &c) in treated.iter().enumerate() {
        if c == data.n_periods() {
            all_treated_units.push(data.unit_ids()[i].clone());
        } else if c == 0 {
            all_control_units.push(data.unit_ids()[i].clone());
        }
    }

    let nt = (data.n_units() * data.n_periods()) as f64;
    let covariate_summaries = (0..data.n_covariates())
        .map(|j| {
            let col = data.covariates().index_axis(ndarray::Axis(2), j);
            let mean = col.iter().sum::<f64>() / nt;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nt - 1.0).max(1.0);
            CovariateSummary {
                name: data.covariate_names()[j].clone(),
                mean,
                std_dev: var.sqrt(),
                min: col.iter().cloned().fold(f64::INFINITY, f64::min),
                max: col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();

    let has_degenerate_units = !all_treated_units.is_empty() || !all_control_units.is_empty();
    ValidationReport {
        treated_periods: treated,
        all_treated_units,
        all_control_units,
        covariate_summaries,
        n_units: data.n_units(),
        n_periods: data.n_periods(),
        has_degenerate_units,
    }
}

/// Specification of the treatment-model design: which covariate columns to
/// use and how many lags of treatment and of the covariates to append. How
/// deep the covariate history should reach is the analyst's call; the
/// default uses contemporaneous covariates and one treatment lag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagSpec {
    /// Number of lagged treatment columns, `D[t-1] .. D[t-L]`.
    pub treatment_lags: usize,
    /// Number of lagged copies of each covariate column.
    pub covariate_lags: usize,
    /// Covariate column indices to include; `None` means all.
    pub covariate_indices: Option<Vec<usize>>,
    /// When set, periods whose treatment lags reach before the sample are
    /// kept and the missing history is filled with this value; when `None`,
    /// the first `treatment_lags` periods are dropped. Loaded data uses
    /// `None` (the likelihood should not fabricate history); simulated data
    /// uses `Some(0)` because the generator starts every unit untreated.
    /// Covariate lags have no initial-value convention and always drop.
    pub initial_treatment: Option<u8>,
}

impl Default for LagSpec {
    fn default() -> Self {
        Self {
            treatment_lags: 1,
            covariate_lags: 0,
            covariate_indices: None,
            initial_treatment: None,
        }
    }
}

impl LagSpec {
    pub fn with_lags(treatment_lags: usize) -> Self {
        Self { treatment_lags, ..Self::default() }
    }

    /// Periods dropped at the start of the sample.
    pub fn offset(&self) -> usize {
        let treatment_offset =
            if self.initial_treatment.is_some() { 0 } else { self.treatment_lags };
        treatment_offset.max(self.covariate_lags)
    }
}

/// Row-major (unit, then period) design matrix over the modeled periods.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_units: usize,
    /// Number of initial periods dropped to form lags.
    t_offset: usize,
    /// Global period count of the source panel.
    n_periods: usize,
    /// `(unit, period)` index of each row, period being the global 0-based
    /// index into the panel.
    rows: Vec<(usize, usize)>,
    /// `(n_units * periods_modeled) x n_columns`.
    values: Array2<f64>,
    column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn from_parts(
        n_units: usize,
        n_periods: usize,
        t_offset: usize,
        values: Array2<f64>,
        column_names: Vec<String>,
    ) -> Result<Self, PanelError> {
        let t_eff = n_periods - t_offset;
        if values.nrows() != n_units * t_eff {
            return Err(PanelError::ShapeMismatch(format!(
                "design has {} rows, expected {}",
                values.nrows(),
                n_units * t_eff
            )));
        }
        if values.ncols() != column_names.len() {
            return Err(PanelError::ShapeMismatch(
                "design column names do not match width".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::ParseError("non-finite design value".into()));
        }
        let rows = (0..n_units)
            .flat_map(|i| (t_offset..n_periods).map(move |t| (i, t)))
            .collect();
        Ok(Self { n_units, t_offset, n_periods, rows, values, column_names })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    /// Periods modeled per unit.
    pub fn periods_modeled(&self) -> usize {
        self.n_periods - self.t_offset
    }

    pub fn t_offset(&self) -> usize {
        self.t_offset
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Flat row index for unit `i` at global period `t`.
    pub fn row_index(&self, i: usize, t: usize) -> usize {
        debug_assert!(t >= self.t_offset);
        i * self.periods_modeled() + (t - self.t_offset)
    }
}

/// Build the treatment-model design: contemporaneous covariate columns
/// first, then lagged covariates in ascending lag order, then treatment lags
/// in ascending order (`treat_lag1`, `treat_lag2`, ...).
pub fn build_design(data: &PanelDataset, spec: &LagSpec) -> Result<DesignMatrix, PanelError> {
    let lags = spec.treatment_lags;
    let t_total = data.n_periods();
    let t_offset = spec.offset();
    if t_offset >= t_total {
        return Err(PanelError::LagTooLong { lags: t_offset, periods: t_total });
    }

    let cov_idx: Vec<usize> = match &spec.covariate_indices {
        Some(idx) => {
            for &j in idx {
                if j >= data.n_covariates() {
                    return Err(PanelError::ShapeMismatch(format!(
                        "covariate index {j} out of range ({} columns)",
                        data.n_covariates()
                    )));
                }
            }
            idx.clone()
        }
        None => (0..data.n_covariates()).collect(),
    };

    let t_eff = t_total - t_offset;
    let r = cov_idx.len() * (1 + spec.covariate_lags) + lags;
    let mut values = Array2::<f64>::zeros((data.n_units() * t_eff, r));

    for i in 0..data.n_units() {
        for t in t_offset..t_total {
            let row = i * t_eff + (t - t_offset);
            let mut col = 0;
            for lag in 0..=spec.covariate_lags {
                for &j in &cov_idx {
                    values[[row, col]] = data.covariates()[[i, t - lag, j]];
                    col += 1;
                }
            }
            for lag in 1..=lags {
                let v = if t >= lag {
                    f64::from(data.treatment()[[i, t - lag]])
                } else {
                    f64::from(spec.initial_treatment.unwrap())
                };
                values[[row, col]] = v;
                col += 1;
            }
        }
    }

    let mut column_names: Vec<String> = Vec::with_capacity(r);
    for lag in 0..=spec.covariate_lags {
        for &j in &cov_idx {
            let name = &data.covariate_names()[j];
            if lag == 0 {
                column_names.push(name.clone());
            } else {
                column_names.push(format!("{name}_lag{lag}"));
            }
        }
    }
    column_names.extend((1..=lags).map(|l| format!("treat_lag{l}")));

    DesignMatrix::from_parts(data.n_units(), t_total, t_offset, values, column_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_panel() -> PanelDataset {
        // 2 units x 4 periods, 2 covariates.
        let treatment = array![[1, 0, 1, 0], [0, 0, 1, 1]];
        let mut covariates = Array3::<f64>::zeros((2, 4, 2));
        for i in 0..2 {
            for t in 0..4 {
                covariates[[i, t, 0]] = (i + 1) as f64 * 0.5 + t as f64;
                covariates[[i, t, 1]] = -(t as f64) * 0.25;
            }
        }
        PanelDataset::new(
            treatment,
            covariates,
            vec!["x1".into(), "x2".into()],
            Some(array![1.5, -0.25]),
            vec!["a".into(), "b".into()],
            vec![1, 2, 3, 4],
        )
        .unwrap()
    }

    #[test]
    fn loads_well_formed_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        std::fs::write(
            &path,
            "unit,period,treatment,outcome,x1\n\
             a,1,0,,0.5\na,2,1,,0.25\na,3,0,2.5,-1.0\n\
             b,1,1,,0.0\nb,2,0,,0.125\nb,3,1,-3.5,2.0\n",
        )
        .unwrap();
        let schema = CsvSchema { covariate_cols: vec!["x1".into()], ..CsvSchema::default() };
        let data = load_panel_csv(&path, &schema).unwrap();
        assert_eq!(data.n_units(), 2);
        assert_eq!(data.n_periods(), 3);
        assert_eq!(data.treatment()[[0, 1]], 1);
        assert_eq!(data.outcome().unwrap()[1], -3.5);
        assert_eq!(data.covariates()[[1, 2, 0]], 2.0);
    }

    #[test]
    fn missing_cell_is_unbalanced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        std::fs::write(
            &path,
            "unit,period,treatment\na,1,0\na,2,1\na,3,0\nb,1,1\nb,2,0\n",
        )
        .unwrap();
        let schema = CsvSchema { outcome_col: None, ..CsvSchema::default() };
        match load_panel_csv(&path, &schema) {
            Err(PanelError::UnbalancedPanel(msg)) => assert!(msg.contains("b")),
            other => panic!("expected UnbalancedPanel, got {other:?}"),
        }
    }

    #[test]
    fn treatment_two_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        std::fs::write(&path, "unit,period,treatment\na,1,0\na,2,2\n").unwrap();
        let schema = CsvSchema { outcome_col: None, ..CsvSchema::default() };
        assert!(matches!(
            load_panel_csv(&path, &schema),
            Err(PanelError::NonBinaryTreatment { .. })
        ));
    }

    #[test]
    fn varying_outcome_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        std::fs::write(
            &path,
            "unit,period,treatment,outcome\na,1,0,1.0\na,2,1,2.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_panel_csv(&path, &CsvSchema::default()),
            Err(PanelError::InconsistentOutcome { .. })
        ));
    }

    #[test]
    fn duplicate_cell_is_unbalanced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        std::fs::write(&path, "unit,period,treatment\na,1,0\na,1,1\n").unwrap();
        let schema = CsvSchema { outcome_col: None, ..CsvSchema::default() };
        assert!(matches!(
            load_panel_csv(&path, &schema),
            Err(PanelError::UnbalancedPanel(_))
        ));
    }

    #[test]
    fn validate_flags_degenerate_units() {
        let treatment = array![[1, 1, 1], [0, 1, 0], [0, 0, 0]];
        let data = PanelDataset::new(
            treatment,
            Array3::zeros((3, 3, 0)),
            vec![],
            None,
            vec!["u1".into(), "u2".into(), "u3".into()],
            vec![1, 2, 3],
        )
        .unwrap();
        let report = validate(&data);
        assert_eq!(report.all_treated_units, vec!["u1".to_string()]);
        assert_eq!(report.all_control_units, vec!["u3".to_string()]);
        assert_eq!(report.treated_periods, vec![3, 1, 0]);
        assert!(report.has_degenerate_units);
    }

    #[test]
    fn design_shapes_and_lag_columns() {
        let data = small_panel();
        let design = build_design(&data, &LagSpec::with_lags(1)).unwrap();
        assert_eq!(design.n_columns(), 3);
        assert_eq!(design.periods_modeled(), 3);
        assert_eq!(design.t_offset(), 1);
        assert_eq!(design.rows()[0], (0, 1));
        assert_eq!(design.rows()[5], (1, 3));
        // Unit a treated pattern (1,0,1,0): lag column at t=1..3 is (1,0,1).
        let lag_col = 2;
        assert_eq!(design.values()[[design.row_index(0, 1), lag_col]], 1.0);
        assert_eq!(design.values()[[design.row_index(0, 2), lag_col]], 0.0);
        assert_eq!(design.values()[[design.row_index(0, 3), lag_col]], 1.0);
        assert_eq!(design.column_names(), &["x1", "x2", "treat_lag1"]);
    }

    #[test]
    fn design_without_lags_keeps_all_periods() {
        let data = small_panel();
        let design = build_design(&data, &LagSpec::with_lags(0)).unwrap();
        assert_eq!(design.n_columns(), 2);
        assert_eq!(design.periods_modeled(), 4);
    }

    #[test]
    fn design_with_initial_condition_keeps_first_period() {
        let data = small_panel();
        let spec = LagSpec { initial_treatment: Some(0), ..LagSpec::with_lags(1) };
        let design = build_design(&data, &spec).unwrap();
        assert_eq!(design.t_offset(), 0);
        assert_eq!(design.periods_modeled(), 4);
        // First period's lag is the initial condition.
        assert_eq!(design.values()[[design.row_index(0, 0), 2]], 0.0);
        assert_eq!(design.values()[[design.row_index(0, 1), 2]], 1.0);
    }

    #[test]
    fn too_many_lags_is_an_error() {
        let data = small_panel();
        assert!(matches!(
            build_design(&data, &LagSpec::with_lags(4)),
            Err(PanelError::LagTooLong { .. })
        ));
        let deep_covariates = LagSpec { covariate_lags: 4, ..LagSpec::with_lags(0) };
        assert!(matches!(
            build_design(&data, &deep_covariates),
            Err(PanelError::LagTooLong { .. })
        ));
    }

    #[test]
    fn covariate_lags_append_shifted_columns() {
        let data = small_panel();
        let spec = LagSpec { covariate_lags: 1, ..LagSpec::with_lags(1) };
        let design = build_design(&data, &spec).unwrap();
        assert_eq!(
            design.column_names(),
            &["x1", "x2", "x1_lag1", "x2_lag1", "treat_lag1"]
        );
        assert_eq!(design.t_offset(), 1);
        // The lagged covariate column equals the contemporaneous value one
        // period earlier.
        for t in 1..4 {
            assert_eq!(
                design.values()[[design.row_index(1, t), 2]],
                data.covariates()[[1, t - 1, 0]]
            );
        }
        // Covariate lags deeper than the treatment lag push the offset.
        let spec = LagSpec { covariate_lags: 2, ..LagSpec::with_lags(1) };
        assert_eq!(build_design(&data, &spec).unwrap().t_offset(), 2);
    }

    #[test]
    fn design_is_deterministic() {
        let data = small_panel();
        let a = build_design(&data, &LagSpec::with_lags(2)).unwrap();
        let b = build_design(&data, &LagSpec::with_lags(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let treatment = array![[1, 0, 1], [0, 0, 1]];
        let mut covariates = Array3::<f64>::zeros((2, 3, 2));
        // Values chosen to exercise shortest-representation printing.
        let gnarly = [0.1 + 0.2, 1e-17, -0.0, 2.5e300, -1.0 / 3.0, 42.0];
        for (k, v) in gnarly.iter().enumerate() {
            covariates[[k / 3, k % 3, 0]] = *v;
            covariates[[k / 3, k % 3, 1]] = v * 7.0;
        }
        let data = PanelDataset::new(
            treatment,
            covariates,
            vec!["x1".into(), "x2".into()],
            Some(array![0.1 + 0.7, -3.25]),
            vec!["u-1".into(), "u-2".into()],
            vec![10, 20, 30],
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.csv");
        let schema = CsvSchema {
            covariate_cols: vec!["x1".into(), "x2".into()],
            ..CsvSchema::default()
        };
        write_panel_csv(&data, &path, &schema).unwrap();
        let reloaded = load_panel_csv(&path, &schema).unwrap();
        assert_eq!(data, reloaded);
    }
}
