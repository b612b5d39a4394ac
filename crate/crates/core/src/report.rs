//! Result files and displays: tidy CSV and JSON for study output, plain-text
//! summary tables, and an SVG small-multiples figure (metric rows by scenario
//! columns, one line per estimator, one marker shape per unit-to-period
//! ratio). Everything here is deterministic string building so identical
//! inputs produce identical bytes.

use crate::msm::MsmFit;
use crate::sim::{SimResult, SummaryRow};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: header does not match the tidy results schema")]
    SchemaMismatch { path: String },
    #[error("{0}")]
    Malformed(String),
}

/// Columns of the tidy results CSV, one row per estimator, estimand, and
/// metric.
pub const TIDY_HEADER: [&str; 11] = [
    "n",
    "rho",
    "a",
    "p",
    "reps",
    "ci_level",
    "master_seed",
    "estimator",
    "estimand",
    "metric",
    "value",
];

/// One tidy results row.
#[derive(Debug, Clone, PartialEq)]
pub struct TidyRow {
    pub n: usize,
    pub rho: f64,
    pub a: f64,
    pub p: usize,
    pub reps: usize,
    pub ci_level: f64,
    pub master_seed: u64,
    pub estimator: String,
    pub estimand: String,
    pub metric: String,
    pub value: f64,
}

/// Flatten a study result into tidy rows in a fixed order.
pub fn tidy_rows(result: &SimResult) -> Vec<TidyRow> {
    let c = &result.config;
    let mut rows = Vec::new();
    for summary in &result.summaries {
        let metrics: [(&str, f64); 6] = [
            ("bias", summary.bias),
            ("empirical_sd", summary.empirical_sd),
            ("mean_std_error", summary.mean_std_error),
            ("coverage", summary.coverage),
            ("n_used", summary.n_used as f64),
            ("n_failures", summary.n_failures as f64),
        ];
        for (metric, value) in metrics {
            rows.push(TidyRow {
                n: c.units,
                rho: c.unit_period_ratio,
                a: c.heterogeneity,
                p: c.n_covariates,
                reps: c.replications,
                ci_level: c.ci_level,
                master_seed: c.master_seed,
                estimator: summary.estimator.to_string(),
                estimand: summary.estimand.to_string(),
                metric: metric.to_string(),
                value,
            });
        }
    }
    rows
}

/// Write tidy rows as CSV. Values use shortest round-trip formatting.
pub fn write_tidy_csv(rows: &[TidyRow], path: &Path) -> Result<(), ReportError> {
    let mut out = String::new();
    out.push_str(&TIDY_HEADER.join(","));
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.rho,
            r.a,
            r.p,
            r.reps,
            r.ci_level,
            r.master_seed,
            r.estimator,
            r.estimand,
            r.metric,
            r.value
        )
        .expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a tidy results CSV, enforcing the exact schema.
pub fn read_tidy_csv(path: &Path) -> Result<Vec<TidyRow>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ReportError::Malformed(format!("{}: empty file", path.display())))?;
    if header != TIDY_HEADER.join(",") {
        return Err(ReportError::SchemaMismatch { path: path.display().to_string() });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != TIDY_HEADER.len() {
            return Err(ReportError::Malformed(format!(
                "{}: row {} has {} fields",
                path.display(),
                idx + 2,
                parts.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64, ReportError> {
            if s == "NaN" {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| {
                    ReportError::Malformed(format!("{}: bad number '{s}'", path.display()))
                })
            }
        };
        let parse_u = |s: &str| -> Result<usize, ReportError> {
            s.parse().map_err(|_| {
                ReportError::Malformed(format!("{}: bad integer '{s}'", path.display()))
            })
        };
        rows.push(TidyRow {
            n: parse_u(parts[0])?,
            rho: parse_f(parts[1])?,
            a: parse_f(parts[2])?,
            p: parse_u(parts[3])?,
            reps: parse_u(parts[4])?,
            ci_level: parse_f(parts[5])?,
            master_seed: parse_u(parts[6])? as u64,
            estimator: parts[7].to_string(),
            estimand: parts[8].to_string(),
            metric: parts[9].to_string(),
            value: parse_f(parts[10])?,
        });
    }
    Ok(rows)
}

/// Fixed-width summary table for a study.
pub fn sim_summary_table(summaries: &[SummaryRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<8} {:<13} {:>10} {:>10} {:>10} {:>9} {:>6} {:>6}",
        "est", "estimand", "bias", "emp_sd", "mean_se", "coverage", "used", "fail"
    )
    .unwrap();
    for s in summaries {
        writeln!(
            out,
            "{:<8} {:<13} {:>10.4} {:>10.4} {:>10.4} {:>9.3} {:>6} {:>6}",
            s.estimator.to_string(),
            s.estimand.to_string(),
            s.bias,
            s.empirical_sd,
            s.mean_std_error,
            s.coverage,
            s.n_used,
            s.n_failures
        )
        .unwrap();
    }
    out
}

/// Fixed-width term table for a fitted model.
pub fn msm_fit_table(fit: &MsmFit) -> String {
    let mut out = String::new();
    let pct = (fit.confidence_level * 100.0).round() as u32;
    writeln!(
        out,
        "{:<22} {:>12} {:>12} {:>12} {:>12}",
        "term",
        "estimate",
        "std_error",
        format!("ci{pct}_low"),
        format!("ci{pct}_high")
    )
    .unwrap();
    for t in &fit.terms {
        writeln!(
            out,
            "{:<22} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            t.name, t.estimate, t.std_error, t.ci_lower, t.ci_upper
        )
        .unwrap();
    }
    writeln!(out, "included units: {}", fit.n_effective).unwrap();
    if let Some(d) = &fit.weight_diagnostics {
        writeln!(
            out,
            "weights: min {:.4}  max {:.4}  mean {:.4}  ess {:.1}  dropped {}  imputed {}  truncated {}",
            d.min, d.max, d.mean, d.effective_sample_size, d.n_dropped, d.n_imputed, d.n_truncated
        )
        .unwrap();
    }
    out
}

// ---------------------------------------------------------------------------
// SVG small multiples
// ---------------------------------------------------------------------------

const PANEL_WIDTH: f64 = 220.0;
const PANEL_HEIGHT: f64 = 150.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_TOP: f64 = 40.0;
const GAP: f64 = 26.0;

fn estimator_color(name: &str) -> &'static str {
    match name {
        "IPTW-FE" => "#2166ac",
        "IPTW-T" => "#707070",
        "IPTW" => "#1b9e77",
        _ => "#c51b7d",
    }
}

fn estimator_dash(name: &str) -> &'static str {
    if name == "IPTW" {
        "5,4"
    } else {
        "none"
    }
}

/// Marker cycle by the panel's sorted ratio values: square, circle, triangle,
/// then diamond.
fn marker_svg(shape_index: usize, x: f64, y: f64, color: &str) -> String {
    match shape_index % 4 {
        0 => format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"7\" height=\"7\" fill=\"{color}\"/>",
            x - 3.5,
            y - 3.5
        ),
        1 => format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3.8\" fill=\"{color}\"/>"),
        2 => format!(
            "<path d=\"M {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} Z\" fill=\"{color}\"/>",
            x,
            y - 4.5,
            x - 4.0,
            y + 3.5,
            x + 4.0,
            y + 3.5
        ),
        _ => format!(
            "<path d=\"M {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} Z\" fill=\"{color}\"/>",
            x,
            y - 4.5,
            x + 4.5,
            y,
            x,
            y + 4.5,
            x - 4.5,
            y
        ),
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Render the small-multiples figure: one row per metric (bias, spread,
/// coverage), one column per scenario (heterogeneity, covariate count,
/// estimand), unit count on the x axis.
pub fn render_figure(rows: &[TidyRow]) -> String {
    let metrics: [(&str, &str); 3] =
        [("bias", "Bias"), ("empirical_sd", "Std. Error"), ("coverage", "Coverage")];

    // Scenario columns, sorted for a stable layout.
    let mut scenarios: Vec<(String, String, String)> = rows
        .iter()
        .map(|r| (fmt_key(r.a), fmt_key(r.p as f64), r.estimand.clone()))
        .collect();
    scenarios.sort();
    scenarios.dedup();

    let n_cols = scenarios.len().max(1);
    let width = MARGIN_LEFT + n_cols as f64 * (PANEL_WIDTH + GAP) + 40.0;
    let height = MARGIN_TOP + 3.0 * (PANEL_HEIGHT + GAP) + 70.0;
    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"Helvetica, Arial, sans-serif\">"
    )
    .unwrap();
    writeln!(svg, "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>").unwrap();

    for (row_idx, (metric, label)) in metrics.iter().enumerate() {
        for (col_idx, scenario) in scenarios.iter().enumerate() {
            let panel_rows: Vec<&TidyRow> = rows
                .iter()
                .filter(|r| {
                    r.metric == *metric
                        && fmt_key(r.a) == scenario.0
                        && fmt_key(r.p as f64) == scenario.1
                        && r.estimand == scenario.2
                        && r.value.is_finite()
                })
                .collect();
            svg.push_str(&render_panel(
                &panel_rows,
                row_idx,
                col_idx,
                label,
                scenario,
                *metric == "coverage",
                row_idx == 0,
                col_idx == 0,
            ));
        }
    }

    // Legend: estimators by line style, ratios by marker.
    let mut estimators: Vec<String> = rows.iter().map(|r| r.estimator.clone()).collect();
    estimators.sort();
    estimators.dedup();
    let mut ratios: Vec<String> = rows.iter().map(|r| fmt_key(r.rho)).collect();
    ratios.sort_by(|a, b| a.parse::<f64>().unwrap().partial_cmp(&b.parse::<f64>().unwrap()).unwrap());
    ratios.dedup();
    let legend_y = height - 30.0;
    let mut x = MARGIN_LEFT;
    for est in &estimators {
        let color = estimator_color(est);
        writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{legend_y:.1}\" x2=\"{:.1}\" y2=\"{legend_y:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\" stroke-dasharray=\"{}\"/>",
            x + 26.0,
            estimator_dash(est)
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{est}</text>",
            x + 31.0,
            legend_y + 4.0
        )
        .unwrap();
        x += 36.0 + 9.0 * est.len() as f64;
    }
    for (shape_idx, rho) in ratios.iter().enumerate() {
        svg.push_str(&marker_svg(shape_idx, x + 6.0, legend_y, "#333333"));
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">rho={rho}</text>",
            x + 14.0,
            legend_y + 4.0
        )
        .unwrap();
        x += 64.0 + 7.0 * rho.len() as f64;
    }

    svg.push_str("</svg>\n");
    svg
}

#[allow(clippy::too_many_arguments)]
fn render_panel(
    panel_rows: &[&TidyRow],
    row_idx: usize,
    col_idx: usize,
    metric_label: &str,
    scenario: &(String, String, String),
    is_coverage: bool,
    title_row: bool,
    label_col: bool,
) -> String {
    let x0 = MARGIN_LEFT + col_idx as f64 * (PANEL_WIDTH + GAP);
    let y0 = MARGIN_TOP + row_idx as f64 * (PANEL_HEIGHT + GAP);
    let mut svg = String::new();
    writeln!(
        svg,
        "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{PANEL_WIDTH}\" height=\"{PANEL_HEIGHT}\" \
         fill=\"#fafafa\" stroke=\"#cccccc\"/>"
    )
    .unwrap();
    if title_row {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">a={} p={} {}</text>",
            x0 + PANEL_WIDTH / 2.0,
            y0 - 8.0,
            scenario.0,
            scenario.1,
            scenario.2
        )
        .unwrap();
    }
    if label_col {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" \
             transform=\"rotate(-90 {:.1} {:.1})\">{metric_label}</text>",
            x0 - 46.0,
            y0 + PANEL_HEIGHT / 2.0,
            x0 - 46.0,
            y0 + PANEL_HEIGHT / 2.0
        )
        .unwrap();
    }
    if panel_rows.is_empty() {
        return svg;
    }

    let mut ns: Vec<usize> = panel_rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in panel_rows {
        y_min = y_min.min(r.value);
        y_max = y_max.max(r.value);
    }
    if is_coverage {
        y_min = y_min.min(0.8);
        y_max = y_max.max(1.0);
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.08 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let x_of = |n: usize| -> f64 {
        let idx = ns.iter().position(|&v| v == n).unwrap() as f64;
        let span = (ns.len().max(2) - 1) as f64;
        x0 + 18.0 + (PANEL_WIDTH - 36.0) * idx / span
    };
    let y_of = |v: f64| -> f64 { y0 + PANEL_HEIGHT - PANEL_HEIGHT * (v - y_min) / (y_max - y_min) };

    // Axis ticks: y extremes, x categories.
    for v in [y_min + pad, y_max - pad] {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"end\">{}</text>",
            x0 - 3.0,
            y_of(v) + 3.0,
            fmt_tick(v)
        )
        .unwrap();
    }
    for &n in &ns {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">{n}</text>",
            x_of(n),
            y0 + PANEL_HEIGHT + 12.0
        )
        .unwrap();
    }

    if is_coverage {
        let y = y_of(0.9);
        writeln!(
            svg,
            "<line x1=\"{x0:.1}\" y1=\"{y:.2}\" x2=\"{:.1}\" y2=\"{y:.2}\" stroke=\"#999999\" \
             stroke-dasharray=\"2,3\"/>",
            x0 + PANEL_WIDTH
        )
        .unwrap();
    } else if y_min < 0.0 && y_max > 0.0 {
        let y = y_of(0.0);
        writeln!(
            svg,
            "<line x1=\"{x0:.1}\" y1=\"{y:.2}\" x2=\"{:.1}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>",
            x0 + PANEL_WIDTH
        )
        .unwrap();
    }

    // Series: one line per estimator and ratio.
    let mut series_keys: Vec<(String, String)> = panel_rows
        .iter()
        .map(|r| (r.estimator.clone(), fmt_key(r.rho)))
        .collect();
    series_keys.sort();
    series_keys.dedup();
    let mut rho_values: Vec<String> = panel_rows.iter().map(|r| fmt_key(r.rho)).collect();
    rho_values
        .sort_by(|a, b| a.parse::<f64>().unwrap().partial_cmp(&b.parse::<f64>().unwrap()).unwrap());
    rho_values.dedup();

    for (estimator, rho) in &series_keys {
        let mut points: Vec<(usize, f64)> = panel_rows
            .iter()
            .filter(|r| r.estimator == *estimator && fmt_key(r.rho) == *rho)
            .map(|r| (r.n, r.value))
            .collect();
        points.sort_by_key(|(n, _)| *n);
        let color = estimator_color(estimator);
        let path: Vec<String> = points
            .iter()
            .map(|(n, v)| format!("{:.2},{:.2}", x_of(*n), y_of(*v)))
            .collect();
        if points.len() > 1 {
            writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" \
                 stroke-dasharray=\"{}\"/>",
                path.join(" "),
                estimator_dash(estimator)
            )
            .unwrap();
        }
        let shape_idx = rho_values.iter().position(|v| v == rho).unwrap();
        for (n, v) in &points {
            svg.push_str(&marker_svg(shape_idx, x_of(*n), y_of(*v), color));
            svg.push('\n');
        }
    }
    svg
}

fn fmt_key(v: f64) -> String {
    // Stable text key for grouping floats that came from config values.
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_study, SimConfig};

    fn tiny_result() -> SimResult {
        let config = SimConfig {
            units: 200,
            unit_period_ratio: 50.0,
            replications: 2,
            master_seed: 5,
            ..SimConfig::default()
        };
        run_study(&config).unwrap()
    }

    #[test]
    fn tidy_round_trip_preserves_rows() {
        let result = tiny_result();
        let rows = tidy_rows(&result);
        assert_eq!(rows.len(), result.summaries.len() * 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_tidy_csv(&rows, &path).unwrap();
        let back = read_tidy_csv(&path).unwrap();
        assert_eq!(rows.len(), back.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.estimator, b.estimator);
            assert_eq!(a.metric, b.metric);
            assert!(
                (a.value - b.value).abs() < 1e-15
                    || (a.value.is_nan() && b.value.is_nan())
            );
        }
    }

    #[test]
    fn schema_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "foo,bar\n1,2\n").unwrap();
        assert!(matches!(
            read_tidy_csv(&path),
            Err(ReportError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn figure_is_deterministic_and_well_formed() {
        let result = tiny_result();
        let rows = tidy_rows(&result);
        let svg_a = render_figure(&rows);
        let svg_b = render_figure(&rows);
        assert_eq!(svg_a, svg_b);
        assert!(svg_a.starts_with("<svg"));
        assert!(svg_a.ends_with("</svg>\n"));
        assert!(svg_a.contains("Coverage"));
        assert!(svg_a.contains("IPTW-FE"));
    }

    #[test]
    fn tables_render() {
        let result = tiny_result();
        let table = sim_summary_table(&result.summaries);
        assert!(table.contains("IPTW-FE"));
        assert!(table.contains("coverage"));
    }
}
