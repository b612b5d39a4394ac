//! The `iptw-fe` command line: fit pipelines on panel CSVs, run simulation
//! studies, and render reports. The binary is a thin wrapper over [`run`];
//! all estimation lives in the library modules.
//!
//! Exit codes: 0 on success, 1 when estimation or IO fails at runtime, 2 for
//! usage and configuration errors.

use crate::link::Link;
use crate::msm::{
    fit_msm_wls, msm_from_weights, HistoryFeature, MsmFit, MsmSpec, VarianceFlavor,
};
use crate::panel::{build_design, load_panel_csv, validate, CsvSchema, LagSpec, PanelDataset};
use crate::ps::{
    fit_fixed_effects_mle, fit_marginal_model, PsFit, PsFitRecord, PsSpec,
};
use crate::report::{
    msm_fit_table, read_tidy_csv, render_figure, sim_summary_table, tidy_rows, write_tidy_csv,
    TidyRow,
};
use crate::sim::{run_study, Estimator, SimConfig};
use crate::weights::{apply_trimming, compute_weights, Trimming, WeightSet, WeightSpec};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Environment variable read for the default worker-thread count.
pub const THREADS_ENV: &str = "IPTW_FE_THREADS";

#[derive(Debug)]
enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// Estimation or IO failure: exit 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "iptw-fe",
    about = "Marginal structural models with fixed-effects propensity weighting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the treatment model with unit fixed effects and write ps_fit.json.
    FitPs(FitPsArgs),
    /// Build per-unit weights from a fitted treatment model.
    Weights(WeightsArgs),
    /// Fit the weighted outcome model from an existing weight file.
    FitMsm(FitMsmArgs),
    /// Run the full two-step pipeline: propensities, weights, outcome model.
    Fit(FitArgs),
    /// Run a seeded replication study comparing estimators.
    Simulate(SimulateArgs),
    /// Merge tidy results files into one table and figure.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct SchemaArgs {
    /// Panel CSV in long format, one row per unit and period.
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, default_value = "unit")]
    unit_col: String,
    #[arg(long, default_value = "period")]
    time_col: String,
    #[arg(long, default_value = "treatment")]
    treat_col: String,
    /// Outcome column; pass "none" for panels without outcomes.
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Comma-separated covariate column names.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    covariates: Vec<String>,
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            unit_col: self.unit_col.clone(),
            time_col: self.time_col.clone(),
            treat_col: self.treat_col.clone(),
            outcome_col: if self.outcome_col == "none" {
                None
            } else {
                Some(self.outcome_col.clone())
            },
            covariate_cols: self.covariates.clone(),
        }
    }

    fn load(&self) -> Result<PanelDataset, CliError> {
        load_panel_csv(&self.panel, &self.schema())
            .map_err(|e| CliError::Runtime(format!("loading {}: {e}", self.panel.display())))
    }
}

#[derive(Args, Clone)]
struct PsArgs {
    /// Link function: logit or probit.
    #[arg(long, default_value = "logit")]
    link: String,
    /// Treatment lags in the propensity design.
    #[arg(long, default_value_t = 1)]
    lags: usize,
    /// Lagged copies of each covariate column in the propensity design.
    #[arg(long, default_value_t = 0)]
    covariate_lags: usize,
    /// Bounds "a0,a1" on the unit effects during fitting.
    #[arg(long)]
    alpha_bounds: Option<String>,
}

impl PsArgs {
    fn spec(&self) -> Result<PsSpec, CliError> {
        let link: Link = self.link.parse().map_err(CliError::Usage)?;
        let unit_effect_bounds = match &self.alpha_bounds {
            Some(s) => Some(parse_pair(s).map_err(CliError::Usage)?),
            None => None,
        };
        Ok(PsSpec { link, unit_effect_bounds, ..PsSpec::default() })
    }

    fn lag_spec(&self) -> LagSpec {
        LagSpec {
            treatment_lags: self.lags,
            covariate_lags: self.covariate_lags,
            covariate_indices: None,
            initial_treatment: None,
        }
    }
}

#[derive(Args, Clone)]
struct WeightFlags {
    /// Lags in the weight window (the product covers k + 1 periods).
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Stabilize with a marginal treatment model numerator.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    stabilized: bool,
    /// Lags in the marginal numerator model.
    #[arg(long, default_value_t = 1)]
    numerator_lags: usize,
    /// Strategy for units without treatment variation:
    /// none, drop, impute, clamp, or truncate.
    #[arg(long, default_value = "drop")]
    trim: String,
    /// Propensity imputed for all-control units under --trim impute.
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Bounds "a0,a1" assigned under --trim clamp.
    #[arg(long)]
    clamp_bounds: Option<String>,
    /// Upper quantile for --trim truncate.
    #[arg(long, default_value_t = 0.99)]
    quantile: f64,
}

impl WeightFlags {
    fn spec(&self) -> Result<WeightSpec, CliError> {
        let trimming = match self.trim.as_str() {
            "none" => Trimming::None,
            "drop" | "drop_units" => Trimming::DropUnits,
            "impute" | "impute_ps" => Trimming::ImputePs { epsilon: self.eps },
            "clamp" | "clamp_alpha" => {
                let (lower, upper) = parse_pair(
                    self.clamp_bounds
                        .as_deref()
                        .ok_or_else(|| CliError::Usage("--trim clamp needs --clamp-bounds a0,a1".into()))?,
                )
                .map_err(CliError::Usage)?;
                Trimming::ClampAlpha { lower, upper }
            }
            "truncate" => Trimming::Truncate { quantile: self.quantile },
            other => {
                return Err(CliError::Usage(format!(
                    "unknown --trim '{other}', expected none|drop|impute|clamp|truncate"
                )))
            }
        };
        let spec = WeightSpec { k: self.k, stabilized: self.stabilized, trimming };
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Args, Clone)]
struct MsmFlags {
    /// Confidence level for the reported intervals.
    #[arg(long, default_value_t = 0.90)]
    level: f64,
    /// Covariance flavor: hc2 or sandwich.
    #[arg(long, default_value = "hc2")]
    variance: String,
    /// Drop the intercept from the outcome model.
    #[arg(long, default_value_t = false)]
    no_intercept: bool,
    /// Largest lag in the cumulative feature (lags 1..=this).
    #[arg(long, default_value_t = 3)]
    cumulative_lags: usize,
}

impl MsmFlags {
    fn spec(&self) -> Result<MsmSpec, CliError> {
        let variance: VarianceFlavor = self.variance.parse().map_err(CliError::Usage)?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::Usage("--level must lie in (0, 1)".into()));
        }
        let mut features = vec![HistoryFeature::final_period()];
        if self.cumulative_lags > 0 {
            features.push(HistoryFeature::trailing_sum(1, self.cumulative_lags));
        }
        Ok(MsmSpec {
            features,
            include_intercept: !self.no_intercept,
            confidence_level: self.level,
            variance,
        })
    }
}

#[derive(Args)]
struct FitPsArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    ps: PsArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    /// ps_fit.json from `fit-ps`.
    #[arg(long)]
    ps_fit: PathBuf,
    #[command(flatten)]
    ps: PsArgs,
    #[command(flatten)]
    weights: WeightFlags,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FitMsmArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    /// weights.csv from `weights` or `fit`.
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    msm: MsmFlags,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    ps: PsArgs,
    #[command(flatten)]
    weights: WeightFlags,
    #[command(flatten)]
    msm: MsmFlags,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON config file with flat keys (n, rho, a, p, reps, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    tau_f: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    sigma_offdiag: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed for the replication streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of IPTW-FE, IPTW-T, IPTW.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    estimators: Vec<String>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// Trimming for IPTW-FE: none, drop, or impute.
    #[arg(long)]
    trim: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    #[arg(long)]
    stabilized: Option<bool>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Worker threads (defaults to the IPTW_FE_THREADS variable, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Also write figure.svg.
    #[arg(long, default_value_t = false)]
    svg: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Tidy results CSVs produced by `simulate`.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::FitPs(args) => cmd_fit_ps(args),
        Command::Weights(args) => cmd_weights(args),
        Command::FitMsm(args) => cmd_fit_msm(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    write_file(path, &format!("{json}\n"))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected 'low,high', got '{s}'"));
    }
    let low: f64 = parts[0].trim().parse().map_err(|_| format!("bad number '{}'", parts[0]))?;
    let high: f64 = parts[1].trim().parse().map_err(|_| format!("bad number '{}'", parts[1]))?;
    Ok((low, high))
}

fn fit_ps_step(
    data: &PanelDataset,
    ps: &PsArgs,
) -> Result<(crate::panel::DesignMatrix, PsFit), CliError> {
    let design = build_design(data, &ps.lag_spec())
        .map_err(|e| CliError::Runtime(format!("design stage: {e}")))?;
    let spec = ps.spec()?;
    let fit = fit_fixed_effects_mle(&design, data.treatment(), &spec)
        .map_err(|e| CliError::Runtime(format!("propensity stage: {e}")))?;
    Ok((design, fit))
}

fn weights_step(
    data: &PanelDataset,
    design: &crate::panel::DesignMatrix,
    fit: &PsFit,
    flags: &WeightFlags,
    lag_spec: &LagSpec,
) -> Result<WeightSet, CliError> {
    let spec = flags.spec()?;
    let trimmed = apply_trimming(fit, design, data.treatment(), &spec)
        .map_err(|e| CliError::Runtime(format!("trimming stage: {e}")))?;
    let numerator = if spec.stabilized {
        Some(
            fit_marginal_model(
                data.treatment(),
                flags.numerator_lags,
                lag_spec.initial_treatment,
            )
            .map_err(|e| CliError::Runtime(format!("numerator stage: {e}")))?,
        )
    } else {
        None
    };
    compute_weights(
        &trimmed.probs,
        numerator.as_ref().map(|f| &f.fitted),
        data.treatment(),
        &spec,
        Some(&trimmed.included),
    )
    .map_err(|e| CliError::Runtime(format!("weighting stage: {e}")))
}

fn cmd_fit_ps(args: FitPsArgs) -> Result<(), CliError> {
    ensure_out(&args.out)?;
    let data = args.schema.load()?;
    let report = validate(&data);
    let (_, fit) = fit_ps_step(&data, &args.ps)?;
    let record = PsFitRecord::from_fit(&fit, Some(data.unit_ids().to_vec()));
    write_json(&args.out.join("ps_fit.json"), &record)?;
    write_json(&args.out.join("panel_validation.json"), &report)?;
    println!(
        "fitted {} on {} units x {} periods: log-likelihood {:.4}, score norm {:.2e}, {} non-identified units",
        match fit.link {
            Link::Logit => "logit",
            Link::Probit => "probit",
        },
        data.n_units(),
        data.n_periods(),
        fit.log_likelihood,
        fit.score_norm,
        fit.identified.iter().filter(|&&b| !b).count()
    );
    println!("wrote {}", args.out.join("ps_fit.json").display());
    Ok(())
}

fn cmd_weights(args: WeightsArgs) -> Result<(), CliError> {
    ensure_out(&args.out)?;
    let data = args.schema.load()?;
    let text = std::fs::read_to_string(&args.ps_fit)
        .map_err(|e| CliError::Runtime(format!("reading {}: {e}", args.ps_fit.display())))?;
    let record: PsFitRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{} is not a ps fit: {e}", args.ps_fit.display())))?;
    if let Some(ids) = &record.unit_ids {
        if ids != data.unit_ids() {
            return Err(CliError::Usage(
                "unit ids in the ps fit do not match the panel".into(),
            ));
        }
    }
    let lag_spec = args.ps.lag_spec();
    let design = build_design(&data, &lag_spec)
        .map_err(|e| CliError::Runtime(format!("design stage: {e}")))?;
    let fit = record
        .into_fit(&design)
        .map_err(|e| CliError::Runtime(format!("restoring fit: {e}")))?;
    let weights = weights_step(&data, &design, &fit, &args.weights, &lag_spec)?;
    let path = args.out.join("weights.csv");
    weights
        .write_csv(&path, data.unit_ids())
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    println!(
        "weights over the last {} periods: ess {:.1} of {} included",
        weights.k + 1,
        weights.diagnostics.effective_sample_size,
        weights.n_included()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_fit_msm(args: FitMsmArgs) -> Result<(), CliError> {
    ensure_out(&args.out)?;
    let data = args.schema.load()?;
    let (ids, weights) = WeightSet::read_csv(&args.weights)
        .map_err(|e| CliError::Runtime(format!("reading {}: {e}", args.weights.display())))?;
    if ids != data.unit_ids() {
        return Err(CliError::Usage("unit ids in the weight file do not match the panel".into()));
    }
    let spec = args.msm.spec()?;
    let fit = fit_msm_wls(&data, &weights, &spec)
        .map_err(|e| CliError::Runtime(format!("estimation stage: {e}")))?;
    finish_msm(&args.out, &fit)
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    ensure_out(&args.out)?;
    let data = args.schema.load()?;
    let (design, ps_fit) = fit_ps_step(&data, &args.ps)?;
    let record = PsFitRecord::from_fit(&ps_fit, Some(data.unit_ids().to_vec()));
    write_json(&args.out.join("ps_fit.json"), &record)?;

    let lag_spec = args.ps.lag_spec();
    let weights = weights_step(&data, &design, &ps_fit, &args.weights, &lag_spec)?;
    let wpath = args.out.join("weights.csv");
    weights
        .write_csv(&wpath, data.unit_ids())
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", wpath.display())))?;

    let spec = args.msm.spec()?;
    let fit = msm_from_weights(&data, Some(&ps_fit), &weights, &spec)
        .map_err(|e| CliError::Runtime(format!("estimation stage: {e}")))?;
    finish_msm(&args.out, &fit)
}

fn finish_msm(out: &Path, fit: &MsmFit) -> Result<(), CliError> {
    write_json(&out.join("msm_fit.json"), fit)?;
    let table = msm_fit_table(fit);
    write_file(&out.join("summary.txt"), &table)?;
    print!("{table}");
    println!("wrote {}", out.join("msm_fit.json").display());
    Ok(())
}

fn thread_count(requested: Option<usize>) -> Option<usize> {
    requested.or_else(|| {
        std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok())
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    ensure_out(&args.out)?;
    let mut config: SimConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    if let Some(n) = args.n {
        config.units = n;
    }
    if let Some(rho) = args.rho {
        config.unit_period_ratio = rho;
    }
    if let Some(a) = args.a {
        config.heterogeneity = a;
    }
    if let Some(p) = args.p {
        config.n_covariates = p;
    }
    if let Some(phi) = args.phi {
        config.treatment_persistence = phi;
    }
    if let Some(tau_f) = args.tau_f {
        config.effect_final = tau_f;
    }
    if let Some(tau_c) = args.tau_c {
        config.effect_cumulative = tau_c;
    }
    if let Some(s) = args.sigma_offdiag {
        config.covariate_correlation = s;
    }
    if let Some(reps) = args.reps {
        config.replications = reps;
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if !args.estimators.is_empty() {
        config.estimators = args
            .estimators
            .iter()
            .map(|s| s.parse::<Estimator>())
            .collect::<Result<_, _>>()
            .map_err(CliError::Usage)?;
    }
    if let Some(level) = args.ci_level {
        config.ci_level = level;
    }
    if let Some(trim) = &args.trim {
        config.trimming = match trim.as_str() {
            "none" => Trimming::None,
            "drop" | "drop_units" => Trimming::DropUnits,
            "impute" | "impute_ps" => Trimming::ImputePs { epsilon: args.eps },
            other => {
                return Err(CliError::Usage(format!(
                    "unknown --trim '{other}' for simulate, expected none|drop|impute"
                )))
            }
        };
    }
    if let Some(stabilized) = args.stabilized {
        config.stabilized = stabilized;
    }
    if let Some(burn_in) = args.burn_in {
        config.burn_in = burn_in;
    }

    let run = || run_study(&config);
    let result = match thread_count(args.threads) {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(run),
        None => run(),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;

    let rows = tidy_rows(&result);
    write_tidy_csv(&rows, &args.out.join("results.csv"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_json(&args.out.join("results.json"), &result)?;
    if args.svg {
        write_file(&args.out.join("figure.svg"), &render_figure(&rows))?;
    }
    print!("{}", sim_summary_table(&result.summaries));
    println!(
        "n={} T={} reps={} seed={}",
        result.config.units, result.n_periods, result.config.replications, result.config.master_seed
    );
    println!("wrote {}", args.out.join("results.csv").display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    ensure_out(&args.out)?;
    let mut all_rows: Vec<TidyRow> = Vec::new();
    for path in &args.results {
        let rows = read_tidy_csv(path).map_err(|e| match e {
            crate::report::ReportError::SchemaMismatch { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        })?;
        all_rows.extend(rows);
    }
    write_tidy_csv(&all_rows, &args.out.join("combined.csv"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&args.out.join("figure.svg"), &render_figure(&all_rows))?;

    // Compact text view: one line per estimator, estimand, and cell.
    let mut summary_rows: Vec<&TidyRow> =
        all_rows.iter().filter(|r| r.metric == "bias" || r.metric == "coverage").collect();
    summary_rows.sort_by(|x, y| {
        (x.n, x.estimator.clone(), x.estimand.clone(), x.metric.clone())
            .partial_cmp(&(y.n, y.estimator.clone(), y.estimand.clone(), y.metric.clone()))
            .unwrap()
    });
    println!(
        "{:<6} {:<6} {:<6} {:<8} {:<13} {:<14} {:>10}",
        "n", "rho", "a", "est", "estimand", "metric", "value"
    );
    for r in summary_rows {
        println!(
            "{:<6} {:<6} {:<6} {:<8} {:<13} {:<14} {:>10.4}",
            r.n, r.rho, r.a, r.estimator, r.estimand, r.metric, r.value
        );
    }
    println!("wrote {}", args.out.join("figure.svg").display());
    Ok(())
}
