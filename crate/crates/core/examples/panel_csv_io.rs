//! Long-format CSV round trip: write a generated panel, reload it with a
//! schema mapping, validate it, and build the lagged design matrix.
//!
//! ```bash
//! cargo run --example panel_csv_io
//! ```

use iptw_fe::panel::{
    build_design, load_panel_csv, validate, write_panel_csv, CsvSchema, LagSpec,
};
use iptw_fe::sim::{generate_panel, SimConfig};

fn main() {
    let config = SimConfig {
        units: 12,
        unit_period_ratio: 2.0, // 6 periods
        heterogeneity: 1.0,
        n_covariates: 2,
        replications: 1,
        master_seed: 8,
        ..SimConfig::default()
    };
    let (data, _) = generate_panel(&config, 0).expect("valid config");

    let schema = CsvSchema {
        covariate_cols: vec!["x1".into(), "x2".into()],
        ..CsvSchema::default()
    };
    let path = std::env::temp_dir().join("iptw_fe_example_panel.csv");
    write_panel_csv(&data, &path, &schema).expect("write");
    println!("wrote {}", path.display());

    let reloaded = load_panel_csv(&path, &schema).expect("reload");
    assert_eq!(data, reloaded);
    println!("reload matches the original bit for bit");

    let report = validate(&reloaded);
    println!(
        "validation: {} units x {} periods, {} all-treated, {} all-control",
        report.n_units,
        report.n_periods,
        report.all_treated_units.len(),
        report.all_control_units.len()
    );
    for c in &report.covariate_summaries {
        println!(
            "  {}: mean {:+.3}, sd {:.3}, range [{:+.3}, {:+.3}]",
            c.name, c.mean, c.std_dev, c.min, c.max
        );
    }

    let design = build_design(&reloaded, &LagSpec::with_lags(1)).expect("design");
    println!(
        "design: {} rows x {} columns ({:?}), first modeled period index {}",
        design.values().nrows(),
        design.n_columns(),
        design.column_names(),
        design.t_offset()
    );
}
