//! Writes the bundled example panel (`data/example_panel.csv`). The file in
//! the repository was produced by exactly this program; rerun it to
//! regenerate the identical bytes.
//!
//! ```bash
//! cargo run --example generate_example_data -- data/example_panel.csv
//! ```

use iptw_fe::panel::{write_panel_csv, CsvSchema};
use iptw_fe::sim::{generate_panel, SimConfig};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data/example_panel.csv".to_string());
    let config = SimConfig {
        units: 60,
        unit_period_ratio: 5.0, // 12 periods
        heterogeneity: 1.0,
        n_covariates: 2,
        replications: 1,
        master_seed: 20_240_811,
        ..SimConfig::default()
    };
    let (data, _) = generate_panel(&config, 0).expect("valid config");
    let schema = CsvSchema {
        covariate_cols: vec!["x1".into(), "x2".into()],
        ..CsvSchema::default()
    };
    write_panel_csv(&data, std::path::Path::new(&path), &schema).expect("write");
    println!(
        "wrote {} ({} units x {} periods, seed {})",
        path,
        data.n_units(),
        data.n_periods(),
        config.master_seed
    );
}
