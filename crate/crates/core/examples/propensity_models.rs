//! The three treatment models side by side: fixed effects, pooled, and the
//! marginal numerator model, fit to the same generated panel.
//!
//! ```bash
//! cargo run --example propensity_models
//! ```

use iptw_fe::panel::build_design;
use iptw_fe::ps::{
    fit_fixed_effects_mle, fit_marginal_model, fit_pooled_mle, PsSpec,
};
use iptw_fe::sim::{generate_panel, SimConfig};

fn main() {
    let config = SimConfig {
        units: 300,
        unit_period_ratio: 5.0, // 60 periods
        heterogeneity: 1.5,
        n_covariates: 2,
        replications: 1,
        master_seed: 7,
        ..SimConfig::default()
    };
    let (data, truth) = generate_panel(&config, 0).expect("valid config");
    let design = build_design(&data, &config.estimation_lag_spec()).expect("design");
    let spec = PsSpec::default();

    let fe = fit_fixed_effects_mle(&design, data.treatment(), &spec).expect("fe fit");
    println!("fixed effects fit:");
    println!("  columns       {:?}", fe.column_names);
    println!("  coefficients  {:?}", fe.coefficients);
    println!(
        "  log-likelihood {:.2}, outer iterations {}, score norm {:.1e}",
        fe.log_likelihood, fe.outer_iterations, fe.score_norm
    );
    let n_degenerate = fe.identified.iter().filter(|&&b| !b).count();
    println!("  units without treatment variation: {n_degenerate}");

    // How well do the recovered unit effects track the generator's?
    let mut corr = (0.0, 0.0, 0.0);
    let pairs: Vec<(f64, f64)> = truth
        .unit_effects
        .iter()
        .zip(&fe.unit_effects)
        .filter(|(_, est)| est.is_finite())
        .map(|(&a, &b)| (a, b))
        .collect();
    let n = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    for (a, b) in &pairs {
        corr.0 += (a - ma) * (b - mb);
        corr.1 += (a - ma) * (a - ma);
        corr.2 += (b - mb) * (b - mb);
    }
    println!(
        "  corr(true effect, estimated effect) = {:.3}",
        corr.0 / (corr.1.sqrt() * corr.2.sqrt())
    );

    let pooled = fit_pooled_mle(&design, data.treatment(), &spec).expect("pooled fit");
    println!("\npooled fit (no unit effects):");
    println!("  coefficients  {:?}", pooled.coefficients);
    println!("  intercept     {:.4}", pooled.unit_effects[0]);
    println!("  log-likelihood {:.2}", pooled.log_likelihood);

    let marginal = fit_marginal_model(data.treatment(), 1, Some(0)).expect("marginal fit");
    println!("\nmarginal numerator model (treatment on its own lag):");
    println!("  lag coefficient {:.4}", marginal.coefficients[0]);
    println!("  intercept       {:.4}", marginal.unit_effects[0]);
}
