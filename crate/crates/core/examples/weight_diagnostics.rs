//! Weight construction and diagnostics: stabilization, the trimming
//! strategies for units without treatment variation, effective sample size,
//! and the balance table.
//!
//! ```bash
//! cargo run --example weight_diagnostics
//! ```

use iptw_fe::panel::build_design;
use iptw_fe::ps::{fit_fixed_effects_mle, fit_marginal_model, PsSpec};
use iptw_fe::sim::{generate_panel, SimConfig};
use iptw_fe::weights::{
    apply_trimming, balance_check, compute_weights, BaselineColumn, Trimming, WeightSpec,
};

fn main() {
    // Short panel with strong heterogeneity: some units never change
    // treatment, so every strategy has work to do.
    let config = SimConfig {
        units: 500,
        unit_period_ratio: 50.0, // 10 periods
        heterogeneity: 2.0,
        n_covariates: 2,
        replications: 1,
        master_seed: 31,
        ..SimConfig::default()
    };
    let (data, truth) = generate_panel(&config, 0).expect("valid config");
    let design = build_design(&data, &config.estimation_lag_spec()).expect("design");
    let fit = fit_fixed_effects_mle(&design, data.treatment(), &PsSpec::default()).expect("fit");
    let numerator = fit_marginal_model(data.treatment(), 1, Some(0)).expect("numerator");
    let n_degenerate = fit.identified.iter().filter(|&&b| !b).count();
    println!("{} of {} units have no treatment variation\n", n_degenerate, data.n_units());

    let strategies = [
        ("drop", Trimming::DropUnits),
        ("impute 0.01", Trimming::ImputePs { epsilon: 0.01 }),
        ("clamp alpha to [-2.5, 2.5]", Trimming::ClampAlpha { lower: -2.5, upper: 2.5 }),
        ("truncate at the 0.95 quantile", Trimming::Truncate { quantile: 0.95 }),
    ];
    println!(
        "{:<30} {:>9} {:>10} {:>10} {:>8}",
        "strategy", "included", "max w", "ess", "ess/n"
    );
    for (label, trimming) in strategies {
        let spec = WeightSpec { k: 3, stabilized: true, trimming };
        let trimmed = apply_trimming(&fit, &design, data.treatment(), &spec).expect("trimming");
        let weights = compute_weights(
            &trimmed.probs,
            Some(&numerator.fitted),
            data.treatment(),
            &spec,
            Some(&trimmed.included),
        )
        .expect("weights");
        let d = &weights.diagnostics;
        println!(
            "{label:<30} {:>9} {:>10.3} {:>10.1} {:>8.3}",
            weights.n_included(),
            d.max,
            d.effective_sample_size,
            d.effective_sample_size / data.n_units() as f64
        );
    }

    // Unstabilized weights for contrast.
    let spec = WeightSpec { k: 3, stabilized: false, trimming: Trimming::DropUnits };
    let trimmed = apply_trimming(&fit, &design, data.treatment(), &spec).expect("trimming");
    let raw = compute_weights(&trimmed.probs, None, data.treatment(), &spec, Some(&trimmed.included))
        .expect("weights");
    println!(
        "\nunstabilized for contrast: max weight {:.1} vs stabilized ess ratio above",
        raw.diagnostics.max
    );

    // Balance of the (unobserved) unit effect under the fitted weights.
    let spec = WeightSpec { k: 0, stabilized: false, trimming: Trimming::DropUnits };
    let trimmed = apply_trimming(&fit, &design, data.treatment(), &spec).expect("trimming");
    let final_weights =
        compute_weights(&trimmed.probs, None, data.treatment(), &spec, Some(&trimmed.included))
            .expect("weights");
    let d_final = data.final_treatment();
    let column = BaselineColumn {
        name: "unit_effect".into(),
        values: truth.unit_effects.clone(),
    };
    let balance = balance_check(&final_weights, &d_final, &[column]).expect("balance");
    println!(
        "weighted standardized mean difference of the unit effect: {:+.4}",
        balance[0].standardized_mean_difference
    );
    println!(
        "(treated mean {:+.3}, control mean {:+.3})",
        balance[0].treated_mean, balance[0].control_mean
    );
}
