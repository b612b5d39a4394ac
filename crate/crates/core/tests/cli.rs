//! Integration tests for the `iptw-fe` binary: exit codes, artifact files,
//! and byte-level reproducibility of the simulate command.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_iptw-fe")
}

fn bundled_panel() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/example_panel.csv")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

#[test]
fn fit_writes_all_artifacts_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let panel = bundled_panel();
    let output = run(&[
        "fit",
        "--panel",
        panel.to_str().unwrap(),
        "--covariates",
        "x1,x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    for artifact in ["ps_fit.json", "weights.csv", "msm_fit.json", "summary.txt"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    let text = stdout(&output);
    assert!(text.contains("intercept"));
    assert!(text.contains("final_period"));
    assert!(text.contains("cumulative"));
}

#[test]
fn staged_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("staged");
    let panel = bundled_panel();
    let panel = panel.to_str().unwrap();

    let output = run(&[
        "fit-ps",
        "--panel",
        panel,
        "--covariates",
        "x1,x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let ps_fit = out.join("ps_fit.json");
    let output = run(&[
        "weights",
        "--panel",
        panel,
        "--covariates",
        "x1,x2",
        "--ps-fit",
        ps_fit.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));

    let weights = out.join("weights.csv");
    let output = run(&[
        "fit-msm",
        "--panel",
        panel,
        "--covariates",
        "x1,x2",
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out.join("msm_fit.json").exists());
}

#[test]
fn trimming_strategies_change_the_included_count() {
    // A panel with degenerate units: short, high heterogeneity.
    let dir = tempfile::tempdir().unwrap();
    let panel_path = dir.path().join("degenerate.csv");
    {
        use iptw_fe::panel::{write_panel_csv, CsvSchema};
        use iptw_fe::sim::{generate_panel, SimConfig};
        let config = SimConfig {
            units: 120,
            unit_period_ratio: 20.0, // 6 periods
            heterogeneity: 2.0,
            n_covariates: 2,
            replications: 1,
            master_seed: 4,
            ..SimConfig::default()
        };
        let (data, _) = generate_panel(&config, 0).unwrap();
        let schema = CsvSchema {
            covariate_cols: vec!["x1".into(), "x2".into()],
            ..CsvSchema::default()
        };
        write_panel_csv(&data, &panel_path, &schema).unwrap();
    }

    let run_trim = |label: &str, extra: &[&str], out: &Path| -> String {
        let mut args = vec![
            "fit",
            "--panel",
            panel_path.to_str().unwrap(),
            "--covariates",
            "x1,x2",
            "--k",
            "2",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let output = run(&args);
        assert!(
            output.status.success(),
            "{label}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        stdout(&output)
    };

    let drop_out = dir.path().join("drop");
    let impute_out = dir.path().join("impute");
    let dropped = run_trim("drop", &["--trim", "drop"], &drop_out);
    let imputed = run_trim("impute", &["--trim", "impute", "--eps", "0.01"], &impute_out);

    let included = |text: &str| -> usize {
        text.lines()
            .find(|l| l.starts_with("included units:"))
            .and_then(|l| l.split(':').nth(1))
            .and_then(|v| v.trim().parse().ok())
            .expect("summary line")
    };
    let n_drop = included(&dropped);
    let n_impute = included(&imputed);
    assert!(n_impute > n_drop, "impute {n_impute} should exceed drop {n_drop}");
    assert_eq!(n_impute, 120);
}

#[test]
fn missing_required_flag_exits_with_usage_code() {
    let output = run(&["fit"]);
    assert_eq!(output.status.code(), Some(2));
    let output = run(&["weights", "--panel", "nope.csv"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_with_usage_code() {
    let output = run(&["frobnicate"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let run_sim = |out: &Path, threads: &str| {
        let output = run(&[
            "simulate",
            "--n",
            "200",
            "--rho",
            "50",
            "--reps",
            "2",
            "--seed",
            "7",
            "--threads",
            threads,
            "--svg",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    run_sim(&a, "1");
    run_sim(&b, "1");
    run_sim(&c, "8");
    for file in ["results.csv", "results.json", "figure.svg"] {
        let bytes_a = std::fs::read(a.join(file)).unwrap();
        let bytes_b = std::fs::read(b.join(file)).unwrap();
        let bytes_c = std::fs::read(c.join(file)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{file} differs across runs");
        assert_eq!(bytes_a, bytes_c, "{file} differs across thread counts");
    }
}

#[test]
fn simulate_reports_only_requested_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("subset");
    let output = run(&[
        "simulate",
        "--n",
        "200",
        "--rho",
        "50",
        "--reps",
        "2",
        "--seed",
        "11",
        "--estimators",
        "IPTW-FE,IPTW-T",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.contains("IPTW-FE,"));
    assert!(csv.contains("IPTW-T,"));
    assert!(!csv.contains("\nIPTW,") && !csv.contains(",IPTW,"), "IPTW should be absent");
}

#[test]
fn simulate_rejects_bad_config_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let output = run(&[
        "simulate",
        "--n",
        "100",
        "--rho",
        "100",
        "--reps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn simulate_accepts_a_config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("study.json");
    std::fs::write(
        &config_path,
        r#"{"n": 200, "rho": 50, "a": 1.0, "p": 2, "reps": 5, "master_seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("from_config");
    let output = run(&[
        "simulate",
        "--config",
        config_path.to_str().unwrap(),
        "--reps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    // The override wins over the file.
    assert!(csv.lines().skip(1).all(|l| l.is_empty() || l.contains(",2,")));
}

#[test]
fn report_merges_results_and_rejects_mixed_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let sim_a = dir.path().join("cell_a");
    let sim_b = dir.path().join("cell_b");
    for (out, a) in [(&sim_a, "1.0"), (&sim_b, "2.0")] {
        let output = run(&[
            "simulate",
            "--n",
            "200",
            "--rho",
            "50",
            "--a",
            a,
            "--reps",
            "2",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success());
    }

    let out = dir.path().join("report");
    let output = run(&[
        "report",
        sim_a.join("results.csv").to_str().unwrap(),
        sim_b.join("results.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out.join("combined.csv").exists());
    let svg = std::fs::read_to_string(out.join("figure.svg")).unwrap();
    // Two heterogeneity levels give two panel columns per estimand.
    assert!(svg.contains("a=1 p=2"));
    assert!(svg.contains("a=2 p=2"));

    // A file with a different header is rejected as a usage error.
    let alien = dir.path().join("alien.csv");
    std::fs::write(&alien, "foo,bar\n1,2\n").unwrap();
    let output = run(&[
        "report",
        alien.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn single_report_input_passes_through() {
    let dir = tempfile::tempdir().unwrap();
    let sim_out = dir.path().join("cell");
    let output = run(&[
        "simulate",
        "--n",
        "200",
        "--rho",
        "50",
        "--reps",
        "2",
        "--seed",
        "9",
        "--out",
        sim_out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let out = dir.path().join("report");
    let output = run(&[
        "report",
        sim_out.join("results.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let combined = std::fs::read_to_string(out.join("combined.csv")).unwrap();
    let original = std::fs::read_to_string(sim_out.join("results.csv")).unwrap();
    assert_eq!(combined, original);
}

#[test]
fn probit_link_works_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probit");
    let panel = bundled_panel();
    let output = run(&[
        "fit",
        "--panel",
        panel.to_str().unwrap(),
        "--covariates",
        "x1,x2",
        "--link",
        "probit",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let ps_fit = std::fs::read_to_string(out.join("ps_fit.json")).unwrap();
    assert!(ps_fit.contains("\"probit\""));
}

#[test]
fn weights_command_rejects_mismatched_unit_ids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w");
    let panel = bundled_panel();

    let output = run(&[
        "fit-ps",
        "--panel",
        panel.to_str().unwrap(),
        "--covariates",
        "x1,x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());

    // A different panel whose unit labels do not match the stored fit.
    let other_panel = dir.path().join("other.csv");
    {
        use iptw_fe::panel::{load_panel_csv, write_panel_csv, CsvSchema};
        let schema = CsvSchema {
            covariate_cols: vec!["x1".into(), "x2".into()],
            ..CsvSchema::default()
        };
        let data = load_panel_csv(&bundled_panel(), &schema).unwrap();
        let relabeled = iptw_fe::panel::PanelDataset::new(
            data.treatment().clone(),
            data.covariates().clone(),
            data.covariate_names().to_vec(),
            data.outcome().cloned(),
            (0..data.n_units()).map(|i| format!("z{i}")).collect(),
            data.period_ids().to_vec(),
        )
        .unwrap();
        write_panel_csv(&relabeled, &other_panel, &schema).unwrap();
    }
    let output = run(&[
        "weights",
        "--panel",
        other_panel.to_str().unwrap(),
        "--covariates",
        "x1,x2",
        "--ps-fit",
        out.join("ps_fit.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
}
