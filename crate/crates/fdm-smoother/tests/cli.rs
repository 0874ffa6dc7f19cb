//! End-to-end checks of the `fdms` binary: exit codes, file outputs,
//! and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use fdm_smoother::simulate::{NoiseSpec, Scenario};

fn fdms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdms"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_scenario(dir: &Path) -> std::path::PathBuf {
    let scenario = Scenario {
        seed: 11,
        noise: NoiseSpec::Smooth {
            sigma: fdm_smoother::simulate::default_sigmas(),
            amplitude: 1.0,
            period_s: 35.0,
        },
        ..Scenario::default()
    };
    let path = dir.join("scenario.toml");
    std::fs::write(&path, scenario.to_toml_string()).unwrap();
    path
}

#[test]
fn simulate_writes_tables_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out = dir.path().join("sim");
    let result = fdms(&[
        "simulate",
        scenario.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{result:?}");
    assert!(out.join("truth.csv").exists());
    assert!(out.join("measured.csv").exists());
    assert!(out.join("metadata.json").exists());
}

#[test]
fn simulate_missing_scenario_exits_2_naming_path() {
    let result = fdms(&["simulate", "/nonexistent/scenario.toml", "-o", "/tmp/x"]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(
        stderr.contains("/nonexistent/scenario.toml"),
        "stderr does not name the path: {stderr}"
    );
}

#[test]
fn simulate_same_seed_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let result = fdms(&[
            "simulate",
            scenario.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
        ]);
        assert!(result.status.success());
    }
    for name in ["truth.csv", "measured.csv", "metadata.json"] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn pipeline_with_single_limit_runs_exactly_two_smoothers() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out = dir.path().join("out");
    let result = fdms(&[
        "pipeline",
        scenario.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--limits",
        "0.1",
    ]);
    assert!(result.status.success(), "{result:?}");
    let runs: Vec<String> = std::fs::read_dir(out.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .collect();
    assert_eq!(runs.len(), 2, "runs: {runs:?}");
    assert!(runs.contains(&"iter1".to_string()));
    assert!(runs.contains(&"iter2-0.1".to_string()));
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("selected:"), "{stdout}");
}

#[test]
fn pipeline_reruns_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out1 = dir.path().join("o1");
    let out2 = dir.path().join("o2");
    for out in [&out1, &out2] {
        let result = fdms(&[
            "pipeline",
            scenario.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
            "--limits",
            "0.1",
        ]);
        assert!(result.status.success());
    }
    for name in [
        "sqm_summary.csv",
        "selection.json",
        "schedule.csv",
        "runs/iter1/smoothed.csv",
        "runs/iter2-0.1/smoothed.csv",
        "runs/iter2-0.1/innovations.csv",
        "diagnostics/dependence.json",
    ] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical pipeline runs");
    }
}

#[test]
fn stagewise_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path());
    let out = dir.path().join("stage");

    let smooth = fdms(&[
        "smooth",
        scenario.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(smooth.status.success(), "{smooth:?}");
    let run_dir = out.join("runs/iter1");

    let schedule = out.join("schedule.csv");
    let estimate = fdms(&[
        "estimate-noise",
        run_dir.to_str().unwrap(),
        "-o",
        schedule.to_str().unwrap(),
    ]);
    assert!(estimate.status.success(), "{estimate:?}");

    let resmooth = fdms(&[
        "resmooth",
        scenario.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--schedule",
        schedule.to_str().unwrap(),
        "--limit",
        "0.1",
    ]);
    assert!(resmooth.status.success(), "{resmooth:?}");

    let sqm = fdms(&["sqm", out.join("runs/iter2-0.1").to_str().unwrap()]);
    assert!(sqm.status.success(), "{sqm:?}");
    let report: serde_json::Value = serde_json::from_slice(&sqm.stdout).expect("sqm prints JSON");
    assert!(report["sqm"].as_f64().unwrap() > 0.0);

    let diag_out = out.join("diag");
    let diagnose = fdms(&[
        "diagnose",
        out.join("runs/iter2-0.1").to_str().unwrap(),
        "-o",
        diag_out.to_str().unwrap(),
    ]);
    assert!(diagnose.status.success(), "{diagnose:?}");
    assert!(diag_out.join("dependence.json").exists());
    assert!(diag_out.join("kde_v_gnd.csv").exists());
    assert!(diag_out.join("contour_theta__q.csv").exists());
}

#[test]
fn required_window_fails_on_cruise_data() {
    // A table that never descends through 1000 ft.
    let dir = tempfile::tempdir().unwrap();
    let n = 300;
    let mut lines = vec!["t,a_x,a_y,a_z,v_gnd,h_dot,chi_k,phi,theta,psi,x_n,y_n,h_baro,h_ralt,d_llz_ddm,d_gs_ddm,p,q,r,v_a,alpha_a,u_w,v_w".to_string()];
    for k in 0..n {
        let t = k as f64 * 0.125;
        lines.push(format!(
            "{t},0,0,-9.80665,200,0,1.4,0,0,1.4,-9000,0,10000,2000,0,0,0,0,0,200,0,0,0"
        ));
    }
    let path = dir.path().join("cruise.csv");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let result = fdms(&[
        "smooth",
        path.to_str().unwrap(),
        "-o",
        dir.path().join("out").to_str().unwrap(),
        "--window",
        "require",
    ]);
    assert_eq!(result.status.code(), Some(2), "{result:?}");
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("window"), "{stderr}");
}
