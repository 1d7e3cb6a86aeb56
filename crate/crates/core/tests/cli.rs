mod common;

use std::fs;

use common::*;

fn translation_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    write(dir, "translation.toml", &format!("resolution = 64\n{INTERVALS}\n{extra}"))
}

#[test]
fn translation_pipeline_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = translation_config(dir.path(), "");
    let (code, json) = run_cmd("pipeline", &cfg, dir.path());
    assert_eq!(code, 0);
    assert_eq!(json["exit_code"], 0);
    assert_eq!(json["report"]["verification"]["passes"], true);
    for f in ["flow.csv", "potential.csv", "u_init.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn step_cap_is_a_flow_failure() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[target_density]\nkind = \"affine\"\nbase = 1.0\nslope = [0.5]\n\n[flow]\nmax_steps = 1\n";
    let cfg = translation_config(dir.path(), extra);
    let (code, json) = run_cmd("steady", &cfg, dir.path());
    assert_eq!(code, 5);
    assert!(json["error"].as_str().unwrap().contains("MaxSteps"));
}

#[test]
fn verify_accepts_its_own_potential_and_rejects_other_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = translation_config(dir.path(), "");
    assert_eq!(run_cmd("steady", &cfg, dir.path()).0, 0);
    let potential = dir.path().join("potential.csv");

    let vdir = dir.path().join("verify");
    fs::create_dir_all(&vdir).unwrap();
    let extra = format!("[verify]\ninput = {:?}\n", potential.to_str().unwrap());
    let vcfg = write(&vdir, "verify.toml", &format!("resolution = 64\n{INTERVALS}\n{extra}"));
    let (code, json) = run_cmd("verify", &vcfg, &vdir);
    assert_eq!(code, 0);
    assert!(num(&json, "report.duality.identity") <= 1e-10);

    let wrong = write(&vdir, "wrong.toml", &format!("resolution = 32\n{INTERVALS}\n{extra}"));
    let (code, json) = run_cmd("verify", &wrong, &vdir);
    assert_eq!(code, 1);
    assert!(json["error"].is_string());
}

#[test]
fn poly_report_matches_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "poly.toml", &format!("{INTERVALS}\n[poly]\nn = 2\nsigma = 0.1\nc = 1.0\n"));
    let (code, json) = run_cmd("poly", &cfg, dir.path());
    assert_eq!(code, 0);
    let r = &json["report"];
    assert!((num(r, "s_hat") - 5.0).abs() < 1e-12);
    // s1, s2 = 5 ∓ √15
    let s1 = r["roots"][0].as_f64().unwrap();
    let s2 = r["roots"][1].as_f64().unwrap();
    assert!((s1 - (5.0 - 15f64.sqrt())).abs() < 1e-10);
    assert!((s2 - (5.0 + 15f64.sqrt())).abs() < 1e-10);
    assert_eq!(r["assumption"], false);
}

#[test]
fn mtw_quadratic_is_zero_and_reports_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mtw.toml", &format!("resolution = 9\nseed = 2\n{DISCS}"));
    let (code, json) = run_cmd("mtw", &cfg, dir.path());
    assert_eq!(code, 0);
    assert!(num(&json, "report.sigma.sigma") <= 1e-6);
    assert!(json["report"]["thresholds"]["blowup_bound"].is_null());
    let first = fs::read(dir.path().join("mtw.json")).unwrap();
    run_cmd("mtw", &cfg, dir.path());
    assert_eq!(first, fs::read(dir.path().join("mtw.json")).unwrap());
}

#[test]
fn mtw_power_cost_is_positive() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("resolution = 9\nseed = 2\n{DISCS}\n[cost]\nkind = \"power\"\np = 2.2\n");
    let cfg = write(dir.path(), "mtw.toml", &text);
    let (code, json) = run_cmd("mtw", &cfg, dir.path());
    assert_eq!(code, 0);
    let sigma = num(&json, "report.sigma.sigma");
    assert!(sigma > 0.0);
    let blowup = num(&json, "report.thresholds.blowup_bound");
    assert!((blowup - 0.5 / (2.0 * sigma)).abs() <= 1e-12 * blowup);
}

#[test]
fn bad_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("top.toml", format!("bogus = 3\n{INTERVALS}")),
        ("nested.toml", format!("{INTERVALS}bogus = 3\n")),
    ] {
        let cfg = write(dir.path(), name, &text);
        let o = parot(&["mtw", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{name}");
    }

    let o = parot(&["poly", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    // in 1D there is no σ_MTW; the report carries a note instead
    let cfg = write(dir.path(), "mtw1d.toml", INTERVALS);
    let (code, json) = run_cmd("mtw", &cfg, dir.path());
    assert_eq!(code, 0);
    assert!(json["report"]["note"].is_string());

    let neg = write(dir.path(), "neg.toml", &format!("{INTERVALS}\n[flow]\ndt_safety = -1.0\n"));
    let (code, _) = run_cmd("steady", &neg, dir.path());
    assert_eq!(code, 1);
}

#[test]
fn dotted_keys_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "dotted.toml",
        &format!("resolution = 16\nflow.dt_safety = 0.25\ncontinuation.steps = 4\n{INTERVALS}"),
    );
    let (code, json) = run_cmd("steady", &cfg, dir.path());
    assert_eq!(code, 0);
    assert_eq!(json["config"]["flow"]["dt_safety"], 0.25);
}
