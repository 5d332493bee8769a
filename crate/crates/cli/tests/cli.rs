use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vgf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgf")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn simulate_writes_trace_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&vgf(&["simulate", "--model", "sv", "--steps", "1000", "--seed", "1", "--out", out]));
    let trace = dir.path().join("trace_sv_K1000_seed1.csv");
    assert_eq!(data_rows(&trace), 1000);
    let header = std::fs::read_to_string(&trace).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "k,x_1,x_2,y_1");
    let manifest = json(&dir.path().join("trace_sv_K1000_seed1.manifest.json"));
    assert_eq!(manifest["model"], "sv");
    assert_eq!(manifest["seeds"][0], 1);
    assert_eq!(manifest["theta"]["rho"], -0.8);
}

#[test]
fn manifest_is_a_valid_config_and_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&vgf(&["simulate", "--model", "bimodal", "--steps", "500", "--seed", "4", "--out", a.to_str().unwrap()]));
    let manifest = a.join("trace_bimodal_K500_seed4.manifest.json");
    let b = dir.path().join("b");
    ok(&vgf(&["simulate", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]));
    let name = "trace_bimodal_K500_seed4.csv";
    assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
}

#[test]
fn several_lengths_give_several_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&vgf(&["simulate", "--model", "sv", "--steps", "1000", "--steps", "1500", "--steps", "2000", "--out", out]));
    for k in [1000, 1500, 2000] {
        assert_eq!(data_rows(&dir.path().join(format!("trace_sv_K{k}_seed1.csv"))), k);
    }
}

#[test]
fn vwf_on_linear_model_matches_kalman() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&vgf(&["simulate", "--model", "lgssm", "--steps", "200", "--seed", "3", "--out", out]));
    let trace = dir.path().join("trace_lgssm_K200_seed3.csv");
    let t = trace.to_str().unwrap();
    for f in ["vwf", "kalman"] {
        ok(&vgf(&["filter", "--model", "lgssm", "--trace", t, "--filter", f, "--out", out]));
    }
    let vwf = json(&dir.path().join("filter_vwf_lgssm_K200_seed3.json"));
    let kf = json(&dir.path().join("filter_kalman_lgssm_K200_seed3.json"));
    let diff = (vwf["loglik"].as_f64().unwrap() - kf["loglik"].as_f64().unwrap()).abs();
    assert!(diff < 1e-6, "{diff}");
    assert_eq!(vwf["converged_steps"], 200);
    let header = std::fs::read_to_string(dir.path().join("filter_vwf_lgssm_K200_seed3.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "k,m_1,P_11,loglik_increment,iters");
}

#[test]
fn mixture_filter_writes_component_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&vgf(&[
        "filter", "--model", "bimodal", "--steps", "100", "--seed", "2", "--filter", "vwf-mixture", "--components", "2",
        "--out", out,
    ]));
    let stem = "filter_vwf-mixture_bimodal_K100_seed2";
    assert_eq!(data_rows(&dir.path().join(format!("{stem}.csv"))), 200);
    for c in 1..=2 {
        assert_eq!(data_rows(&dir.path().join(format!("{stem}_c{c}.csv"))), 100);
    }
    assert!(dir.path().join(format!("{stem}_collapse.csv")).exists());
    let s = json(&dir.path().join(format!("{stem}.json")));
    assert_eq!(s["total_steps"], 100);
}

#[test]
fn particle_filter_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        ok(&vgf(&[
            "filter", "--model", "sv", "--steps", "300", "--filter", "pf", "--particles", "500", "--seed", "7", "--out",
            out.to_str().unwrap(),
        ]));
        std::fs::read(out.join("filter_pf_sv_K300_seed7.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn sweep_writes_one_normalized_curve_per_kind_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": "sv", "steps": [200, 300], "seeds": [5],
            "sweep": {"parameter": "rho", "start": -0.89, "stop": -0.51, "step": 0.04, "kinds": ["vwf", "ekf"]}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&vgf(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let mut files = 0;
    for k in [200, 300] {
        for kind in ["vwf", "ekf"] {
            let text = std::fs::read_to_string(out.join(format!("sweep_{kind}_sv_K{k}_seed5.csv"))).unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next().unwrap(), "rho,loglik,normalized");
            let norm: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
            assert_eq!(norm.len(), 10);
            assert_eq!(norm.iter().copied().fold(f64::MIN, f64::max), 1.0);
            files += 1;
        }
    }
    assert_eq!(files, 4);
    assert_eq!(json(&out.join("sweep_summary.json")).as_array().unwrap().len(), 4);
}

#[test]
fn single_estimate_has_no_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": "lgssm", "theta": {"a": 0.8, "q": 0.4}, "steps": [300], "seeds": [9],
            "estimate": {"theta_init": {"a": 0.5, "q": 1.0}}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&vgf(&["estimate", "--config", cfg.to_str().unwrap(), "--filter", "kalman", "--out", out.to_str().unwrap()]));
    let s = json(&out.join("summary_kalman.json"));
    assert_eq!(s["trials"], 1);
    assert_eq!(s["successes"], 1);
    assert!(s["parameters"]["a"]["std"].is_null());
    let trials = std::fs::read_to_string(out.join("trials_kalman.csv")).unwrap();
    assert_eq!(trials.lines().next().unwrap(), "trial,a,b,q,h,c,r,loglik,converged");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": "sv", "unknown_key": 1}"#).unwrap();
    assert_eq!(vgf(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(vgf(&["filter", "--model", "sv", "--quad-order", "0"]).status.code(), Some(2));
    assert_eq!(vgf(&["simulate"]).status.code(), Some(2));
    let missing = dir.path().join("missing.csv");
    assert_eq!(
        vgf(&["filter", "--model", "sv", "--trace", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace_bad.csv");
    // A huge observation makes every particle weight vanish.
    std::fs::write(&trace, "k,y_1\n1,1.0e300\n").unwrap();
    let out = dir.path().join("out");
    let o = vgf(&[
        "filter", "--model", "lgssm", "--filter", "pf", "--trace", trace.to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
