use std::path::Path;
use std::process::{Command, Output};

use psa_core::{Matrix, TensorFile};

fn psa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn psa")
}

fn gen_local(dir: &Path) {
    let out = psa(
        &[
            "gen",
            "--kind",
            "local",
            "--seq-len",
            "256",
            "--head-dim",
            "16",
            "--grid",
            "16,16",
            "--seed",
            "4",
            "--heads",
            "2",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const QKV: [&str; 6] = ["--q", "q.psat", "--k", "k.psat", "--v", "v.psat"];

fn run_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run"];
    v.extend_from_slice(&QKV);
    v.extend_from_slice(extra);
    v
}

fn without_time(json: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_ms");
    v
}

#[test]
fn gen_writes_three_multi_head_tensors() {
    let dir = tempfile::tempdir().unwrap();
    gen_local(dir.path());
    for name in ["q", "k", "v"] {
        let t = TensorFile::read(dir.path().join(format!("{name}.psat"))).unwrap();
        assert_eq!(t.dims, vec![2, 256, 16]);
    }
}

#[test]
fn run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen_local(dir.path());
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"q_block": 32, "kv_block": 32, "levels": 4, "grid": [16, 16], "seed": 1,
            "mask": "preset", "preset": "psa-3", "tile_len": 64, "unpermute": true}"#,
    )
    .unwrap();
    let out = psa(
        &run_args(&[
            "--config",
            "cfg.json",
            "--report",
            "r.json",
            "--output",
            "o.psat",
            "--schedule-out",
            "s.json",
        ]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    let heads = report["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 2);
    for h in heads {
        let rho = h["rho_bar"].as_f64().unwrap();
        assert!((rho + h["sparsity"].as_f64().unwrap() - 1.0).abs() < 1e-15);
        let hist0 = h["level_histogram"][0].as_f64().unwrap();
        assert!((h["kv_coverage"].as_f64().unwrap() - (1.0 - hist0)).abs() < 1e-15);
        assert!(h["schedule_deviation"].as_f64().unwrap() < 1e-9);
    }
    assert_eq!(report["config"]["preset"], "psa-3");

    let o = TensorFile::read(dir.path().join("o.psat")).unwrap();
    assert_eq!(o.dims, vec![2, 256, 16]);
    let sched: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(sched.as_array().unwrap().len(), 2);

    let pretty = psa(&["report", "r.json"], dir.path());
    assert!(pretty.status.success());
    assert!(String::from_utf8_lossy(&pretty.stdout).contains("rho_bar"));
    let csv = psa(&["report", "r.json", "--format", "csv"], dir.path());
    let text = String::from_utf8(csv.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("head,rho_bar,sparsity"));
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
}

#[test]
fn flags_override_config_and_reports_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    gen_local(dir.path());
    let args = run_args(&[
        "--q-block",
        "16",
        "--kv-block",
        "16",
        "--seed",
        "9",
        "--thresholds",
        "0.7,0.8,0.9,0.9",
        "--sim-thresholds",
        "0.75,0.70,0.70",
        "--grid",
        "16,16",
    ]);
    let a = psa(&args, dir.path());
    let b = psa(&args, dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let (ja, jb) = (
        String::from_utf8(a.stdout).unwrap(),
        String::from_utf8(b.stdout).unwrap(),
    );
    assert_eq!(without_time(&ja), without_time(&jb));
    let v = without_time(&ja);
    assert_eq!(v["layout"]["q_block"], 16);
    assert_eq!(v["config"]["sim_thresholds"], serde_json::json!([0.75, 0.70, 0.70]));
}

#[test]
fn dense_thresholds_recover_full_attention() {
    let dir = tempfile::tempdir().unwrap();
    gen_local(dir.path());
    let out = psa(
        &run_args(&[
            "--seed",
            "0",
            "--q-block",
            "32",
            "--kv-block",
            "32",
            "--thresholds",
            "1,1,1,1",
        ]),
        dir.path(),
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mean_rho_bar"], 1.0);
    assert!(v["mean_relative_error"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn diag_prints_similarity_curve() {
    let dir = tempfile::tempdir().unwrap();
    gen_local(dir.path());
    let out = psa(
        &["diag", "--keys", "k.psat", "--grid", "16,16", "--max-stride", "8"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.len() == 3));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    gen_local(dir.path());

    // Missing seed on a stochastic path.
    let out = psa(&run_args(&["--thresholds", "1,1,1,1"]), dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    // Unknown config key.
    std::fs::write(dir.path().join("bad.json"), r#"{"q_blok": 32}"#).unwrap();
    let out = psa(&run_args(&["--config", "bad.json", "--seed", "1"]), dir.path());
    assert_eq!(out.status.code(), Some(4));

    // Missing file and bad magic.
    let out = psa(
        &[
            "run",
            "--q",
            "nope.psat",
            "--k",
            "k.psat",
            "--v",
            "v.psat",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(dir.path().join("x.psat"), b"XXXX\x01\0\0\0\0\0\0\0").unwrap();
    let out = psa(&["diag", "--keys", "x.psat"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    // All-zero values leave nothing to compare against.
    TensorFile::from_heads(&[Matrix::zeros(256, 16), Matrix::zeros(256, 16)])
        .unwrap()
        .write(dir.path().join("zero.psat"))
        .unwrap();
    let out = psa(
        &[
            "run",
            "--q",
            "q.psat",
            "--k",
            "k.psat",
            "--v",
            "zero.psat",
            "--seed",
            "1",
            "--thresholds",
            "1,1,1,1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));

    // Usage errors come from the argument parser.
    let out = psa(
        &["gen", "--kind", "gaussian", "--seq-len", "8", "--head-dim", "2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
