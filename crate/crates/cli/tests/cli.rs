use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn optclear(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optclear"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A one-bus market whose load cannot be covered.
fn write_short_market(dir: &Path) -> PathBuf {
    fs::write(
        dir.join("net.json"),
        r#"{"buses": [1], "slack": 1, "lines": []}"#,
    )
    .unwrap();
    fs::write(
        dir.join("parts.json"),
        r#"[
            {"id": "g", "bus": 1, "kind": "dispatchable", "capacity": 10,
             "offered_cost": {"a": 0.01, "b": 20}, "role": "seller"},
            {"id": "w", "bus": 1, "kind": "variable", "capacity": 15, "role": "buyer"},
            {"id": "d", "bus": 1, "kind": "consumer", "demand": 50}
        ]"#,
    )
    .unwrap();
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        r#"{"network": "net.json", "participants": "parts.json",
            "scenarios": {"kind": "grid", "wind": [{"mu": 10, "sigma": 1}], "n": 10},
            "acceptability": {"mode": "risk_neutral", "delta_max": 5}}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn copperplate_uses_bundled_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = optclear(&["copperplate"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("loss region [8.268, 9.134)"), "{text}");
    for f in ["copperplate.json", "fig2_profits.csv", "fig3_boundary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("copperplate.json")).unwrap())
            .unwrap();
    assert!(report["oracle_max_error"].as_f64().unwrap() <= 1e-6);
    let agg = report["central_optimum"]["aggregate_delta"]
        .as_f64()
        .unwrap();
    assert!((agg + 45.76).abs() < 0.01);
}

#[test]
fn copperplate_flags_override_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = optclear(
        &["copperplate", "--sigma", "2", "--alpha", "0,0.5"],
        dir.path(),
    );
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("copperplate.json")).unwrap())
            .unwrap();
    assert_eq!(report["instance"]["sigma"].as_f64(), Some(2.0));
    let rows = fs::read_to_string(dir.path().join("fig3_boundary.csv")).unwrap();
    assert!(rows
        .lines()
        .skip(1)
        .all(|l| l.starts_with("0.0,") || l.starts_with("0.5,")));
}

#[test]
fn dispatch_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = data("ieee14.json");
    let o = optclear(
        &[
            "dispatch",
            "--config",
            cfg.to_str().unwrap(),
            "--scenarios",
            "20",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rt = fs::read_to_string(dir.path().join("realtime.csv")).unwrap();
    assert_eq!(
        rt.lines().next(),
        Some("scenario,participant,dispatch,price")
    );
    assert_eq!(rt.lines().count(), 1 + 20 * 18);
    assert!(dir.path().join("forward.json").exists());
    assert!(dir.path().join("profits.csv").exists());
}

#[test]
fn selfish_clear_is_deterministic() {
    let cfg = data("ieee14.json");
    let args = [
        "clear",
        "--mode",
        "selfish",
        "--config",
        cfg.to_str().unwrap(),
        "--scenarios",
        "40",
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = optclear(&args, a.path());
    let ob = Command::new(env!("CARGO_BIN_EXE_optclear"))
        .args(args)
        .arg("--out")
        .arg(b.path())
        .env("OPTCLEAR_THREADS", "2")
        .output()
        .unwrap();
    assert!(oa.status.success() && ob.status.success());
    for f in [
        "trades.json",
        "allocation.csv",
        "ms.csv",
        "variance_report.csv",
        "option_profits.csv",
    ] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let ms = fs::read_to_string(a.path().join("ms.csv")).unwrap();
    assert!(ms.lines().last().unwrap().starts_with("expected,"));
}

#[test]
fn missing_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = optclear(&["dispatch"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    let o = optclear(
        &["dispatch", "--config", "/nonexistent/run.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bad_override_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = optclear(&["copperplate", "--rho=-1"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    let o = optclear(&["clear", "--mode", "greedy"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    let o = optclear(&["copperplate", "--alpha", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn infeasible_market_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_short_market(dir.path());
    let o = optclear(
        &["dispatch", "--config", cfg.to_str().unwrap()],
        &dir.path().join("out"),
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn ftr_requires_positions() {
    let dir = tempfile::tempdir().unwrap();
    let o = optclear(&["ftr"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn zero_volume_ftr_leaves_report_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(data("ieee14.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["network", "participants"] {
        let name = cfg[key].as_str().unwrap().to_string();
        cfg[key] = data(&name).to_str().unwrap().into();
    }
    cfg["ftr"][0]["volume"] = 0.0.into();
    let path = dir.path().join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = optclear(
        &[
            "ftr",
            "--mode",
            "selfish",
            "--config",
            path.to_str().unwrap(),
            "--scenarios",
            "30",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let read = |f: &str| -> Vec<Vec<String>> {
        fs::read_to_string(out.join(f))
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    };
    let (base, ftr) = (read("variance_report.csv"), read("variance_report_ftr.csv"));
    assert_eq!(base.len(), ftr.len());
    for (a, b) in base.iter().zip(&ftr).skip(1) {
        assert_eq!(a[0], b[0]);
        for j in 2..6 {
            let (x, y): (f64, f64) = (a[j].parse().unwrap(), b[j].parse().unwrap());
            assert!(
                (x - y).abs() <= 1e-9 * (1.0 + x.abs()),
                "{} column {j}: {x} vs {y}",
                a[0]
            );
        }
    }
}
