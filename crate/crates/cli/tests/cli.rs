//! End-to-end checks of the `kkl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kkl_core::kkl::LearnedObserver;
use kkl_core::linalg::{DenseMatrix, ObserverDesign};
use serde_json::Value;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn kkl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kkl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn x_ultimate(out: &Path) -> (f64, Option<f64>) {
    let c = json(&out.join("certificate.json"));
    (
        c["x_ultimate"].as_f64().unwrap(),
        c["x_ultimate_noisy"]["bound"].as_f64(),
    )
}

#[test]
fn certificate_from_explicit_quantities() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = kkl(&[
        "--out",
        out,
        "certificate",
        "--quantities",
        "5.13e-4,235.7,5.98e-2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("limsup |x_hat - x|"));
    let (x, _) = x_ultimate(dir.path());
    assert!((x - 0.181).abs() <= 1e-3, "{x}");

    let vdp = configs().join("van_der_pol.toml");
    let vdp = vdp.to_str().unwrap();
    let o = kkl(&[
        "--config",
        vdp,
        "--out",
        out,
        "certificate",
        "--quantities",
        "7.7e-3,23,2.3e-2",
    ]);
    assert!(o.status.success());
    let (x, noisy) = x_ultimate(dir.path());
    assert!((x - 0.112).abs() <= 1e-3, "{x}");
    assert!(noisy.is_none());

    let o = kkl(&[
        "--config",
        vdp,
        "--out",
        out,
        "certificate",
        "--quantities",
        "7.7e-3,23,2.3e-2,0.033",
    ]);
    assert!(o.status.success());
    let (_, noisy) = x_ultimate(dir.path());
    assert!((noisy.unwrap() - 0.685).abs() <= 2e-3, "{noisy:?}");
}

#[test]
fn missing_inputs_and_bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for stage in [
        "train",
        "finetune",
        "train-inverse",
        "certify",
        "certificate",
        "simulate",
    ] {
        let o = kkl(&["--out", out, stage]);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = kkl(&["--config", "/nonexistent/run.toml", "config"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[training]\nepochs = -3\n").unwrap();
    let o = kkl(&["--config", bad.to_str().unwrap(), "config"]);
    assert_eq!(o.status.code(), Some(2));
    let o = kkl(&["--out", out, "certificate", "--quantities", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn printed_config_round_trips() {
    let cfg = configs().join("reverse_duffing_desk.toml");
    let o = kkl(&["--config", cfg.to_str().unwrap(), "--seed", "9", "config"]);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resolved.toml");
    fs::write(&path, &o.stdout).unwrap();
    let again = kkl(&["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(o.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed = 9"));
}

fn dataset_bytes(root: &Path) -> Vec<Vec<u8>> {
    [
        "pairs.csv",
        "initial.csv",
        "collocation.csv",
        "dataset.json",
    ]
    .iter()
    .map(|f| fs::read(root.join("dataset").join(f)).unwrap())
    .collect()
}

#[test]
fn gen_data_is_reproducible() {
    let cfg = configs().join("reverse_duffing_desk.toml");
    let cfg = cfg.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = kkl(&[
            "--config",
            cfg,
            "--out",
            d.path().to_str().unwrap(),
            "--threads",
            "1",
            "gen-data",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(dataset_bytes(a.path()), dataset_bytes(b.path()));
}

#[test]
fn escaping_initial_conditions_abort_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("vdp.toml");
    let base = fs::read_to_string(configs().join("van_der_pol_desk.toml")).unwrap();
    // Most of this box lies outside the limit cycle, where backward
    // trajectories blow up.
    let wide = base.replace(
        "initial = { lower = [-1.2, -1.2], upper = [1.2, 1.2] }",
        "initial = { lower = [-6.0, -6.0], upper = [6.0, 6.0] }",
    );
    assert_ne!(base, wide);
    fs::write(&cfg, wide).unwrap();
    let o = kkl(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "gen-data",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("discarded"));
}

#[test]
fn exact_linear_observer_certifies_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("linear.toml");
    fs::write(
        &cfg,
        r#"
        [system]
        kind = "linear"
        f = [[0.0, 1.0], [-1.0, 0.0]]
        h = [[1.0, 0.0]]

        [observer]
        rates = [1.0, 2.0, 3.0, 4.0, 5.0]

        [region]
        kind = "boxes"
        boxes = [{ lower = [-2.0, -2.0], upper = [2.0, 2.0] }]

        # The certified bound is asymptotic and here ~1e-15, so the transient
        # (decaying like e^-t) must be over before the envelope is taken.
        [simulation]
        horizon = 45.0
        t_c = 40.0
        trajectories = 5
        initial = { lower = [-1.0, -1.0], upper = [1.0, 1.0] }
        "#,
    )
    .unwrap();
    let f = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let h = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let design =
        ObserverDesign::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0], DenseMatrix::column(&[1.0; 5]))
            .unwrap();
    let obs = LearnedObserver::exact_linear(design, &f, &h).unwrap();
    for (name, net) in [
        ("forward.json", &obs.forward_net),
        ("inverse.json", &obs.inverse_net),
    ] {
        fs::write(
            dir.path().join(name),
            serde_json::to_string(&net.to_file(0, "exact")).unwrap(),
        )
        .unwrap();
    }
    let (c, out) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    let o = kkl(&["--config", c, "--out", out, "certify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&dir.path().join("certification.json"));
    let r = rep["residual"]["upper"].as_f64().unwrap();
    let e = rep["reconstruction"]["upper"].as_f64().unwrap();
    assert!(r <= 1e-9 && e <= 1e-9, "R = {r}, E = {e}");

    for stage in ["certificate", "simulate", "report"] {
        let o = kkl(&["--config", c, "--out", out, stage]);
        // Both the envelope and the bound sit at rounding level here, so the
        // strict pass flag of `simulate` is not meaningful.
        if stage != "simulate" {
            assert!(
                o.status.success(),
                "{stage}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
    }
    let sim = json(&dir.path().join("simulation.json"));
    let run = &sim["runs"][0];
    let envelope = run["report"]["envelope"].as_f64().unwrap();
    assert!(run["bound"].as_f64().unwrap() <= 1e-9);
    assert!(envelope <= 1e-12, "{envelope}");
    assert!(dir.path().join("report.json").exists());
}
