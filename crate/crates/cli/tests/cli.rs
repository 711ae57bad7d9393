//! End-to-end runs of the `mrhom` binary.

use mrhom::montecarlo::ScanDataset;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mrhom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrhom"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// Rows of a CSV whose leading `#` lines are metadata.
fn table(path: &Path) -> Vec<csv::StringRecord> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    r.records().map(Result::unwrap).collect()
}

fn header(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let line = text.lines().find(|l| !l.starts_with('#')).unwrap();
    line.split(',').map(str::to_string).collect()
}

fn digest_line(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn same_seed_gives_identical_files() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for dir in [&a, &b] {
        ok(&mrhom(&[
            "simulate",
            "--seed",
            "11",
            "--grid",
            "0:0.5:0.1",
            "--out",
            dir.to_str().unwrap(),
        ]));
    }
    for f in ["dataset.csv", "dataset.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest = fs::read(a.join("simulate_manifest.json")).unwrap();
    ok(&mrhom(&[
        "simulate",
        "--seed",
        "11",
        "--grid",
        "0:0.5:0.1",
        "--out",
        a.to_str().unwrap(),
    ]));
    assert_eq!(
        manifest,
        fs::read(a.join("simulate_manifest.json")).unwrap()
    );
    ok(&mrhom(&[
        "simulate",
        "--seed",
        "12",
        "--grid",
        "0:0.5:0.1",
        "--out",
        b.to_str().unwrap(),
    ]));
    assert_ne!(
        fs::read(a.join("dataset.csv")).unwrap(),
        fs::read(b.join("dataset.csv")).unwrap()
    );
}

#[test]
fn zero_events_give_an_empty_dataset() {
    let d = tempfile::tempdir().unwrap();
    ok(&mrhom(&[
        "simulate",
        "--events",
        "0",
        "--grid",
        "0:1:0.25",
        "--out",
        d.path().to_str().unwrap(),
    ]));
    let ds = ScanDataset::read_csv(fs::File::open(d.path().join("dataset.csv")).unwrap()).unwrap();
    assert_eq!(ds.points.len(), 5);
    assert_eq!(ds.events_per_repeat, 0);
    assert!(ds
        .points
        .iter()
        .all(|p| p.means.iter().chain(&p.errs).all(|&x| x == 0.0)));
    assert!(ds.provenance.config_digest.is_some());
}

#[test]
fn every_text_output_carries_the_digest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    ok(&mrhom(&[
        "simulate",
        "--timetags",
        "--grid",
        "0:0.35:0.05",
        "--out",
        out,
    ]));
    ok(&mrhom(&["crb", "--grid", "0:0.35:0.05", "--out", out]));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("simulate_manifest.json")).unwrap())
            .unwrap();
    let digest = manifest["config_digest"].as_str().unwrap().to_string();
    for f in [
        "dataset.csv",
        "timetags/point_002_A.csv",
        "crb_ideal.csv",
        "crb_array.csv",
    ] {
        assert_eq!(
            digest_line(&d.path().join(f)),
            format!("# digest: {digest}"),
            "{f}"
        );
    }
    let json = fs::read_to_string(d.path().join("dataset.json")).unwrap();
    assert!(json.contains(&digest));
    let crb = table(&d.path().join("crb_array.csv"));
    assert_eq!(crb.len(), 8);
    assert_eq!(&crb[0][2], "inf");
}

#[test]
fn default_run_recovers_the_beat_parameters() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    ok(&mrhom(&["simulate", "--seed", "2", "--out", out]));
    ok(&mrhom(&["fit", "--out", out]));
    let pooled: Vec<(String, f64, f64)> = table(&d.path().join("fit_pooled.csv"))
        .iter()
        .map(|r| {
            (
                r[0].to_string(),
                r[1].parse().unwrap(),
                r[2].parse().unwrap(),
            )
        })
        .collect();
    let (v, v_err) = (pooled[0].1, pooled[0].2);
    let (delta, delta_err) = (pooled[1].1, pooled[1].2);
    let dk = pooled[2].1;
    // pooled V carries a few-percent bias from the masked bunching channels
    assert!((v - 0.3).abs() < 0.03, "V = {v} ± {v_err}");
    assert!(
        (delta - 1.7).abs() < 3.0 * delta_err,
        "δ = {delta} ± {delta_err}"
    );
    assert!((dk / 9.8513 - 1.0).abs() < 0.01, "Δk per pixel = {dk}");
    let params = table(&d.path().join("fit_params.csv"));
    assert_eq!(params.len(), 57);
}

#[test]
fn ingest_rebuilds_simulated_counts() {
    let d = tempfile::tempdir().unwrap();
    let sim = d.path().join("sim");
    ok(&mrhom(&[
        "simulate",
        "--timetags",
        "--grid",
        "0.2:0.5:0.1",
        "--events",
        "3000",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let ing = d.path().join("ing");
    let tags = sim.join("timetags/point_002.mrht");
    ok(&mrhom(&[
        "ingest",
        tags.to_str().unwrap(),
        "--grid",
        "0.2:0.5:0.1",
        "--events",
        "3000",
        "--out",
        ing.to_str().unwrap(),
    ]));
    for b in ["A", "B"] {
        assert_eq!(
            fs::read(sim.join(format!("timetags/point_002_{b}.csv"))).unwrap(),
            fs::read(ing.join(format!("counts_{b}.csv"))).unwrap()
        );
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(ing.join("ingest_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total_pairs"], 3000);
    assert_eq!(summary["masked_dropped"], 0);
}

#[test]
fn corrupt_and_empty_time_tag_files() {
    let d = tempfile::tempdir().unwrap();
    let sim = d.path().join("sim");
    ok(&mrhom(&[
        "simulate",
        "--timetags",
        "--grid",
        "0.3:0.3:1",
        "--events",
        "50",
        "--out",
        sim.to_str().unwrap(),
    ]));
    let mut bytes = fs::read(sim.join("timetags/point_000.mrht")).unwrap();
    bytes.pop();
    let bad = d.path().join("bad.mrht");
    fs::write(&bad, &bytes).unwrap();
    let out = mrhom(&[
        "ingest",
        bad.to_str().unwrap(),
        "--out",
        d.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("byte offset"), "{}", stderr(&out));

    let empty = d.path().join("empty.mrht");
    fs::write(&empty, b"").unwrap();
    let dir = d.path().join("e");
    ok(&mrhom(&[
        "ingest",
        empty.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]));
    for b in ["A", "B"] {
        let rows = table(&dir.join(format!("counts_{b}.csv")));
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| &r[3] == "0"));
    }
}

#[test]
fn missing_inputs_fail_cleanly() {
    let d = tempfile::tempdir().unwrap();
    let gone = d.path().join("nope.csv");
    let out = mrhom(&[
        "report",
        "--dataset",
        gone.to_str().unwrap(),
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(
        msg.contains("nope.csv") && !msg.contains("panicked"),
        "{msg}"
    );
    let out = mrhom(&["simulate", "--config", gone.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_reports_every_violation() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(
        &cfg,
        "array.delta_fitted = 12.0\nwindows.half_width_ns = 3.5\nscan.repeats = 1\n",
    )
    .unwrap();
    let out = mrhom(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    for needle in ["overlap", "momentum pitch", "repeats"] {
        assert!(msg.contains(needle), "{needle} missing from\n{msg}");
    }
    assert!(!d.path().join("dataset.csv").exists());
    assert_eq!(mrhom(&["simulate", "--grid", "0:1"]).status.code(), Some(1));
}

#[test]
fn report_uncertainty_respects_the_bound() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cfg = repo_config("reference.toml");
    ok(&mrhom(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]));
    ok(&mrhom(&[
        "report",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]));
    let estimates = d.path().join("estimates.csv");
    assert_eq!(
        header(&estimates),
        [
            "dx_mm",
            "dx_ml_mm",
            "dx_err_mm",
            "n_total",
            "sqrtN_dx_err_mm",
            "sqrtN_crb_mm",
            "sqrtN_crb_ideal_mm",
            "sqrtN_qcrb_mm",
            "status"
        ]
    );
    let rows = table(&estimates);
    assert_eq!(rows.len(), 41);
    // relative spread of an error bar built from n_r = 10 repeats
    let spread = 1.0 / (2.0f64 * 9.0).sqrt();
    let crb: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    let mut estimated = 0;
    for (i, r) in rows.iter().enumerate() {
        if &r[8] != "ok" {
            continue;
        }
        estimated += 1;
        let measured: f64 = r[4].parse().unwrap();
        let quantum: f64 = r[7].parse().unwrap();
        assert!((quantum - 2f64.sqrt() * 0.035).abs() < 1e-15);
        // the array bound has information dips far narrower than the scan step, so
        // compare with the lowest bound among the point and its neighbours
        let bound = crb[i.saturating_sub(1)..(i + 2).min(crb.len())]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        if crb[i].is_finite() {
            assert!(
                measured >= bound * (1.0 - 2.0 * spread),
                "dx = {}: {measured} below {bound}",
                &r[0]
            );
        }
    }
    assert!(estimated >= 37, "only {estimated} of 41 points estimated");
    for f in ["beats_antibunching.csv", "beats_bunching.csv"] {
        let rows = table(&d.path().join(f));
        assert!(
            rows.iter().any(|r| &r[3] == "data") && rows.iter().any(|r| r[3].starts_with("fit")),
            "{f}"
        );
    }
    let ab = table(&d.path().join("beats_antibunching.csv"));
    let pairs: std::collections::BTreeSet<(String, String)> =
        ab.iter().map(|r| (r[1].into(), r[2].into())).collect();
    assert_eq!(pairs.len(), 4);
}

#[test]
fn saturated_configuration_reaches_the_quantum_limit() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cfg = repo_config("saturation.toml");
    ok(&mrhom(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]));
    ok(&mrhom(&[
        "report",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]));
    let rows = table(&d.path().join("estimates.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][8], "ok");
    let measured: f64 = rows[0][4].parse().unwrap();
    let target = 2f64.sqrt() * 0.035;
    assert!(
        (measured / target - 1.0).abs() < 0.2,
        "√N δΔx = {measured}, √2 σx = {target}"
    );
    let crb: f64 = rows[0][5].parse().unwrap();
    assert!((crb / target - 1.0).abs() < 0.05, "√N CRB = {crb}");
}
