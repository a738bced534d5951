use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn rseio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rseio")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn fig1e_preset_writes_full_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = rseio(&["simulate", "--preset", "paper-fig1e", "--trials", "20", "--out", out]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(dir.path().join("mse.csv")).unwrap();
    assert!(text.starts_with("# config_hash="));
    assert!(text.lines().nth(1).unwrap().starts_with("t,rseio,kfio,kf,rse"));
    assert_eq!(data_rows(&dir.path().join("mse.csv")).len(), 501);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["trials"], 20);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let res = rseio(&[
            "simulate", "--preset", "fig1a", "--trials", "12", "--seed", "7", "--threads", threads, "--plot", "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0);
    }
    for f in ["mse.csv", "report.json", "plot.gp"] {
        assert_eq!(digest(&a.path().join(f)), digest(&b.path().join(f)), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    rseio(&["simulate", "--preset", "fig1a", "--trials", "12", "--seed", "8", "--out", c.path().to_str().unwrap()]);
    assert_ne!(digest(&a.path().join("mse.csv")), digest(&c.path().join("mse.csv")));
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let empty = write_config(dir.path(), "empty.json", "{}");
    assert_eq!(code(&rseio(&["simulate", "--config", &empty, "--out", out])), 2);
    let blank = write_config(dir.path(), "blank.json", "");
    assert_eq!(code(&rseio(&["simulate", "--config", &blank, "--out", out])), 2);
    assert_eq!(code(&rseio(&["simulate", "--config", "/nonexistent/cfg.json", "--out", out])), 2);
    assert_eq!(code(&rseio(&["simulate", "--out", out])), 2);
    assert_eq!(code(&rseio(&["simulate", "--preset", "fig9", "--out", out])), 2);
    assert_eq!(code(&rseio(&["launch"])), 2);
    let bad = write_config(dir.path(), "bad.json", r#"{"trials": 3, "colour": "red"}"#);
    assert_eq!(code(&rseio(&["simulate", "--config", &bad, "--out", out])), 3);
    let mu = write_config(dir.path(), "mu.json", r#"{"mu": 1.5, "trials": 2, "horizon": 3}"#);
    assert_eq!(code(&rseio(&["simulate", "--config", &mu, "--out", out])), 3);
}

#[test]
fn numeric_failure_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "blowup.json",
        r#"{
            "plant": {
                "a": {"constant": [[1e200]]}, "b": {"constant": [[1]]}, "c": {"constant": [[1]]},
                "q": {"constant": [[1]]}, "r": {"constant": [[1]]}, "p0": [[1]], "x0_mean": [0]
            },
            "channel": {"kind": "bernoulli", "gamma": 0.0},
            "horizon": 4, "trials": 5, "delta": 0
        }"#,
    );
    let res = rseio(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 4, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn probe_bernoulli_half() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"channel": {"kind": "bernoulli", "gamma": 0.5}, "probe_length": 3}"#);
    let res = rseio(&["probe-channel", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let rows = data_rows(&dir.path().join("channel_probe.csv"));
    assert_eq!(rows.len(), 9);
    for row in &rows[..8] {
        let lp: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((lp + 3.0 * 2f64.ln()).abs() < 1e-14);
    }
    let total: f64 = rows[8].split(',').nth(3).unwrap().parse().unwrap();
    assert!(rows[8].starts_with("total"));
    assert!((total - 1.0).abs() < 1e-10);
}

/// Probability of `bits` under the chain, by summing over the hidden `γ_0`.
fn chain_probability(bits: &[bool], alpha: f64, beta: f64, gamma0: f64) -> f64 {
    let step = |from: bool, to: bool| match (from, to) {
        (true, true) => alpha,
        (true, false) => 1.0 - alpha,
        (false, false) => beta,
        (false, true) => 1.0 - beta,
    };
    [(true, gamma0), (false, 1.0 - gamma0)]
        .iter()
        .map(|&(g0, w)| {
            let mut prev = g0;
            bits.iter().fold(w, |acc, &b| {
                let p = acc * step(prev, b);
                prev = b;
                p
            })
        })
        .sum()
}

#[test]
fn probe_markov_matches_chain_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.json",
        r#"{"channel": {"kind": "markov", "alpha": 0.9, "beta": 0.7, "gamma0": 0.8}, "probe_length": 6}"#,
    );
    let res = rseio(&["probe-channel", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let rows = data_rows(&dir.path().join("channel_probe.csv"));
    assert_eq!(rows.len(), 65);
    for row in &rows[..64] {
        let f: Vec<&str> = row.split(',').collect();
        let bits: Vec<bool> = f[1].chars().map(|c| c == '1').collect();
        let lp: f64 = f[2].parse().unwrap();
        let oracle = chain_probability(&bits, 0.9, 0.7, 0.8).ln();
        assert!((lp - oracle).abs() < 1e-12, "{row}");
    }
}

#[test]
fn probe_refuses_long_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let res = rseio(&["probe-channel", "--preset", "fig1e", "--length", "13", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_preset_reports_negative_log_lipschitz() {
    let dir = tempfile::tempdir().unwrap();
    let res = rseio(&["analyze", "--preset", "paper-fig1e", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(&dir.path().join("analysis.json"));
    assert!(report["log_lipschitz_mean"].as_f64().unwrap() < 0.0);
    assert_eq!(report["log_lipschitz_negative"], true);
    assert_eq!(report["pattern_sweep"]["disagreements"].as_array().unwrap().len(), 0);
}

fn scalar_plant(c: f64, extra: &str) -> String {
    format!(
        r#"{{
            "plant": {{
                "a": {{"constant": [[0.9]]}}, "b": {{"constant": [[1]]}}, "c": {{"constant": [[{c}]]}},
                "da": {{"constant": [[[0.1]]]}},
                "q": {{"constant": [[1]]}}, "r": {{"constant": [[1]]}}, "p0": [[1]], "x0_mean": [0]
                {extra}
            }},
            "analysis": {{"sequences": 20, "pairs": 5, "pattern_length": 4, "window": 4}}
        }}"#
    )
}

#[test]
fn analyze_scalar_plant_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "s.json", &scalar_plant(1.0, ""));
    assert_eq!(code(&rseio(&["analyze", "--config", &cfg, "--out", out])), 0);
    let c = &read_json(&dir.path().join("analysis.json"))["sufficient_conditions"];
    assert_eq!(c["hl_reachable"], true);
    assert_eq!(c["hr_reachable"], true);
    assert_eq!(c["hlr_reachable"], true);
    assert_eq!(c["controllability_a2_g2"], true);

    let zero = scalar_plant(0.0, "").replace("\"da\": {\"constant\": [[[0.1]]]},", "");
    let cfg = write_config(dir.path(), "z.json", &zero);
    assert_eq!(code(&rseio(&["analyze", "--config", &cfg, "--out", out])), 0);
    let c = &read_json(&dir.path().join("analysis.json"))["sufficient_conditions"];
    assert_eq!(c["hl_reachable"], false);
    assert_eq!(c["observability_witnesses"].as_array().unwrap().len(), 0);
}

#[test]
fn analyze_rejects_time_varying_plant() {
    let dir = tempfile::tempdir().unwrap();
    let text = scalar_plant(1.0, "").replace(r#""a": {"constant": [[0.9]]}"#, r#""a": {"table": [[[0.9]], [[0.8]]]}"#);
    let cfg = write_config(dir.path(), "ltv.json", &text);
    let res = rseio(&["analyze", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("time-invariant"));
}

#[test]
fn classify_writes_product_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let res = rseio(&["classify", "--preset", "fig1e", "--pattern", "1,0,0,1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    let report = read_json(&dir.path().join("classify.json"));
    assert_eq!(report["report"]["composite"]["in_hlr"], true);
    assert!(report["report"]["contraction"]["max"].as_f64().unwrap() < 1.0);
    assert_eq!(data_rows(&dir.path().join("phi_product.csv")).len() + 1, 4);
    let missing = rseio(&["classify", "--preset", "fig1e", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}
