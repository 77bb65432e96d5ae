use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalelab")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_law(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

const LAW: &str = r#"{"A":406.4,"B":410.7,"alpha":0.5,"beta":0.4,"E0":0.5,"r_d_star":31.19,"r_n_star":5.0}"#;

/// Shared exponents without repetition decay; the first law has the lower
/// irreducible loss and so overtakes the second at large compute.
const DIFF: &str = r#"{"A":600.0,"B":410.7,"alpha":0.34,"beta":0.28,"E0":1.60,"r_d_star":1e12,"r_n_star":1e12}"#;
const AR: &str = r#"{"A":406.4,"B":410.7,"alpha":0.34,"beta":0.28,"E0":1.69,"r_d_star":1e12,"r_n_star":1e12}"#;

#[test]
fn synth_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let law = write_law(dir.path(), "law.json", LAW);
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let s = run(&["synth", "--law-a", &law, "--out", out, "--seed", "3"]);
    assert_eq!(code(&s), 0, "{}", stderr(&s));
    assert!(stderr(&s).contains("seed=3"));
    let runs = fs::read_to_string(format!("{out}/runs.jsonl")).unwrap();
    assert!(runs.starts_with("# scalelab ") && runs.lines().next().unwrap().ends_with("seed=3"));
    assert_eq!(runs.lines().count(), 121);

    let f = run(&["fit", "--runs", &format!("{out}/runs.jsonl"), "--out", out, "--seed", "3"]);
    assert_eq!(code(&f), 0, "{}", stderr(&f));
    let fit: Value = serde_json::from_str(&fs::read_to_string(format!("{out}/fit_ar.json")).unwrap()).unwrap();
    assert_eq!(fit["comment"], "scalelab 0.1.0 seed=3");
    for key in ["stage1", "stage2", "law", "report"] {
        assert!(fit.get(key).is_some(), "{key}");
    }
    let got = fit["law"]["alpha"].as_f64().unwrap();
    assert!((got / 0.5 - 1.0).abs() < 0.05, "{got}");
    let res = fs::read_to_string(format!("{out}/residuals_ar.csv")).unwrap();
    assert_eq!(res.lines().count(), 2 + 120);

    // a fit json is accepted wherever a law is expected
    let c = run(&["curves", "--law-a", &format!("{out}/fit_ar.json"), "--out", out, "--max-epochs", "5", "--grid-c", "1e19"]);
    assert_eq!(code(&c), 0, "{}", stderr(&c));
    let curves = fs::read_to_string(format!("{out}/curves.csv")).unwrap();
    assert_eq!(curves.lines().nth(1), Some("budget,epoch,tokens,loss,hypothetical_loss"));
    assert_eq!(curves.lines().count(), 2 + 5);
}

#[test]
fn single_epoch_runs_cannot_fit_decay() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::new();
    for (n, u, l) in [(1e6, 1e8, 4.0), (1e7, 1e8, 3.5), (1e6, 1e9, 3.6), (1e7, 1e9, 3.1), (1e8, 1e9, 2.9), (1e8, 1e10, 2.6)] {
        body.push_str(&format!("{{\"family\":\"ar\",\"n_params\":{},\"unique_tokens\":{},\"epochs\":1,\"final_val_loss\":{l}}}\n", n as u64, u as u64));
    }
    let runs = dir.path().join("runs.jsonl");
    fs::write(&runs, body).unwrap();
    let o = run(&["fit", "--runs", runs.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("single-epoch"), "{}", stderr(&o));
}

#[test]
fn malformed_runs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs.jsonl");
    fs::write(&runs, "{\"family\":\"ar\",\"n_params\":10,\"unique_tokens\":10,\"epochs\":1,\"final_val_loss\":3.0}\n{not json\n").unwrap();
    let o = run(&["fit", "--runs", runs.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let missing = run(&["fit", "--runs", "/nonexistent/runs.jsonl"]);
    assert_eq!(code(&missing), 2);
    let bad_flag = run(&["crossover", "--law-a", "x", "--law-b", "y", "--u", "1,-2"]);
    assert_eq!(code(&bad_flag), 2);
}

#[test]
fn crossover_with_crossing_and_identical_laws() {
    let dir = tempfile::tempdir().unwrap();
    let d = write_law(dir.path(), "diff.json", DIFF);
    let a = write_law(dir.path(), "ar.json", AR);
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    let o = run(&["crossover", "--law-a", &d, "--law-b", &a, "--u", "1e9,1e10", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(format!("{out}/crossover.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let c: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!((c / 7.608_359_646_489_642e21 - 1.0).abs() < 1e-4, "{r}");
    }
    assert!(Path::new(&format!("{out}/crit_fit.json")).exists());

    let same = dir.path().join("same");
    let same = same.to_str().unwrap();
    let o = run(&["crossover", "--law-a", &a, "--law-b", &a, "--u", "1e8:1e10:3", "--out", same]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(format!("{same}/crossover.csv")).unwrap();
    assert!(csv.lines().skip(2).all(|r| r.split(',').nth(1) == Some("") && r.contains("no crossover")), "{csv}");
    assert!(!Path::new(&format!("{same}/crit_fit.json")).exists());
    assert!(stderr(&o).contains("power-law fit skipped"));

    let one = dir.path().join("one");
    let one = one.to_str().unwrap();
    let o = run(&["crossover", "--law-a", &d, "--law-b", &a, "--u", "1e9", "--out", one]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(format!("{one}/crossover.csv")).unwrap().lines().count(), 3);
    assert!(stderr(&o).contains("power-law fit skipped"));

    let bad = write_law(dir.path(), "bad.json", r#"{"A": -1}"#);
    assert_eq!(code(&run(&["crossover", "--law-a", &bad, "--law-b", &a, "--out", one])), 2);
}

#[test]
fn heatmap_and_pareto_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = write_law(dir.path(), "diff.json", DIFF);
    let a = write_law(dir.path(), "ar.json", AR);
    let out = dir.path().to_str().unwrap();
    let o = run(&["heatmap", "--law-a", &d, "--law-b", &a, "--grid-u", "1e9,1e10", "--grid-c", "1e8,1e21,1e23", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "U,1.00000000e8,1.00000000e21,1.00000000e23");
    assert!(lines[2].starts_with("1.00000000e9,,"));

    let runs = dir.path().join("runs.jsonl");
    fs::write(
        &runs,
        "{\"family\":\"ar\",\"n_params\":10,\"unique_tokens\":100,\"epochs\":1,\"final_val_loss\":3.0}\n\
         {\"family\":\"ar\",\"n_params\":10,\"unique_tokens\":1000,\"epochs\":1,\"final_val_loss\":3.5}\n\
         {\"family\":\"diffusion\",\"n_params\":20,\"unique_tokens\":1000,\"epochs\":1,\"final_val_loss\":2.0}\n",
    )
    .unwrap();
    let o = run(&["pareto", "--runs", runs.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("pareto.csv")).unwrap();
    assert_eq!(csv.lines().skip(2).collect::<Vec<_>>(), vec!["ar,6.00000000e3,3.00000000e0,0", "diffusion,1.20000000e5,2.00000000e0,2"]);
    let o = run(&["pareto", "--runs", runs.to_str().unwrap(), "--out", out, "--format", "json", "--family", "diffusion"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("pareto.json")).unwrap()).unwrap();
    assert_eq!(v["frontier"].as_array().unwrap().len(), 1);
    assert_eq!(code(&run(&["pareto", "--runs", runs.to_str().unwrap(), "--family", "mdm", "--out", out])), 0);
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "# nothing\n").unwrap();
    assert_eq!(code(&run(&["pareto", "--runs", empty.to_str().unwrap(), "--out", out])), 2);
}

#[test]
fn arch_reports_no_flagged_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["arch", "--out", out, "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("arch.json")).unwrap()).unwrap();
    assert_eq!(v["flagged"], 0);
    assert_eq!(v["rows"].as_array().unwrap().len(), 54);
    let seven = v["rows"].as_array().unwrap().iter().find(|r| r["name"] == "7").unwrap();
    assert_eq!(seven["computed"], 7_000_448);
}

#[test]
fn gradcheck_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    for r in v["results"].as_array().unwrap() {
        assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4 && r["passed"] == true);
    }
}

#[test]
fn config_files_feed_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    fs::write(&cfg, r#"{"d_models":[8],"unique_tokens":[256,512],"epochs":[1,2],"val_tokens":256,"seed":5}"#).unwrap();
    let out = dir.path().join("toy");
    let o = run(&["train-toy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("seed=5") && stderr(&o).contains("\"d_models\":[8]"));
    let runs = fs::read_to_string(out.join("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 8);
    let metrics = fs::read_to_string(out.join("metrics/diffusion_d8_u512_e2.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2 + 3);

    fs::write(&cfg, "{\"n_starts\": 0}").unwrap();
    assert_eq!(code(&run(&["fit", "--runs", out.join("runs.jsonl").to_str().unwrap(), "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn identical_invocations_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let law = write_law(dir.path(), "law.json", LAW);
    let outs: Vec<_> = (0..2).map(|i| dir.path().join(format!("r{i}"))).collect();
    for o in &outs {
        let o = o.to_str().unwrap();
        assert_eq!(code(&run(&["synth", "--law-a", &law, "--out", o, "--seed", "9"])), 0);
        assert_eq!(code(&run(&["fit", "--runs", &format!("{o}/runs.jsonl"), "--out", o, "--seed", "9"])), 0);
    }
    for name in ["runs.jsonl", "fit_ar.json", "residuals_ar.csv"] {
        assert_eq!(fs::read(outs[0].join(name)).unwrap(), fs::read(outs[1].join(name)).unwrap(), "{name}");
    }
}
