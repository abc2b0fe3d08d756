use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qspec::data::write_csv;
use qspec::mcstudy::{draw_dgp, DgpSpec};
use qspec::rng::StreamKey;
use serde_json::Value;
use tempfile::TempDir;

const LINEAR: &str = r#"
response = "y"
[[segments]]
tau = "[0, 1]"
terms = [{ kind = "linear", covariate = "x0" }]
"#;

const QUADRATIC_ONLY: &str = r#"
response = "y"
[[segments]]
tau = "[0, 1]"
terms = [{ kind = "power", covariate = "x0", exponent = 2.0 }]
"#;

fn qspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qspec"))
        .args(args)
        .env_remove("QSPEC_SEED")
        .env_remove("QSPEC_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn dgp1_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let d = draw_dgp(&DgpSpec::new(1, n).unwrap(), StreamKey::new(seed)).unwrap();
    let p = dir.join(format!("dgp1_{n}_{seed}.csv"));
    write_csv(&d, fs::File::create(&p).unwrap()).unwrap();
    p
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn test_command_writes_a_versioned_report() {
    let dir = TempDir::new().unwrap();
    let data = dgp1_csv(dir.path(), 200, 1);
    let spec = write(dir.path(), "lin.toml", LINEAR);
    let out = dir.path().join("r.json");
    let coef = dir.path().join("c.csv");
    let o = qspec(&[
        "test", "--data", s(&data), "--spec", s(&spec), "--bootstrap", "40", "--tau-grid", "0.1:0.9:0.1",
        "--seed", "5", "--out", s(&out), "--coefficients", s(&coef),
    ]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["schema_version"], 1);
    let m = &r["manifest"];
    assert_eq!(m["command"], "test");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["data_hash"].as_str().unwrap().len(), 64);
    assert_eq!(r["result"]["grid"].as_array().unwrap().len(), 9);
    let p = r["result"]["bootstrap"]["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert_eq!(r["result"]["bootstrap"]["replicates"].as_array().unwrap().len(), 40);
    let table = fs::read_to_string(&coef).unwrap();
    assert_eq!(table.lines().count(), 10);
    assert!(table.starts_with("tau,\"(intercept)\",\"x0\""));
}

#[test]
fn reports_are_reproducible_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let data = dgp1_csv(dir.path(), 120, 2);
    let spec = write(dir.path(), "lin.toml", LINEAR);
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        qspec(&[
            "--threads", threads, "test", "--data", s(&data), "--spec", s(&spec), "--statistic", "cmstar",
            "--default-flexible", "--bootstrap", "10", "--tau-grid", "0.1:0.9:0.1", "--seed", "9", "--out", s(&out),
        ]);
        report(&out)
    };
    let a = run("1", "a.json");
    let b = run("3", "b.json");
    assert_eq!(a["result"], b["result"]);
    assert_eq!(a["manifest"]["config_hash"], b["manifest"]["config_hash"]);
}

#[test]
fn config_hash_tracks_numeric_settings() {
    let dir = TempDir::new().unwrap();
    let data = dgp1_csv(dir.path(), 80, 3);
    let spec = write(dir.path(), "lin.toml", LINEAR);
    let hash = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        qspec(&["test", "--data", s(&data), "--spec", s(&spec), "--bootstrap", "5", "--tau-grid", "0.2:0.8:0.2", "--seed", seed, "--out", s(&out)]);
        report(&out)["manifest"]["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash("1", "a.json"), hash("1", "b.json"));
    assert_ne!(hash("1", "a.json"), hash("2", "c.json"));
}

#[test]
fn misspecified_null_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let data = dgp1_csv(dir.path(), 2000, 4);
    let spec = write(dir.path(), "quad.toml", QUADRATIC_ONLY);
    let o = qspec(&[
        "test", "--data", s(&data), "--spec", s(&spec), "--bootstrap", "50", "--tau-grid", "0.1:0.9:0.1",
        "--levels", "0.05", "--out", s(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "lin.toml", LINEAR);
    let bad = write(dir.path(), "bad.csv", "y,x0\n1,2\n3,oops\n");
    let o = qspec(&["test", "--data", s(&bad), "--spec", s(&spec)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let data = dgp1_csv(dir.path(), 60, 5);
    let unknown = write(dir.path(), "u.toml", &LINEAR.replace("x0", "x9"));
    assert_eq!(qspec(&["test", "--data", s(&data), "--spec", s(&unknown)]).status.code(), Some(1));
    assert_eq!(qspec(&["test", "--data", s(&data), "--spec", s(&spec), "--statistic", "cms"]).status.code(), Some(1));
    let o = qspec(&["test", "--data", s(&data), "--spec", s(&spec), "--statistic", "cmstar"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--flexible-spec"));
    assert_eq!(qspec(&["mc", "--dgp", "99", "--null-spec", "linear"]).status.code(), Some(1));
}

#[test]
fn mc_command_emits_the_results_table() {
    let dir = TempDir::new().unwrap();
    let table = dir.path().join("mc.csv");
    let out = dir.path().join("mc.json");
    let o = qspec(&[
        "mc", "--dgp", "4", "--null-spec", "linear-ls", "--statistic", "cm", "--n", "50", "--reps", "3",
        "--bootstrap", "10", "--tau-grid", "0.1:0.9:0.1", "--seed", "1", "--table", s(&table), "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "dgp,spec,n,level,statistic,reps,rejection_rate,wall_time");
    assert!(lines.next().unwrap().starts_with("4,linear-ls,50,0.05,cm,3,"));
    assert_eq!(report(&out)["result"]["p_values"].as_array().unwrap().len(), 3);
}

fn two_groups(dir: &Path, shift: f64) -> PathBuf {
    let d = draw_dgp(&DgpSpec::new(1, 300).unwrap(), StreamKey::new(6)).unwrap();
    let mut text = String::from("y,x0,g\n");
    for i in 0..d.n() {
        let (y, x) = (d.y()[i], d.value(i, 0));
        text.push_str(&format!("{},{x},1\n", y + shift));
        text.push_str(&format!("{y},{x},0\n"));
    }
    write(dir, &format!("groups_{shift}.csv"), &text)
}

#[test]
fn decompose_recovers_a_shift_and_nothing_else() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "lin.toml", LINEAR);
    for shift in [0.0, 5.0] {
        let data = two_groups(dir.path(), shift);
        let out = dir.path().join("d.json");
        let table = dir.path().join("d.csv");
        let o = qspec(&[
            "decompose", "--data", s(&data), "--group", "g", "--spec", s(&spec), "--draws", "2500", "--out",
            s(&out), "--table", s(&table),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let r = report(&out);
        let rows = r["result"]["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 9);
        for row in rows {
            let u = row["unexplained"].as_f64().unwrap();
            let e = row["explained"].as_f64().unwrap();
            assert!((u - shift).abs() < 1e-6, "{row}");
            assert!(e.abs() < 0.2, "{row}");
        }
        assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 10);
    }
}

#[test]
fn decompose_rejects_a_non_binary_group() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "lin.toml", LINEAR);
    let data = write(dir.path(), "g.csv", "y,x0,g\n1,0.1,0\n2,0.2,1\n3,0.3,2\n");
    let o = qspec(&["decompose", "--data", s(&data), "--group", "g", "--spec", s(&spec)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("only 0 and 1"));
}
