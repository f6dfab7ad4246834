use std::path::Path;
use std::process::{Command, Output};

fn hdgcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdgcm"))
        .args(args)
        .env_remove("HDGCM_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hdgcm(args);
    assert!(
        out.status.success(),
        "hdgcm {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn simulate(dir: &Path, r: &str, n: &str) {
    ok(&["simulate", "--r", r, "--n", n, "--noise", "0.2", "--seed", "1", "--out", &s(dir)]);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_fit_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let f = tmp.path().join("f");
    simulate(&d, "50", "100");
    assert!(d.join("data.csv").exists() && d.join("truth.json").exists());
    ok(&["fit", "--data", &s(&d.join("data.csv")), "--k-grid", "1..5", "--tune", "--out", &s(&f)]);
    for file in ["params.json", "trace.csv", "curves.csv"] {
        assert!(f.join(file).exists(), "missing {file}");
    }
    let stdout = ok(&["eval", "--fit", &s(&f), "--truth", &s(&d.join("truth.json"))]);
    assert!(stdout.contains("tpr_random"));
    let metrics = std::fs::read_to_string(f.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "err_B,err_G,tpr_fixed,fpr_fixed,tpr_random,fpr_random,k_hat,k_correct"
    );
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 8);
    assert!(values.iter().all(|v| v.is_finite()));

    let params = json(&f.join("params.json"));
    assert_eq!(params["schema_version"], 1);
    assert_eq!(params["rank_bic"].as_array().unwrap().len(), 5);
    assert!(!params["lambda_bic"].as_array().unwrap().is_empty());
    let trace = std::fs::read_to_string(f.join("trace.csv")).unwrap();
    assert!(trace.starts_with("stage,iteration,loglik"));
    assert!(trace.lines().any(|l| l.starts_with("2,")));
}

#[test]
fn explicit_zero_penalties_equal_single_point_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, "15", "40");
    let data = s(&d.join("data.csv"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["fit", "--data", &data, "--k", "3", "--lambda-d", "0", "--lambda-b", "0", "--out", &s(&a)]);
    ok(&["fit", "--data", &data, "--k", "3", "--tune", "--lambda-d", "0", "--lambda-b", "0", "--out", &s(&b)]);
    let (pa, pb) = (json(&a.join("params.json")), json(&b.join("params.json")));
    for key in ["b", "sigma", "p", "d", "q", "delta", "b_original", "g_original"] {
        assert_eq!(pa[key], pb[key], "{key} differs");
    }
}

#[test]
fn predict_on_slope_free_fit_gives_flat_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let f = tmp.path().join("f");
    // raw ages, so the curves are mapped back through a real rescaling
    ok(&["simulate", "--r", "10", "--n", "40", "--raw-time", "--out", &s(&d)]);
    let data = s(&d.join("data.csv"));
    ok(&["fit", "--data", &data, "--k", "2", "--lambda-d", "1e9", "--lambda-b", "1e9", "--out", &s(&f)]);
    let out = tmp.path().join("curves.csv");
    ok(&["predict", "--fit", &s(&f), "--data", &data, "--out", &s(&out)]);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let slope = headers.iter().position(|h| h == "slope").unwrap();
    let kind = headers.iter().position(|h| h == "kind").unwrap();
    let mut kinds = std::collections::BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        kinds.insert(rec[kind].to_string());
        assert_eq!(rec[slope].parse::<f64>().unwrap(), 0.0);
    }
    assert_eq!(kinds.into_iter().collect::<Vec<_>>(), ["group", "individual", "population"]);
}

#[test]
fn tune_writes_rank_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, "12", "40");
    let t = tmp.path().join("t");
    let stdout = ok(&["tune", "--data", &s(&d.join("data.csv")), "--k-grid", "1,2,3", "--out", &s(&t)]);
    assert!(stdout.starts_with("K = "));
    let table = std::fs::read_to_string(t.join("bic.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert_eq!(table.lines().filter(|l| l.ends_with(",true")).count(), 1);
}

#[test]
fn iteration_cap_still_writes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let f = tmp.path().join("f");
    simulate(&d, "10", "30");
    let out = hdgcm(&["fit", "--data", &s(&d.join("data.csv")), "--k", "2", "--max-iter", "2", "--out", &s(&f)]);
    assert!(out.status.success());
    assert_eq!(json(&f.join("params.json"))["converged"], false);
}

#[test]
fn thread_env_var_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    simulate(&d, "10", "30");
    let data = s(&d.join("data.csv"));
    let run = |dir: &str, threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hdgcm"));
        cmd.args(["fit", "--data", &data, "--k", "2", "--out", &s(&tmp.path().join(dir))]);
        match threads {
            Some(t) => cmd.env("HDGCM_THREADS", t),
            None => cmd.env_remove("HDGCM_THREADS"),
        };
        cmd.output().unwrap()
    };
    assert!(run("one", Some("1")).status.success());
    assert!(run("three", Some("3")).status.success());
    assert!(!run("zero", Some("0")).status.success());
    let strip = |dir: &str| {
        let mut v = json(&tmp.path().join(dir).join("params.json"));
        v.as_object_mut().unwrap().remove("seconds");
        v
    };
    assert_eq!(strip("one"), strip("three"));
}

#[test]
fn bad_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hdgcm(&["fit", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2), "missing flags are a usage error");
    let out = hdgcm(&["fit", "--data", "x.csv", "--k", "2", "--k-grid", "1..3", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hdgcm(&["fit", "--data", "x.csv", "--k-grid", "3..1", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "subject,time,y_1,y_2\na,0,1,2\na,1,,3\n").unwrap();
    let out = hdgcm(&["fit", "--data", &s(&bad), "--k", "1", "--out", &s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("y_1"), "{err}");

    let out = hdgcm(&["eval", "--fit", &s(&tmp.path().join("nowhere")), "--truth", "t.json"]);
    assert!(!out.status.success());
}
