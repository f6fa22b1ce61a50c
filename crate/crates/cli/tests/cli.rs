use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rcstat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcstat"))
        .args(args)
        .env_remove("RCSTAT_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rcstat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = rcstat(args);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--output", dir.to_str().unwrap(), "--seed", "5"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn contextual_dump(dir: &Path) {
    synth(
        dir,
        &[
            "--planted",
            "8,9,10",
            "--contextual",
            "0:1:8:2",
            "--contextual",
            "1:0:8:2",
        ],
    );
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_owned).collect())
        .collect()
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    contextual_dump(a.path());
    contextual_dump(b.path());
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 14);
    for name in names {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap()
        );
    }
}

#[test]
fn synth_manifest_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &[
            "--layers",
            "2",
            "--heads",
            "2",
            "--prompt-len",
            "48",
            "--total-len",
            "64",
            "--planted",
            "3,4",
        ],
    );
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let logits = manifest["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["kind"] == "logits")
        .count();
    assert_eq!(logits, 4);
    let truth: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["planted"], serde_json::json!([3, 4]));
}

#[test]
fn heads_table_and_threshold_count() {
    let dir = tempfile::tempdir().unwrap();
    contextual_dump(dir.path());
    let input = dir.path().to_str().unwrap();

    let rows = csv_rows(&ok(&["heads", "--input", input]));
    assert_eq!(rows.len(), 4);

    let count = |tau: &str| {
        let json: Value =
            serde_json::from_str(&ok(&["heads", "--input", input, "--format", "json", "--tau", tau])).unwrap();
        json["count_above_tau"].as_u64().unwrap()
    };
    assert_eq!(count("inf"), 0);
    // noise heads sit near E|N(0,1) - N(0,1)| / 2 ~ 0.56; contextual ones well above 2
    assert_eq!(count("1.5"), 2);
}

#[test]
fn evict_sweep_is_monotone_and_flags_default() {
    let dir = tempfile::tempdir().unwrap();
    contextual_dump(dir.path());
    let input = dir.path().to_str().unwrap();
    let text = ok(&["evict", "--input", input, "--c", "0.2", "--c", "1.0", "--c", "1.8"]);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(&header[..4], ["c", "default", "compression_ratio", "mean_ver"]);
    assert_eq!(header.len(), 8);
    let rows = csv_rows(&text);
    let ratios: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]), "{ratios:?}");
    let flagged: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(flagged, ["false", "true", "false"]);
}

#[test]
fn evict_without_values_omits_ver() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"values": false}"#).unwrap();
    let out = dir.path().join("dump");
    synth(&out, &["--config", config.to_str().unwrap()]);
    let text = ok(&["evict", "--input", out.to_str().unwrap(), "--c", "1"]);
    assert!(text.starts_with("c,default,compression_ratio,L0H0,"), "{text}");
}

#[test]
fn plan_round_trips_through_ver() {
    let dir = tempfile::tempdir().unwrap();
    contextual_dump(dir.path());
    let input = dir.path().to_str().unwrap();
    let plan = dir.path().join("plan.json");
    let sweep = ok(&[
        "evict",
        "--input",
        input,
        "--c",
        "1",
        "--format",
        "json",
        "--plan-out",
        plan.to_str().unwrap(),
    ]);
    let sweep: Value = serde_json::from_str(&sweep).unwrap();
    let report: Value =
        serde_json::from_str(&ok(&["ver", "--input", input, "--plan", plan.to_str().unwrap()])).unwrap();
    assert_eq!(report["mean"], sweep["rows"][0]["mean_ver"]);
    let saved: Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(saved["heads"][0]["keep"].as_str().unwrap().len(), 48);
}

#[test]
fn baseline_sweep_matches_rc_budget() {
    let dir = tempfile::tempdir().unwrap();
    contextual_dump(dir.path());
    let input = dir.path().to_str().unwrap();
    let rc = csv_rows(&ok(&["evict", "--input", input, "--c", "0.7", "--c", "1.3"]));
    for scorer in ["knorm", "streaming", "postsoftmax"] {
        let base = csv_rows(&ok(&[
            "evict", "--input", input, "--c", "0.7", "--c", "1.3", "--scorer", scorer,
        ]));
        for (a, b) in rc.iter().zip(&base) {
            assert_eq!(a[2], b[2], "{scorer}");
        }
    }
}

#[test]
fn attribute_spans() {
    let dir = tempfile::tempdir().unwrap();
    synth(
        dir.path(),
        &[
            "--layers",
            "4",
            "--heads",
            "6",
            "--planted",
            "17,18,19",
            "--contextual",
            "0:2:6:1",
            "--contextual",
            "2:3:6:1",
            "--contextual",
            "3:5:6:1",
        ],
    );
    let input = dir.path().to_str().unwrap();

    let single = dir.path().join("one.json");
    fs::write(&single, "[[4, 12]]").unwrap();
    let r: Value = serde_json::from_str(&ok(&[
        "attribute",
        "--input",
        input,
        "--spans",
        single.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(r["best_span"], 0);
    assert_eq!(r["spans"][0]["span"], serde_json::json!({"start": 4, "end": 12}));

    let many = dir.path().join("many.json");
    fs::write(&many, "[[0, 8], [8, 16], [16, 24], [24, 32], [32, 40]]").unwrap();
    let r: Value =
        serde_json::from_str(&ok(&["attribute", "--input", input, "--spans", many.to_str().unwrap()])).unwrap();
    assert_eq!(r["selected_heads"].as_array().unwrap().len(), 20);
    assert_eq!(r["best_span"], 2);

    let (status, stderr) = code(&[
        "attribute",
        "--input",
        input,
        "--spans",
        many.to_str().unwrap(),
        "--k",
        "25",
    ]);
    assert_eq!(status, 2);
    assert!(stderr.contains("number of heads (24)"), "{stderr}");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "[[3]]").unwrap();
    let (status, stderr) = code(&["attribute", "--input", input, "--spans", bad.to_str().unwrap()]);
    assert_eq!(status, 2);
    assert!(stderr.contains("malformed span file"), "{stderr}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["heads"]).0, 1);
    assert_eq!(code(&["heads", "--input", "/nonexistent/dump"]).0, 1);
    assert_eq!(code(&["evict", "--input", ".", "--scorer", "tova"]).0, 1);
    assert_eq!(code(&["frobnicate"]).0, 1);
    assert_eq!(code(&["--help"]).0, 0);

    fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    let (status, stderr) = code(&["heads", "--input", dir.path().to_str().unwrap()]);
    assert_eq!(status, 2);
    assert!(stderr.contains("manifest.json"), "{stderr}");
}

#[test]
fn jobs_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    contextual_dump(dir.path());
    let input = dir.path().to_str().unwrap();
    let run = |jobs: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_rcstat"));
        cmd.args(["--jobs", jobs, "heads", "--input", input]);
        match env {
            Some(v) => cmd.env("RCSTAT_JOBS", v),
            None => cmd.env_remove("RCSTAT_JOBS"),
        };
        cmd.output().unwrap()
    };
    assert_eq!(run("0", None).status.code(), Some(1));
    let one = run("0", Some("1"));
    assert!(one.status.success());
    let four = run("1", Some("4"));
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(run("2", Some("zero")).status.code(), Some(1));
}
