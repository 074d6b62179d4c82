use std::path::Path;
use std::process::{Command, Output};

fn hdmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdmoe")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, cohort: usize) {
    ok(&hdmoe(&["synth", "--desk", "--cohort", &cohort.to_string(), "--out", s(dir)]));
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn synth_writes_manifest_and_two_files_per_sample() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, 50);
    synth(&b, 50);
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 51);
    assert_eq!(std::fs::read_dir(a.join("features")).unwrap().count(), 100);
    for f in ["manifest.csv", "truth.csv", "features/syn00017_b.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth = std::fs::read_to_string(a.join("truth.csv")).unwrap();
    assert!(truth.starts_with("sample_id,z_shared_0,"));
    assert!(truth.lines().next().unwrap().ends_with(",true_score"));
}

#[test]
fn empty_cohort_gives_header_only_manifest() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), 0);
    let manifest = std::fs::read_to_string(t.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest, "sample_id,time_months,censored,modality_a_file,modality_b_file,fold\n");
}

#[test]
fn untrained_predictions_are_near_chance() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 200);
    let run = t.path().join("run");
    let m = data.join("manifest.csv");
    let stdout = ok(&hdmoe(&["train", "--desk", "--epochs", "0", "--manifest", s(&m), "--out", s(&run)]));
    assert!(stdout.contains("C-index"));
    let c = metrics(&run)["pooled"]["cindex"].as_f64().unwrap();
    assert!((c - 0.5).abs() < 0.1, "untrained C-index {c}");
    let preds = std::fs::read_to_string(run.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("sample_id,fold,h1,h2,h3,h4,risk,bin,censored,time_months\n"));
    assert_eq!(preds.lines().count(), 201);
}

#[test]
fn train_eval_analyze_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 40);
    let run = t.path().join("run");
    let m = data.join("manifest.csv");
    let common = ["--desk", "--epochs", "2", "--manifest", s(&m), "--out", s(&run)];
    ok(&hdmoe(&[&["train"], &common[..], &["--parallel-folds", "2"]].concat()));
    for f in ["config.json", "metrics.json", "km.csv", "checkpoints/fold_4.json", "logs/fold_0.log"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("logs/fold_0.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("step,0,")));
    assert!(log.lines().any(|l| l.starts_with("rfr,2,0,")));
    let m0 = metrics(&run);
    assert!(m0["fold"]["3"]["cindex"].is_f64());
    assert!(m0["overall"]["std"].is_f64());

    // pinned evaluation of the same checkpoints is reproducible
    let eval = |extra: &[&str]| {
        ok(&hdmoe(&[&["eval"], &common[..], extra].concat()));
        std::fs::read(run.join("eval/metrics.json")).unwrap()
    };
    let p1 = eval(&["--pin-segment", "1"]);
    assert_eq!(p1, eval(&["--pin-segment", "1"]));
    let with_repeats = eval(&["--repeats", "5"]);
    let v: serde_json::Value = serde_json::from_slice(&with_repeats).unwrap();
    assert_eq!(v["stability"]["cindex"].as_array().unwrap().len(), 5);
    let km = std::fs::read_to_string(run.join("eval/km.csv")).unwrap();
    assert!(km.starts_with("group,time,survival,at_risk,events\n"));

    let stdout = ok(&hdmoe(&[&["analyze"], &common[..]].concat()));
    assert!(stdout.contains("level1_a: redundancy delta"));
    let a = run.join("analysis");
    let hist = std::fs::read_to_string(a.join("histogram.csv")).unwrap();
    // 5 folds x 3 routers x 8 experts
    assert_eq!(hist.lines().count(), 1 + 5 * 3 * 8);
    let heat = std::fs::read_to_string(a.join("fold_0_level1_b_pre.csv")).unwrap();
    assert_eq!(heat.lines().count(), 4);
    assert!(heat.lines().all(|l| l.split(',').count() == 4));
    let red = std::fs::read_to_string(a.join("redundancy.csv")).unwrap();
    assert!(red.starts_with("fold,block,pre_offdiag,post_offdiag,delta\n"));
    for line in red.lines().skip(1) {
        let delta: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(delta.is_finite());
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 30);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let m = data.join("manifest.csv");
    ok(&hdmoe(&["train", "--desk", "--epochs", "1", "--seed", "3", "--manifest", s(&m), "--out", s(&a)]));
    ok(&hdmoe(&["train", "--config", s(&a.join("config.json")), "--out", s(&b)]));
    for f in ["predictions.csv", "metrics.json", "checkpoints/fold_2.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_config_exits_2_without_outputs() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 20);
    let cfg = t.path().join("c.json");
    std::fs::write(&cfg, r#"{"token_len_l1": 7}"#).unwrap();
    let out = t.path().join("out");
    let m = data.join("manifest.csv");
    let r = hdmoe(&["train", "--desk", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("token length"));
    assert!(!out.exists());

    std::fs::write(&cfg, r#"{"epoch": 7}"#).unwrap();
    let r = hdmoe(&["train", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn missing_files_exit_4() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 20);
    let m = data.join("manifest.csv");
    let r = hdmoe(&["eval", "--desk", "--manifest", s(&m), "--out", s(&t.path().join("none"))]);
    assert_eq!(code(&r), 4);
    assert!(String::from_utf8_lossy(&r.stderr).contains("fold_0.json"));
    let r = hdmoe(&["train", "--desk", "--manifest", "/nonexistent/manifest.csv"]);
    assert_eq!(code(&r), 4);
}

#[test]
fn checkpoint_shape_mismatch_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 20);
    let run = t.path().join("run");
    let m = data.join("manifest.csv");
    ok(&hdmoe(&["train", "--desk", "--epochs", "0", "--manifest", s(&m), "--out", s(&run)]));
    let r = hdmoe(&["eval", "--manifest", s(&m), "--out", s(&run)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("shape"));
}

#[test]
fn diverging_training_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, 20);
    let cfg = t.path().join("c.json");
    std::fs::write(&cfg, r#"{"lr": 1e300, "weight_decay": 0.0}"#).unwrap();
    let m = data.join("manifest.csv");
    let r = hdmoe(&["train", "--desk", "--config", s(&cfg), "--manifest", s(&m), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}
