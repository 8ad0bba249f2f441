use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hyrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyrep")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: &[&str] = &[
    "--set", "synthetic.trials_per_class=6",
    "--set", "synthetic.feature_dim=20",
    "--set", "epochs=30",
    "--set", "lr=0.01",
    "--set", "latent_dim=32",
    "--set", "schedule.switch_epoch=10",
    "--set", "triplets_per_item=10",
];

fn run_ok(args: &[&str]) -> Output {
    let o = hyrep(args);
    assert_eq!(code(&o), 0, "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    o
}

fn with_quick<'a>(base: &[&'a str]) -> Vec<&'a str> {
    base.iter().copied().chain(QUICK.iter().copied()).collect()
}

#[test]
fn unknown_verb_is_a_usage_error() {
    let o = hyrep(&["frobnicate"]);
    assert_eq!(code(&o), 64);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_input_and_bad_config_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&hyrep(&["train", "--data", path(&missing), "--out", path(&out)])), 64);
    assert_eq!(code(&hyrep(&["gen", "--out", path(&out), "--set", "lr=fast"])), 65);
    assert_eq!(code(&hyrep(&["gen", "--out", path(&out), "--set", "no_such_key=1"])), 65);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&hyrep(&["train", "--data", path(&bad), "--out", path(&out)])), 65);
}

#[test]
fn gradcheck_passes() {
    let o = run_ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text.lines().find(|l| l.starts_with("max rel. error")).expect("summary line");
    let value: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value < 1e-4, "{line}");
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let tr = dir.path().join("train");
    let ev = dir.path().join("eval");
    run_ok(&with_quick(&["gen", "--preset", "consonant21", "--seed", "1", "--out", path(&gen)]));
    let data = gen.join("dataset.json");
    run_ok(&with_quick(&["train", "--data", path(&data), "--seed", "1", "--out", path(&tr)]));
    let model = tr.join("model.json");
    run_ok(&with_quick(&["eval", "--data", path(&data), "--model", path(&model), "--out", path(&ev)]));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!(acc > 1.0 / 21.0, "accuracy {acc}");
    assert!(fs::read_to_string(ev.join("confusion.csv")).unwrap().lines().count() == 22);

    let cl = dir.path().join("cluster");
    run_ok(&["cluster", "--data", path(&data), "--model", path(&model), "--out", path(&cl)]);
    assert!(fs::read_to_string(cl.join("tree.newick")).unwrap().trim_end().ends_with(';'));
    let di = dir.path().join("dist");
    run_ok(&["distortion", "--data", path(&data), "--model", path(&model), "--out", path(&di)]);
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(di.join("distortion.json")).unwrap()).unwrap();
    assert!(d["percentile"].as_f64().is_some());
}

#[test]
fn training_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    run_ok(&with_quick(&["gen", "--seed", "2", "--out", path(&gen)]));
    let data = gen.join("dataset.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&with_quick(&["train", "--data", path(&data), "--seed", "2", "--set", "epochs=3", "--out", path(out)]));
    }
    for f in ["model.json", "history.json", "train.conf", "train.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let gen2 = dir.path().join("gen2");
    run_ok(&with_quick(&["gen", "--seed", "2", "--out", path(&gen2)]));
    assert_eq!(fs::read(&data).unwrap(), fs::read(gen2.join("dataset.json")).unwrap());
}

#[test]
fn compare_spaces_reports_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    run_ok(&with_quick(&["gen", "--preset", "vowel_mouth4", "--seed", "3", "--out", path(&gen)]));
    let data = gen.join("dataset.json");
    let out = dir.path().join("cmp");
    run_ok(&with_quick(&["compare-spaces", "--data", path(&data), "--set", "epochs=3", "--out", path(&out)]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("compare_spaces.json")).unwrap()).unwrap();
    assert!(v["hyperbolic"]["accuracy"].as_f64().is_some() && v["euclidean"]["accuracy"].as_f64().is_some(), "{v}");
}

#[test]
fn mine_and_constraint_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    run_ok(&with_quick(&["gen", "--seed", "4", "--out", path(&gen)]));
    let data = gen.join("dataset.json");
    let mine = dir.path().join("mine");
    run_ok(&with_quick(&["mine", "--data", path(&data), "--runs", "2", "--set", "epochs=3", "--out", path(&mine)]));
    assert!(mine.join("substructures.json").exists());
    let ce = dir.path().join("ce");
    run_ok(&with_quick(&["constraint-exp", "--data", path(&data), "--runs", "2", "--set", "epochs=3", "--out", path(&ce)]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(ce.join("constraint.json")).unwrap()).unwrap();
    let names: Vec<&str> = v["results"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["articulation", "mined", "none"]);
}
