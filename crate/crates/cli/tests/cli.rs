use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn mvad(args: &[&str]) -> Output {
    mvad_env(args, None)
}

fn mvad_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvad"));
    cmd.args(args).env_remove("MVAS_SEED");
    if let Some(s) = seed {
        cmd.env("MVAS_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
# tiny model for 16x16 inputs
preset=desk
model.resolution=16
model.views=2
model.stem_channels=4
model.channels=4,4,4
model.bottleneck=4
model.stages.0.a=2
model.stages.0.k=2
model.stages.1.a=1
model.stages.1.k=1
model.stages.1.blocks=0
model.stages.2.a=1
model.stages.2.k=1
model.stages.2.blocks=0
train.epochs=2
train.batch_samples=2
";

fn tiny_dataset(root: &Path, anomalous: usize) {
    ok(mvad(&[
        "generate",
        "--out",
        p(root),
        "--seed",
        "5",
        "--p-train",
        "4",
        "--p-test-normal",
        "3",
        "--p-test-anom",
        &anomalous.to_string(),
        "--views",
        "2",
        "--resolution",
        "16",
    ]));
}

#[test]
fn generate_counts_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let args = ["generate", "--seed", "7", "--p-train", "6", "--p-test-normal", "2", "--p-test-anom", "2", "--views", "3", "--resolution", "16", "--out", p(&root)];
    let first = ok(mvad(&args));
    assert!(String::from_utf8_lossy(&first.stdout).contains("6 train samples (18 images)"));
    let train_dirs = fs::read_dir(root.join("train")).unwrap().count();
    assert_eq!(train_dirs, 6);
    let manifest = fs::read(root.join("manifest.json")).unwrap();
    let again = ok(mvad(&args));
    assert!(String::from_utf8_lossy(&again.stdout).contains("unchanged"));
    assert_eq!(fs::read(root.join("manifest.json")).unwrap(), manifest);

    let mut other = args.to_vec();
    other[2] = "8";
    assert_eq!(code(&mvad(&other)), 2);
}

#[test]
fn generate_validation_and_png_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&mvad(&["generate", "--views", "1", "--out", p(&out)])), 2);
    assert_eq!(code(&mvad(&["generate", "--kinds", "dent", "--out", p(&out)])), 2);
    assert_eq!(code(&mvad(&["generate", "--p-train", "2"])), 2);

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"p_train": 1, "p_test_normal": 1, "p_test_anom": 1, "views": 2, "resolution": 16, "kinds": ["hole"]}"#).unwrap();
    ok(mvad(&["generate", "--spec", p(&spec), "--out", p(&out), "--png"]));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["spec"]["kinds"], serde_json::json!(["hole"]));
    let png = fs::read(out.join("png/test/00001/0.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    assert!(out.join("png/test/00001/1.mask.png").exists());
}

#[test]
fn bench_flops_only() {
    let start = Instant::now();
    let o = ok(mvad(&["bench", "--flops-only"]));
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# run_config=") && lines[0].contains("\"seed\""));
    assert_eq!(lines[1], "series,hw,c,v,a,k,flops,median_ns,slope");
    assert_eq!(lines.len(), 2 + 8);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    ok(mvad(&["bench", "--flops-only", "--hw", "256", "1024", "4096", "--out", p(&csv)]));
    let text = fs::read_to_string(&csv).unwrap();
    for s in ["mvas,", "dense,"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(s)).count(), 3);
    }
    let again = ok(mvad(&["bench", "--flops-only", "--hw", "256", "1024", "4096"]));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);

    assert_eq!(code(&mvad(&["bench", "--flops-only", "--a", "wide"])), 2);
    assert_eq!(code(&mvad(&["bench", "--flops-only", "--repeats", "4"])), 2);
    assert_eq!(code(&mvad(&["bench", "--flops-only", "--hw", "300"])), 2);
}

#[test]
fn bench_timed_small() {
    let o = ok(mvad(&["bench", "--hw", "16", "64", "--c", "4", "--v", "2", "--k", "2", "--a", "2"]));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| !r.split(',').nth(7).unwrap().is_empty()));
}

#[test]
fn train_eval_heatmap_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data, 3);
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();

    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    for out in [&run_a, &run_b] {
        ok(mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(out)]));
    }
    let trace = fs::read_to_string(run_a.join("loss_trace.csv")).unwrap();
    assert_eq!(trace, fs::read_to_string(run_b.join("loss_trace.csv")).unwrap());
    assert!(trace.starts_with("# run_config={"));
    // 4 samples, batch 2, 2 epochs
    assert_eq!(trace.lines().count(), 2 + 4);

    let ev_a = dir.path().join("ev_a");
    let ev_b = dir.path().join("ev_b");
    for (ck, out) in [(&run_a, &ev_a), (&run_b, &ev_b)] {
        let o = ok(mvad(&["eval", "--checkpoint", p(ck), "--data", p(&data), "--out", p(out)]));
        assert!(String::from_utf8_lossy(&o.stdout).contains("pixel"));
    }
    let report = fs::read_to_string(ev_a.join("report.json")).unwrap();
    assert_eq!(report, fs::read_to_string(ev_b.join("report.json")).unwrap());
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    for level in ["sample", "image"] {
        for m in ["auroc", "ap", "f1max"] {
            assert!(r[level][m].is_number(), "{level}.{m}");
        }
    }
    for m in ["auroc", "ap", "f1max", "pro"] {
        assert!(r["pixel"][m].is_number(), "pixel.{m}");
    }
    assert!(r["metadata"]["seed"].is_number());
    let scores = fs::read_to_string(ev_a.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 2 + 6);

    let heat_a = dir.path().join("heat_a");
    let heat_b = dir.path().join("heat_b");
    let sample = data.join("test/00004");
    for out in [&heat_a, &heat_b] {
        ok(mvad(&["heatmap", "--checkpoint", p(&run_a.join("checkpoint")), "--sample", p(&sample), "--out", p(out)]));
    }
    let pngs: Vec<_> = fs::read_dir(&heat_a).unwrap().collect();
    assert_eq!(pngs.len(), 2);
    for j in 0..2 {
        let a = fs::read(heat_a.join(format!("view{j}.png"))).unwrap();
        assert_eq!(a, fs::read(heat_b.join(format!("view{j}.png"))).unwrap());
        assert!(a.windows(15).any(|w| w == b"mvad_run_config"));
    }
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data, 1);
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, r#"{"preset": "desk", "seed": 11, "train": {"epochs": 1}, "model": {"resolution": 16, "views": 2, "stem_channels": 4, "channels": [4, 4, 4], "bottleneck": 4, "stages": [{"a": 2, "k": 2, "blocks": 1}, {"a": 1, "k": 1, "blocks": 0}, {"a": 1, "k": 1, "blocks": 0}]}}"#).unwrap();
    let seed_of = |out: &Path| -> u64 {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_config.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    let a = dir.path().join("a");
    ok(mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&a)]));
    assert_eq!(seed_of(&a), 11);
    let b = dir.path().join("b");
    ok(mvad_env(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&b)], Some("12")));
    assert_eq!(seed_of(&b), 12);
    let c = dir.path().join("c");
    ok(mvad_env(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&c), "--seed", "13"], Some("12")));
    assert_eq!(seed_of(&c), 13);
    assert_ne!(
        fs::read(a.join("loss_trace.csv")).unwrap(),
        fs::read(b.join("loss_trace.csv")).unwrap()
    );
    assert_eq!(code(&mvad_env(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&c)], Some("x"))), 2);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data, 1);
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]));

    // checkpoint/dataset mismatch
    let other = dir.path().join("other");
    ok(mvad(&["generate", "--out", p(&other), "--p-train", "1", "--p-test-normal", "1", "--p-test-anom", "1", "--views", "3", "--resolution", "16"]));
    let out = dir.path().join("ev");
    assert_eq!(code(&mvad(&["eval", "--checkpoint", p(&run), "--data", p(&other), "--out", p(&out)])), 5);
    assert_eq!(code(&mvad(&["train", "--config", p(&cfg), "--data", p(&other), "--out", p(&out)])), 5);

    // missing inputs
    assert_eq!(code(&mvad(&["eval", "--checkpoint", p(&dir.path().join("none")), "--data", p(&data), "--out", p(&out)])), 3);
    assert_eq!(code(&mvad(&["train", "--config", p(&dir.path().join("none.conf")), "--data", p(&data), "--out", p(&out)])), 3);

    // invalid settings
    assert_eq!(code(&mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--set", "train.nope=1"])), 2);
    assert_eq!(code(&mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--set", "model.stages.0.k=99"])), 2);
    assert_eq!(code(&mvad(&["eval", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&out), "--set", "train.lr=1"])), 2);
    assert_eq!(code(&mvad(&["train", "--preset", "huge", "--data", p(&data), "--out", p(&out)])), 2);

    // divergence
    let o = mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--lr", "1e30"]);
    assert_eq!(code(&o), 4, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn single_class_split_reports_nulls() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data, 0);
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(mvad(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]));
    let out = dir.path().join("ev");
    let o = ok(mvad(&["eval", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&out)]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("undefined"));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert!(r["sample"]["auroc"].is_null());
    assert!(r["pixel"]["pro"].is_null());
    assert!(r["undefined"]["sample.auroc"].is_string());
}
