use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[data]
stride = 2

[prior]
window = 11
hidden = 32
latent = 16
codes = 8
enc_blocks = 2

[prior_train]
epochs = 3
batch = 16

[model]
window = 11
width = 32
depth = 2
memory_layers = [2]
predictor_depth = 1
code_dim = 16

[train]
batch = 8
log_every = 0

[train.schedule]
total = 300
drop_at = 250
lr0 = 1e-3
lr1 = 1e-4
"#;

fn memmlp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memmlp"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = memmlp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value(text: &str, section: &str, key: &str) -> f64 {
    let mut current = "";
    for line in text.lines() {
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = s;
        } else if current == section {
            if let Some(v) = line.strip_prefix(&format!("{key}=")) {
                return v.parse().unwrap();
            }
        }
    }
    panic!("{section}.{key} missing from\n{text}")
}

/// Synthesises clips and trains a prior and a model with the small config.
fn trained(dir: &Path, steps: u32) -> (PathBuf, PathBuf, PathBuf) {
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();
    let cfg = ["--config", "small.toml"];
    ok(
        dir,
        &[
            &cfg[..],
            &["synth", "--count", "3", "--duration", "4", "--out", "clips"],
        ]
        .concat(),
    );
    ok(
        dir,
        &[&cfg[..], &["train-prior", "--data", "clips", "--out", "prior.mmwt"]].concat(),
    );
    ok(
        dir,
        &[
            &cfg[..],
            &[
                "train",
                "--data",
                "clips",
                "--prior",
                "prior.mmwt",
                "--out",
                "model.mmwt",
                "--steps",
                &steps.to_string(),
            ],
        ]
        .concat(),
    );
    (dir.join("clips"), dir.join("prior.mmwt"), dir.join("model.mmwt"))
}

#[test]
fn synth_names_files_by_kind_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "--seed",
            "7",
            "synth",
            "--kind",
            "squat",
            "--count",
            "2",
            "--duration",
            "1",
            "--out",
            "c",
        ],
    );
    let names: Vec<&str> = out.lines().map(|l| l.rsplit('/').next().unwrap()).collect();
    assert_eq!(names, ["squat_0007.json", "squat_0008.json"]);
    ok(
        dir.path(),
        &[
            "--seed",
            "7",
            "synth",
            "--kind",
            "squat",
            "--duration",
            "1",
            "--binary",
            "--out",
            "b",
        ],
    );
    assert!(dir.path().join("b/squat_0007.mclp").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            dir.path(),
            &["--seed", "4", "synth", "--duration", "2", "--binary", "--out", out],
        );
    }
    let a = std::fs::read(dir.path().join("a/walk_0004.mclp")).unwrap();
    let b = std::fs::read(dir.path().join("b/walk_0004.mclp")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, 2000);

    // Smoothed loss over the first and last steps of the log.
    let log = std::fs::read_to_string(d.join("model.mmwt.loss.csv")).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            f[2] + f[3] + f[4] + f[5]
        })
        .collect();
    assert_eq!(totals.len(), 2000);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&totals[..20]), mean(&totals[1980..]));
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");

    let cfg = ["--config", "small.toml"];
    let base = [
        "eval",
        "--model",
        "model.mmwt",
        "--prior",
        "prior.mmwt",
        "--data",
        "clips",
    ];
    let plain = ok(d, &[&cfg[..], &base[..]].concat());
    for section in ["position_branch", "rotation_branch"] {
        for key in ["mpjre_deg", "mpjpe_cm", "mpjve_cm_s", "jitter_1e2_m_s3"] {
            assert!(value(&plain, section, key).is_finite());
        }
    }
    assert!(!plain.contains("[ik]"));
    let with_ik = ok(d, &[&cfg[..], &base[..], &["--ik"]].concat());
    // Refinement pulls the rotation pathway toward the position branch.
    assert!(value(&with_ik, "ik", "mpjpe_cm") <= value(&with_ik, "rotation_branch", "mpjpe_cm"));
    assert_eq!(
        value(&plain, "rotation_branch", "mpjpe_cm"),
        value(&with_ik, "rotation_branch", "mpjpe_cm")
    );
    let json = ok(d, &[&cfg[..], &base[..], &["--json"]].concat());
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed["clips"], 3);

    let infer = [
        "infer",
        "--model",
        "model.mmwt",
        "--prior",
        "prior.mmwt",
        "--input",
        "clips/walk_0003.json",
        "--output",
        "pred.mclp",
    ];
    ok(d, &[&cfg[..], &infer[..]].concat());
    let first = std::fs::read(d.join("pred.mclp")).unwrap();
    ok(d, &[&cfg[..], &infer[..]].concat());
    assert_eq!(first, std::fs::read(d.join("pred.mclp")).unwrap());
    ok(d, &[&cfg[..], &infer[..], &["--ik", "--ik-iters", "3"]].concat());

    let bench = ok(
        d,
        &[
            "bench",
            "--model",
            "model.mmwt",
            "--prior",
            "prior.mmwt",
            "--frames",
            "50",
            "--warmup",
            "5",
            "--json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(report["frames"], 50);
    assert!(report["mean_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| memmlp(d, args).status.code().unwrap();

    assert_eq!(code(&["eval", "--model", "missing.mmwt", "--data", "missing"]), 3);
    std::fs::write(d.join("bad.toml"), "[model]\nwidht = 8\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "synth", "--out", "c"]), 4);
    std::fs::write(d.join("garbage.mmwt"), b"not a checkpoint").unwrap();
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&["eval", "--model", "garbage.mmwt", "--data", "empty"]), 7);
    assert_eq!(code(&["synth", "--duration", "0", "--out", "c"]), 5);
    assert_eq!(code(&["frobnicate"]), 2);

    let err = memmlp(d, &["--config", "bad.toml", "synth", "--out", "c"]);
    assert!(String::from_utf8_lossy(&err.stderr).starts_with("error: "));
}

#[test]
fn memory_model_requires_prior() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, 20);
    let out = memmlp(
        d,
        &[
            "--config",
            "small.toml",
            "train",
            "--data",
            "clips",
            "--out",
            "m2.mmwt",
            "--steps",
            "5",
        ],
    );
    assert_eq!(out.status.code(), Some(5));
    let out = memmlp(d, &["eval", "--model", "model.mmwt", "--data", "clips"]);
    assert_eq!(out.status.code(), Some(5));
    let out = memmlp(
        d,
        &[
            "bench",
            "--model",
            "model.mmwt",
            "--prior",
            "prior.mmwt",
            "--threads",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn rest_pose_model_scores_near_zero_on_still_clips() {
    use memmlp::model::{MemMlp, MemMlpConfig};
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--kind",
            "still",
            "--count",
            "2",
            "--duration",
            "2",
            "--out",
            "still",
        ],
    );
    let cfg = MemMlpConfig {
        window: 11,
        width: 16,
        depth: 2,
        memory_layers: vec![],
        multi_head: false,
        ..Default::default()
    };
    // Zero output weights and an identity bias: every joint at rest.
    let mut model = MemMlp::<f32>::new(cfg, 0).unwrap();
    let w = model.store.find("rot_head.out.w").unwrap();
    model.store.value_mut(w).fill(0.0);
    let b = model.store.find("rot_head.out.b").unwrap();
    for (i, v) in model.store.value_mut(b).iter_mut().enumerate() {
        *v = if i % 6 == 0 || i % 6 == 4 { 1.0 } else { 0.0 };
    }
    model.save(&d.join("rest.mmwt")).unwrap();

    let out = ok(d, &["eval", "--model", "rest.mmwt", "--data", "still"]);
    for section in ["position_branch", "rotation_branch"] {
        assert!(value(&out, section, "mpjpe_cm") < 1e-3, "{out}");
        assert!(value(&out, section, "mpjre_deg") < 1e-3, "{out}");
    }
}
