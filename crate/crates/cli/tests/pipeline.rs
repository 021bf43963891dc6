use std::path::Path;
use std::process::Command;

fn splatseg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "splatseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_associate_query_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("spec.toml"),
        "instances = 3\npoints_per_instance = 150\ncameras = 4\nseed = 2\n\n[layout]\nkind = \"grid\"\nspacing = 1.0\n",
    )
    .unwrap();
    std::fs::write(
        d.join("train.toml"),
        "[train]\nstage1_iters = 1500\nstage2_iters = 300\nfeature_init_std = 0.03\nlog_every = 0\n\n\
         [train.codebook]\ncoarse_k = 3\nfine_k = 10\nfine_merge_distance = 0.5\n",
    )
    .unwrap();
    let gen = d.join("gen");
    let out = splatseg(&["synth", "--spec", p(&d.join("spec.toml")), "--out", p(&gen)]);
    assert!(out.starts_with("450 points, 4 cameras"), "{out}");
    for f in ["scene.bundle", "classes.emb", "labels.txt", "masks/view_0_mask_0.png"] {
        assert!(gen.join(f).exists(), "{f}");
    }

    let trained = d.join("trained.bundle");
    splatseg(&["train", "--scene", p(&gen.join("scene.bundle")), "--config", p(&d.join("train.toml")), "--out", p(&trained)]);
    let assoc = d.join("assoc.bundle");
    let out = splatseg(&["associate", "--scene", p(&trained), "--masks", p(&gen.join("masks")), "--out", p(&assoc)]);
    assert!(out.contains("received an embedding"), "{out}");

    let out = splatseg(&["eval3d", "--scene", p(&assoc), "--classes", p(&gen.join("classes.emb")), "--gt", p(&gen.join("labels.txt"))]);
    let miou: f64 = out
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(miou >= 0.9, "{out}");

    let out = splatseg(&["query", "--scene", p(&assoc), "--text-emb", p(&gen.join("classes.emb")), "--label", "class_1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    assert!(lines[1].split('\t').nth(1).unwrap().parse::<f64>().unwrap() > 0.9);
    let out = splatseg(&["query", "--scene", p(&assoc), "--text-emb", p(&gen.join("classes.emb")), "--threshold", "0.5"]);
    assert!(out.lines().count() >= 2);

    let out = splatseg(&["click", "--scene", p(&assoc), "--view", "0", "--pixel", "0,0"]);
    assert_eq!(out.trim(), "none");

    let png = d.join("view.png");
    splatseg(&["export", "--scene", p(&assoc), "--view", "1", "--out", p(&png)]);
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    splatseg(&["export", "--scene", p(&assoc), "--view", "1", "--out", p(&d.join("pca.png")), "--pca"]);
    assert!(d.join("pca.png").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .args(["query", "--scene", p(&d.join("missing.bundle")), "--text-emb", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bundle"));

    let out = Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .args(["click", "--scene", "s", "--view", "0", "--pixel", "3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
