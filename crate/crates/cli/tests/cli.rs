use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cloudfill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudfill")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cloudfill(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = cloudfill(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

const TINY: &str = r#"
epochs = 2
batch_size = 4
seed = 5
eval_cloud_counts = [0, 3]
validate_each_epoch = false

[vit]
variant = "smts_vit"
patch = 5
depth = 1
heads = 2
dim = 8
image_size = 10
"#;

/// A one-scene dataset and a tiny run config next to it.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth-data", "--seed", "9", "--n-scenes", "1", "--height", "60", "--width", "60", "--out", s(&data)]);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, format!("manifest = \"data/manifest.json\"\n{TINY}")).unwrap();
    (tmp, data.join("manifest.json"), cfg)
}

#[test]
fn synth_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&["synth-data", "--seed", "3", "--n-scenes", "1", "--height", "60", "--width", "60", "--out", s(&a)]);
    assert!(stdout.contains("1 scenes"));
    ok(&["synth-data", "--seed", "3", "--n-scenes", "1", "--height", "60", "--width", "60", "--out", s(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"msi_path\"").count(), 1);
}

#[test]
fn synth_data_zero_scenes_gives_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("empty");
    ok(&["synth-data", "--n-scenes", "0", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(text.contains("\"scenes\": []"));
}

#[test]
fn invalid_arguments_write_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("never");
    fail(&["synth-data", "--height", "30", "--out", s(&out)]);
    assert!(!out.exists());
    fail(&["synth-data"]);
    let mask = tmp.path().join("m.tsr");
    fail(&["make-clouds", "--frames", "0", "--out", s(&mask)]);
    assert!(!mask.exists());
}

#[test]
fn make_clouds_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.tsr"), tmp.path().join("b.tsr"));
    let stdout = ok(&["make-clouds", "--seed", "4", "--out", s(&a)]);
    assert!(stdout.starts_with("coverage "));
    ok(&["make-clouds", "--seed", "4", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn train_eval_render_round() {
    let (tmp, manifest, cfg) = fixture();
    let run_a = tmp.path().join("runs_a");
    let run_b = tmp.path().join("runs_b");
    ok(&["train", "--config", s(&cfg), "--out", s(&run_a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&run_b)]);
    let log = |root: &Path, f: &str| fs::read(root.join("smts_vit/seed-5").join(f)).unwrap();
    assert_eq!(log(&run_a, "train_log.csv"), log(&run_b, "train_log.csv"));
    let ep1 = |root: &Path| dir_bytes(&root.join("smts_vit/seed-5/epoch-001"));
    assert_eq!(ep1(&run_a), ep1(&run_b));
    assert!(!ep1(&run_a).is_empty());
    let ckpt = run_a.join("smts_vit/seed-5/final");

    let csv = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--cloud-counts", "0,3", "--baseline"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "model,variant,seed,cloud_count,split,n_tiles,mse,sam,psnr,ssim,mse_masked,sam_masked,psnr_masked,ssim_masked"
    );
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("SMTS-ViT,smts_vit,5,0,val,"));
    let metrics = tmp.path().join("m.csv");
    ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--cloud-counts", "3", "--out", s(&metrics)]);
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 2);

    let (png_a, png_b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    let tile = "scene-000@0,10";
    let args = |out: &Path| {
        vec!["render", "--manifest", s(&manifest), "--tile", tile, "--checkpoint", s(&ckpt), "--mask-seed", "2"]
            .into_iter()
            .map(str::to_string)
            .chain(["--out".to_string(), s(out).to_string()])
            .collect::<Vec<_>>()
    };
    let a: Vec<String> = args(&png_a);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let b: Vec<String> = args(&png_b);
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    let bytes = fs::read(&png_a).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    assert_eq!(bytes, fs::read(&png_b).unwrap());
    let err = fail(&["render", "--manifest", s(&manifest), "--tile", "nope@0,0", "--out", s(&png_a)]);
    assert!(err.contains("nope@0,0"));
}

#[test]
fn train_reports_missing_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, format!("manifest = \"absent/manifest.json\"\n{TINY}")).unwrap();
    let err = fail(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("runs"))]);
    assert!(err.contains("absent/manifest.json"), "{err}");
    fs::write(&cfg, "epochs = 0\n").unwrap();
    let err = fail(&["train", "--config", s(&cfg)]);
    assert!(err.contains("epochs"), "{err}");
}

#[test]
fn eval_rejects_unreadable_checkpoint() {
    let (tmp, manifest, _) = fixture();
    let bogus = tmp.path().join("bogus");
    fs::create_dir_all(&bogus).unwrap();
    let err = fail(&["eval", "--checkpoint", s(&bogus), "--manifest", s(&manifest)]);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck", "--ops-only"]);
    assert!(out.contains("all checks passed"));
    assert!(out.contains("conv2d"));
    let bad = cloudfill(&["gradcheck", "--ops-only", "--corrupt-grad", "1.5"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
