use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use promptseg_cli::inference::png_bytes;
use promptseg_cli::testing::{gray_png, square_mask_png, tiny_model};
use serde_json::Value;

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .env_remove("PROMPTSEG_CHECKPOINT")
        .output()
        .unwrap()
}

fn checkpoint(dir: &Path) -> String {
    let path = dir.join("tiny.safetensors");
    tiny_model().save(&path, &BTreeMap::new()).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn predict_writes_single_channel_mask() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let img = dir.path().join("img.png");
    std::fs::write(&img, gray_png(48, 30)).unwrap();
    let out = dir.path().join("mask.png");
    let prob = dir.path().join("prob.png");
    let o = promptseg(&[
        "predict", "--checkpoint", &ckpt, "--image", s(&img), "--text", "red circle", "--out", s(&out), "--prob-out",
        s(&prob),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = image::open(&out).unwrap();
    assert!(matches!(mask, image::DynamicImage::ImageLuma8(_)));
    assert_eq!((mask.width(), mask.height()), (48, 30));
    assert!(matches!(image::open(&prob).unwrap(), image::DynamicImage::ImageLuma16(_)));
}

#[test]
fn predict_with_visual_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let img = dir.path().join("img.png");
    let mask = dir.path().join("support_mask.png");
    std::fs::write(&img, gray_png(32, 32)).unwrap();
    std::fs::write(&mask, square_mask_png(32, 32)).unwrap();
    let out = dir.path().join("mask.png");
    let o = promptseg(&[
        "predict", "--checkpoint", &ckpt, "--image", s(&img), "--support-image", s(&img), "--support-mask", s(&mask),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
}

#[test]
fn unknown_flag_exits_2_with_suggestion() {
    let o = promptseg(&["predict", "--treshold", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--threshold"), "{err}");
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let o = promptseg(&[
        "predict", "--checkpoint", &ckpt, "--image", "x.png", "--text", "a", "--out", "y.png", "--threshold", "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_checkpoint_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = promptseg(&[
        "predict", "--checkpoint", s(&dir.path().join("none.safetensors")), "--image", "x.png", "--text", "a", "--out",
        "y.png",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn help_exits_0() {
    let o = promptseg(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    for cmd in ["train", "eval", "predict", "build-dataset", "prompt-bench", "serve"] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn build_dataset_synthetic_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = promptseg(&["build-dataset", "--synthetic", "20", "--out", s(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 20);
    for r in &records {
        assert!(out.join(r["image"].as_str().unwrap()).exists());
    }

    // rebuilding from the index in another directory keeps paths valid
    let again = dir.path().join("again");
    let o = promptseg(&["build-dataset", "--input", s(&out.join("records.jsonl")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(again.join("records.jsonl")).unwrap();
    for l in text.lines() {
        let r: Value = serde_json::from_str(l).unwrap();
        assert!(again.join(r["image"].as_str().unwrap()).exists(), "{l}");
    }
}

#[test]
fn eval_zeroshot_reports_seen_and_unseen() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let out = dir.path().join("report.json");
    let o = promptseg(&[
        "eval", "--protocol", "zeroshot", "--checkpoint", &ckpt, "--synthetic", "12", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["protocol"], "zeroshot");
    assert!(v.get("mIoU_S").is_some() && v.get("mIoU_U").is_some(), "{v}");
}

#[test]
fn eval_referring_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let out = dir.path().join("report.json");
    let o = promptseg(&[
        "eval", "--protocol", "referring", "--checkpoint", &ckpt, "--synthetic", "6", "--out", s(&out), "--threshold",
        "best",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["protocol"], "referring");
}

#[test]
fn eval_without_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = promptseg(&["eval", "--protocol", "referring", "--synthetic", "2", "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prompt_bench_writes_one_row_per_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for i in 0..2 {
        let img = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, (i * 90) as u8]));
        std::fs::write(dir.path().join(format!("i{i}.png")), png_bytes(&img).unwrap()).unwrap();
        std::fs::write(dir.path().join(format!("m{i}.png")), square_mask_png(32, 32)).unwrap();
        lines.push_str(&format!(
            "{{\"image\":\"i{i}.png\",\"mask\":\"m{i}.png\",\"target\":\"cat\",\"distractors\":[\"dog\",\"car\"]}}\n"
        ));
    }
    let samples = dir.path().join("samples.jsonl");
    std::fs::write(&samples, lines).unwrap();
    let csv = dir.path().join("bench.csv");
    let recipes = "crop_bg_blur,bg_intensity_0";
    let o = promptseg(&[
        "prompt-bench", "--samples", s(&samples), "--backbone", "tiny", "--recipes", recipes, "--out", s(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{text}");
    for (row, id) in rows.iter().zip(recipes.split(',')) {
        assert!(row.starts_with(id), "{row}");
    }
}
