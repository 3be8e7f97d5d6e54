mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use image::GenericImageView;

use infostyler::encoder::{save_encoder, EncoderArch, EncoderWeights};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infostyler"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    content_dir: PathBuf,
    style_dir: PathBuf,
    checkpoint: PathBuf,
    run_dir: PathBuf,
    content: PathBuf,
}

/// A corpus and a briefly trained checkpoint shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let (c, s) = common::smoke_corpus(&root.join("data"), 5, 48);
        let run_dir = root.join("run");
        let o = run(&[
            "train", "--content-dir", c.to_str().unwrap(), "--style-dir", s.to_str().unwrap(), "--steps", "3",
            "--size", "32", "--encoder", "tiny", "--out", run_dir.to_str().unwrap(), "--lr", "0.001",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let content = root.join("content_40x24.png");
        common::content_image(3, 40).view(0, 0, 40, 24).to_image().save(&content).unwrap();
        Fixture {
            checkpoint: run_dir.join("final.safetensors"),
            _dir: dir,
            root,
            content_dir: c,
            style_dir: s,
            run_dir,
            content,
        }
    })
}

fn style(i: usize) -> String {
    fixture().style_dir.join(format!("s{i:02}.png")).display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["train", "stylize", "interpolate", "inspect-info", "evaluate"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("--out"), "{sub} help lists --out");
        assert!(text.contains("--seed") || sub == "train" && text.contains("seed"), "{sub} help lists --seed");
    }
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--content-dir", "x", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--style-dir"));
    assert_eq!(code(&run(&["stylize", "--nope"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn corrupt_corpus_exits_two_naming_file() {
    let dir = tempfile::tempdir().unwrap();
    let (c, s_dir) = common::smoke_corpus(dir.path(), 2, 32);
    std::fs::write(c.join("broken.png"), b"definitely not a png").unwrap();
    let o = run(&[
        "train", "--content-dir", s(&c), "--style-dir", s(&s_dir), "--steps", "1", "--size", "32",
        "--out", s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.png"));
}

#[test]
fn train_writes_only_inside_out() {
    let f = fixture();
    let mut entries: Vec<String> = std::fs::read_dir(&f.root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert!(entries.iter().all(|e| ["data", "run", "content_40x24.png"].contains(&e.as_str()) || e.starts_with("t_")));
    assert!(f.checkpoint.exists());
    let latest = std::fs::read_to_string(f.run_dir.join("latest.json")).unwrap();
    assert!(latest.contains("final.safetensors"));
    let log = std::fs::read_to_string(f.run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["info", "content", "style", "rec", "total"] {
            assert!(v[k].as_f64().unwrap().is_finite());
        }
        assert_eq!(v["mi_content_bits"].as_array().unwrap().len(), 4);
    }
}

#[test]
fn stylize_shape_and_determinism() {
    let f = fixture();
    let out = f.root.join("t_stylize");
    let args = |name: &str, extra: &[&str]| {
        let mut v = vec![
            "stylize".to_string(), "--checkpoint".into(), s(&f.run_dir).into(), "--content".into(),
            s(&f.content).into(), "--style".into(), style(0), "--out".into(), s(&out).into(), "--name".into(), name.into(),
        ];
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    for (name, extra) in [
        ("d1.png", vec![]),
        ("d2.png", vec!["--deterministic"]),
        ("s7a.png", vec!["--sample", "--seed", "7"]),
        ("s7b.png", vec!["--sample", "--seed", "7"]),
        ("s8.png", vec!["--sample", "--seed", "8"]),
    ] {
        let o = bin().args(args(name, &extra)).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |n: &str| std::fs::read(out.join(n)).unwrap();
    assert_eq!(image::image_dimensions(out.join("d1.png")).unwrap(), (40, 24));
    assert_eq!(read("d1.png"), read("d2.png"));
    assert_eq!(read("s7a.png"), read("s7b.png"));
    assert_ne!(read("s7a.png"), read("s8.png"));
    assert_eq!(code(&run(&["stylize", "--checkpoint", s(&f.checkpoint), "--content", s(&f.content), "--style", &style(0), "--out", s(&out), "--deterministic", "--sample"])), 1);
}

#[test]
fn interpolate_sweep_endpoints() {
    let f = fixture();
    let out = f.root.join("t_sweep");
    let styles = format!("{},{}", style(0), style(1));
    let o = run(&["interpolate", "--checkpoint", s(&f.checkpoint), "--content", s(&f.content), "--styles", &styles, "--sweep", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweeps: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("sweep_"))
        .collect();
    assert_eq!(sweeps.len(), 5);
    for (i, sidx) in [(0, 0), (4, 1)] {
        let o = run(&["stylize", "--checkpoint", s(&f.checkpoint), "--content", s(&f.content), "--style", &style(sidx), "--out", s(&out), "--name", &format!("single{sidx}.png")]);
        assert_eq!(code(&o), 0);
        assert_eq!(
            std::fs::read(out.join(format!("sweep_{i:02}.png"))).unwrap(),
            std::fs::read(out.join(format!("single{sidx}.png"))).unwrap()
        );
    }
    let four = format!("{},{},{},{}", style(0), style(1), style(2), style(3));
    let grid = f.root.join("t_grid");
    assert_eq!(code(&run(&["interpolate", "--checkpoint", s(&f.checkpoint), "--content", s(&f.content), "--styles", &four, "--sweep", "3", "--out", s(&grid)])), 0);
    assert!(grid.join("sweep_02_02.png").exists() && grid.join("grid.png").exists());
    assert_eq!(code(&run(&["interpolate", "--checkpoint", s(&f.checkpoint), "--content", s(&f.content), "--styles", &styles, "--weights", "0.6,0.6", "--out", s(&out)])), 1);
}

#[test]
fn inspect_info_artifacts() {
    let f = fixture();
    let out = f.root.join("t_inspect");
    let o = run(&["inspect-info", "--checkpoint", s(&f.checkpoint), "--image", s(&f.content), "--branch", "content", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 4);
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 1);
    let csv = std::fs::read_to_string(out.join("cib_mi.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let nats: f64 = cols[2].parse().unwrap();
        let bits: f64 = cols[3].parse().unwrap();
        assert!((bits - nats / std::f64::consts::LN_2).abs() <= 1e-9);
    }
    assert_eq!(code(&run(&["inspect-info", "--checkpoint", s(&f.checkpoint), "--image", s(&f.content), "--branch", "texture", "--out", s(&out)])), 1);
}

#[test]
fn evaluate_report_rows_and_probes() {
    let f = fixture();
    let a = f.root.join("t_eval_a");
    let b = f.root.join("t_eval_b");
    for out in [&a, &b] {
        let o = run(&[
            "evaluate", "--checkpoint", s(&f.checkpoint), "--content-dir", s(&f.content_dir), "--style-dir", s(&f.style_dir),
            "--n-content", "4", "--n-style", "4", "--size", "32", "--seed", "3", "--probe", "blackline", "--probe", "black",
            "--mi-table", "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_pair_rows"].as_array().unwrap().len(), 16);
    assert_eq!(report["probes"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
    assert_eq!(std::fs::read_to_string(a.join("report.csv")).unwrap().lines().count(), 17);
    assert!(a.join("mi_table.csv").exists());
}

#[test]
fn mismatched_or_damaged_inputs_exit_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let enc = dir.path().join("enc4.safetensors");
    save_encoder(&EncoderWeights::random(EncoderArch { width_divisor: 4 }, 1).unwrap(), &enc).unwrap();
    let out = dir.path().join("out");
    let o = run(&["stylize", "--checkpoint", s(&f.checkpoint), "--content", s(&f.content), "--style", &style(0), "--out", s(&out), "--encoder", s(&enc)]);
    assert_eq!(code(&o), 2);
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"\x08\x00\x00\x00\x00\x00\x00\x00{}").unwrap();
    assert_eq!(code(&run(&["stylize", "--checkpoint", s(&junk), "--content", s(&f.content), "--style", &style(0), "--out", s(&out)])), 2);
}
