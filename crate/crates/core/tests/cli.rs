use std::path::Path;
use std::process::{Command, Output};

use dehaze::cli::pnm;
use dehaze::pipeline::{Models, TrainConfig};
use dehaze::ImagePlane;

fn dehaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dehaze"))
        .args(args)
        .env("DEHAZE_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dehaze(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dehaze(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["clean", "depth", "hazy"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for n in names {
            out.push((n.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&n).unwrap()));
        }
    }
    out.push(("manifest".into(), std::fs::read(dir.join("manifest.tsv")).unwrap()));
    out
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = TrainConfig::from_toml(TINY).unwrap();
    let m = Models::new((&cfg).into(), 3).unwrap();
    let path = dir.join("tiny.ckpt");
    dehaze::pipeline::save_checkpoint(&path, &m.to_checkpoint(&cfg)).unwrap();
    path
}

const TINY: &str = r#"
stage = 1
patch_size = 16
batch_size = 2
iterations = 2
batch_updates_per_iteration = 2
t1 = 6
seed = 4
val_scenes = 1
train_pool = 4

[transmission]
widths = [4]

[atmospheric]
widths = [4]
groups = 2

[ipudn]
features = 4
res_blocks = 1
updater_width = 4
updater_blocks = 1
"#;

#[test]
fn gen_data_is_seeded_and_banded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--out", s(d), "--count", "3", "--seed", "9", "--haze", "mid"]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let beta: f64 = r.split('\t').nth(2).unwrap().parse().unwrap();
        assert!((1.0..=1.7).contains(&beta));
    }
    let c = tmp.path().join("c");
    ok(&["gen-data", "--out", s(&c), "--count", "4", "--seed", "1", "--haze", "cast"]);
    let manifest = std::fs::read_to_string(c.join("manifest.tsv")).unwrap();
    for r in manifest.lines().skip(1) {
        let a: Vec<f64> = r.split('\t').skip(3).map(|v| v.parse().unwrap()).collect();
        let spread = a.iter().copied().fold(f64::MIN, f64::max) - a.iter().copied().fold(f64::MAX, f64::min);
        assert!(spread > 0.05, "{r}");
    }
    let img = pnm::read_ppm(c.join("hazy/0000.ppm")).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));
}

#[test]
fn synth_dcp_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "2", "--seed", "3", "--haze", "low"]);
    let pred = tmp.path().join("pred");
    std::fs::create_dir(&pred).unwrap();
    for n in ["0000", "0001"] {
        let hazy = data.join(format!("hazy/{n}.ppm"));
        ok(&["dehaze-dcp", "--in", s(&hazy), "--out", s(&pred.join(format!("{n}.ppm")))]);
    }
    let synth_out = tmp.path().join("synth.ppm");
    let t_out = tmp.path().join("t.pgm");
    ok(&[
        "synth", "--clean", s(&data.join("clean/0000.ppm")), "--depth", s(&data.join("depth/0000.pgm")),
        "--beta", "1.0", "--airlight", "0.9,0.85,0.8", "--out", s(&synth_out), "--transmission-out", s(&t_out),
    ]);
    assert_eq!(pnm::read_pgm(&t_out).unwrap().channels(), 1);

    let report = tmp.path().join("r.tsv");
    let gt = data.join("clean");
    let text = ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--report", s(&report)]);
    assert!(text.contains("mean"));
    let tsv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert_eq!(lines[3], "mean\t99.000000\t1.000000\t0.000000");

    ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report)]);
    let tsv = std::fs::read_to_string(&report).unwrap();
    let vals: Vec<Vec<f64>> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    for col in 0..3 {
        let mean = (vals[0][col] + vals[1][col]) / 2.0;
        assert!((vals[2][col] - mean).abs() < 1e-6);
    }

    std::fs::remove_file(pred.join("0001.ppm")).unwrap();
    let out = dehaze(&["eval", "--pred", s(&pred), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0001.ppm"));
}

#[test]
fn dehaze_trace_and_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(tmp.path());
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--count", "1", "--seed", "2", "--haze", "high"]);
    let hazy = data.join("hazy/0000.ppm");
    let (one, six) = (tmp.path().join("one.ppm"), tmp.path().join("six.ppm"));
    let trace = tmp.path().join("trace");
    ok(&["dehaze", "--in", s(&hazy), "--checkpoint", s(&ckpt), "--out", s(&one), "--steps", "1"]);
    ok(&["dehaze", "--in", s(&hazy), "--checkpoint", s(&ckpt), "--out", s(&six), "--trace", s(&trace)]);
    let (a, b) = (pnm::read_ppm(&one).unwrap(), pnm::read_ppm(&six).unwrap());
    assert_eq!((b.height(), b.width()), (64, 64));
    assert_ne!(a, b);
    for k in 0..=6 {
        assert!(trace.join(format!("i_{k:02}.ppm")).exists());
        assert!(trace.join(format!("t_{k:02}.pgm")).exists());
    }
    let table = std::fs::read_to_string(trace.join("airlight.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 7);
    let printed = ok(&["trace", "--in", s(&hazy), "--checkpoint", s(&ckpt), "--out", s(&tmp.path().join("t2"))]);
    assert_eq!(printed, table);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["dehaze", "--bogus"]), 1);
    assert_eq!(code(&["nonsense"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let missing = tmp.path().join("missing.ppm");
    assert_eq!(code(&["dehaze-dcp", "--in", s(&missing), "--out", s(&tmp.path().join("o.ppm"))]), 2);
    let bad = tmp.path().join("bad.ppm");
    std::fs::write(&bad, b"P6\n2 2\n255\n\x00").unwrap();
    let out = dehaze(&["dehaze-dcp", "--in", s(&bad), "--out", s(&tmp.path().join("o.ppm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let ckpt = tiny_checkpoint(tmp.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    // the fingerprint text starts after magic, version and its length
    bytes[16] ^= 0x20;
    let altered = tmp.path().join("altered.ckpt");
    std::fs::write(&altered, &bytes).unwrap();
    let img = tmp.path().join("img.ppm");
    pnm::write_ppm(&img, &ImagePlane::filled(64, 64, 3, 0.5)).unwrap();
    let out = dehaze(&["dehaze", "--in", s(&img), "--checkpoint", s(&altered), "--out", s(&tmp.path().join("o.ppm"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let garbage = tmp.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&["dehaze", "--in", s(&img), "--checkpoint", s(&garbage), "--out", s(&tmp.path().join("o.ppm"))]), 2);
    assert_eq!(code(&["train", "--stage", "2", "--out", s(&tmp.path().join("x.ckpt"))]), 1);
}

#[test]
fn train_interrupt_and_resume_matches_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let full = tmp.path().join("full.ckpt");
    let log = ok(&["train", "--config", s(&cfg), "--out", s(&full)]);
    assert_eq!(log.lines().count(), 1 + 3);

    let state = tmp.path().join("state.ckpt");
    let split = tmp.path().join("split.ckpt");
    ok(&["train", "--config", s(&cfg), "--out", s(&split), "--state", s(&state), "--max-updates", "3"]);
    assert!(!split.exists());
    ok(&["train", "--resume", s(&state), "--out", s(&split), "--state", s(&state)]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&split).unwrap());

    let stage2 = tmp.path().join("s2.ckpt");
    let log = ok(&["train", "--config", s(&cfg), "--stage", "2", "--init", s(&full), "--out", s(&stage2)]);
    assert!(log.starts_with("stage\titeration\tlr\ttrain_total"));
    let printed = ok(&["train", "--config", s(&cfg), "--stage", "3", "--print-config", "--out", "unused"]);
    assert_eq!(TrainConfig::from_toml(&printed).unwrap().stage, 3);
}
