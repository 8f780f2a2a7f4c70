use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use skinseg_core::data::{read_mask_png, write_mask_png};
use skinseg_core::BinaryMask;
use tempfile::TempDir;

fn skinseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skinseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to spawn skinseg")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), stderr(out));
}

fn synth(dir: &Path, count: usize, size: usize) {
    let count = count.to_string();
    let size = size.to_string();
    ok(&skinseg(&["synth", "--count", &count, "--size", &size, "--seed", "0", "--out", "d"], dir));
}

fn train(dir: &Path, out: &str, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--manifest", "d/manifest.tsv", "--preset", "desk", "--size", "32", "--seed", "3", "--epochs", epochs, "--out", out,
    ];
    args.extend_from_slice(extra);
    skinseg(&args, dir)
}

fn log_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(skinseg(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(skinseg(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(skinseg(&["train", "--manifest", "m.tsv", "--out", "x"], tmp.path()).status.code(), Some(1));
}

#[test]
fn zero_epochs_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 2, 32);
    let out = train(tmp.path(), "m.ckpt", "0", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));
    assert!(!tmp.path().join("m.ckpt").exists());
}

#[test]
fn size_must_be_multiple_of_32() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 2, 32);
    let out = skinseg(
        &["train", "--manifest", "d/manifest.tsv", "--preset", "desk", "--size", "48", "--epochs", "1", "--out", "m.ckpt"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 2, 32);
    fs::write(tmp.path().join("run.cfg"), "preset = desk\nsize = 32\nmanifest = d/manifest.tsv\nout = cfg.ckpt\nseed = 3\n").unwrap();
    ok(&skinseg(&["train", "--config", "run.cfg", "--epochs", "1"], tmp.path()));
    ok(&skinseg(&["train", "--config", "run.cfg", "--epochs", "1", "--out", "flag.ckpt"], tmp.path()));
    assert!(tmp.path().join("cfg.ckpt").exists());
    assert_eq!(fs::read(tmp.path().join("cfg.ckpt")).unwrap(), fs::read(tmp.path().join("flag.ckpt")).unwrap());

    fs::write(tmp.path().join("bad.cfg"), "prest = desk\n").unwrap();
    let out = skinseg(&["train", "--config", "bad.cfg", "--epochs", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("prest"));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = skinseg(&["train", "--manifest", "nope.tsv", "--epochs", "1", "--out", "m.ckpt", "--preset", "desk"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn log_has_one_line_per_epoch() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 3, 32);
    ok(&train(tmp.path(), "m.ckpt", "3", &[]));
    let lines = log_lines(&tmp.path().join("m.ckpt.log"));
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 3, "{l}");
        assert_eq!(f[0], (i + 1).to_string());
        let loss: f64 = f[1].parse().unwrap();
        let ja: f64 = f[2].parse().unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!((0.0..=1.0).contains(&ja));
    }
}

#[test]
fn resume_continues_bit_exactly() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 3, 32);
    ok(&train(tmp.path(), "full.ckpt", "4", &[]));
    ok(&train(tmp.path(), "half.ckpt", "2", &[]));
    ok(&train(tmp.path(), "resumed.ckpt", "2", &["--init", "half.ckpt", "--start-epoch", "2"]));
    let full = log_lines(&tmp.path().join("full.ckpt.log"));
    let resumed = log_lines(&tmp.path().join("resumed.ckpt.log"));
    assert_eq!(resumed, full[2..].to_vec());
    assert_eq!(fs::read(tmp.path().join("full.ckpt")).unwrap(), fs::read(tmp.path().join("resumed.ckpt")).unwrap());
}

#[test]
fn partial_init_is_accepted() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 2, 32);
    ok(&train(tmp.path(), "m.ckpt", "1", &[]));
    // Truncate the checkpoint to its backbone by re-encoding without the head tensors.
    let mut ckpt = skinseg_core::checkpoint::Checkpoint::load(&tmp.path().join("m.ckpt")).unwrap();
    ckpt.tensors.retain(|t| t.name.starts_with("stage"));
    ckpt.velocity.clear();
    ckpt.save(&tmp.path().join("backbone.ckpt")).unwrap();
    ok(&train(tmp.path(), "ft.ckpt", "1", &["--init", "backbone.ckpt"]));
}

fn write_rgb(path: &Path, w: u32, h: u32) {
    RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 90])).save(path).unwrap();
}

#[test]
fn predict_keeps_native_size() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 2, 32);
    ok(&train(tmp.path(), "m.ckpt", "1", &[]));
    fs::create_dir(tmp.path().join("in")).unwrap();
    write_rgb(&tmp.path().join("in/odd.png"), 45, 37);
    ok(&skinseg(&["predict", "--checkpoint", "m.ckpt", "--input", "in/odd.png", "--out", "p"], tmp.path()));
    let raw = image::open(tmp.path().join("p/odd.png")).unwrap().to_luma8();
    assert_eq!(raw.dimensions(), (45, 37));
    assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    ok(&skinseg(&["predict", "--checkpoint", "m.ckpt", "--input", "in", "--out", "q", "--size", "64"], tmp.path()));
    assert_eq!(read_mask_png(&tmp.path().join("q/odd.png")).unwrap().dims(), (37, 45));
}

#[test]
fn overlay_of_empty_prediction_equals_input() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 2, 32);
    ok(&train(tmp.path(), "m.ckpt", "1", &[]));
    // Force background everywhere: zero the fusion kernel, bias the background class.
    let (mut model, _) = skinseg_core::checkpoint::load_checkpoint(&tmp.path().join("m.ckpt")).unwrap();
    for p in model.params_mut().iter_mut() {
        match p.name() {
            "fuse.weight" => p.value_mut().data_mut().fill(0.0),
            "fuse.bias" => p.value_mut().data_mut().copy_from_slice(&[10.0, 0.0]),
            _ => {}
        }
    }
    skinseg_core::checkpoint::save_checkpoint(&model, None, &tmp.path().join("bg.ckpt")).unwrap();
    fs::create_dir(tmp.path().join("in")).unwrap();
    write_rgb(&tmp.path().join("in/a.png"), 40, 33);
    ok(&skinseg(&["predict", "--checkpoint", "bg.ckpt", "--input", "in", "--out", "p", "--overlay"], tmp.path()));
    assert_eq!(read_mask_png(&tmp.path().join("p/a.png")).unwrap().count_ones(), 0);
    let input = image::open(tmp.path().join("in/a.png")).unwrap().to_rgb8();
    let overlay = image::open(tmp.path().join("p/a_overlay.png")).unwrap().to_rgb8();
    assert_eq!(input, overlay);
}

#[test]
fn gt_requires_overlay() {
    let tmp = TempDir::new().unwrap();
    let out = skinseg(&["predict", "--checkpoint", "m", "--input", "x.png", "--out", "p", "--gt", "g"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    for &(y, x) in on {
        m.set(y, x, true);
    }
    m
}

#[test]
fn score_identical_dirs_is_perfect() {
    let tmp = TempDir::new().unwrap();
    for d in ["pred", "gt"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    write_mask_png(&mask(5, 6, &[(1, 1), (2, 3)]), &tmp.path().join("pred/a.png")).unwrap();
    write_mask_png(&mask(5, 6, &[(1, 1), (2, 3)]), &tmp.path().join("gt/a_segmentation.png")).unwrap();
    write_mask_png(&BinaryMask::zeros(4, 4), &tmp.path().join("pred/b.png")).unwrap();
    write_mask_png(&BinaryMask::zeros(4, 4), &tmp.path().join("gt/b.png")).unwrap();
    ok(&skinseg(&["score", "--pred", "pred", "--gt", "gt", "--out", "r.csv"], tmp.path()));
    let csv = fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",1.000000,1.000000,1.000000,1.000000,1.000000"), "{line}");
    }
}

#[test]
fn score_hand_fixture() {
    let tmp = TempDir::new().unwrap();
    for d in ["pred", "gt"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    // a: tp=1 fn=1 fp=0 tn=2 -> se .5 sp 1 ac .75 ja .5 di 2/3
    write_mask_png(&mask(2, 2, &[(0, 0)]), &tmp.path().join("pred/a.png")).unwrap();
    write_mask_png(&mask(2, 2, &[(0, 0), (0, 1)]), &tmp.path().join("gt/a.png")).unwrap();
    // b: tp=2 fn=0 fp=2 tn=0 -> se 1 sp 0 ac .5 ja .5 di 2/3
    write_mask_png(&mask(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]), &tmp.path().join("pred/b.png")).unwrap();
    write_mask_png(&mask(2, 2, &[(1, 0), (1, 1)]), &tmp.path().join("gt/b_mask.png")).unwrap();
    let out = skinseg(&["score", "--pred", "pred", "--gt", "gt", "--out", "r.csv"], tmp.path());
    ok(&out);
    let csv = fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,se,sp,ac,ja,di");
    assert_eq!(lines[1], "a,0.500000,1.000000,0.750000,0.500000,0.666667");
    assert_eq!(lines[2], "b,1.000000,0.000000,0.500000,0.500000,0.666667");
    assert_eq!(lines[3], "MEAN,0.750000,0.500000,0.625000,0.500000,0.666667");
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.500000"));
}

#[test]
fn score_names_unmatched_ids() {
    let tmp = TempDir::new().unwrap();
    for d in ["pred", "gt"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    write_mask_png(&BinaryMask::zeros(2, 2), &tmp.path().join("pred/lonely.png")).unwrap();
    write_mask_png(&BinaryMask::zeros(2, 2), &tmp.path().join("gt/other.png")).unwrap();
    let out = skinseg(&["score", "--pred", "pred", "--gt", "gt", "--out", "r.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("lonely") && err.contains("other"), "{err}");
}

#[test]
fn score_rejects_size_mismatch() {
    let tmp = TempDir::new().unwrap();
    for d in ["pred", "gt"] {
        fs::create_dir(tmp.path().join(d)).unwrap();
    }
    write_mask_png(&BinaryMask::zeros(2, 2), &tmp.path().join("pred/a.png")).unwrap();
    write_mask_png(&BinaryMask::zeros(3, 2), &tmp.path().join("gt/a.png")).unwrap();
    let out = skinseg(&["score", "--pred", "pred", "--gt", "gt", "--out", "r.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_is_deterministic_and_catches_faults() {
    let tmp = TempDir::new().unwrap();
    let a = skinseg(&["gradcheck", "--seed", "4"], tmp.path());
    let b = skinseg(&["gradcheck", "--seed", "4"], tmp.path());
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("model_end_to_end"));
    let bad = skinseg(&["gradcheck", "--seed", "4", "--inject-fault"], tmp.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn synth_zero_count_writes_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    ok(&skinseg(&["synth", "--count", "0", "--size", "32", "--seed", "1", "--out", "d"], tmp.path()));
    let m = skinseg_core::data::DatasetManifest::load(&tmp.path().join("d/manifest.tsv")).unwrap();
    assert_eq!(m.len(), 0);
    let out = skinseg(&["train", "--manifest", "d/manifest.tsv", "--preset", "desk", "--size", "32", "--epochs", "1", "--out", "m"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_is_reproducible() {
    let run = || {
        let tmp = TempDir::new().unwrap();
        synth(tmp.path(), 3, 32);
        ok(&train(tmp.path(), "m.ckpt", "2", &[]));
        ok(&skinseg(&["predict", "--checkpoint", "m.ckpt", "--input", "d/images", "--out", "p"], tmp.path()));
        ok(&skinseg(&["score", "--pred", "p", "--gt", "d/masks", "--out", "r.csv"], tmp.path()));
        (
            fs::read(tmp.path().join("m.ckpt")).unwrap(),
            fs::read_to_string(tmp.path().join("r.csv")).unwrap(),
        )
    };
    assert_eq!(run(), run());
}
