//! End-to-end runs of the `getnet` binary on a tiny synthetic MNIST.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use getnet_core::data::{parse_boxes, write_idx_images, write_idx_labels, PAIRS_FILE};
use getnet_core::Tensor;

fn getnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_getnet"))
        .args(args)
        .env("GETNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Eight crude glyphs per class: a vertical bar, a ring, a diagonal.
fn write_mnist(dir: &Path) -> (PathBuf, PathBuf) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for k in 0..8 {
        for class in 0u8..3 {
            let img = Tensor::<f32>::from_fn(&[1, 28, 28], |i| {
                let (r, c) = ((i / 28) as i32 - 14, (i % 28) as i32 - 14 + (k % 3) - 1);
                let on = match class {
                    0 => c.abs() <= 2 && r.abs() <= 10,
                    1 => ((r * r + c * c) as f32).sqrt().round() as i32 == 8,
                    _ => (r - c).abs() <= 2 && r.abs() <= 10,
                };
                if on { 1.0 } else { 0.0 }
            });
            images.push(img);
            labels.push(class);
        }
    }
    let (ip, lp) = (dir.join("imgs-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    write_idx_images(&ip, &images).unwrap();
    write_idx_labels(&lp, &labels).unwrap();
    (ip, lp)
}

fn gen(root: &Path, name: &str, seed: u64, extra: &[&str]) -> PathBuf {
    let (ip, lp) = write_mnist(root);
    let out = root.join(name);
    let seed = seed.to_string();
    let mut args = vec!["gen-distorted", "--mnist-images", s(&ip), "--mnist-labels", s(&lp), "--out", s(&out), "--seed", &seed];
    args.extend_from_slice(extra);
    let o = getnet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--pairs", s(data), "--out", s(out), "--precision", "64", "--batch-size", "8"];
    args.extend_from_slice(extra);
    getnet(&args)
}

fn metric_lines(out: &Path) -> Vec<String> {
    fs::read_to_string(out.join("metrics.csv")).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn gen_distorted_filters_and_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = gen(root.path(), "a", 3, &["--classes", "0,2"]);
    let b = gen(root.path(), "b", 3, &["--classes", "0,2"]);
    for f in ["images-idx3-ubyte", "labels-idx1-ubyte", "boxes.csv", PAIRS_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("count=16\n"), "{manifest}");
    assert!(manifest.contains("classes=0,2\n"), "{manifest}");
    let boxes = parse_boxes(&fs::read_to_string(a.join("boxes.csv")).unwrap()).unwrap();
    assert_eq!(boxes.len(), 16);
    assert!(boxes.iter().all(|b| b.row1 - b.row0 == 27.0 && b.row1 <= 59.0));
}

#[test]
fn gen_distorted_error_codes() {
    let root = tempfile::tempdir().unwrap();
    let (ip, lp) = write_mnist(root.path());
    let missing = root.path().join("nope");
    let o = getnet(&["gen-distorted", "--mnist-images", s(&missing), "--mnist-labels", s(&lp), "--out", s(&root.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    // a label file where images belong fails the magic check
    let o = getnet(&["gen-distorted", "--mnist-images", s(&lp), "--mnist-labels", s(&ip), "--out", s(&root.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_eval_resume_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path(), "data", 1, &[]);
    let common = ["--mode", "getnet", "--learning-rate", "0.05", "--locnet-lr-scale", "0.1", "--stn-only-epochs", "1", "--joint-epochs", "1"];

    let full = root.path().join("full");
    let o = train(&data, &full, &[&common[..], &["--epochs", "3"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = metric_lines(&full);
    assert_eq!(lines.len(), 3);
    let phases: Vec<&str> = lines.iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["StnOnly", "Joint", "StnOnly"]);
    assert!(lines.iter().all(|l| !l.ends_with(',')), "getnet rows carry an IoU");

    // identical run, identical metrics
    let again = root.path().join("again");
    assert_eq!(code(&train(&data, &again, &[&common[..], &["--epochs", "3"]].concat())), 0);
    assert_eq!(fs::read(full.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());

    // two epochs, then resume to three
    let part = root.path().join("part");
    assert_eq!(code(&train(&data, &part, &[&common[..], &["--epochs", "2"]].concat())), 0);
    let ckpt = part.join("model.getnet");
    let o = train(&data, &part, &[&common[..], &["--epochs", "3", "--resume", s(&ckpt)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metric_lines(&part), lines);
    assert_eq!(fs::read(part.join("model.getnet")).unwrap(), fs::read(full.join("model.getnet")).unwrap());

    // eval on the training pairs reproduces the last epoch's fitted accuracy
    let o = getnet(&["eval", "--checkpoint", s(&full.join("model.getnet")), "--pairs", s(&data.join(PAIRS_FILE))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let fields: Vec<&str> = last.split(' ').collect();
    assert_eq!(fields.len(), 3, "{last}");
    let acc: f64 = fields[0].strip_prefix("ACC=").unwrap().parse().unwrap();
    let trained: f64 = lines[2].split(',').nth(3).unwrap().parse().unwrap();
    assert!((acc - trained).abs() < 1e-6, "{acc} vs {trained}");
    assert!(fields[1].starts_with("THR="));
    assert!(fields[2].starts_with("IOU=") && fields[2] != "IOU=NA");

    // a huge fixed threshold calls every pair a match
    let o = getnet(&["eval", "--checkpoint", s(&full.join("model.getnet")), "--pairs", s(&data.join(PAIRS_FILE)), "--threshold", "1e9"]);
    let pairs = fs::read_to_string(data.join(PAIRS_FILE)).unwrap();
    let total = pairs.lines().count() as f64;
    let positive = pairs.lines().filter(|l| l.ends_with(",1")).count() as f64;
    let last = stdout(&o).lines().last().unwrap().to_string();
    let acc: f64 = last.split(' ').next().unwrap().strip_prefix("ACC=").unwrap().parse().unwrap();
    assert!((acc - positive / total).abs() < 1e-12, "{last}");
}

#[test]
fn baseline_rows_are_always_joint_and_lack_iou() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path(), "data", 2, &[]);
    let out = root.path().join("run");
    let o = train(&data, &out, &["--mode", "baseline_siamese", "--epochs", "2", "--stn-only-epochs", "1", "--joint-epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in metric_lines(&out) {
        assert_eq!(line.split(',').nth(1), Some("Joint"));
        assert!(line.ends_with(','), "{line}");
    }
    let o = getnet(&["eval", "--checkpoint", s(&out.join("model.getnet")), "--pairs", s(&data)]);
    assert!(stdout(&o).trim_end().ends_with("IOU=NA"));
}

#[test]
fn train_validation_errors() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path(), "data", 4, &[]);
    let o = train(&data, &root.path().join("z"), &["--epochs", "0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = train(&root.path().join("missing"), &root.path().join("z"), &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // a held lock refuses a second command in the same directory
    let busy = root.path().join("busy");
    fs::create_dir_all(&busy).unwrap();
    fs::write(busy.join(".getnet.lock"), "1").unwrap();
    let o = train(&data, &busy, &["--epochs", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_getnet"))
        .args(["gradcheck"])
        .env("GETNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_rejects_empty_and_mismatched_pairs() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path(), "data", 5, &[]);
    let out = root.path().join("run");
    assert_eq!(code(&train(&data, &out, &["--mode", "baseline_siamese", "--epochs", "1", "--learning-rate", "0"])), 0);
    let ckpt = out.join("model.getnet");

    let empty = data.join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = getnet(&["eval", "--checkpoint", s(&ckpt), "--pairs", s(&empty)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // 28x28 digits do not fit a model trained on 60x60 canvases
    let raw = root.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    let (ip, lp) = write_mnist(&raw);
    fs::rename(ip, raw.join("images-idx3-ubyte")).unwrap();
    fs::rename(lp, raw.join("labels-idx1-ubyte")).unwrap();
    fs::write(raw.join(PAIRS_FILE), "0,1,0\n0,3,1\n").unwrap();
    let o = getnet(&["eval", "--checkpoint", s(&ckpt), "--pairs", s(&raw.join(PAIRS_FILE))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn export_roi_writes_crops_and_full_boxes_at_identity() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path(), "data", 6, &[]);
    let run = root.path().join("run");
    // zero learning rate keeps the identity transformer
    assert_eq!(code(&train(&data, &run, &["--mode", "getnet", "--epochs", "1", "--learning-rate", "0"])), 0);
    let rois = root.path().join("rois");
    let o = getnet(&["export-roi", "--checkpoint", s(&run.join("model.getnet")), "--images", s(&data), "--out-dir", s(&rois)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let boxes = fs::read_to_string(rois.join("boxes.csv")).unwrap();
    assert_eq!(boxes.lines().count(), 24);
    for (i, line) in boxes.lines().enumerate() {
        assert_eq!(line, format!("{i},0,0,59,59"));
    }
    let crop = image::open(rois.join("roi_00000.png")).unwrap();
    assert_eq!((crop.width(), crop.height()), (40, 40));
    assert!(stdout(&o).contains("mean IoU"));
    assert!(!rois.join(".getnet.lock").exists());

    let base = root.path().join("base");
    assert_eq!(code(&train(&data, &base, &["--mode", "baseline_siamese", "--epochs", "1", "--learning-rate", "0"])), 0);
    let o = getnet(&["export-roi", "--checkpoint", s(&base.join("model.getnet")), "--images", s(&data), "--out-dir", s(&rois)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let o = getnet(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 10, "{}", stdout(&o));

    let o = getnet(&["gradcheck", "--inject-fault", "sampler"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("sampler"), "{}", stderr(&o));
    let text = stdout(&o);
    let failing: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(failing, ["sampler"]);

    let o = getnet(&["gradcheck", "--precision", "32"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}
