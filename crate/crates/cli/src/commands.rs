use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use getnet_core::data::{
    build_distorted_set, load_dataset_images, load_idx, load_idx_images, load_image_folder, load_pair_file,
    save_dataset, sha256_hex, DistortConfig, LabeledImage, IMAGES_FILE,
};
use getnet_core::gradcheck::{run_suite, Component, SuiteOptions};
use getnet_core::stn::theta_to_bbox;
use getnet_core::training::{evaluate, train as run_training, ThresholdSource};
use getnet_core::{
    checkpoint_precision, load_checkpoint, save_checkpoint, MetricsRecord, Mode, ModelConfig, ModelState, Precision,
    Scalar,
};

use crate::config::RunConfig;
use crate::{EvalArgs, ExportArgs, Failure, GenArgs, GradcheckArgs, TrainArgs};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.getnet";
pub const METRICS_HEADER: &str = "epoch,phase,mean_loss,accuracy,threshold,mean_iou";
const LOCK_FILE: &str = ".getnet.lock";

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::invalid(format!(
                "{} is in use by another getnet command (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_at(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

// ---------------------------------------------------------------------------

pub fn gen_distorted(args: &GenArgs) -> Result<(), Failure> {
    let read = |p: &PathBuf| fs::read(p).map_err(io_at(p));
    let checksum = sha256_hex(&[&read(&args.mnist_images)?, &read(&args.mnist_labels)?]);
    let source = load_idx::<f32>(&args.mnist_images, &args.mnist_labels)?;
    let (images, plan) = build_distorted_set(&source, args.classes.as_deref(), &DistortConfig::default(), args.seed)?;
    if images.is_empty() {
        return Err(Failure::invalid("no source images match --classes"));
    }
    let _lock = DirLock::acquire(&args.out)?;
    let name = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "distorted".into());
    let manifest = save_dataset(&args.out, &name, &images, &plan, &checksum)?;
    let mut counts = vec![0usize; manifest.classes.iter().max().map_or(0, |&m| m + 1)];
    for img in &images {
        counts[img.class_id] += 1;
    }
    let per_class: Vec<String> = manifest.classes.iter().map(|&c| format!("{c}:{}", counts[c])).collect();
    println!(
        "wrote {} images ({}) and {} pairs to {}",
        manifest.count,
        per_class.join(" "),
        manifest.pair_count,
        args.out.display()
    );
    if manifest.skipped_singletons > 0 {
        println!("{} images had no same-class partner", manifest.skipped_singletons);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let run = RunConfig::from_args(args)?;
    let _lock = DirLock::acquire(&run.out)?;
    match run.precision {
        Precision::F32 => train_with::<f32>(&run),
        Precision::F64 => train_with::<f64>(&run),
    }
}

fn train_with<T: Scalar>(run: &RunConfig) -> Result<(), Failure> {
    let pairs = load_pair_file::<T>(&run.pairs)?;
    let shape = pairs[0].a.image.shape().to_vec();
    let mut model = match &run.resume {
        Some(path) => {
            let model = load_checkpoint::<T>(path)?;
            if model.mode != run.train.mode {
                return Err(Failure::invalid(format!(
                    "checkpoint is a {} model but the run asks for {}",
                    model.mode, run.train.mode
                )));
            }
            model
        }
        None => {
            if shape.len() != 3 || shape[1] != shape[2] {
                return Err(Failure::invalid(format!("training needs square C x N x N images, got {shape:?}")));
            }
            let mut cfg = ModelConfig::for_input(run.train.mode, shape[1]);
            cfg.input_shape = shape;
            ModelState::new(&cfg, run.train.seed)?
        }
    };
    log::info!(
        "training {} on {} pairs at {} from epoch {}",
        run.train.mode,
        pairs.len(),
        T::PRECISION,
        model.epochs_completed
    );

    let metrics_path = run.out.join(METRICS_FILE);
    let fresh = run.resume.is_none() || !metrics_path.exists();
    let mut metrics = if fresh {
        let mut f = File::create(&metrics_path).map_err(io_at(&metrics_path))?;
        writeln!(f, "{METRICS_HEADER}").map_err(io_at(&metrics_path))?;
        f
    } else {
        OpenOptions::new().append(true).open(&metrics_path).map_err(io_at(&metrics_path))?
    };
    let ckpt = run.out.join(CHECKPOINT_FILE);
    let result = run_training(&mut model, &pairs, &run.train, |rec: &MetricsRecord, m| {
        let line = rec.csv_line();
        println!("{line}");
        writeln!(metrics, "{line}")?;
        // a checkpoint per epoch makes any interrupted run resumable
        save_atomic(&ckpt, m)
    });
    result?;
    save_atomic(&ckpt, &model)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

/// Writes through a temporary sibling so readers never see a partial file.
fn save_atomic<T: Scalar>(path: &Path, model: &ModelState<T>) -> getnet_core::Result<()> {
    let tmp = path.with_extension("partial");
    save_checkpoint(model, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => eval_with::<f32>(args),
        Precision::F64 => eval_with::<f64>(args),
    }
}

fn fmt_iou(iou: Option<f64>) -> String {
    iou.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn eval_with<T: Scalar>(args: &EvalArgs) -> Result<(), Failure> {
    let model = load_checkpoint::<T>(&args.checkpoint)?;
    let pairs = load_pair_file::<T>(&crate::config::pair_file(args.pairs.clone()))?;
    for p in &pairs {
        model.check_input(p.a.image.shape())?;
    }
    let source = match args.threshold {
        Some(t) if t.is_finite() => ThresholdSource::Fixed(t),
        Some(t) => return Err(Failure::invalid(format!("threshold must be finite, got {t}"))),
        None => ThresholdSource::Fit,
    };
    let ev = evaluate(&model, &pairs, source)?;
    let positives = pairs.iter().filter(|p| p.label.is_match()).count();
    println!("model: {} ({} epochs)", model.mode, model.epochs_completed);
    println!("pairs: {} ({positives} matching)", pairs.len());
    println!("accuracy: {}", ev.accuracy);
    let how = if args.threshold.is_some() { "fixed" } else { "fitted" };
    println!("threshold ({how}): {}", ev.threshold);
    if let Some(iou) = ev.mean_iou {
        println!("mean IoU: {iou}");
    }
    println!("ACC={} THR={} IOU={}", ev.accuracy, ev.threshold, fmt_iou(ev.mean_iou));
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn export_roi(args: &ExportArgs) -> Result<(), Failure> {
    match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => export_with::<f32>(args),
        Precision::F64 => export_with::<f64>(args),
    }
}

fn load_images<T: Scalar>(path: &Path, side: usize) -> Result<Vec<Arc<LabeledImage<T>>>, Failure> {
    if path.join(IMAGES_FILE).is_file() {
        return Ok(load_dataset_images(path)?);
    }
    if path.is_file() {
        let images = load_idx_images::<T>(path)?;
        return Ok(images
            .into_iter()
            .map(|image| Arc::new(LabeledImage { image, class_id: 0, bbox: None }))
            .collect());
    }
    if path.is_dir() {
        let folder = load_image_folder::<T>(path, side)?;
        return Ok(folder.images.into_iter().map(Arc::new).collect());
    }
    Err(Failure::invalid(format!("{} is neither a dataset, an IDX file nor an image folder", path.display())))
}

fn to_png(crop: &getnet_core::Tensor<impl Scalar>) -> Result<image::GrayImage, Failure> {
    let (c, h, w) = crop.dims3()?;
    if c != 1 {
        return Err(Failure::invalid(format!("can only export single-channel crops, got {c} channels")));
    }
    let px: Vec<u8> = crop
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Failure::invalid("crop buffer size mismatch"))
}

fn export_with<T: Scalar>(args: &ExportArgs) -> Result<(), Failure> {
    let model = load_checkpoint::<T>(&args.checkpoint)?;
    if model.mode != Mode::GetNet || model.locnet.is_none() {
        return Err(Failure::invalid("export-roi needs a getnet checkpoint; this one has no transformer"));
    }
    let (h, w) = (model.input_shape[1], model.input_shape[2]);
    let images = load_images::<T>(&args.images, h)?;
    let _lock = DirLock::acquire(&args.out_dir)?;
    let mut boxes = String::new();
    let mut ious = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let (crop, theta) = model.transform(&img.image, Mode::GetNet)?;
        let theta = theta.expect("getnet transform yields a theta");
        let b = theta_to_bbox(theta, (h, w));
        boxes.push_str(&format!("{i},{},{},{},{}\n", b.row0, b.col0, b.row1, b.col1));
        if let Some(gt) = img.bbox {
            ious.push(b.iou(&gt));
        }
        let path = args.out_dir.join(format!("roi_{i:05}.png"));
        to_png(&crop)?
            .save(&path)
            .map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })?;
    }
    let boxes_path = args.out_dir.join("boxes.csv");
    fs::write(&boxes_path, boxes).map_err(io_at(&boxes_path))?;
    println!("exported {} crops to {}", images.len(), args.out_dir.display());
    if !ious.is_empty() {
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        println!("mean IoU against ground truth: {mean}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let precision = Precision::from_bits(args.precision)
        .ok_or_else(|| Failure::invalid(format!("precision must be 32 or 64, got {}", args.precision)))?;
    let fault = match &args.inject_fault {
        Some(name) => Some(Component::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
            Failure::invalid(format!("unknown component {name:?}; known: {}", known.join(", ")))
        })?),
        None => None,
    };
    let started = std::time::Instant::now();
    let results = run_suite(&SuiteOptions { precision, fault, seed: args.seed })?;
    println!("{:<18} {:>12} {:>10} {:>7} {:>6}", "component", "max_rel_err", "threshold", "probed", "");
    for r in &results {
        println!(
            "{:<18} {:>12.3e} {:>10.0e} {:>7} {:>6}",
            r.component.name(),
            r.max_relative_error,
            r.threshold,
            r.probed,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{} components at {precision} in {:.1}s", results.len(), started.elapsed().as_secs_f64());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.component.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 5,
            message: format!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}
