//! Model state, the end-to-end pair forward pass, minibatch SGD under the
//! alternating transformer-only / joint schedule, and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{shuffled_indices, PairSample};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, sgd_step, Gradients, LayerSpec, Network, Trace};
use crate::siamese::{
    choose_threshold, contrastive_loss, distance_backward, euclidean_distance, extract_features, pairing_accuracy,
    FeatureVector, Margin, PairLabel,
};
use crate::stn::{init_identity_head, resize_bilinear, stn_backward, stn_forward, theta_to_bbox, AffineParams, StnConfig, StnTrace};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Resize both images and compare them with the shared branch.
    BaselineSiamese,
    /// Crop each image with the spatial transformer first.
    GetNet,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::BaselineSiamese => "baseline_siamese",
            Mode::GetNet => "getnet",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_siamese" | "baseline" => Ok(Mode::BaselineSiamese),
            "getnet" => Ok(Mode::GetNet),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Siamese branch frozen; only the localisation net learns.
    StnOnly,
    Joint,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::StnOnly => "StnOnly",
            Phase::Joint => "Joint",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "StnOnly" => Ok(Phase::StnOnly),
            "Joint" => Ok(Phase::Joint),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier on `learning_rate` for the localisation net.
    pub locnet_lr_scale: f64,
    /// Each network's gradient is rescaled to at most this L2 norm before
    /// the step; `inf` disables clipping.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub stn_only_epochs: usize,
    pub joint_epochs: usize,
    pub margin: Margin,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            locnet_lr_scale: 0.01,
            max_grad_norm: 2.0,
            batch_size: 32,
            epochs: 16,
            stn_only_epochs: 1,
            joint_epochs: 3,
            margin: Margin::default(),
            seed: 0,
            mode: Mode::GetNet,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a finite non-negative number");
        }
        if !(self.locnet_lr_scale >= 0.0 && self.locnet_lr_scale.is_finite()) {
            return fail("locnet_lr_scale must be a finite non-negative number");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.joint_epochs == 0 {
            return fail("joint_epochs must be at least 1");
        }
        Ok(())
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "learning_rate",
        "locnet_lr_scale",
        "max_grad_norm",
        "batch_size",
        "epochs",
        "stn_only_epochs",
        "joint_epochs",
        "margin",
        "seed",
        "mode",
    ];

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "locnet_lr_scale" => self.locnet_lr_scale = parse(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "stn_only_epochs" => self.stn_only_epochs = parse(key, value)?,
            "joint_epochs" => self.joint_epochs = parse(key, value)?,
            "margin" => self.margin = Margin::new(parse(key, value)?)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}

/// Which phase epoch `epoch` (0-based) belongs to.
pub fn alternation_phase(epoch: usize, cfg: &TrainConfig) -> Phase {
    if cfg.mode == Mode::BaselineSiamese {
        return Phase::Joint;
    }
    let cycle = cfg.stn_only_epochs + cfg.joint_epochs.max(1);
    if epoch % cycle < cfg.stn_only_epochs {
        Phase::StnOnly
    } else {
        Phase::Joint
    }
}

/// conv(16, 5x5) -> relu -> pool -> conv(32, 5x5) -> relu -> pool -> fc 256
/// -> relu -> fc 64.
pub fn default_branch() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(16, 5, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::conv(32, 5, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2,
        LayerSpec::fc(256),
        LayerSpec::Relu,
        LayerSpec::fc(64),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// `C x H x W` of raw input images.
    pub input_shape: Vec<usize>,
    pub stn: StnConfig,
    pub branch: Vec<LayerSpec>,
    /// Factor applied to the branch's final layer after random init. Small
    /// values start every pair distance well inside the margin, so negative
    /// pairs drive the first updates instead of an all-positive pull that
    /// the transformer can satisfy with blank crops.
    pub branch_head_scale: f64,
}

impl ModelConfig {
    /// Default networks for square single-channel images of side `side`.
    pub fn for_input(mode: Mode, side: usize) -> Self {
        ModelConfig {
            mode,
            input_shape: vec![1, side, side],
            stn: StnConfig::for_input(side),
            branch: default_branch(),
            branch_head_scale: 0.01,
        }
    }
}

/// All learnable state plus the bookkeeping needed to resume training.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub mode: Mode,
    pub input_shape: Vec<usize>,
    pub stn: StnConfig,
    /// Absent for baseline models.
    pub locnet: Option<Network<T>>,
    pub branch: Network<T>,
    pub rng: ChaCha8Rng,
    pub step_count: u64,
    pub epochs_completed: usize,
}

impl<T: Scalar> ModelState<T> {
    /// Branch weights are drawn before the localisation net's, so baseline
    /// and transformer models with the same seed share branch weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.stn.validate()?;
        if !(cfg.branch_head_scale.is_finite() && cfg.branch_head_scale > 0.0) {
            return Err(Error::Config(format!("branch head scale {} must be positive", cfg.branch_head_scale)));
        }
        if cfg.input_shape.len() != 3 {
            return Err(Error::Config(format!("input shape {:?} is not C x H x W", cfg.input_shape)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop_shape = [cfg.input_shape[0], cfg.stn.out_height, cfg.stn.out_width];
        let mut branch = Network::new(&crop_shape, &cfg.branch, &mut rng)?;
        if let Some((w, b)) = branch.last_fc() {
            let k = T::from_f64_lossy(cfg.branch_head_scale);
            for i in [w, b] {
                branch.params[i].value = branch.params[i].value.map(|v| v * k);
            }
        }
        let locnet = match cfg.mode {
            Mode::GetNet => {
                let mut net = Network::new(&cfg.input_shape, &cfg.stn.localisation, &mut rng)?;
                init_identity_head(&mut net, &cfg.stn)?;
                Some(net)
            }
            Mode::BaselineSiamese => None,
        };
        Ok(ModelState {
            mode: cfg.mode,
            input_shape: cfg.input_shape.clone(),
            stn: cfg.stn.clone(),
            locnet,
            branch,
            rng,
            step_count: 0,
            epochs_completed: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.branch.output_len()
    }

    pub fn crop_shape(&self) -> (usize, usize) {
        self.stn.out_shape()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "model expects images of shape {:?}, got {shape:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.branch.set_frozen(phase == Phase::StnOnly);
        if let Some(loc) = self.locnet.as_mut() {
            loc.set_frozen(false);
        }
    }

    fn locnet_for(&self, mode: Mode) -> Result<Option<&Network<T>>> {
        match mode {
            Mode::BaselineSiamese => Ok(None),
            Mode::GetNet => self
                .locnet
                .as_ref()
                .map(Some)
                .ok_or_else(|| Error::Config("model has no localisation net".into())),
        }
    }

    /// Crop fed to the branch: the transformer output, or a plain resize.
    pub fn transform(&self, image: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<AffineParams<T>>)> {
        self.check_input(image.shape())?;
        match self.locnet_for(mode)? {
            Some(loc) => {
                let out = stn_forward(image, loc, &self.stn)?;
                Ok((out.crop, Some(out.theta)))
            }
            None => Ok((resize_bilinear(image, self.crop_shape())?, None)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairForward<T> {
    pub distance: T,
    pub theta_a: Option<AffineParams<T>>,
    pub theta_b: Option<AffineParams<T>>,
}

/// Feature distance of a pair under `mode`.
pub fn forward_pair<T: Scalar>(pair: &PairSample<T>, model: &ModelState<T>, mode: Mode) -> Result<PairForward<T>> {
    let (crop_a, theta_a) = model.transform(&pair.a.image, mode)?;
    let (crop_b, theta_b) = model.transform(&pair.b.image, mode)?;
    let (fa, _) = extract_features(&crop_a, &model.branch)?;
    let (fb, _) = extract_features(&crop_b, &model.branch)?;
    Ok(PairForward {
        distance: euclidean_distance(&fa, &fb)?,
        theta_a,
        theta_b,
    })
}

struct SideRecord<T> {
    stn: Option<StnTrace<T>>,
    features: FeatureVector<T>,
    branch: Trace<T>,
}

struct PairRecord<T> {
    a: SideRecord<T>,
    b: SideRecord<T>,
    distance: T,
}

fn forward_side<T: Scalar>(image: &Tensor<T>, model: &ModelState<T>) -> Result<SideRecord<T>> {
    let (crop, stn) = match model.locnet_for(model.mode)? {
        Some(loc) => {
            let out = stn_forward(image, loc, &model.stn)?;
            (out.crop, Some(out.trace))
        }
        None => (resize_bilinear(image, model.crop_shape())?, None),
    };
    let (features, branch) = extract_features(&crop, &model.branch)?;
    Ok(SideRecord { stn, features, branch })
}

struct PairGrads<T> {
    locnet: Option<Gradients<T>>,
    branch: Gradients<T>,
}

fn backward_side<T: Scalar>(
    image: &Tensor<T>,
    side: &SideRecord<T>,
    d_features: &Tensor<T>,
    model: &ModelState<T>,
    grads: &mut PairGrads<T>,
) -> Result<()> {
    let want_crop = side.stn.is_some();
    let d_crop = model.branch.backward(&side.branch, d_features, &mut grads.branch, want_crop)?;
    if let (Some(trace), Some(d_crop), Some(loc), Some(lg)) =
        (&side.stn, d_crop, model.locnet.as_ref(), grads.locnet.as_mut())
    {
        stn_backward(image, trace, &d_crop, loc, &model.stn, lg)?;
    }
    Ok(())
}

/// One SGD step on a minibatch. Returns the batch loss.
fn train_batch<T: Scalar>(model: &mut ModelState<T>, batch: &[&PairSample<T>], cfg: &TrainConfig) -> Result<f64> {
    let records: Vec<PairRecord<T>> = batch
        .par_iter()
        .map(|pair| {
            let a = forward_side(&pair.a.image, model)?;
            let b = forward_side(&pair.b.image, model)?;
            let distance = euclidean_distance(&a.features, &b.features)?;
            Ok(PairRecord { a, b, distance })
        })
        .collect::<Result<_>>()?;
    let distances: Vec<T> = records.iter().map(|r| r.distance).collect();
    let labels: Vec<PairLabel> = batch.iter().map(|p| p.label).collect();
    let (loss, d_dist) = contrastive_loss(&distances, &labels, cfg.margin)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite batch loss".into()));
    }

    let model_ref: &ModelState<T> = model;
    let per_pair: Vec<Option<PairGrads<T>>> = records
        .par_iter()
        .zip(batch.par_iter())
        .zip(d_dist.par_iter())
        .map(|((rec, pair), &g)| {
            if g == T::zero() {
                return Ok(None);
            }
            let mut grads = PairGrads {
                locnet: model_ref.locnet.as_ref().map(Network::new_gradients),
                branch: model_ref.branch.new_gradients(),
            };
            let (da, db) = distance_backward(&rec.a.features, &rec.b.features, rec.distance, g)?;
            backward_side(&pair.a.image, &rec.a, &da, model_ref, &mut grads)?;
            backward_side(&pair.b.image, &rec.b, &db, model_ref, &mut grads)?;
            Ok(Some(grads))
        })
        .collect::<Result<_>>()?;

    // fixed summation order: batch order
    for grads in per_pair.into_iter().flatten() {
        model.branch.accumulate(&grads.branch);
        if let (Some(loc), Some(lg)) = (model.locnet.as_mut(), grads.locnet.as_ref()) {
            loc.accumulate(lg);
        }
    }
    let ModelState { locnet, branch, .. } = model;
    // check everything before moving anything, so a bad batch leaves no partial update
    let all = branch.params.iter().chain(locnet.iter().flat_map(|l| l.params.iter()));
    if all.into_iter().any(|p| !p.frozen && !p.grad.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let branch_norm = clip_grad_norm(branch.params.iter_mut(), cfg.max_grad_norm);
    let locnet_norm = locnet.as_mut().map(|l| clip_grad_norm(l.params.iter_mut(), cfg.max_grad_norm));
    log::trace!("step {} loss {loss:?} grad norm branch {branch_norm:.3e} locnet {locnet_norm:?}", model.step_count);
    sgd_step(branch.params.iter_mut(), T::from_f64_lossy(cfg.learning_rate))?;
    if let Some(loc) = locnet.as_mut() {
        sgd_step(loc.params.iter_mut(), T::from_f64_lossy(cfg.learning_rate * cfg.locnet_lr_scale))?;
    }
    model.step_count += 1;
    Ok(loss.to_f64_lossy())
}

/// One epoch's summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub mean_iou: Option<f64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,phase,mean_loss,accuracy,threshold,mean_iou";

    /// `epoch,phase,mean_loss,accuracy,threshold,mean_iou`, the last field
    /// empty when there are no ground-truth boxes.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.mean_loss,
            self.accuracy,
            self.threshold,
            self.mean_iou.map(|v| v.to_string()).unwrap_or_default()
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::format(0, format!("bad metrics line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(MetricsRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            phase: f[1].parse().map_err(|_| bad())?,
            mean_loss: num(f[2])?,
            accuracy: num(f[3])?,
            threshold: num(f[4])?,
            mean_iou: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        })
    }
}

/// Shuffles with a generator keyed by `(seed, epoch)`, runs minibatch SGD
/// under `phase`, then evaluates the updated model on the same pairs with a
/// fitted threshold. A numeric failure restores the model as it was at the
/// start of the epoch.
pub fn train_epoch<T: Scalar>(
    model: &mut ModelState<T>,
    pairs: &[PairSample<T>],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<MetricsRecord> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("training needs at least one pair"));
    }
    cfg.validate()?;
    if cfg.mode != model.mode {
        return Err(Error::Config(format!(
            "config mode {} does not match model mode {}",
            cfg.mode, model.mode
        )));
    }
    let epoch = model.epochs_completed;
    let snapshot = model.clone();
    let result = (|| {
        model.set_phase(phase);
        let order = shuffled_indices(pairs.len(), cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairSample<T>> = chunk.iter().map(|&i| &pairs[i]).collect();
            loss_sum += train_batch(model, &batch, cfg)? * batch.len() as f64;
        }
        model.set_phase(Phase::Joint);
        model.epochs_completed += 1;
        let eval = evaluate(model, pairs, ThresholdSource::Fit)?;
        Ok(MetricsRecord {
            epoch,
            phase,
            mean_loss: loss_sum / pairs.len() as f64,
            accuracy: eval.accuracy,
            threshold: eval.threshold,
            mean_iou: eval.mean_iou,
        })
    })();
    if let Err(e) = result {
        *model = snapshot;
        return Err(match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
            other => other,
        });
    }
    result
}

/// Trains from `model.epochs_completed` up to `cfg.epochs`, calling
/// `on_epoch` after each epoch.
pub fn train<T: Scalar>(
    model: &mut ModelState<T>,
    pairs: &[PairSample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord, &ModelState<T>) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    while model.epochs_completed < cfg.epochs {
        let phase = alternation_phase(model.epochs_completed, cfg);
        let rec = train_epoch(model, pairs, cfg, phase)?;
        on_epoch(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdSource {
    Fit,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub threshold: f64,
    /// Mean IoU of transformer boxes against ground truth, over every pair
    /// side that has a box; only for transformer models.
    pub mean_iou: Option<f64>,
    pub distances: Vec<f64>,
}

pub fn evaluate<T: Scalar>(model: &ModelState<T>, pairs: &[PairSample<T>], source: ThresholdSource) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("evaluation needs at least one pair"));
    }
    let outputs: Vec<PairForward<T>> = pairs
        .par_iter()
        .map(|p| forward_pair(p, model, model.mode))
        .collect::<Result<_>>()?;
    let distances: Vec<f64> = outputs.iter().map(|o| o.distance.to_f64_lossy()).collect();
    let labels: Vec<PairLabel> = pairs.iter().map(|p| p.label).collect();
    let threshold = match source {
        ThresholdSource::Fit => choose_threshold(&distances, &labels)?,
        ThresholdSource::Fixed(t) => t,
    };
    let accuracy = pairing_accuracy(&distances, &labels, threshold);
    let in_shape = (model.input_shape[1], model.input_shape[2]);
    let mut ious = Vec::new();
    for (pair, out) in pairs.iter().zip(&outputs) {
        for (img, theta) in [(&pair.a, out.theta_a), (&pair.b, out.theta_b)] {
            if let (Some(gt), Some(theta)) = (img.bbox, theta) {
                ious.push(theta_to_bbox(theta, in_shape).iou(&gt));
            }
        }
    }
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    Ok(Evaluation {
        accuracy,
        threshold,
        mean_iou,
        distances,
    })
}
