//! Datasets: IDX loading, the cluttered-canvas distortion, balanced pair
//! construction, image folders, and on-disk dataset directories.

pub mod idx;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::siamese::PairLabel;
use crate::stn::{resize_bilinear, BBox};
use crate::tensor::{Scalar, Tensor};

pub use idx::{load_idx, load_idx_images, write_idx_images, write_idx_labels};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    /// `C x H x W`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub class_id: usize,
    /// Ground-truth object box, when known.
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug)]
pub struct PairSample<T> {
    pub a: Arc<LabeledImage<T>>,
    pub b: Arc<LabeledImage<T>>,
    pub label: PairLabel,
}

impl<T> PairSample<T> {
    pub fn new(a: Arc<LabeledImage<T>>, b: Arc<LabeledImage<T>>) -> Self {
        let label = PairLabel::from_bool(a.class_id == b.class_id);
        PairSample { a, b, label }
    }
}

/// A pair by image index, as stored in `pairs.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

pub fn assemble_pairs<T>(images: &[Arc<LabeledImage<T>>], index: &[PairIndex]) -> Result<Vec<PairSample<T>>> {
    index
        .iter()
        .map(|p| {
            let (a, b) = match (images.get(p.a), images.get(p.b)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Config(format!(
                        "pair ({}, {}) refers past the {} stored images",
                        p.a,
                        p.b,
                        images.len()
                    )))
                }
            };
            let pair = PairSample::new(a.clone(), b.clone());
            if pair.label != p.label {
                return Err(Error::Config(format!(
                    "pair ({}, {}) is labelled {} but classes are {} and {}",
                    p.a,
                    p.b,
                    p.label.value(),
                    a.class_id,
                    b.class_id
                )));
            }
            Ok(pair)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// distortion

/// Clutter model for the distorted canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortConfig {
    pub canvas: usize,
    /// Inclusive range the number of clutter patches is drawn from.
    pub patch_count: (usize, usize),
    pub patch_side: usize,
    /// Inclusive-exclusive range of patch intensities.
    pub intensity: (f64, f64),
}

impl Default for DistortConfig {
    fn default() -> Self {
        DistortConfig {
            canvas: 60,
            patch_count: (8, 16),
            patch_side: 3,
            intensity: (0.3, 1.0),
        }
    }
}

pub const DIGIT_SIDE: usize = 28;

/// Pastes a 28x28 digit at a uniformly random position on a blank canvas and
/// sprinkles square clutter patches that avoid the digit's box.
pub fn distort<T: Scalar, R: Rng + ?Sized>(
    img: &LabeledImage<T>,
    cfg: &DistortConfig,
    rng: &mut R,
) -> Result<LabeledImage<T>> {
    if img.image.shape() != [1, DIGIT_SIDE, DIGIT_SIDE] {
        return Err(Error::dim(format!(
            "distort expects a 1 x 28 x 28 digit, got {:?}",
            img.image.shape()
        )));
    }
    let n = cfg.canvas;
    if n < DIGIT_SIDE || cfg.patch_side > n || cfg.patch_count.0 > cfg.patch_count.1 {
        return Err(Error::Config(format!("invalid distortion config {cfg:?}")));
    }
    let mut canvas = Tensor::zeros(&[1, n, n]);
    let r0 = rng.gen_range(0..=n - DIGIT_SIDE);
    let c0 = rng.gen_range(0..=n - DIGIT_SIDE);
    let one = T::one();
    {
        let dst = canvas.data_mut();
        for (i, row) in img.image.data().chunks_exact(DIGIT_SIDE).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                dst[(r0 + i) * n + c0 + j] = v.max(T::zero()).min(one);
            }
        }
    }
    let (d0, d1) = (r0, r0 + DIGIT_SIDE - 1);
    let (e0, e1) = (c0, c0 + DIGIT_SIDE - 1);
    let count = rng.gen_range(cfg.patch_count.0..=cfg.patch_count.1);
    let ps = cfg.patch_side;
    for _ in 0..count {
        let pr = rng.gen_range(0..=n - ps);
        let pc = rng.gen_range(0..=n - ps);
        let values: Vec<f64> = (0..ps * ps)
            .map(|_| rng.gen_range(cfg.intensity.0..cfg.intensity.1))
            .collect();
        let overlaps = pr <= d1 && pr + ps - 1 >= d0 && pc <= e1 && pc + ps - 1 >= e0;
        if overlaps {
            continue;
        }
        let dst = canvas.data_mut();
        for a in 0..ps {
            for b in 0..ps {
                dst[(pr + a) * n + pc + b] = T::from_f64_lossy(values[a * ps + b].clamp(0.0, 1.0));
            }
        }
    }
    Ok(LabeledImage {
        image: canvas,
        class_id: img.class_id,
        bbox: Some(BBox::new(d0 as f64, e0 as f64, d1 as f64, e1 as f64)),
    })
}

/// Per-image generator: stream `index` of a ChaCha8 generator seeded with
/// `seed`, so every image's draw is independent of the others.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Distorts every source image whose class is in `classes` (all when
/// `None`), in source order.
pub fn generate_distorted<T: Scalar>(
    source: &[LabeledImage<T>],
    classes: Option<&[usize]>,
    cfg: &DistortConfig,
    seed: u64,
) -> Result<Vec<LabeledImage<T>>> {
    let keep: Vec<(usize, &LabeledImage<T>)> = source
        .iter()
        .enumerate()
        .filter(|(_, img)| classes.is_none_or(|c| c.contains(&img.class_id)))
        .collect();
    keep.par_iter()
        .map(|&(i, img)| distort(img, cfg, &mut image_rng(seed, i as u64)))
        .collect()
}

/// Stream reserved for pair sampling; image streams count up from 0.
const PAIR_STREAM: u64 = u64::MAX;

/// Distorted images and their balanced pair plan, both derived from `seed`.
pub fn build_distorted_set<T: Scalar>(
    source: &[LabeledImage<T>],
    classes: Option<&[usize]>,
    cfg: &DistortConfig,
    seed: u64,
) -> Result<(Vec<LabeledImage<T>>, PairPlan)> {
    let images = generate_distorted(source, classes, cfg, seed)?;
    let ids: Vec<usize> = images.iter().map(|i| i.class_id).collect();
    let plan = make_pairs(&ids, &mut image_rng(seed, PAIR_STREAM))?;
    Ok((images, plan))
}

// ---------------------------------------------------------------------------
// pairs

#[derive(Clone, Debug, PartialEq)]
pub struct PairPlan {
    pub pairs: Vec<PairIndex>,
    /// Images whose class had no other member, so no positive was drawn.
    pub skipped_singletons: usize,
}

/// For every image, draws one same-class partner (not itself) and one
/// partner from a different class, uniformly.
pub fn make_pairs<R: Rng + ?Sized>(class_ids: &[usize], rng: &mut R) -> Result<PairPlan> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in class_ids.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Config(format!(
            "pairing needs at least two classes, found {}",
            by_class.len()
        )));
    }
    let mut pairs = Vec::with_capacity(2 * class_ids.len());
    let mut skipped = 0;
    for (i, &c) in class_ids.iter().enumerate() {
        let same = &by_class[&c];
        if same.len() < 2 {
            skipped += 1;
            log::warn!("image {i} is the only member of class {c}; no positive pair drawn");
        } else {
            let mut j = same[rng.gen_range(0..same.len() - 1)];
            if j == i {
                j = *same.last().expect("non-empty");
            }
            pairs.push(PairIndex {
                a: i,
                b: j,
                label: PairLabel::MATCH,
            });
        }
        let others = class_ids.len() - same.len();
        let mut k = rng.gen_range(0..others);
        // k-th image outside class c, in index order
        let mut partner = None;
        for (&oc, members) in &by_class {
            if oc == c {
                continue;
            }
            if k < members.len() {
                partner = Some(members[k]);
                break;
            }
            k -= members.len();
        }
        pairs.push(PairIndex {
            a: i,
            b: partner.expect("index within other classes"),
            label: PairLabel::NON_MATCH,
        });
    }
    Ok(PairPlan {
        pairs,
        skipped_singletons: skipped,
    })
}

// ---------------------------------------------------------------------------
// image folders

#[derive(Clone, Debug)]
pub struct FolderDataset<T> {
    pub images: Vec<LabeledImage<T>>,
    pub class_names: Vec<String>,
    pub skipped: Vec<PathBuf>,
}

/// Loads `root/<class>/<image>` files as grayscale `side x side` images.
/// Classes are numbered by sorted directory name; undecodable files are
/// skipped with a warning.
pub fn load_image_folder<T: Scalar>(root: &Path, side: usize) -> Result<FolderDataset<T>> {
    if side < 2 {
        return Err(Error::Config(format!("image side must be at least 2, got {side}")));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let decoded = match image::open(&file) {
                Ok(img) => img.to_luma32f(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped.push(file);
                    continue;
                }
            };
            let (w, h) = decoded.dimensions();
            let tensor = Tensor::new(
                &[1, h as usize, w as usize],
                decoded.into_raw().into_iter().map(|v| T::from_f32(v).expect("f32 fits")).collect(),
            )?;
            let resized = if h < 2 || w < 2 {
                Tensor::full(&[1, side, side], tensor.data()[0])
            } else {
                resize_bilinear(&tensor, (side, side))?
            };
            images.push(LabeledImage {
                image: resized,
                class_id,
                bbox: None,
            });
        }
    }
    if images.is_empty() {
        return Err(Error::format(0, format!("no decodable images under {}", root.display())));
    }
    Ok(FolderDataset {
        images,
        class_names,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// dataset directories

pub const IMAGES_FILE: &str = "images-idx3-ubyte";
pub const LABELS_FILE: &str = "labels-idx1-ubyte";
pub const BOXES_FILE: &str = "boxes.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub image_shape: Vec<usize>,
    pub count: usize,
    pub classes: Vec<usize>,
    pub source_checksum: String,
    pub pair_count: usize,
    pub skipped_singletons: usize,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let join = |v: &[usize], sep: &str| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
        let mut s = String::new();
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "image_shape={}", join(&self.image_shape, "x"));
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "classes={}", join(&self.classes, ","));
        let _ = writeln!(s, "source_sha256={}", self.source_checksum);
        let _ = writeln!(s, "pairs={}", self.pair_count);
        let _ = writeln!(s, "skipped_singletons={}", self.skipped_singletons);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(0, format!("manifest lacks {k}")))
        };
        let nums = |v: &str, sep: char| -> Result<Vec<usize>> {
            v.split(sep)
                .filter(|s| !s.is_empty())
                .map(|x| x.parse().map_err(|_| Error::format(0, format!("bad number {x:?} in manifest"))))
                .collect()
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(0, format!("bad {k} in manifest")))
        };
        Ok(DatasetManifest {
            name: get("name")?.to_string(),
            image_shape: nums(get("image_shape")?, 'x')?,
            count: num("count")?,
            classes: nums(get("classes")?, ',')?,
            source_checksum: get("source_sha256")?.to_string(),
            pair_count: num("pairs")?,
            skipped_singletons: num("skipped_singletons")?,
        })
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn sha256_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    hex::encode(h.finalize())
}

pub fn format_boxes(boxes: impl IntoIterator<Item = BBox>) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{}", b.row0, b.col0, b.row1, b.col1);
    }
    s
}

pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(0, format!("boxes line {}: not numeric: {line:?}", n + 1)))?;
            match v[..] {
                [r0, c0, r1, c1] => Ok(BBox::new(r0, c0, r1, c1)),
                _ => Err(Error::format(0, format!("boxes line {}: expected 4 fields", n + 1))),
            }
        })
        .collect()
}

pub fn format_pairs(pairs: &[PairIndex]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{},{},{}", p.a, p.b, p.label.value());
    }
    s
}

pub fn parse_pairs(text: &str) -> Result<Vec<PairIndex>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::format(0, format!("pairs line {}: expected a,b,label: {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            match f[..] {
                [a, b, y] => Ok(PairIndex {
                    a: a.parse().map_err(|_| bad())?,
                    b: b.parse().map_err(|_| bad())?,
                    label: PairLabel::new(y.parse().map_err(|_| bad())?).map_err(|_| bad())?,
                }),
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Writes images, labels, box sidecar, pair list and manifest into `dir`.
pub fn save_dataset<T: Scalar>(
    dir: &Path,
    name: &str,
    images: &[LabeledImage<T>],
    plan: &PairPlan,
    source_checksum: &str,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let tensors: Vec<Tensor<T>> = images.iter().map(|i| i.image.clone()).collect();
    write_idx_images(&dir.join(IMAGES_FILE), &tensors)?;
    let labels: Vec<u8> = images
        .iter()
        .map(|i| u8::try_from(i.class_id).map_err(|_| Error::Config(format!("class {} exceeds 255", i.class_id))))
        .collect::<Result<_>>()?;
    write_idx_labels(&dir.join(LABELS_FILE), &labels)?;
    if images.iter().all(|i| i.bbox.is_some()) {
        fs::write(dir.join(BOXES_FILE), format_boxes(images.iter().filter_map(|i| i.bbox)))?;
    }
    fs::write(dir.join(PAIRS_FILE), format_pairs(&plan.pairs))?;
    let classes: BTreeSet<usize> = images.iter().map(|i| i.class_id).collect();
    let manifest = DatasetManifest {
        name: name.to_string(),
        image_shape: images.first().map(|i| i.image.shape().to_vec()).unwrap_or_default(),
        count: images.len(),
        classes: classes.into_iter().collect(),
        source_checksum: source_checksum.to_string(),
        pair_count: plan.pairs.len(),
        skipped_singletons: plan.skipped_singletons,
    };
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// Images (with boxes when the sidecar exists) stored in a dataset
/// directory.
pub fn load_dataset_images<T: Scalar>(dir: &Path) -> Result<Vec<Arc<LabeledImage<T>>>> {
    let mut images = load_idx::<T>(&dir.join(IMAGES_FILE), &dir.join(LABELS_FILE))?;
    let boxes_path = dir.join(BOXES_FILE);
    if boxes_path.exists() {
        let boxes = parse_boxes(&fs::read_to_string(&boxes_path)?)?;
        if boxes.len() != images.len() {
            return Err(Error::format(
                0,
                format!("{} boxes for {} images", boxes.len(), images.len()),
            ));
        }
        for (img, b) in images.iter_mut().zip(boxes) {
            img.bbox = Some(b);
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest = DatasetManifest::parse(&fs::read_to_string(&manifest_path)?)?;
        if manifest.count != images.len() {
            return Err(Error::format(
                0,
                format!("manifest count {} but {} images stored", manifest.count, images.len()),
            ));
        }
    }
    Ok(images.into_iter().map(Arc::new).collect())
}

/// Loads a pair list and the dataset directory that holds it.
pub fn load_pair_file<T: Scalar>(pairs_path: &Path) -> Result<Vec<PairSample<T>>> {
    let index = parse_pairs(&fs::read_to_string(pairs_path)?)?;
    if index.is_empty() {
        return Err(Error::EmptyBatch("pair file lists no pairs"));
    }
    let dir = pairs_path.parent().unwrap_or(Path::new("."));
    let images = load_dataset_images::<T>(dir)?;
    assemble_pairs(&images, &index)
}

/// Shuffles a slice with a ChaCha8 stream keyed by `(seed, stream)`.
pub fn shuffled_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = image_rng(seed, stream);
    idx.shuffle(&mut rng);
    idx
}
