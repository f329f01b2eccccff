//! IDX container reader/writer (the MNIST file format). All integers are
//! big-endian; `.gz` files are decompressed transparently.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if !is_gz(path) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::format(0, format!("{}: bad gzip stream: {e}", path.display())))?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset as u64, "file ends inside the header"))
}

/// Parsed image container: `count` images of `rows x cols` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic}, expected {IMAGES_MAGIC}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, format!("degenerate image size {rows}x{cols}")));
    }
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        let stored = body.len() / (rows * cols);
        return Err(Error::format(
            (16 + body.len()) as u64,
            format!("truncated: header declares {count} images, file holds {stored}"),
        ));
    }
    if body.len() > need {
        return Err(Error::format((16 + need) as u64, "trailing bytes after the last image"));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic}, expected {LABELS_MAGIC}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            (8 + body.len()) as u64,
            format!("truncated: header declares {count} labels, file holds {}", body.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::format((8 + count) as u64, "trailing bytes after the last label"));
    }
    Ok(body.to_vec())
}

fn to_tensors<T: Scalar>(parsed: &IdxImages) -> Vec<Tensor<T>> {
    let scale = T::from_f64_lossy(255.0);
    parsed
        .pixels
        .chunks_exact(parsed.rows * parsed.cols)
        .map(|px| {
            Tensor::new(
                &[1, parsed.rows, parsed.cols],
                px.iter().map(|&b| T::from_u8(b).expect("u8 fits") / scale).collect(),
            )
            .expect("chunk matches shape")
        })
        .collect()
}

/// Reads an image file alone as `1 x rows x cols` tensors in `[0, 1]`.
pub fn load_idx_images<T: Scalar>(path: &Path) -> Result<Vec<Tensor<T>>> {
    let parsed = parse_images(&read_bytes(path)?)?;
    Ok(to_tensors(&parsed))
}

/// Reads paired image and label files.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Vec<LabeledImage<T>>> {
    let images = parse_images(&read_bytes(images_path)?)?;
    let labels = parse_labels(&read_bytes(labels_path)?)?;
    if labels.len() != images.count {
        return Err(Error::format(
            4,
            format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            ),
        ));
    }
    Ok(to_tensors(&images)
        .into_iter()
        .zip(labels)
        .map(|(image, class)| LabeledImage {
            image,
            class_id: class as usize,
            bbox: None,
        })
        .collect())
}

/// Quantizes `[0, 1]` single-channel images to bytes.
pub fn encode_images<T: Scalar>(images: &[Tensor<T>]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first().map(|t| t.shape()) {
        Some(&[1, r, c]) => (r, c),
        Some(s) => return Err(Error::dim(format!("IDX images must be 1 x H x W, got {s:?}"))),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.shape() != [1, rows, cols] {
            return Err(Error::dim(format!(
                "mixed image shapes {:?} and [1, {rows}, {cols}]",
                img.shape()
            )));
        }
        out.extend(img.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub(crate) fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_idx_images<T: Scalar>(path: &Path, images: &[Tensor<T>]) -> Result<()> {
    write_bytes(path, &encode_images(images)?)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_bytes(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn single_blank_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[1, 28, 28]);
        img.extend(vec![0u8; 784]);
        let mut lab = header(LABELS_MAGIC, &[1]);
        lab.push(7);
        fs::write(dir.path().join("i"), img).unwrap();
        fs::write(dir.path().join("l"), lab).unwrap();
        let set = load_idx::<f32>(&dir.path().join("i"), &dir.path().join("l")).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].image, Tensor::zeros(&[1, 28, 28]));
        assert_eq!(set[0].class_id, 7);
    }

    #[test]
    fn truncated_body_reports_offset() {
        let mut img = header(IMAGES_MAGIC, &[10, 2, 2]);
        img.extend(vec![0u8; 5 * 4]);
        match parse_images(&img) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 36);
                assert!(message.contains("10") && message.contains('5'), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        assert!(matches!(parse_images(&header(2049, &[0, 1, 1])), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_labels(&header(2051, &[0])), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_images(&[0, 0]), Err(Error::Format { .. })));

        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[2, 1, 1]);
        img.extend([1, 2]);
        let mut lab = header(LABELS_MAGIC, &[1]);
        lab.push(0);
        fs::write(dir.path().join("i"), img).unwrap();
        fs::write(dir.path().join("l"), lab).unwrap();
        assert!(matches!(
            load_idx::<f32>(&dir.path().join("i"), &dir.path().join("l")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![
            Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 / 11.0),
            Tensor::<f64>::full(&[1, 3, 4], 1.0),
        ];
        let p = dir.path().join("x-images-idx3-ubyte.gz");
        write_idx_images(&p, &imgs).unwrap();
        let back = load_idx_images::<f64>(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].max_abs_diff(&imgs[0]) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(back[1], imgs[1]);
    }
}
