//! `GETNETv1` checkpoint container.
//!
//! Layout: the 8 magic bytes `GETNETv1`, a little-endian `u64` manifest
//! length, the UTF-8 `key=value` manifest, then every parameter tensor as
//! raw little-endian scalars in manifest order. The manifest records the
//! architecture, so a checkpoint is self-describing, and carries a SHA-256
//! of the payload.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::data::{parse_key_values, sha256_hex};
use crate::error::{Error, Result};
use crate::nn::{format_specs, parse_specs, Network};
use crate::stn::StnConfig;
use crate::tensor::{Precision, Scalar};
use crate::training::{Mode, ModelState};

pub const MAGIC: &[u8; 8] = b"GETNETv1";

fn dims(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::format(0, format!("bad shape {s:?} in manifest"))))
        .collect()
}

fn tensors<T: Scalar>(model: &ModelState<T>) -> Vec<(String, &crate::tensor::Tensor<T>)> {
    let mut out = Vec::new();
    if let Some(loc) = &model.locnet {
        for (i, p) in loc.params.iter().enumerate() {
            out.push((format!("locnet.{i}"), &p.value));
        }
    }
    for (i, p) in model.branch.params.iter().enumerate() {
        out.push((format!("branch.{i}"), &p.value));
    }
    out
}

pub fn encode_checkpoint<T: Scalar>(model: &ModelState<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensor_lines = String::new();
    for (name, t) in tensors(model) {
        let _ = writeln!(tensor_lines, "tensor.{name}={}", dims(t.shape()));
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut m = String::new();
    let _ = writeln!(m, "precision={}", T::PRECISION.bits());
    let _ = writeln!(m, "mode={}", model.mode);
    let _ = writeln!(m, "input_shape={}", dims(&model.input_shape));
    let _ = writeln!(m, "crop={}", dims(&[model.stn.out_height, model.stn.out_width]));
    let _ = writeln!(m, "s_min={}", model.stn.s_min);
    let _ = writeln!(m, "s_max={}", model.stn.s_max);
    let _ = writeln!(m, "localisation={}", format_specs(&model.stn.localisation));
    let _ = writeln!(m, "branch={}", format_specs(model.branch.specs()));
    let _ = writeln!(m, "step_count={}", model.step_count);
    let _ = writeln!(m, "epochs_completed={}", model.epochs_completed);
    let _ = writeln!(m, "rng_seed={}", hex::encode(model.rng.get_seed()));
    let _ = writeln!(m, "rng_stream={}", model.rng.get_stream());
    let _ = writeln!(m, "rng_word_pos={}", model.rng.get_word_pos());
    m.push_str(&tensor_lines);
    let _ = writeln!(m, "payload_sha256={}", sha256_hex(&[&payload]));

    let mut out = Vec::with_capacity(16 + m.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(m.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint<T: Scalar>(model: &ModelState<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

struct Header<'a> {
    kv: std::collections::BTreeMap<String, String>,
    payload: &'a [u8],
    payload_offset: usize,
}

fn split_header(bytes: &[u8]) -> Result<Header<'_>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(0, "missing GETNETv1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(8, "manifest length runs past end of file"))?;
    let text = std::str::from_utf8(&bytes[16..end]).map_err(|e| Error::format(16, format!("manifest is not UTF-8: {e}")))?;
    Ok(Header {
        kv: parse_key_values(text)?,
        payload: &bytes[end..],
        payload_offset: end,
    })
}

/// Precision a checkpoint was written with.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path)?;
    let header = split_header(&bytes)?;
    let bits: u32 = header
        .kv
        .get("precision")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(16, "manifest lacks precision"))?;
    Precision::from_bits(bits).ok_or_else(|| Error::format(16, format!("unsupported precision {bits}")))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    let header = split_header(bytes)?;
    let kv = &header.kv;
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(16, format!("manifest lacks {k}")))
    };
    let num = |k: &str| -> Result<u128> {
        get(k)?.parse().map_err(|_| Error::format(16, format!("manifest field {k} is not a number")))
    };
    let float = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::format(16, format!("manifest field {k} is not a number")))
    };

    let bits = num("precision")? as u32;
    if bits != T::PRECISION.bits() {
        return Err(Error::format(
            16,
            format!("checkpoint holds {bits}-bit values, loader expects {}", T::PRECISION.bits()),
        ));
    }
    let mode: Mode = get("mode")?.parse().map_err(|_| Error::format(16, "bad mode"))?;
    let input_shape = parse_dims(get("input_shape")?)?;
    let crop = parse_dims(get("crop")?)?;
    if crop.len() != 2 || input_shape.len() != 3 {
        return Err(Error::format(16, "bad crop or input shape"));
    }
    let stn = StnConfig {
        out_height: crop[0],
        out_width: crop[1],
        s_min: float("s_min")?,
        s_max: float("s_max")?,
        localisation: parse_specs(get("localisation")?).map_err(|e| Error::format(16, e.to_string()))?,
    };
    let branch_specs = parse_specs(get("branch")?).map_err(|e| Error::format(16, e.to_string()))?;
    let mut branch = Network::<T>::zeros(&[input_shape[0], crop[0], crop[1]], &branch_specs)
        .map_err(|e| Error::format(16, e.to_string()))?;
    let mut locnet = match mode {
        Mode::GetNet => Some(
            Network::<T>::zeros(&input_shape, &stn.localisation).map_err(|e| Error::format(16, e.to_string()))?,
        ),
        Mode::BaselineSiamese => None,
    };

    let expected_sha = get("payload_sha256")?;
    if sha256_hex(&[header.payload]) != expected_sha {
        return Err(Error::format(header.payload_offset as u64, "payload checksum mismatch"));
    }

    let mut offset = 0usize;
    let mut fill = |name: String, net: &mut Network<T>, idx: usize| -> Result<()> {
        let declared = parse_dims(get(&format!("tensor.{name}"))?)?;
        let value = &mut net.params[idx].value;
        if declared != value.shape() {
            return Err(Error::format(
                16,
                format!("tensor {name} declared {declared:?}, architecture needs {:?}", value.shape()),
            ));
        }
        let n = value.len() * T::BYTES;
        let bytes = header
            .payload
            .get(offset..offset + n)
            .ok_or_else(|| Error::format((header.payload_offset + offset) as u64, format!("payload ends inside {name}")))?;
        for (v, chunk) in value.data_mut().iter_mut().zip(bytes.chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        offset += n;
        Ok(())
    };
    if let Some(loc) = locnet.as_mut() {
        for i in 0..loc.params.len() {
            fill(format!("locnet.{i}"), loc, i)?;
        }
    }
    for i in 0..branch.params.len() {
        fill(format!("branch.{i}"), &mut branch, i)?;
    }
    if offset != header.payload.len() {
        return Err(Error::format(
            (header.payload_offset + offset) as u64,
            "trailing bytes after the last tensor",
        ));
    }

    let seed: [u8; 32] = hex::decode(get("rng_seed")?)
        .map_err(|e| Error::format(16, format!("bad rng seed: {e}")))?
        .try_into()
        .map_err(|_| Error::format(16, "rng seed must be 32 bytes"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(num("rng_stream")? as u64);
    rng.set_word_pos(num("rng_word_pos")?);

    let model = ModelState {
        mode,
        input_shape,
        stn,
        locnet,
        branch,
        rng,
        step_count: num("step_count")? as u64,
        epochs_completed: num("epochs_completed")? as usize,
    };
    model.stn.validate().map_err(|e| Error::format(16, e.to_string()))?;
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = ModelState::<f64>::new(&ModelConfig::for_input(Mode::GetNet, 60), 11).unwrap();
        let bytes = encode_checkpoint(&model);
        let back: ModelState<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.branch, model.branch);
        assert_eq!(back.locnet, model.locnet);
        assert_eq!(back.rng, model.rng);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn baseline_has_no_locnet() {
        let model = ModelState::<f32>::new(&ModelConfig::for_input(Mode::BaselineSiamese, 60), 1).unwrap();
        let back: ModelState<f32> = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert!(back.locnet.is_none());
        assert_eq!(back.branch, model.branch);
    }

    #[test]
    fn corrupt_payload_byte_is_detected() {
        let model = ModelState::<f32>::new(&ModelConfig::for_input(Mode::GetNet, 60), 2).unwrap();
        let mut bytes = encode_checkpoint(&model);
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_and_precision() {
        let model = ModelState::<f32>::new(&ModelConfig::for_input(Mode::GetNet, 60), 2).unwrap();
        let mut bytes = encode_checkpoint(&model);
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
