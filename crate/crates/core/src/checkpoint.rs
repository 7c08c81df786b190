//! Model checkpoints: `MSTW` magic, a version word, a UTF-8 manifest
//! (config key/values plus a tensor table of name, shape, byte offset,
//! length), then one blob of little-endian binary32 values in manifest
//! order.
//!
//! Parameters are kept on the binary32 grid by initialization and by the
//! optimizer, so save followed by load reproduces every parameter bitwise.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{MstConfig, MstPlusPlus};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSTW";
const VERSION: u32 = 1;

pub fn save(model: &MstPlusPlus, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: format!("cannot write: {e}"),
    })
}

pub fn load(path: &Path) -> Result<MstPlusPlus> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: format!("cannot read: {e}"),
    })?;
    from_bytes(&bytes, &path.display().to_string())
}

pub fn to_bytes(model: &MstPlusPlus) -> Vec<u8> {
    let mut manifest = String::new();
    manifest.push_str(&format!("model.in_channels={}\n", model.config.in_channels));
    manifest.push_str(&format!("model.base_dim={}\n", model.config.base_dim));
    manifest.push_str(&format!("model.stages={}\n", model.config.stages));

    let mut blob: Vec<u8> = Vec::new();
    model.visit(&mut |name, t| {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "tensor {name} {shape} {offset} {}\n",
            blob.len() - offset
        ));
    });

    let mut out = Vec::with_capacity(12 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    out
}

struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<MstPlusPlus> {
    let err = |message: String| Error::Format {
        path: origin.to_string(),
        message,
    };
    if bytes.len() < 12 {
        return Err(err("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err("bad magic; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + manifest_len {
        return Err(err("truncated manifest".into()));
    }
    let manifest = std::str::from_utf8(&bytes[12..12 + manifest_len])
        .map_err(|_| err("manifest is not UTF-8".into()))?;
    let blob = &bytes[12 + manifest_len..];

    let mut config_pairs: BTreeMap<String, usize> = BTreeMap::new();
    let mut tensors: BTreeMap<String, TensorEntry> = BTreeMap::new();
    let mut blob_total = 0usize;
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(err(format!("manifest line {}: malformed tensor row", lineno + 1)));
            }
            let shape: Vec<usize> = fields[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(format!("manifest line {}: bad shape", lineno + 1)))?;
            let offset: usize = fields[2]
                .parse()
                .map_err(|_| err(format!("manifest line {}: bad offset", lineno + 1)))?;
            let len: usize = fields[3]
                .parse()
                .map_err(|_| err(format!("manifest line {}: bad length", lineno + 1)))?;
            let numel: usize = shape.iter().product();
            if len != numel * 4 {
                return Err(err(format!(
                    "tensor {}: shape/length disagreement ({} bytes for {} values)",
                    fields[0], len, numel
                )));
            }
            blob_total = blob_total.max(offset + len);
            tensors.insert(
                fields[0].to_string(),
                TensorEntry { shape, offset, len },
            );
        } else if let Some((key, value)) = line.split_once('=') {
            let parsed: usize = value
                .parse()
                .map_err(|_| err(format!("manifest line {}: bad value for {key}", lineno + 1)))?;
            config_pairs.insert(key.to_string(), parsed);
        } else {
            return Err(err(format!("manifest line {}: unrecognized entry", lineno + 1)));
        }
    }
    if blob.len() != blob_total {
        return Err(err(format!(
            "manifest/blob length disagreement: blob has {} bytes, manifest covers {blob_total}",
            blob.len()
        )));
    }

    let need = |key: &str| -> Result<usize> {
        config_pairs
            .get(key)
            .copied()
            .ok_or_else(|| err(format!("missing config key {key}")))
    };
    let config = MstConfig {
        in_channels: need("model.in_channels")?,
        base_dim: need("model.base_dim")?,
        stages: need("model.stages")?,
    };

    // Build at the recorded architecture, then overwrite every parameter.
    let mut model = MstPlusPlus::seeded(config, 0)?;
    let mut missing: Vec<String> = Vec::new();
    let mut mismatch: Vec<String> = Vec::new();
    let mut used = 0usize;
    model.visit_mut(&mut |name, t| {
        let Some(entry) = tensors.get(name) else {
            missing.push(name.to_string());
            return;
        };
        used += 1;
        if entry.shape != t.shape() {
            mismatch.push(name.to_string());
            return;
        }
        let mut data = Vec::with_capacity(entry.shape.iter().product());
        for i in 0..entry.len / 4 {
            let at = entry.offset + 4 * i;
            data.push(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()) as f64);
        }
        *t = Tensor::new(entry.shape.clone(), data).expect("validated length");
    });
    if !missing.is_empty() {
        return Err(err(format!("missing tensors: {}", missing.join(", "))));
    }
    if !mismatch.is_empty() {
        return Err(err(format!("shape mismatch for: {}", mismatch.join(", "))));
    }
    if used != tensors.len() {
        return Err(err(format!(
            "manifest lists {} tensors but the architecture uses {used}",
            tensors.len()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn model() -> MstPlusPlus {
        MstPlusPlus::seeded(MstConfig::tiny(4, 1), 17).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let bytes1 = to_bytes(&m);
        let restored = from_bytes(&bytes1, "t").unwrap();
        let bytes2 = to_bytes(&restored);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn load_reproduces_every_parameter_bitwise() {
        let m = model();
        let restored = from_bytes(&to_bytes(&m), "t").unwrap();
        let mut orig = Vec::new();
        m.visit(&mut |n, t| orig.push((n.to_string(), t.clone())));
        let mut back = Vec::new();
        restored.visit(&mut |n, t| back.push((n.to_string(), t.clone())));
        assert_eq!(orig.len(), back.len());
        for ((n1, t1), (n2, t2)) in orig.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2, "parameter {n1}");
        }
    }

    #[test]
    fn forward_after_round_trip_is_bitwise() {
        let m = model();
        let restored = from_bytes(&to_bytes(&m), "t").unwrap();
        let mut rng = Rng::new(91);
        let x = Tensor::new(
            vec![1, 3, 8, 8],
            (0..192).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        assert_eq!(m.infer(&x).unwrap(), restored.infer(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save(&m, &path).unwrap();
        let restored = load(&path).unwrap();
        assert_eq!(to_bytes(&m), to_bytes(&restored));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&model());

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(
            from_bytes(&bad_magic, "t"),
            Err(Error::Format { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 7;
        assert!(from_bytes(&bad_version, "t").is_err());

        let truncated = &bytes[..bytes.len() - 2];
        assert!(from_bytes(truncated, "t").is_err());

        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        assert!(from_bytes(&trailing, "t").is_err());
    }

    #[test]
    fn manifest_architecture_mismatch_is_detected() {
        // claim a different stage count than the tensor table carries
        let m = model();
        let bytes = to_bytes(&m);
        let manifest_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[12..12 + manifest_len]).unwrap();
        let doctored = manifest.replace("model.stages=1", "model.stages=2");
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[0..8]);
        out.extend_from_slice(&(doctored.len() as u32).to_le_bytes());
        out.extend_from_slice(doctored.as_bytes());
        out.extend_from_slice(&bytes[12 + manifest_len..]);
        assert!(from_bytes(&out, "t").is_err());
    }
}
