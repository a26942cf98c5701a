//! On-disk formats: SPKT tensors, weight directories, and JSON-lines files.
//!
//! SPKT layout: magic bytes `SPKT`, `u8` version (1), `u8` rank, `rank` x
//! `u32` little-endian extents, then the payload as `f32` little-endian in
//! row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamBank;
use crate::tensor::{numel_of, Tensor};

pub const SPKT_MAGIC: &[u8; 4] = b"SPKT";
pub const SPKT_VERSION: u8 = 1;

/// Serialize a tensor into SPKT bytes.
pub fn spkt_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let rank = t.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::contract("tensor rank exceeds SPKT limit"));
    }
    let mut out = Vec::with_capacity(6 + 4 * rank + 4 * t.numel());
    out.extend_from_slice(SPKT_MAGIC);
    out.push(SPKT_VERSION);
    out.push(rank as u8);
    for d in t.shape() {
        if *d > u32::MAX as usize {
            return Err(Error::contract("tensor extent exceeds SPKT limit"));
        }
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse SPKT bytes into a tensor (f32 payload widened to f64).
pub fn spkt_parse(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 || &bytes[0..4] != SPKT_MAGIC {
        return Err(Error::data("not an SPKT tensor (bad magic)"));
    }
    if bytes[4] != SPKT_VERSION {
        return Err(Error::data(format!("unsupported SPKT version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::data("truncated SPKT header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 4 * i;
        let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        shape.push(d as usize);
    }
    let n = numel_of(&shape);
    if bytes.len() != header + 4 * n {
        return Err(Error::data(format!(
            "SPKT payload length mismatch: expected {} floats",
            n
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = header + 4 * i;
        let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        data.push(v as f64);
    }
    Tensor::new(data, shape)
}

pub fn write_spkt(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = spkt_bytes(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_spkt(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    spkt_parse(&bytes)
}

/// Quantize to f32 and back; SPKT stores f32, so tensors written after this
/// round-trip bit-exactly.
pub fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

// ── Weight directories ───────────────────────────────────────────────

/// One line of a weight-directory manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

/// Persist every parameter as `<index>.spkt` plus a `manifest.jsonl`.
pub fn save_weights(dir: &Path, bank: &ParamBank) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest =
        fs::File::create(&manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    for (i, p) in bank.iter().enumerate() {
        let file = format!("{i:04}.spkt");
        let tensor = Tensor::new(p.value.clone(), p.shape.clone())?;
        write_spkt(&dir.join(&file), &tensor)?;
        let entry = WeightEntry {
            name: p.name.clone(),
            file,
            shape: p.shape.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(manifest, "{line}").map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Load weights back into a bank with an identical parameter layout.
pub fn load_weights(dir: &Path, bank: &mut ParamBank) -> Result<()> {
    let manifest_path = dir.join("manifest.jsonl");
    let entries: Vec<WeightEntry> = read_jsonl(&manifest_path)?;
    if entries.len() != bank.len() {
        return Err(Error::data(format!(
            "weight manifest has {} entries but the model has {} parameters",
            entries.len(),
            bank.len()
        )));
    }
    for entry in entries {
        let id = bank.by_name(&entry.name).ok_or_else(|| {
            Error::data(format!("weight manifest names unknown parameter {:?}", entry.name))
        })?;
        let tensor = read_spkt(&dir.join(&entry.file))?;
        if tensor.shape() != bank.get(id).shape.as_slice() {
            return Err(Error::data(format!(
                "parameter {:?}: stored shape {:?} does not match model shape {:?}",
                entry.name,
                tensor.shape(),
                bank.get(id).shape
            )));
        }
        bank.set_value(id, tensor.to_vec())?;
    }
    Ok(())
}

// ── JSON lines ───────────────────────────────────────────────────────

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line)
            .map_err(|e| Error::Serde(format!("{} line {}: {}", path.display(), i + 1, e)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Serde(e.to_string()))?;
        buf.push_str(&line);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(item).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Resolve a path relative to a dataset/output root.
pub fn under(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spkt_round_trip_preserves_f32_values() {
        let t = Tensor::new(
            vec![quantize_f32(0.1), quantize_f32(-2.75), quantize_f32(1e-5), 0.5],
            vec![2, 2],
        )
        .unwrap();
        let bytes = spkt_bytes(&t).unwrap();
        assert_eq!(&bytes[0..4], b"SPKT");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        let back = spkt_parse(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn spkt_rejects_bad_magic() {
        assert!(spkt_parse(b"NOPE\x01\x00").is_err());
    }

    #[test]
    fn spkt_rejects_truncated_payload() {
        let t = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        let mut bytes = spkt_bytes(&t).unwrap();
        bytes.pop();
        assert!(spkt_parse(&bytes).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bank = ParamBank::new();
        bank.register("a.w", vec![2, 2], vec![0.5, -0.25, 1.0, 2.0]);
        bank.register("a.b", vec![2], vec![0.125, 0.0]);
        save_weights(dir.path(), &bank).unwrap();

        let mut other = ParamBank::new();
        other.register("a.w", vec![2, 2], vec![0.0; 4]);
        other.register("a.b", vec![2], vec![0.0; 2]);
        load_weights(dir.path(), &mut other).unwrap();
        assert_eq!(other.get(crate::nn::ParamId(0)).value, vec![0.5, -0.25, 1.0, 2.0]);
        assert_eq!(other.get(crate::nn::ParamId(1)).value, vec![0.125, 0.0]);
    }
}
