//! Single-file model container.
//!
//! Layout: an 8-byte magic (`HARMNET1`), a little-endian `u32` manifest
//! length, a UTF-8 JSON manifest, zero padding up to a 64-byte boundary,
//! then the raw little-endian tensor payload. The manifest embeds the
//! model spec and a tensor index (name, dtype, shape, byte offset into
//! the payload), so a file is self-describing and loads without any
//! out-of-band information. Round trips are bitwise exact in both
//! element types.
//!
//! Normalization momentum and epsilon are fixed constants of the
//! library, not stored fields.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::nn::Model;
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"HARMNET1";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload (after the alignment padding).
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

fn payload_start(manifest_len: usize) -> usize {
    let head = MAGIC.len() + 4 + manifest_len;
    head.div_ceil(ALIGN) * ALIGN
}

/// Serialize a model into the container format.
pub fn write_model<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let tensors = model.export_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * T::DTYPE.size_bytes()) as u64;
    }
    let manifest = Manifest {
        spec: model.spec.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::format(format!("manifest serialization failed: {e}")))?;
    if json.len() > u32::MAX as usize {
        return Err(Error::format("manifest too large"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let pad = payload_start(json.len()) - (MAGIC.len() + 4 + json.len());
    w.write_all(&vec![0u8; pad])?;
    for (_, t) in &tensors {
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Parse a container from a byte buffer.
pub fn read_model<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::format(format!(
                "file truncated: expected at least {n} bytes, found {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(MAGIC.len() + 4)?;
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12 + mlen)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::format(format!("manifest does not parse: {e}")))?;
    let payload = &bytes[payload_start(mlen).min(bytes.len())..];
    let mut map: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for entry in &manifest.tensors {
        let dtype = Dtype::from_name(&entry.dtype)?;
        if dtype != T::DTYPE {
            return Err(Error::format(format!(
                "tensor {} is {}, loader expects {}",
                entry.name,
                entry.dtype,
                T::DTYPE.name()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * dtype.size_bytes();
        let start = entry.offset as usize;
        if start + nbytes > payload.len() {
            return Err(Error::format(format!(
                "tensor {} overruns the payload ({} + {} > {})",
                entry.name,
                start,
                nbytes,
                payload.len()
            )));
        }
        let width = dtype.size_bytes();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = start + i * width;
            data.push(T::read_le(&payload[at..at + width]));
        }
        if map
            .insert(entry.name.clone(), Tensor::new(&entry.shape, data)?)
            .is_some()
        {
            return Err(Error::format(format!(
                "tensor {} appears twice in the manifest",
                entry.name
            )));
        }
    }
    Model::import_tensors(&manifest.spec, &map)
}

/// Write a model to a file.
pub fn save_model<T: Scalar, P: AsRef<Path>>(model: &Model<T>, path: P) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Read a model from a file.
pub fn load_model<T: Scalar, P: AsRef<Path>>(path: P) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_model(&bytes)
}

/// Peek at a container's manifest without loading tensors (the spec and
/// dtype are enough to dispatch a typed load).
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a model container (bad magic)"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::format("file truncated inside the manifest"));
    }
    serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::format(format!("manifest does not parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    fn round_trip<T: Scalar>(name: &str, seed: u64) {
        let spec = preset(name).unwrap();
        let model: Model<T> = Model::init(&spec, seed).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back: Model<T> = read_model(&buf).unwrap();
        assert_eq!(model.spec, back.spec);
        let a = model.export_tensors();
        let b = back.export_tensors();
        assert_eq!(a.len(), b.len());
        for ((n1, t1), (_, t2)) in a.iter().zip(b.iter()) {
            assert_eq!(t1.shape(), t2.shape(), "{n1}");
            // Bitwise: compare the encoded bytes, not float equality.
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            for v in t1.data() {
                v.write_le(&mut b1);
            }
            for v in t2.data() {
                v.write_le(&mut b2);
            }
            assert_eq!(b1, b2, "{n1}");
        }
    }

    #[test]
    fn round_trips_are_bitwise_in_both_dtypes() {
        round_trip::<f32>("toy-harm", 41);
        round_trip::<f64>("toy-harm", 42);
        round_trip::<f32>("wrn-16-8-harm", 43);
    }

    #[test]
    fn files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.hnet");
        let spec = preset("toy-cnn").unwrap();
        let model: Model<f32> = Model::init(&spec, 7).unwrap();
        save_model(&model, &path).unwrap();
        let back: Model<f32> = load_model(&path).unwrap();
        for ((_, t1), (_, t2)) in model
            .export_tensors()
            .iter()
            .zip(back.export_tensors().iter())
        {
            assert_eq!(t1.data(), t2.data());
        }
        // Manifest peek agrees with the typed load.
        let bytes = std::fs::read(&path).unwrap();
        let manifest = read_manifest(&bytes).unwrap();
        assert_eq!(manifest.spec.name, "toy-cnn");
        assert!(manifest.tensors.iter().all(|t| t.dtype == "f32"));
    }

    #[test]
    fn payload_is_aligned() {
        let spec = preset("toy-cnn").unwrap();
        let model: Model<f32> = Model::init(&spec, 7).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let mlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        assert_eq!(payload_start(mlen) % ALIGN, 0);
        // First tensor starts exactly at the aligned boundary.
        let manifest = read_manifest(&buf).unwrap();
        assert_eq!(manifest.tensors[0].offset, 0);
    }

    #[test]
    fn corrupted_files_are_named_errors() {
        let spec = preset("toy-cnn").unwrap();
        let model: Model<f32> = Model::init(&spec, 7).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        let err = read_model::<f32>(&bad_magic).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("magic"));

        let truncated = &buf[..buf.len() - 8];
        let err = read_model::<f32>(truncated).unwrap_err();
        assert_eq!(err.class(), "format");

        // Wrong element type for the loader.
        let err = read_model::<f64>(&buf).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("f32"));

        let err = read_model::<f32>(b"HARMNET1").unwrap_err();
        assert_eq!(err.class(), "format");
    }
}
