//! Encoder plus task heads as one parameter set, and the on-disk checkpoint
//! format: `manifest.json` describing every tensor and `tensors.bin` holding
//! their little-endian f64 values back to back in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::objectives::HeadParams;
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT: &str = "elberto-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

impl Model {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<Model> {
        let encoder = EncoderParams::init(config, rng)?;
        let heads = HeadParams::init(config, rng);
        Ok(Model { encoder, heads })
    }

    pub fn zeros(config: &EncoderConfig) -> Model {
        Model {
            encoder: EncoderParams::zeros(config),
            heads: HeadParams::zeros(config),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.encoder.named();
        out.extend(self.heads.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.encoder.named_mut();
        out.extend(self.heads.named_mut());
        out
    }

    pub fn manifest(config: &EncoderConfig) -> Vec<(String, [usize; 2])> {
        Model::zeros(config)
            .named()
            .into_iter()
            .map(|(n, t)| (n, [t.nrows(), t.ncols()]))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.named_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.named_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of every value, manifest order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for (_, t) in self.named() {
            if index < t.len() {
                return t.as_slice().expect("standard layout")[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for (_, t) in self.named_mut() {
            if index < t.len() {
                t.as_slice_mut().expect("standard layout")[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Name of the tensor holding flat index `index`, with the in-tensor offset.
    pub fn locate_flat(&self, mut index: usize) -> (String, usize) {
        for (name, t) in self.named() {
            if index < t.len() {
                return (name, index);
            }
            index -= t.len();
        }
        panic!("flat index out of range");
    }

    fn read_flat(&mut self, values: &[f64]) {
        let mut at = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&values[at..at + n]);
            at += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSection {
    pub step: u64,
    pub first_moment: Vec<TensorEntry>,
    pub second_moment: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSection>,
    /// Free-form provenance (training config, corpus fingerprint, epoch).
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// Adam moments saved beside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub m: Model,
    pub v: Model,
}

fn entries(model: &Model, start: u64) -> (Vec<TensorEntry>, u64) {
    let mut offset = start;
    let list = model
        .named()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
                dtype: "f64".into(),
                offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    (list, offset)
}

fn push_le(buf: &mut Vec<u8>, model: &Model) {
    for (_, t) in model.named() {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    moments: Option<&MomentState>,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tensors, end) = entries(model, 0);
    let mut buf = Vec::with_capacity(end as usize);
    push_le(&mut buf, model);
    let optimizer = moments.map(|mom| {
        let (first_moment, mid) = entries(&mom.m, end);
        let (second_moment, _) = entries(&mom.v, mid);
        push_le(&mut buf, &mom.m);
        push_le(&mut buf, &mom.v);
        OptimizerSection {
            step: mom.step,
            first_moment,
            second_moment,
        }
    });
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config().clone(),
        tensors,
        optimizer,
        meta,
    };
    let path = dir.join(TENSORS_FILE);
    fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    Ok(manifest)
}

fn read_section(bytes: &[u8], list: &[TensorEntry], config: &EncoderConfig) -> Result<Model> {
    let expected = Model::manifest(config);
    if list.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            list.len(),
            expected.len()
        )));
    }
    let mut values = Vec::new();
    for (entry, (name, shape)) in list.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Shape {
                name: entry.name.clone(),
                expected: shape.to_vec(),
                found: entry.shape.to_vec(),
            });
        }
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n = shape[0] * shape[1];
        let start = entry.offset as usize;
        let raw = bytes
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: data past end of file", entry.name)))?;
        values.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        );
    }
    let mut model = Model::zeros(config);
    model.read_flat(&values);
    if !model.all_finite() {
        return Err(Error::NonFinite("checkpoint tensors".into()));
    }
    Ok(model)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Option<MomentState>, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let model = read_section(&bytes, &manifest.tensors, &manifest.config)?;
    let moments = match &manifest.optimizer {
        Some(opt) => Some(MomentState {
            step: opt.step,
            m: read_section(&bytes, &opt.first_moment, &manifest.config)?,
            v: read_section(&bytes, &opt.second_moment, &manifest.config)?,
        }),
        None => None,
    };
    Ok((model, moments, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            max_len: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            dropout_p: 0.1,
            n_types: 2,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::init(&cfg(), &mut rng_from_seed(4)).unwrap();
        let mut m = Model::zeros(&cfg());
        m.add_scaled(&model, 0.5);
        let moments = MomentState {
            step: 7,
            m: m.clone(),
            v: m,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, Some(&moments), Default::default()).unwrap();
        let (back, mom, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(mom.unwrap(), moments);
        assert_eq!(manifest.tensors[0].name, "embed.word");
        let bytes = fs::metadata(dir.path().join(TENSORS_FILE)).unwrap().len();
        assert_eq!(bytes, 3 * 8 * model.num_params() as u64);
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let model = Model::init(&cfg(), &mut rng_from_seed(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, None, Default::default()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"d_ff\": 16", "\"d_ff\": 12", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Shape { .. })));
    }

    #[test]
    fn flat_indexing() {
        let mut model = Model::init(&cfg(), &mut rng_from_seed(1)).unwrap();
        let n = model.num_params();
        model.set_flat(n - 1, 3.5);
        assert_eq!(model.get_flat(n - 1), 3.5);
        assert_eq!(model.to_flat()[n - 1], 3.5);
        assert_eq!(model.locate_flat(0).0, "embed.word");
    }
}
