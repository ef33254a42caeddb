//! On-disk formats.
//!
//! Everything binary goes through one container ("TTAQBIN1"): a magic tag,
//! an entry count, then named, typed, shaped payloads in little-endian
//! order. Writes are fully deterministic — identical inputs produce
//! byte-identical files.
//!
//! - Model checkpoint (`ttaq-ckpt v1`): a `__meta__` JSON entry holding the
//!   format tag and the model spec, then one f64 entry per parameter in
//!   `named_params` order.
//! - Dataset file (`ttaq-data v1`): `__meta__` manifest, `images` (f64,
//!   NCHW), `labels` (u32).
//! - Quant params (`ttaq-qparams v1`): plain JSON, layer name +
//!   granularity + bits + scale/zero-point arrays per entry.

use crate::error::{Error, Result};
use crate::nn::{Layer, Model, ModelSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TTAQBIN1";

pub const CKPT_FORMAT: &str = "ttaq-ckpt v1";
pub const DATA_FORMAT: &str = "ttaq-data v1";
pub const QPARAMS_FORMAT: &str = "ttaq-qparams v1";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U32(Vec<u32>),
    Json(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, entries.len() as u32)?;
    for e in entries {
        write_u32(&mut buf, e.name.len() as u32)?;
        buf.extend_from_slice(e.name.as_bytes());
        let tag: u8 = match e.payload {
            Payload::F64(_) => 0,
            Payload::U32(_) => 1,
            Payload::Json(_) => 2,
        };
        buf.push(tag);
        write_u32(&mut buf, e.shape.len() as u32)?;
        for &d in &e.shape {
            write_u32(&mut buf, d as u32)?;
        }
        match &e.payload {
            Payload::F64(v) => {
                write_u32(&mut buf, v.len() as u32)?;
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::U32(v) => {
                write_u32(&mut buf, v.len() as u32)?;
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Json(s) => {
                write_u32(&mut buf, s.len() as u32)?;
                buf.extend_from_slice(s.as_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let data = std::fs::read(path)?;
    let mut r = data.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a TTAQBIN1 file", path.display())));
    }
    let count = read_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len = read_u32(&mut r)? as usize;
        let payload = match tag[0] {
            0 => {
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    v.push(f64::from_le_bytes(b));
                }
                Payload::F64(v)
            }
            1 => {
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    v.push(u32::from_le_bytes(b));
                }
                Payload::U32(v)
            }
            2 => {
                let mut s = vec![0u8; len];
                r.read_exact(&mut s)?;
                Payload::Json(String::from_utf8(s).map_err(|e| Error::Format(e.to_string()))?)
            }
            t => return Err(Error::Format(format!("unknown payload tag {}", t))),
        };
        entries.push(Entry { name, shape, payload });
    }
    Ok(entries)
}

// ── Checkpoints ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CkptMeta {
    format: String,
    spec: ModelSpec,
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let meta = CkptMeta { format: CKPT_FORMAT.to_string(), spec: model.spec.clone() };
    let mut entries = vec![Entry {
        name: "__meta__".into(),
        shape: vec![],
        payload: Payload::Json(serde_json::to_string(&meta)?),
    }];
    for (name, t) in model.named_params() {
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        });
    }
    write_container(path, &entries)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let entries = read_container(path)?;
    let meta_entry = entries
        .iter()
        .find(|e| e.name == "__meta__")
        .ok_or_else(|| Error::Format("checkpoint missing __meta__".into()))?;
    let meta: CkptMeta = match &meta_entry.payload {
        Payload::Json(s) => serde_json::from_str(s)?,
        _ => return Err(Error::Format("__meta__ must be JSON".into())),
    };
    if meta.format != CKPT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format '{}', expected '{}'",
            meta.format, CKPT_FORMAT
        )));
    }
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in entries {
        if e.name == "__meta__" {
            continue;
        }
        match e.payload {
            Payload::F64(v) => {
                tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), v)?);
            }
            _ => return Err(Error::Format(format!("entry {} has non-f64 payload", e.name))),
        }
    }
    let mut model = Model::init(meta.spec, 0)?;
    let mut take = |name: String| -> Result<Tensor> {
        tensors.remove(&name).ok_or_else(|| Error::Format(format!("checkpoint missing {}", name)))
    };
    for i in 0..model.layers.len() {
        match &mut model.layers[i] {
            Layer::Conv2d { weight, bias, .. } => {
                *weight = take(format!("layers.{}.weight", i))?;
                if let Some(b) = bias {
                    *b = take(format!("layers.{}.bias", i))?;
                }
            }
            Layer::Linear { weight, bias } => {
                *weight = take(format!("layers.{}.weight", i))?;
                if let Some(b) = bias {
                    *b = take(format!("layers.{}.bias", i))?;
                }
            }
            Layer::BatchNorm2d { gamma, beta, running_mean, running_var } => {
                *gamma = take(format!("layers.{}.gamma", i))?;
                *beta = take(format!("layers.{}.beta", i))?;
                *running_mean = take(format!("layers.{}.running_mean", i))?;
                *running_var = take(format!("layers.{}.running_var", i))?;
            }
            _ => {}
        }
    }
    if !tensors.is_empty() {
        let extra: Vec<_> = tensors.keys().cloned().collect();
        return Err(Error::Format(format!("checkpoint has unexpected entries: {:?}", extra)));
    }
    Ok(model)
}

// ── Datasets ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

pub fn save_dataset(
    path: &Path,
    manifest_path: &Path,
    ds: &crate::data::Dataset,
    seed: u64,
) -> Result<()> {
    let manifest = DatasetManifest {
        format: DATA_FORMAT.to_string(),
        shape: ds.images.shape().to_vec(),
        classes: ds.classes,
        seed,
    };
    let entries = vec![
        Entry {
            name: "__meta__".into(),
            shape: vec![],
            payload: Payload::Json(serde_json::to_string(&manifest)?),
        },
        Entry {
            name: "images".into(),
            shape: ds.images.shape().to_vec(),
            payload: Payload::F64(ds.images.data().to_vec()),
        },
        Entry {
            name: "labels".into(),
            shape: vec![ds.labels.len()],
            payload: Payload::U32(ds.labels.iter().map(|&l| l as u32).collect()),
        },
    ];
    write_container(path, &entries)?;
    if let Some(parent) = manifest_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<crate::data::Dataset> {
    let entries = read_container(path)?;
    let mut manifest: Option<DatasetManifest> = None;
    let mut images: Option<Tensor> = None;
    let mut labels: Option<Vec<usize>> = None;
    for e in entries {
        match (e.name.as_str(), e.payload) {
            ("__meta__", Payload::Json(s)) => manifest = Some(serde_json::from_str(&s)?),
            ("images", Payload::F64(v)) => images = Some(Tensor::new(e.shape, v)?),
            ("labels", Payload::U32(v)) => labels = Some(v.into_iter().map(|l| l as usize).collect()),
            _ => return Err(Error::Format(format!("unexpected dataset entry {}", e.name))),
        }
    }
    let manifest = manifest.ok_or_else(|| Error::Format("dataset missing manifest".into()))?;
    if manifest.format != DATA_FORMAT {
        return Err(Error::Format(format!(
            "unsupported dataset format '{}', expected '{}'",
            manifest.format, DATA_FORMAT
        )));
    }
    let images = images.ok_or_else(|| Error::Format("dataset missing images".into()))?;
    let labels = labels.ok_or_else(|| Error::Format("dataset missing labels".into()))?;
    if images.shape().first().copied() != Some(labels.len()) {
        return Err(Error::Format("image/label count mismatch".into()));
    }
    Ok(crate::data::Dataset { images, labels, classes: manifest.classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, BN_EPS_DEFAULT, BN_MOMENTUM_DEFAULT};

    fn small_model() -> Model {
        let spec = ModelSpec {
            input: (1, 4, 4),
            classes: 2,
            layers: vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1, bias: false },
                LayerSpec::BatchNorm2d { channels: 2 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { in_features: 2, out_features: 2, bias: true },
            ],
            bn_momentum: BN_MOMENTUM_DEFAULT,
            bn_eps: BN_EPS_DEFAULT,
        };
        Model::init(spec, 9).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let model = small_model();
        let dir = std::env::temp_dir().join("ttaq-io-test");
        let path = dir.join("m.ckpt");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.spec, loaded.spec);
        for ((n1, t1), (n2, t2)) in model.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(n1, n2);
            assert!(t1.bitwise_eq(t2), "param {} changed in roundtrip", n1);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_writes_are_byte_identical() {
        let model = small_model();
        let dir = std::env::temp_dir().join("ttaq-io-test2");
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_model(&p1, &model).unwrap();
        save_model(&p2, &model).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("ttaq-io-test3");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC....").unwrap();
        assert!(read_container(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
