//! Checkpoint files.
//!
//! Layout: the 8-byte magic `MIMCKPT\0`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the manifest as canonical JSON, then the
//! tensor blobs as little-endian `f32`. The manifest indexes every blob by name with
//! its shape, byte offset into the blob region, byte length and SHA-256.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::model::T2iModel;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};
use crate::text::{TextConfig, Vocabulary};
use crate::vq::{VqConfig, VqTokenizer};

pub const MAGIC: &[u8; 8] = b"MIMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const KIND_TOKENIZER: &str = "tokenizer";
pub const KIND_T2I: &str = "t2i";

const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Root seed of the run that produced the parameters.
    pub seed: u64,
    /// Kind-specific JSON with integers, strings, booleans, arrays and objects only.
    pub config: Value,
    /// Free-form string annotations.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

/// Rejects floating-point numbers anywhere in `v`.
pub fn ensure_no_floats(v: &Value, path: &str) -> Result<()> {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            Err(Error::Format(format!("manifest field {path} holds a float")))
        }
        Value::Array(items) => items
            .iter()
            .enumerate()
            .try_for_each(|(i, x)| ensure_no_floats(x, &format!("{path}[{i}]"))),
        Value::Object(map) => map.iter().try_for_each(|(k, x)| ensure_no_floats(x, &format!("{path}.{k}"))),
        _ => Ok(()),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Format(format!("manifest is missing {key:?}")))
}

fn as_u64(v: &Value, what: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::Format(format!("{what} is not a non-negative integer")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        ensure_no_floats(&self.config, "config")?;
        let mut blobs = Vec::new();
        let mut index = Vec::new();
        for (name, t) in self.params.iter() {
            let start = blobs.len();
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            index.push(json!({
                "name": name,
                "shape": t.shape(),
                "offset": start,
                "len": blobs.len() - start,
                "sha256": sha256_hex(&blobs[start..]),
            }));
        }
        let manifest = json!({
            "config": self.config,
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "meta": self.meta,
            "seed": self.seed.to_string(),
            "tensors": index,
        });
        // serde_json objects are BTreeMaps here, so keys come out sorted.
        let text = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + text.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Truncated("checkpoint manifest".into()))?;
        let manifest: Value = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])?;
        ensure_no_floats(&manifest, "manifest")?;
        let inner_version = as_u64(field(&manifest, "format_version")?, "format_version")?;
        if inner_version != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: inner_version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let kind = field(&manifest, "kind")?
            .as_str()
            .ok_or_else(|| Error::Format("kind is not a string".into()))?
            .to_string();
        let seed = field(&manifest, "seed")?
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("seed is not a decimal string".into()))?;
        let meta: BTreeMap<String, String> = serde_json::from_value(field(&manifest, "meta")?.clone())?;
        let region = &bytes[blob_start..];
        let mut params = ParamStore::new();
        let tensors = field(&manifest, "tensors")?
            .as_array()
            .ok_or_else(|| Error::Format("tensors is not an array".into()))?;
        for entry in tensors {
            let name = field(entry, "name")?
                .as_str()
                .ok_or_else(|| Error::Format("tensor name is not a string".into()))?;
            let shape: Vec<usize> = serde_json::from_value(field(entry, "shape")?.clone())?;
            let offset = as_u64(field(entry, "offset")?, "tensor offset")? as usize;
            let len = as_u64(field(entry, "len")?, "tensor length")? as usize;
            let numel: usize = shape.iter().product();
            if len != numel * 4 {
                return Err(Error::Format(format!(
                    "tensor {name:?} stores {len} bytes for shape {shape:?}"
                )));
            }
            let blob = offset
                .checked_add(len)
                .and_then(|end| region.get(offset..end))
                .ok_or_else(|| Error::Truncated(format!("tensor {name:?}")))?;
            let want = field(entry, "sha256")?.as_str().unwrap_or_default();
            if sha256_hex(blob) != want {
                return Err(Error::Checksum(name.to_string()));
            }
            let data = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self {
            kind,
            seed,
            config: field(&manifest, "config")?.clone(),
            meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn from_tokenizer<S: Scalar>(tokenizer: &VqTokenizer<S>, seed: u64) -> Result<Self> {
        Ok(Self {
            kind: KIND_TOKENIZER.into(),
            seed,
            config: json!({ "vq": serde_json::to_value(&tokenizer.config)? }),
            meta: BTreeMap::new(),
            params: tokenizer.params.cast(),
        })
    }

    pub fn into_tokenizer(self) -> Result<VqTokenizer<f32>> {
        self.expect_kind(KIND_TOKENIZER)?;
        let config: VqConfig = serde_json::from_value(field(&self.config, "vq")?.clone())?;
        VqTokenizer::from_params(config, self.params)
    }

    pub fn from_t2i<S: Scalar>(model: &T2iModel<S>, seed: u64) -> Result<Self> {
        Ok(Self {
            kind: KIND_T2I.into(),
            seed,
            config: json!({
                "image_size": model.image_size,
                "model": serde_json::to_value(&model.model)?,
                "text": serde_json::to_value(&model.text)?,
                "vocabulary": model.vocab.table(),
            }),
            meta: BTreeMap::new(),
            params: model.params.cast(),
        })
    }

    pub fn into_t2i(self) -> Result<T2iModel<f32>> {
        self.expect_kind(KIND_T2I)?;
        let model: ModelConfig = serde_json::from_value(field(&self.config, "model")?.clone())?;
        let text: TextConfig = serde_json::from_value(field(&self.config, "text")?.clone())?;
        let table: BTreeMap<String, u32> = serde_json::from_value(field(&self.config, "vocabulary")?.clone())?;
        let image_size = as_u64(field(&self.config, "image_size")?, "image_size")? as usize;
        let vocab = Vocabulary::from_table(&table)?;
        T2iModel::new(model, text, vocab, image_size, self.seed)?.with_params(self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3e38]).unwrap());
        params.insert("b.w", Tensor::new(&[3], vec![0.1f32, 0.2, 0.3]).unwrap());
        Checkpoint {
            kind: KIND_TOKENIZER.into(),
            seed: u64::MAX,
            config: json!({"vq": {"x": 1, "beta": "0.25"}}),
            meta: BTreeMap::from([("note".to_string(), "hi".to_string())]),
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.get("a").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn manifest_keys_are_sorted_and_float_free() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[20..20 + len]).unwrap();
        let keys = ["\"config\"", "\"format_version\"", "\"kind\"", "\"meta\"", "\"seed\"", "\"tensors\""];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let mut bad = sample();
        bad.config = json!({"lr": 0.5});
        assert!(matches!(bad.to_bytes(), Err(Error::Format(_))));
    }

    #[test]
    fn distinct_failures() {
        let bytes = sample().to_bytes().unwrap();
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..15]), Err(Error::Truncated(_))));
        let mut v = bytes.clone();
        let last = v.len() - 1;
        v[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Checksum(n)) if n == "b.w"));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT0000"), Err(Error::Format(_))));
        assert!(matches!(sample().expect_kind(KIND_T2I), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn tokenizer_round_trip_and_shape_check() {
        let cfg = VqConfig {
            image_size: 8,
            downsample_f: 2,
            codebook_k: 8,
            embed_d: 4,
            hidden: 4,
            ..VqConfig::default()
        };
        let tok = VqTokenizer::<f32>::new(cfg, 3).unwrap();
        let ck = Checkpoint::from_tokenizer(&tok, 3).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(matches!(back.clone().into_t2i(), Err(Error::KindMismatch { .. })));
        assert_eq!(back.clone().into_tokenizer().unwrap().params, tok.params);
        let mut wrong = back;
        wrong.params.insert("codebook", Tensor::zeros(&[8, 5]));
        assert!(matches!(wrong.into_tokenizer(), Err(Error::ParamShape { .. })));
    }
}
