//! Run configuration: defaults, then a flat JSON file, then dotted `key=value` overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::text::TextConfig;
use crate::trainer::TrainConfig;
use crate::vq::{TokenizerTrainConfig, VqConfig};

/// Serde adapter storing `f64` as a decimal string; numbers are accepted on input.
pub mod decimal {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_f64(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Num(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| de::Error::custom(format!("invalid decimal {s:?}"))),
        }
    }

    /// Shortest representation that parses back to the same value.
    pub fn format_f64(v: f64) -> String {
        format!("{v:?}")
    }
}

/// Every knob of a run. Section seeds are not configurable; they all follow `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub vq: VqConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub text: TextConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vq: VqConfig::default(),
            tokenizer_train: TokenizerTrainConfig::default(),
            text: TextConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

const SECTION_SEEDS: [&str; 3] = ["tokenizer_train.seed", "train.seed", "sampler.seed"];

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("non-empty key");
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("section object");
        }
        node.insert(leaf.to_string(), v.clone());
    }
    Value::Object(root)
}

/// Coerces `raw` to the JSON type of `default`.
fn coerce(key: &str, default: &Value, raw: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot use {raw} here (default is {default})"));
    Ok(match (default, raw) {
        (Value::String(_), Value::String(_)) => raw.clone(),
        (Value::String(_), Value::Number(n)) => Value::String(n.to_string()),
        (Value::Number(_), Value::Number(n)) if n.is_u64() => raw.clone(),
        (Value::Number(_), Value::String(s)) => Value::from(s.trim().parse::<u64>().map_err(|_| bad())?),
        (Value::Bool(_), Value::Bool(_)) => raw.clone(),
        (Value::Bool(_), Value::String(s)) => Value::Bool(s.trim().parse().map_err(|_| bad())?),
        _ => return Err(bad()),
    })
}

impl RunConfig {
    /// Flat `dotted.key → value` view of the defaults; these are the only accepted keys.
    pub fn schema() -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(Self::default()).expect("serializable"), &mut flat);
        for k in SECTION_SEEDS {
            flat.remove(k);
        }
        flat
    }

    /// Defaults, then the flat JSON object `file`, then `key=value` overrides.
    pub fn merge(file: Option<&Value>, overrides: &[String]) -> Result<Self> {
        let schema = Self::schema();
        let mut flat = schema.clone();
        let mut apply = |key: &str, raw: &Value| -> Result<()> {
            let default = schema
                .get(key)
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
            flat.insert(key.to_string(), coerce(key, default, raw)?);
            Ok(())
        };
        if let Some(file) = file {
            let obj = file
                .as_object()
                .ok_or_else(|| Error::Config("configuration file must hold a flat JSON object".into()))?;
            for (k, v) in obj {
                apply(k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            apply(k.trim(), &Value::String(v.to_string()))?;
        }
        let seed = flat["seed"].clone();
        for k in SECTION_SEEDS {
            flat.insert(k.to_string(), seed.clone());
        }
        let cfg: Self =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => Some(serde_json::from_str::<Value>(&std::fs::read_to_string(p)?)?),
            None => None,
        };
        Self::merge(file.as_ref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.vq.validate()?;
        self.text.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.tokenizer_train.batch_size == 0 || !(self.tokenizer_train.lr >= 0.0) {
            return Err(Error::Config("tokenizer batch size and learning rate must be positive".into()));
        }
        let side = self.vq.grid_side();
        if self.model.grid_h != side || self.model.grid_w != side {
            return Err(Error::Config(format!(
                "model grid {}×{} does not match the {side}×{side} token grid of the tokenizer",
                self.model.grid_h, self.model.grid_w
            )));
        }
        if self.model.codebook_k != self.vq.codebook_k {
            return Err(Error::Config(format!(
                "model codebook size {} differs from tokenizer codebook size {}",
                self.model.codebook_k, self.vq.codebook_k
            )));
        }
        if self.model.text_width != self.text.width {
            return Err(Error::Config("model.text_width must equal text.width".into()));
        }
        Ok(())
    }
}
