//! Checkpoint files: a JSON header followed by a raw little-endian tensor
//! blob.
//!
//! Layout: 8-byte magic, `u64` LE header length, header JSON, blob. The
//! header lists each tensor's name, shape and byte offset, echoes the
//! configuration, and carries the SHA-256 digest of the blob. Values are
//! stored as `f64` so that a round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoders::{GraphEncoderConfig, PretrainedModel, TextEncoderConfig, Vocabulary};
use crate::error::{Result, ZptError};
use crate::params::ParamSet;
use crate::promptkit::ContinuousPrompt;
use crate::tensor::Mat;
use crate::ubcg::{UbcgConfig, UbcgModel};

const MAGIC: &[u8; 8] = b"ZPTCKPT\0";
pub const SCHEMA_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Ubcg,
    Tuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    stage: Stage,
    dtype: String,
    tensors: Vec<TensorEntry>,
    config: Value,
    meta: Value,
    digest: String,
}

/// Named parameters plus the configuration they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: Value,
    /// Stage-specific extras (vocabulary, class names).
    pub meta: Value,
    pub params: ParamSet,
}

fn blob(params: &ParamSet) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(params.scalar_count() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, m) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape: [m.nrows(), m.ncols()],
            offset: bytes.len(),
        });
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    /// SHA-256 of the tensor blob, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(&blob(&self.params).0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (data, tensors) = blob(&self.params);
        let header = Header {
            schema_version: SCHEMA_VERSION,
            stage: self.stage,
            dtype: DTYPE.into(),
            tensors,
            config: self.config.clone(),
            meta: self.meta.clone(),
            digest: hex_digest(&data),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ZptError::Checkpoint(m.to_owned());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| ZptError::Checkpoint(format!("bad header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(ZptError::Checkpoint(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        if header.dtype != DTYPE {
            return Err(ZptError::Checkpoint(format!("unsupported dtype `{}`", header.dtype)));
        }
        let data = &body[hlen..];
        if hex_digest(data) != header.digest {
            return Err(bad("digest mismatch: tensor data is corrupted"));
        }
        let mut params = ParamSet::new();
        for t in &header.tensors {
            let count = t.shape[0] * t.shape[1];
            let end = t.offset + count * 8;
            let raw = data
                .get(t.offset..end)
                .ok_or_else(|| ZptError::Checkpoint(format!("tensor `{}` runs past the blob", t.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape matches count");
            params.insert(t.name.clone(), m);
        }
        Ok(Self {
            stage: header.stage,
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| ZptError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ZptError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(ZptError::Checkpoint(format!(
                "expected a {stage:?} checkpoint, found {:?}",
                self.stage
            )));
        }
        Ok(())
    }

    fn config_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .config
            .get(key)
            .ok_or_else(|| ZptError::Checkpoint(format!("config echo lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| ZptError::Checkpoint(format!("config `{key}`: {e}")))
    }

    pub fn from_pretrained(model: &PretrainedModel, training_config: Value) -> Self {
        Self {
            stage: Stage::Pretrained,
            config: serde_json::json!({
                "text_encoder": model.text_config,
                "graph_encoder": model.graph_config,
                "feature_dim": model.feature_dim,
                "training": training_config,
            }),
            meta: serde_json::json!({ "vocab": serde_json::from_str::<Value>(&model.vocab.to_json()).expect("vocab json") }),
            params: model.params.clone(),
        }
    }

    pub fn to_pretrained(&self) -> Result<PretrainedModel> {
        self.expect_stage(Stage::Pretrained)?;
        let text_config: TextEncoderConfig = self.config_field("text_encoder")?;
        let graph_config: GraphEncoderConfig = self.config_field("graph_encoder")?;
        let feature_dim: usize = self.config_field("feature_dim")?;
        let vocab_json = self
            .meta
            .get("vocab")
            .ok_or_else(|| ZptError::Checkpoint("missing vocabulary".into()))?;
        let vocab = Vocabulary::from_json(&vocab_json.to_string())?;
        // shapes must agree with a fresh model of the same configuration
        let fresh = PretrainedModel::init(vocab.clone(), text_config.clone(), graph_config.clone(), feature_dim, 0.0, 0)?;
        check_shapes(&fresh.params, &self.params)?;
        Ok(PretrainedModel {
            vocab,
            text_config,
            graph_config,
            feature_dim,
            params: self.params.clone(),
        })
    }

    pub fn from_ubcg(model: &UbcgModel) -> Self {
        Self {
            stage: Stage::Ubcg,
            config: serde_json::json!({ "ubcg": model.config }),
            meta: Value::Null,
            params: model.params.clone(),
        }
    }

    pub fn to_ubcg(&self) -> Result<UbcgModel> {
        self.expect_stage(Stage::Ubcg)?;
        let config: UbcgConfig = self.config_field("ubcg")?;
        UbcgModel::from_params(config, self.params.clone())
    }

    pub fn from_prompt(prompt: &ContinuousPrompt, config: Value) -> Self {
        let mut params = ParamSet::new();
        params.insert("prompt.context", prompt.context.clone());
        Self {
            stage: Stage::Tuned,
            config,
            meta: serde_json::json!({
                "class_names": prompt.class_names,
                "class_tokens": prompt.class_tokens,
            }),
            params,
        }
    }

    pub fn to_prompt(&self) -> Result<ContinuousPrompt> {
        self.expect_stage(Stage::Tuned)?;
        let field = |k: &str| {
            self.meta
                .get(k)
                .cloned()
                .ok_or_else(|| ZptError::Checkpoint(format!("missing `{k}`")))
        };
        let class_names: Vec<String> = serde_json::from_value(field("class_names")?)
            .map_err(|e| ZptError::Checkpoint(e.to_string()))?;
        let class_tokens: Vec<Vec<usize>> = serde_json::from_value(field("class_tokens")?)
            .map_err(|e| ZptError::Checkpoint(e.to_string()))?;
        Ok(ContinuousPrompt {
            context: self.params.get("prompt.context")?.clone(),
            class_tokens,
            class_names,
        })
    }
}

fn check_shapes(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    if expected.len() != got.len() {
        return Err(ZptError::Checkpoint(format!(
            "{} tensors stored, configuration implies {}",
            got.len(),
            expected.len()
        )));
    }
    for (name, m) in expected.iter() {
        let g = got
            .get(name)
            .map_err(|_| ZptError::Checkpoint(format!("missing tensor `{name}`")))?;
        if g.dim() != m.dim() {
            return Err(ZptError::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                g.dim(),
                m.dim()
            )));
        }
    }
    Ok(())
}
