use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{JointModel, ModelConfig, ModelVariant};
use crate::autodiff::ParamCategory;
use crate::data::{LabelSpace, TokenizerMode, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "acsa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: String,
    pub category: ParamCategory,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub values: Vec<f64>,
}

/// Training-time facts stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_f1: f64,
    pub config_hash: String,
    pub tau: f64,
    pub tokenizer: TokenizerMode,
}

/// Self-describing model file: everything needed to rebuild the model
/// and encode new text. On disk it is one header line
/// `acsa-checkpoint <version> sha256:<digest>` followed by a JSON body;
/// the digest covers the body bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: ModelVariant,
    pub model: ModelConfig,
    pub labels: LabelSpace,
    pub vocab_hash: String,
    pub vocab: Vocabulary,
    pub meta: CheckpointMeta,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture(model: &JointModel, labels: &LabelSpace, vocab: &Vocabulary, meta: CheckpointMeta) -> Result<Self> {
        let cfg = model.config();
        if cfg.n_aspects != labels.n_aspects() || cfg.n_polarities != labels.n_polarities() {
            return Err(Error::LabelMismatch(format!(
                "model has {}x{} outputs, label space is {labels}",
                cfg.n_aspects, cfg.n_polarities
            )));
        }
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocabulary size {} differs from vocabulary length {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let store = model.store();
        let params = store
            .ids()
            .map(|id| {
                let value = store.value(id);
                if value.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Checkpoint(format!("parameter `{}` is not finite", store.name(id))));
                }
                Ok(ParamRecord {
                    name: store.name(id).to_string(),
                    group: store.group_of(id).name.clone(),
                    category: store.category(id),
                    shape: value.shape().to_vec(),
                    trainable: store.is_trainable(id),
                    values: value.data().to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            variant: cfg.variant,
            model: cfg.clone(),
            labels: labels.clone(),
            vocab_hash: vocab.hash(),
            vocab: vocab.clone(),
            meta,
            params,
        })
    }

    /// Rebuilds the model, checking every stored tensor against the
    /// architecture the stored config describes.
    pub fn to_model(&self) -> Result<JointModel> {
        if self.variant != self.model.variant {
            return Err(Error::Checkpoint("variant tag disagrees with model config".into()));
        }
        let mut model = JointModel::new(self.model.clone(), 0)?;
        let store = model.store_mut();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                store.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, rec) in ids.into_iter().zip(&self.params) {
            if store.name(id) != rec.name || store.category(id) != rec.category {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` found where `{}` was expected",
                    rec.name,
                    store.name(id)
                )));
            }
            let t = Tensor::new(rec.shape.clone(), rec.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", rec.name)))?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    rec.name,
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t;
            store.set_trainable(id, rec.trainable);
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let digest = format!("{:x}", Sha256::digest(&body));
        let mut out = format!("{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION} sha256:{digest}\n").into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let body = &bytes[split + 1..];
        let fields: Vec<&str> = header.split(' ').collect();
        let [format, version, digest] = fields.as_slice() else {
            return Err(Error::Checkpoint(format!("malformed header `{header}`")));
        };
        if *format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint file (header `{header}`)")));
        }
        if *version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let expected = digest
            .strip_prefix("sha256:")
            .ok_or_else(|| Error::Checkpoint(format!("malformed digest `{digest}`")))?;
        let actual = format!("{:x}", Sha256::digest(body));
        if actual != expected {
            return Err(Error::Checkpoint("digest mismatch; the file is corrupted".into()));
        }
        let ckpt: Self = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.vocab.hash() != ckpt.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
