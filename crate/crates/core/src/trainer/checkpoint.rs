//! Binary checkpoint: magic, JSON header, little-endian f32 payload, and a
//! trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use promptseg_autograd::{ParamStore, Tensor};

use super::adam::{Adam, AdamConfig};
use super::TrainConfig;
use crate::prompt_encoders::{Strategy, TextMode};
use crate::seg_model::{ModelConfig, SegModel};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub step: u64,
    /// Parameters that carry moments, in payload order.
    pub with_moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub strategy: Strategy,
    pub text_mode: TextMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Hash of (strategy, text mode, model config); loading under a different
    /// runtime configuration is refused unless forced.
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub prompt_bank_hash: String,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

pub fn config_hash(strategy: Strategy, text_mode: TextMode, model: &ModelConfig) -> String {
    let json = serde_json::to_vec(&(strategy, text_mode, model)).expect("config serialises");
    hex::encode(Sha256::digest(json))
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        model: &SegModel,
        store: &ParamStore<f32>,
        optimizer: Option<&Adam<f32>>,
        train: &TrainConfig,
        dataset_hash: Option<String>,
        prompt_bank_hash: String,
        best_epoch: usize,
        best_val_dice: f64,
    ) -> Checkpoint {
        let text_mode = model.text_mode().unwrap_or(train.text_mode);
        let tensors = store
            .ids()
            .map(|id| TensorRecord {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            })
            .collect();
        let optimizer_record = optimizer.map(|o| OptimizerRecord {
            config: o.config,
            step: o.step,
            with_moments: store
                .ids()
                .filter(|id| o.moments[id.index()].is_some())
                .map(|id| store.name(id).to_string())
                .collect(),
        });
        Checkpoint {
            header: CheckpointHeader {
                version: VERSION,
                strategy: model.strategy,
                text_mode,
                model: model.config.clone(),
                train: train.clone(),
                config_hash: config_hash(model.strategy, text_mode, &model.config),
                dataset_hash,
                prompt_bank_hash,
                best_epoch,
                best_val_dice,
                tensors,
                optimizer: optimizer_record,
            },
            store: store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 4 * self.store.numel(false) + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |data: &[f32]| data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for id in self.store.ids() {
            put(self.store.get(id).data());
        }
        if let Some(opt) = &self.optimizer {
            for (m, v) in opt.moments.iter().flatten() {
                put(m);
                put(v);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(integrity("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("checksum mismatch; the file is corrupt or was modified"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| integrity("header length"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..hend])?;
        if header.version != VERSION {
            return Err(integrity(format!("unsupported checkpoint version {}", header.version)));
        }
        let mut payload = body[hend..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = payload.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(integrity("payload truncated"))
            }
        };
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let n = t.shape.iter().product();
            store.insert(&t.name, Tensor::new(&t.shape, take(n)?)?, t.trainable)?;
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(rec) => {
                let mut adam = Adam::new(rec.config, store.len());
                adam.step = rec.step;
                // Moments were written in parameter order.
                let mut ids: Vec<_> = rec
                    .with_moments
                    .iter()
                    .map(|n| store.id(n).ok_or_else(|| integrity(format!("moment for unknown tensor {n}"))))
                    .collect::<Result<_>>()?;
                ids.sort();
                for id in ids {
                    let n = store.get(id).len();
                    adam.moments[id.index()] = Some((take(n)?, take(n)?));
                }
                Some(adam)
            }
        };
        if payload.next().is_some() {
            return Err(integrity("trailing payload bytes"));
        }
        Ok(Checkpoint { header, store, optimizer })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a checkpoint whose strategy or configuration differs from the
    /// runtime's, unless `force` is set.
    pub fn check_compatible(&self, strategy: Strategy, text_mode: TextMode, model: &ModelConfig, force: bool) -> Result<()> {
        if self.header.strategy != strategy {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was trained with strategy {}, runtime uses {strategy}",
                self.header.strategy
            )));
        }
        let hash = config_hash(strategy, text_mode, model);
        if hash != self.header.config_hash && !force {
            return Err(Error::CheckpointMismatch(
                "model configuration differs from the checkpoint (use force to override)".into(),
            ));
        }
        Ok(())
    }

    /// Rebuilds the model and loads the stored weights into it.
    pub fn restore(&self) -> Result<(SegModel, ParamStore<f32>)> {
        let h = &self.header;
        let (model, mut store) = SegModel::new::<f32>(&h.model, h.strategy, h.text_mode, 0)?;
        if store.len() != self.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} tensors, checkpoint {}",
                store.len(),
                self.store.len()
            )));
        }
        for id in self.store.ids() {
            let name = self.store.name(id);
            let target = store
                .id(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("model has no tensor {name}")))?;
            store.set(target, self.store.get(id).clone())?;
            store.set_trainable(target, self.store.is_trainable(id));
        }
        Ok((model, store))
    }
}
