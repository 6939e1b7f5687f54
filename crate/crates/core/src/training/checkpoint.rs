use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{BasisMemory, ModelConfig, RankingModel, BASIS_KEYS, BASIS_VALUES};
use crate::error::{Error, Result};
use crate::evaluation::RecallModel;
use crate::numerics::{ParamStore, Tensor};

use super::TrainConfig;

const MAGIC: &[u8; 8] = b"UNIRECKP";
const END: &[u8; 4] = b"END.";
pub const CHECKPOINT_VERSION: u32 = 1;
const RECALL_PREFIX: &str = "recall.";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub samples: usize,
    pub train_loss: f64,
    /// Validation metric name, e.g. `AUC` or `Recall@30`.
    pub metric: String,
    pub value: Option<f64>,
    /// This epoch produced the best validation value so far.
    pub best: bool,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stage={} epoch={} samples={} loss={:.6}",
            self.stage, self.epoch, self.samples, self.train_loss
        )?;
        match self.value {
            Some(v) => write!(f, " valid_{}={:.6}", self.metric, v)?,
            None => write!(f, " valid_{}=none", self.metric)?,
        }
        if self.best {
            write!(f, " best")?;
        }
        Ok(())
    }
}

/// Configuration snapshot stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: String,
}

impl ConfigSnapshot {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the snapshot text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trained model state after stage 1 (ranking towers) or stage 2 (plus the
/// basis memory).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub config: ConfigSnapshot,
    pub ranking: RankingModel,
    pub basis: Option<BasisMemory>,
    /// User tower trained alongside the basis memory when unfrozen.
    pub recall_user: Option<ParamStore>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn recall_model(&self) -> RecallModel<'_> {
        RecallModel {
            ranking: &self.ranking,
            user_params: self.recall_user.as_ref().unwrap_or(self.ranking.params()),
            basis: self.basis.as_ref(),
        }
    }

    /// Fails unless the stored model architecture equals `model`.
    pub fn ensure_model(&self, model: &ModelConfig) -> Result<()> {
        if &self.config.model != model {
            return Err(Error::Compatibility(
                "checkpoint model configuration differs from the requested one".into(),
            ));
        }
        Ok(())
    }

    /// Every tensor under its on-disk name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .ranking
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(b) = &self.basis {
            out.extend(b.params().iter().map(|(n, t)| (n.to_string(), t)));
        }
        if let Some(u) = &self.recall_user {
            out.extend(u.iter().map(|(n, t)| (format!("{RECALL_PREFIX}{n}"), t)));
        }
        out
    }

    /// Bitwise equality of every tensor and of the metadata.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.to_bytes() == other.to_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.push(self.stage);
        let config = self.config.to_text();
        w.extend_from_slice(&Sha256::digest(config.as_bytes()));
        put_bytes(&mut w, config.as_bytes());
        let history = serde_json::to_string(&self.history).expect("history serializes");
        put_bytes(&mut w, history.as_bytes());
        let tensors = self.named_tensors();
        w.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            put_bytes(&mut w, name.as_bytes());
            w.push(t.requires_grad as u8);
            w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.extend_from_slice(END);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(compat("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(compat(&format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let stage = r.take(1)?[0];
        if !(1..=2).contains(&stage) {
            return Err(compat(&format!("invalid stage {stage}")));
        }
        let hash = r.take(32)?.to_vec();
        let config_bytes = r.bytes()?;
        if Sha256::digest(config_bytes).as_slice() != hash.as_slice() {
            return Err(compat("config hash mismatch"));
        }
        let config: ConfigSnapshot = serde_json::from_slice(config_bytes)
            .map_err(|e| compat(&format!("unreadable config: {e}")))?;
        let history: Vec<EpochRecord> = serde_json::from_slice(r.bytes()?)
            .map_err(|e| compat(&format!("unreadable history: {e}")))?;
        let count = r.u64()? as usize;
        let mut ranking = ParamStore::new();
        let mut basis = ParamStore::new();
        let mut recall = ParamStore::new();
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| compat("tensor name is not UTF-8"))?;
            let requires_grad = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(compat("tensor rank too large"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| compat("tensor larger than file"))?;
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| compat(&e.to_string()))?
                .with_grad(requires_grad);
            let dest = if name == BASIS_KEYS || name == BASIS_VALUES {
                basis.insert(name, t)
            } else if let Some(rest) = name.strip_prefix(RECALL_PREFIX) {
                recall.insert(rest, t)
            } else {
                ranking.insert(name, t)
            };
            dest.map_err(|e| compat(&e.to_string()))?;
        }
        if r.take(4)? != END || r.pos != bytes.len() {
            return Err(compat("trailing bytes after checkpoint"));
        }
        let ranking = RankingModel::from_params(config.model.clone(), ranking)?;
        let basis = if basis.is_empty() {
            None
        } else {
            Some(BasisMemory::from_tensors(
                basis.get(BASIS_KEYS).map_err(|e| compat(&e.to_string()))?.clone(),
                basis.get(BASIS_VALUES).map_err(|e| compat(&e.to_string()))?.clone(),
            ).map_err(|e| compat(&e.to_string()))?)
        };
        if stage == 2 && basis.is_none() {
            return Err(compat("stage-2 checkpoint without basis memory"));
        }
        let recall_user = (!recall.is_empty()).then_some(recall);
        Ok(Checkpoint {
            stage,
            config,
            ranking,
            basis,
            recall_user,
            history,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Compatibility(m) => Error::Compatibility(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn compat(msg: &str) -> Error {
    Error::Compatibility(msg.to_string())
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u64).to_le_bytes());
    w.extend_from_slice(b);
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| compat("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'b [u8]> {
        let n = self.u64()?;
        self.take(usize::try_from(n).map_err(|_| compat("length overflow"))?)
    }
}
