//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `MINTCKPT` |
//! | 4 | format version (`u32`) |
//! | 8 | manifest length `n` (`u64`) |
//! | n | manifest, UTF-8 JSON |
//! | rest | tensor data, `f64` LE, row-major |
//!
//! The manifest lists every tensor as `name`, `shape` and `offset` (in
//! bytes from the start of the data section), plus the model and training
//! configuration, dataset sizes, split, epoch counters, loss history and
//! the RNG state.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{Ablation, MintModel};
use crate::nn::Params;
use crate::trainer::{EpochRecord, Split, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MINTCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MintModel,
    pub train: TrainConfig,
    pub split: Split,
    /// Last completed epoch.
    pub epoch: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub rng: RngState,
    pub initial: Option<EpochRecord>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    n_patients: usize,
    n_threads: usize,
    n_stages: usize,
    train: TrainConfig,
    split: Split,
    epoch: usize,
    best_epoch: usize,
    rng: RngState,
    initial: Option<EpochRecord>,
    history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (name, m) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [m.nrows(), m.ncols()],
                offset,
            });
            offset += (m.len() * 8) as u64;
        }
        let manifest = Manifest {
            tensors,
            n_patients: self.model.n_patients,
            n_threads: self.model.n_threads,
            n_stages: self.model.n_stages,
            train: self.train.clone(),
            split: self.split,
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            rng: self.rng,
            initial: self.initial,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint {
            offset: HEADER_LEN as u64,
            message: format!("manifest serialization failed: {e}"),
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.model.params.iter() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, message: String| Error::Checkpoint {
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(0, "bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads version {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = HEADER_LEN
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(bytes.len(), format!("manifest of {len} bytes runs past end of file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..data_start])
            .map_err(|e| corrupt(HEADER_LEN + e.column().saturating_sub(1), format!("manifest: {e}")))?;
        let data = &bytes[data_start..];
        let mut params = Params::new();
        let mut expected_end = 0usize;
        for t in &manifest.tensors {
            let start = t.offset as usize;
            let n = t.shape[0] * t.shape[1];
            let end = start + n * 8;
            if end > data.len() {
                return Err(corrupt(
                    data_start + data.len(),
                    format!("tensor {} needs bytes up to {}, file ends first", t.name, data_start + end),
                ));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), values).expect("length checked");
            params.insert(t.name.clone(), m);
            expected_end = expected_end.max(end);
        }
        if expected_end != data.len() {
            return Err(corrupt(
                data_start + expected_end,
                format!("{} trailing bytes after tensor data", data.len() - expected_end),
            ));
        }
        let model = MintModel::from_params(
            manifest.train.model.clone(),
            manifest.n_patients,
            manifest.n_threads,
            manifest.n_stages,
            params,
        )?;
        Ok(Self {
            model,
            train: manifest.train,
            split: manifest.split,
            epoch: manifest.epoch,
            best_epoch: manifest.best_epoch,
            rng: manifest.rng,
            initial: manifest.initial,
            history: manifest.history,
        })
    }

    /// Errors unless the checkpoint was trained as `ablation`.
    pub fn expect_variant(&self, ablation: Ablation) -> Result<()> {
        let have = self.model.config.ablation;
        if have != ablation {
            return Err(Error::Incompatible(format!(
                "checkpoint holds a `{have}` model, `{ablation}` was requested"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{RngCore, SeedableRng};

    fn sample(ablation: Ablation) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let train = TrainConfig {
            model: ModelConfig {
                ablation,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = MintModel::new(train.model.clone(), 6, 4, 3, &mut rng);
        Checkpoint {
            model,
            train,
            split: Split::chronological(10, 0.8, 0.1),
            epoch: 3,
            best_epoch: 2,
            rng: RngState::capture(&rng),
            initial: None,
            history: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample(Ablation::Full);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut a = c.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample(Ablation::Full).to_bytes().unwrap();
        for cut in [0, 5, 19, 40, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_and_magic_guard() {
        let mut bytes = sample(Ablation::Full).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Incompatible(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn variant_guard() {
        let c = sample(Ablation::WVae);
        let c = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(matches!(c.expect_variant(Ablation::Full), Err(Error::Incompatible(_))));
        assert!(c.expect_variant(Ablation::WVae).is_ok());
    }
}
