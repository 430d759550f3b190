//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `EQVRCKPT` |
//! | 4 | format version (u32) |
//! | 8 | header length `L` (u64) |
//! | L | JSON header: config, train state, parameter table |
//! | 8·k | f64 payload: for each parameter its values, then `m`, then `v` |
//! | 4 | CRC32 of every preceding byte |

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{TrainConfig, Trainer};
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"EQVRCKPT";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Progress counters; together with the config they determine every
/// future random draw.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub items: usize,
    /// Draw counters of the audio/visual intra samplers, then the
    /// audio/visual inter samplers.
    pub sampler_draws: [u64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub state: TrainState,
    pub params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    /// Start of the values in f64 units from the beginning of the payload.
    offset: usize,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    state: TrainState,
    params: Vec<HeaderEntry>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let params = trainer
            .model
            .params
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
                m: p.m.clone(),
                v: p.v.clone(),
                step: p.step,
            })
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            config: trainer.config.clone(),
            state: TrainState {
                step: trainer.step,
                items: trainer.items,
                sampler_draws: trainer.samplers.draws(),
            },
            params,
        }
    }

    /// Rebuilds the model with the stored weights (optimizer state ignored).
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config(), 0)?;
        self.write_params(&mut model, false)?;
        Ok(model)
    }

    pub fn restore(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.config.clone(), self.state.items)?;
        if self.state.step > t.total_steps() {
            return Err(CheckpointError::Header(format!(
                "step {} beyond schedule of {}",
                self.state.step,
                t.total_steps()
            ))
            .into());
        }
        self.write_params(&mut t.model, true)?;
        t.samplers.set_draws(self.state.sampler_draws);
        t.step = self.state.step;
        Ok(t)
    }

    fn write_params(&self, model: &mut Model, with_optimizer: bool) -> Result<()> {
        if self.params.len() != model.params.len() {
            return Err(CheckpointError::Header(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.params.len()
            ))
            .into());
        }
        for rec in &self.params {
            let id = model
                .params
                .id(&rec.name)
                .ok_or_else(|| CheckpointError::Header(format!("unknown parameter {}", rec.name)))?;
            let p = model.params.get_mut(id);
            if p.tensor.shape() != rec.shape.as_slice() {
                return Err(CheckpointError::Header(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    rec.name,
                    rec.shape,
                    p.tensor.shape()
                ))
                .into());
            }
            p.tensor.values_mut().copy_from_slice(&rec.values);
            if with_optimizer {
                p.m.clone_from(&rec.m);
                p.v.clone_from(&rec.v);
                p.step = rec.step;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .params
            .iter()
            .map(|p| {
                let e = HeaderEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    step: p.step,
                };
                offset += 3 * p.values.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            state: self.state.clone(),
            params: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + header.len() + 8 * offset + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for x in p.values.iter().chain(&p.m).chain(&p.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREFIX + 4 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
        if header_end > body.len() {
            return Err(CheckpointError::Truncated);
        }
        let header: Header =
            serde_json::from_slice(&body[PREFIX..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &body[header_end..];
        if payload.len() % 8 != 0 {
            return Err(CheckpointError::Truncated);
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = Vec::with_capacity(header.params.len());
        let mut expected = 0;
        for e in header.params {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.shape.is_empty() || n == 0 {
                return Err(CheckpointError::Header(format!("bad table entry for {}", e.name)));
            }
            let end = e.offset + 3 * n;
            if end > floats.len() {
                return Err(CheckpointError::Truncated);
            }
            let s = &floats[e.offset..end];
            params.push(ParamRecord {
                name: e.name,
                shape: e.shape,
                values: s[..n].to_vec(),
                m: s[n..2 * n].to_vec(),
                v: s[2 * n..].to_vec(),
                step: e.step,
            });
            expected = end;
        }
        if expected != floats.len() {
            return Err(CheckpointError::Header(format!(
                "payload holds {} values, table describes {expected}",
                floats.len()
            )));
        }
        Ok(Checkpoint {
            version,
            config: header.config,
            state: header.state,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::train::tests::{tiny, tiny_data};
    use crate::pipeline::RunOptions;

    fn trained(steps: u64) -> (Trainer, crate::pipeline::PairedDataset) {
        let config = tiny();
        let data = tiny_data(&config);
        let mut t = Trainer::new(config, data.len()).unwrap();
        t.run(&data, &RunOptions { stop_at: Some(steps), ..Default::default() }).unwrap();
        (t, data)
    }

    #[test]
    fn bytes_round_trip() {
        let (t, _) = trained(2);
        let ckpt = t.checkpoint();
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.step, 2);
    }

    #[test]
    fn corruption_is_detected() {
        let (t, _) = trained(1);
        let bytes = t.checkpoint().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(CheckpointError::Checksum { .. })
        ));
        let mut flipped = bytes.clone();
        let k = bytes.len() - 100;
        flipped[k] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic));
        let mut version = bytes.clone();
        version[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(
            Checkpoint::from_bytes(&version),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        );
        assert_eq!(Checkpoint::from_bytes(b"EQV"), Err(CheckpointError::Truncated));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut straight, data) = trained(3);
        let (half, _) = trained(1);
        let mut resumed = Checkpoint::from_bytes(&half.checkpoint().to_bytes()).unwrap().restore().unwrap();
        let tail = resumed.run(&data, &RunOptions { stop_at: Some(3), ..Default::default() }).unwrap();
        assert_eq!(tail.len(), 2);
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
        let a = straight.step(&data).unwrap();
        let b = resumed.step(&data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_only_load_and_files() {
        let (t, _) = trained(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&t.checkpoint(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let model = loaded.model().unwrap();
        for id in model.params.ids() {
            assert_eq!(model.params.get(id).tensor.values(), t.model.params.get(id).tensor.values());
            assert_eq!(model.params.get(id).step, 0);
        }
        let missing = load_checkpoint(&dir.path().join("none.ckpt")).unwrap_err();
        assert!(missing.is_persistence());
    }

    #[test]
    fn mismatched_structure_is_a_header_error() {
        let (t, _) = trained(1);
        let mut ckpt = t.checkpoint();
        ckpt.params.pop();
        assert!(matches!(ckpt.restore(), Err(Error::Checkpoint(CheckpointError::Header(_)))));
        let mut ckpt = t.checkpoint();
        ckpt.params[0].name = "nope".into();
        assert!(ckpt.model().is_err());
    }
}
