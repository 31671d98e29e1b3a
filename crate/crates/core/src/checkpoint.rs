//! Binary checkpoints: an 8-byte magic, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor as little-endian
//! `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{FeatureNorm, StftConfig};
use crate::error::{PseError, Result};
use crate::models::{ModelConfig, PseNetwork};
use crate::nn::NamedArray;

pub const MAGIC: &[u8; 8] = b"PSECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Hex SHA-256 of the model configuration's JSON.
    pub config_sha256: String,
    pub stft: StftConfig,
    pub input_norm: FeatureNorm,
    /// Training step the parameters were taken at.
    pub step: usize,
    pub valid_loss: Option<f64>,
    /// Label of the loss the model was trained with, for reports.
    pub loss_label: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedArray>,
}

pub fn config_hash(model: &ModelConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(model)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn from_network(net: &PseNetwork, step: usize, valid_loss: Option<f64>, loss_label: &str) -> Result<Self> {
        let tensors = net.var_store().export()?;
        Ok(Self {
            header: CheckpointHeader {
                model: net.config.clone(),
                config_sha256: config_hash(&net.config)?,
                stft: StftConfig::default(),
                input_norm: net.input_norm(),
                step,
                valid_loss,
                loss_label: loss_label.to_string(),
                tensors: tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
            },
            tensors,
        })
    }

    /// Rebuilds the network and loads the parameters into it.
    pub fn to_network(&self) -> Result<PseNetwork> {
        let net = PseNetwork::build(&self.header.model, 0)?;
        net.var_store().import(&self.tensors)?;
        net.set_input_norm(self.header.input_norm.clone());
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 20 + 4 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(PseError::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(PseError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(PseError::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..len]).map_err(|e| PseError::Checkpoint(format!("bad header: {e}")))?;
        r = &r[len..];
        if config_hash(&header.model)? != header.config_sha256 {
            return Err(PseError::Checkpoint("model configuration does not match its hash".into()));
        }
        header.stft.validate().map_err(|e| PseError::Checkpoint(e.to_string()))?;
        if header.stft.num_bins() != header.model.bins() {
            return Err(PseError::Checkpoint("STFT and model disagree on the number of bins".into()));
        }
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if r.len() != 4 * expected {
            return Err(PseError::Checkpoint(format!("{} data bytes for {expected} values", r.len())));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let data = r[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            r = &r[4 * n..];
            tensors.push(NamedArray { name: t.name.clone(), shape: t.shape.clone(), data });
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| PseError::Checkpoint("truncated file".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, Preset};

    fn small() -> PseNetwork {
        PseNetwork::build(&ModelConfig::preset(ModelKind::Pdccrn, Preset::Small), 3).unwrap()
    }

    #[test]
    fn round_trip_restores_parameters() {
        let net = small();
        let mut norm = net.input_norm();
        norm.stats.mean_re[4] = 0.25;
        net.set_input_norm(norm);
        let ck = Checkpoint::from_network(&net, 17, Some(0.5), "PLCPA").unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_network().unwrap();
        assert_eq!(restored.var_store().export().unwrap(), net.var_store().export().unwrap());
        assert_eq!(restored.input_norm(), net.input_norm());
        assert_eq!(bytes, Checkpoint::from_network(&restored, 17, Some(0.5), "PLCPA").unwrap().to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::from_network(&small(), 0, None, "PLCPA").unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..30]).is_err());

        // tampered model config no longer matches its hash
        let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
        if let ModelConfig::Pdccrn(c) = &mut ck.header.model {
            c.lstm_hidden += 1;
        }
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(PseError::Checkpoint(_))));
    }
}
