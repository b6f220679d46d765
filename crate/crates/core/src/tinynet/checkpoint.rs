//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TNET1"
//! u32 fingerprint length, fingerprint bytes (ASCII hex)
//! u32 layer count
//! per layer, in declared order: u32 element count, element count x f32
//! u32 trailer length, trailer bytes (JSON: network spec and training metadata)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::NetworkSpec;
use super::train::LossKind;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub initial_loss: f64,
    pub loss_curve: Vec<f64>,
    pub selection_curve: Vec<f64>,
    pub best_epoch: usize,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Trailer {
    spec: NetworkSpec,
    metadata: Option<TrainingMetadata>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub fingerprint: String,
    /// One array per layout entry, in declared order.
    pub arrays: Vec<Vec<f32>>,
    pub metadata: Option<TrainingMetadata>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_network(net: &Network, metadata: TrainingMetadata) -> Self {
        Self::with_metadata(net, Some(metadata))
    }

    pub fn with_metadata(net: &Network, metadata: Option<TrainingMetadata>) -> Self {
        let arrays = net
            .layout()
            .entries
            .iter()
            .map(|e| net.params()[e.offset..e.offset + e.len].iter().map(|&p| p as f32).collect())
            .collect();
        Self {
            spec: net.spec().clone(),
            fingerprint: net.spec().fingerprint(),
            arrays,
            metadata,
        }
    }

    pub fn network(&self) -> Result<Network> {
        let layout = self.spec.layout();
        if self.arrays.len() != layout.entries.len() {
            return Err(format_err(format!(
                "expected {} layers, found {}",
                layout.entries.len(),
                self.arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.total);
        for (e, a) in layout.entries.iter().zip(&self.arrays) {
            if a.len() != e.len {
                return Err(format_err(format!("layer {} has {} values, expected {}", e.name, a.len(), e.len)));
            }
            params.extend(a.iter().map(|&v| f64::from(v)));
        }
        Network::from_params(self.spec.clone(), params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u32).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = serde_json::to_vec(&Trailer {
            spec: self.spec.clone(),
            metadata: self.metadata.clone(),
        })?;
        out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(format_err("bad magic, expected TNET1"));
        }
        let flen = r.u32()? as usize;
        let fingerprint = String::from_utf8(r.take(flen)?.to_vec()).map_err(|_| format_err("fingerprint is not UTF-8"))?;
        let n_layers = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let n = r.u32()? as usize;
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| format_err("layer too large"))?)?;
            arrays.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        let tlen = r.u32()? as usize;
        let trailer: Trailer = serde_json::from_slice(r.take(tlen)?)?;
        if r.pos != buf.len() {
            return Err(format_err("trailing bytes after checkpoint"));
        }
        if trailer.spec.fingerprint() != fingerprint {
            return Err(format_err("fingerprint does not match stored network spec"));
        }
        let ckpt = Self {
            spec: trailer.spec,
            fingerprint,
            arrays,
            metadata: trailer.metadata,
        };
        // validates every array length against the spec
        ckpt.network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::Tensor3;

    fn net() -> Network {
        Network::init(
            NetworkSpec {
                input_channels: 3,
                input_height: 16,
                input_width: 16,
                block_channels: vec![4, 4, 6],
                n_outputs: 5,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let ck = Checkpoint::with_metadata(&n, None);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let reloaded = back.network().unwrap();
        for (a, b) in n.params().iter().zip(reloaded.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let x = Tensor3::from_vec(3, 16, 16, (0..768).map(|i| (i % 17) as f64 / 17.0).collect());
        assert_eq!(n.logits(&x).unwrap(), reloaded.logits(&x).unwrap());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::with_metadata(&net(), None).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong_len = Checkpoint::with_metadata(&net(), None);
        wrong_len.arrays[0].pop();
        let b = wrong_len.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
