use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture of a [`Network`](super::Network).
///
/// Each block is a 3x3 same-padded convolution, a 2x2 max-pool and a ReLU.
/// The block tap (`block{i}.out`) exposes the pooled pre-activation, so the
/// last tap sits directly before the rectifier, global average pool and dense
/// head. Max-pool and ReLU commute, so the block computes the same function
/// as convolution, ReLU, pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub block_channels: Vec<usize>,
    pub n_outputs: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            block_channels: vec![8, 16, 32],
            n_outputs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    DenseWeight,
    DenseBias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

/// Offsets of every weight array inside the flat parameter vector, in
/// checkpoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl NetworkSpec {
    pub fn with_outputs(mut self, n_outputs: usize) -> Self {
        self.n_outputs = n_outputs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.n_outputs == 0 {
            return Err(Error::Config("channels and outputs must be positive".into()));
        }
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config("at least one block with nonzero channels required".into()));
        }
        let factor = 1usize << self.block_channels.len();
        if self.input_height % factor != 0 || self.input_width % factor != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {factor} so every pool halves the grid",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    pub fn tap_names(&self) -> Vec<String> {
        (1..=self.n_blocks()).map(|i| format!("block{i}.out")).collect()
    }

    /// The tap directly before the head.
    pub fn last_tap(&self) -> String {
        format!("block{}.out", self.n_blocks())
    }

    pub fn tap_index(&self, name: &str) -> Result<usize> {
        self.tap_names()
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    /// (channels, height, width) of the given block's input.
    pub fn block_input_shape(&self, block: usize) -> (usize, usize, usize) {
        let c = if block == 0 {
            self.input_channels
        } else {
            self.block_channels[block - 1]
        };
        (c, self.input_height >> block, self.input_width >> block)
    }

    /// (channels, height, width) of the given block's tap.
    pub fn tap_shape(&self, block: usize) -> (usize, usize, usize) {
        (
            self.block_channels[block],
            self.input_height >> (block + 1),
            self.input_width >> (block + 1),
        )
    }

    pub fn tap_len(&self, block: usize) -> usize {
        let (c, h, w) = self.tap_shape(block);
        c * h * w
    }

    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind: ParamKind, len: usize| {
            entries.push(ParamEntry {
                name,
                kind,
                offset,
                len,
            });
            offset += len;
        };
        for (b, &out_c) in self.block_channels.iter().enumerate() {
            let (in_c, _, _) = self.block_input_shape(b);
            push(format!("block{}.conv.weight", b + 1), ParamKind::ConvWeight, out_c * in_c * 9);
            push(format!("block{}.conv.bias", b + 1), ParamKind::ConvBias, out_c);
        }
        let feat = *self.block_channels.last().unwrap_or(&0);
        push("head.weight".into(), ParamKind::DenseWeight, self.n_outputs * feat);
        push("head.bias".into(), ParamKind::DenseBias, self.n_outputs);
        ParamLayout {
            entries,
            total: offset,
        }
    }

    /// Stable identifier of the architecture, used to match checkpoints.
    pub fn fingerprint(&self) -> String {
        let chans: Vec<String> = self.block_channels.iter().map(|c| c.to_string()).collect();
        let canonical = format!(
            "tinynet/v1 in={}x{}x{} blocks={} out={}",
            self.input_channels,
            self.input_height,
            self.input_width,
            chans.join(","),
            self.n_outputs
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
