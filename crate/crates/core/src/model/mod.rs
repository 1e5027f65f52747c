//! Vision encoder, projector and decoder-only language model over the
//! coordinate vocabulary, with hand-written backpropagation.
//!
//! The vision tokens replace the `[IMG]` slot and attend to each other
//! bidirectionally; text rows are causal. Vision tokens carry spatial
//! information only through the encoder's learnable position table, so
//! turning that table off leaves the network blind to patch order.

pub mod checkpoint;
pub mod float;
mod generate;
pub mod layers;
mod net;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::codec::{Vocab, INSTRUCTION};
use crate::error::{Error, Result};
use crate::synthdata::CROP_SIZE;

pub use float::Float;
pub use net::{nll_loss, Logits, Tape};
pub use params::{Group, Layout, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub lm_layers: usize,
    pub lm_dim: usize,
    pub lm_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Vision rows plus text rows.
    pub max_seq_len: usize,
    pub use_pos_embed: bool,
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: CROP_SIZE,
            patch_size: 16,
            channels: 1,
            enc_layers: 2,
            enc_dim: 128,
            enc_heads: 4,
            lm_layers: 4,
            lm_dim: 128,
            lm_heads: 4,
            mlp_ratio: 4,
            vocab_size: Vocab::new(CROP_SIZE, CROP_SIZE).size(),
            max_seq_len: 136,
            use_pos_embed: true,
            init_std: 0.02,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny network for gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
            enc_layers: 1,
            enc_dim: 8,
            enc_heads: 2,
            lm_layers: 1,
            lm_dim: 8,
            lm_heads: 2,
            mlp_ratio: 2,
            vocab_size: Vocab::new(32, 32).size(),
            max_seq_len: 4 + 64,
            ..Self::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Text positions available after the vision rows.
    pub fn max_text_len(&self) -> usize {
        self.max_seq_len.saturating_sub(self.num_patches())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.image_size, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.channels != 1 {
            return bad("only single-channel input is supported".into());
        }
        for (name, dim, heads) in [("enc", self.enc_dim, self.enc_heads), ("lm", self.lm_dim, self.lm_heads)] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return bad(format!("{name}_dim {dim} not divisible by {name}_heads {heads}"));
            }
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.vocab_size != self.vocab().size() {
            return bad(format!("vocab_size {} but a {}px grid needs {}", self.vocab_size, self.image_size, self.vocab().size()));
        }
        if self.max_text_len() < 2 {
            return bad(format!("max_seq_len {} leaves no room after {} vision rows", self.max_seq_len, self.num_patches()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    /// Longest instruction-format sequence for polygons of up to `max_vertices`.
    pub fn longest_sft_len(max_vertices: usize) -> usize {
        2 + INSTRUCTION.len() + 2 * (max_vertices + 1) + 1
    }
}

/// Network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = params::build(&config);
        Ok(Self { config, layout, params })
    }

    /// Replaces the parameters, checking names and shapes against the config.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.names != params.names || fresh.params.shapes != params.shapes {
            return Err(Error::Checkpoint("parameter names or shapes do not match the config".into()));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    pub fn zero_grads(&self) -> ParamStore<T> {
        self.params.zeros_like()
    }

    /// Order-sensitive digest of one group's values, for freeze checks.
    pub fn group_checksum(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (d, g) in self.params.data.iter().zip(&self.params.groups) {
            if *g != group {
                continue;
            }
            for v in d {
                for b in T::to_le_bytes(std::slice::from_ref(v)) {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests;
