//! One-file pipeline configuration and the provenance manifest written by
//! every command.
//!
//! A config file only needs the keys it changes; it is merged over the
//! defaults, and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::{derive_seed, GenParams};
use crate::training::{MiningConfig, Stage, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub gen: GenParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 4000, n_val: 200, n_test: 200, gen: GenParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub sft: StageConfig,
    pub dpo: StageConfig,
    pub mining: MiningConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig::defaults(Stage::Pretrain),
            sft: StageConfig::defaults(Stage::Sft),
            dpo: StageConfig::defaults(Stage::Dpo),
            mining: MiningConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    // optional fields serialize to nothing; let serde judge them
                    None => {
                        b.insert(k, v);
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl PipelineConfig {
    /// Tiny settings that run the whole pipeline in seconds.
    pub fn smoke() -> Self {
        let mut c = Self {
            data: DataConfig {
                n_train: 10,
                n_val: 4,
                n_test: 4,
                gen: GenParams { image_size: 96, grid: 6, min_cells: 4, max_cells: 8, max_vertices: 12, ..GenParams::default() },
            },
            model: ModelConfig {
                enc_layers: 1,
                enc_dim: 16,
                enc_heads: 2,
                lm_layers: 1,
                lm_dim: 16,
                lm_heads: 2,
                mlp_ratio: 2,
                ..ModelConfig::default()
            },
            ..Self::default()
        };
        for s in [&mut c.pretrain, &mut c.sft, &mut c.dpo] {
            s.epochs = 1;
            s.batch_size = 4;
        }
        c
    }

    /// Parses TOML text, filling unspecified keys from the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user, "")?;
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML or JSON by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let text = if is_json {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            toml::to_string(&v).map_err(|e| Error::Config(e.to_string()))?
        } else {
            text
        };
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.gen.validate()?;
        self.model.validate()?;
        for (want, s) in [(Stage::Pretrain, &self.pretrain), (Stage::Sft, &self.sft), (Stage::Dpo, &self.dpo)] {
            if s.stage != want {
                return Err(Error::Config(format!("[{}] section declares stage {:?}", want.name(), s.stage)));
            }
            s.validate()?;
        }
        // rejected answers may carry a few inserted vertices
        let longest = self.data.gen.max_vertices + self.mining.max_corrupt;
        let need = self.model.num_patches() + ModelConfig::longest_sft_len(longest) - 1;
        if self.model.max_seq_len < need {
            return Err(Error::Config(format!(
                "model.max_seq_len {} is shorter than the longest formatted sample or preference answer ({need})",
                self.model.max_seq_len
            )));
        }
        if self.model.image_size != crate::synthdata::CROP_SIZE {
            return Err(Error::Config(format!("model.image_size must be {}", crate::synthdata::CROP_SIZE)));
        }
        Ok(())
    }

    /// Model config with the initialization seed tied to the master seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { init_seed: derive_seed(self.seed, 0x004D_4F44_454C, self.model.init_seed), ..self.model.clone() }
    }

    /// Stage config with its seed tied to the master seed.
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let (s, tag) = match stage {
            Stage::Pretrain => (&self.pretrain, 1),
            Stage::Sft => (&self.sft, 2),
            Stage::Dpo => (&self.dpo, 3),
        };
        StageConfig { seed: derive_seed(self.seed, tag, s.seed), ..s.clone() }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig { seed: derive_seed(self.seed, 4, self.mining.seed), ..self.mining.clone() }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(Sha256::digest(json.as_bytes()).as_slice())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(Sha256::digest(std::fs::read(path)?).as_slice()))
}

/// One link of the provenance chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub kind: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub lineage: Vec<LineageEntry>,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub unix_time: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            master_seed: config.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            lineage: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            unix_time: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_sections_merge_over_defaults() {
        let c = PipelineConfig::from_toml_str("seed = 9\n[sft]\nepochs = 2\n[data.gen]\nnoise_sigma = 3.0\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.sft.epochs, 2);
        assert_eq!(c.sft.lr, 5e-4);
        assert_eq!(c.data.gen.noise_sigma, 3.0);
        assert_eq!(c.pretrain, StageConfig::defaults(Stage::Pretrain));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["[sft]\nepochz = 2\n", "bogus = 1\n", "[model]\nenc_heads = 3\n", "[pretrain]\nstage = \"sft\"\n", "[sft\n"] {
            assert!(matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml_and_hash_tracks_content() {
        let c = PipelineConfig::smoke();
        let back = PipelineConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let d = PipelineConfig { seed: 1, ..c.clone() };
        assert_ne!(d.hash(), c.hash());
        assert_ne!(d.stage(Stage::Sft).seed, c.stage(Stage::Sft).seed);
    }

    #[test]
    fn default_context_fits_the_longest_sample() {
        let c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        let tight = PipelineConfig { model: ModelConfig { max_seq_len: 129, ..ModelConfig::default() }, ..c };
        assert!(tight.validate().is_err());
    }
}
