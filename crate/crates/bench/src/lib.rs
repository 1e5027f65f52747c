//! Shared fixtures for the benchmarks: deterministic samples and models at
//! the default and smoke sizes.

use contourlm::codec::{self, TokenSequence};
use contourlm::config::PipelineConfig;
use contourlm::model::Model;
use contourlm::synthdata::{generate_split, CropSample, Split};

/// `n` training crops from the default generator.
pub fn samples(n: usize) -> Vec<CropSample> {
    let cfg = PipelineConfig::default();
    generate_split(&cfg.data.gen, 1, Split::Train, n).unwrap().into_iter().map(|r| r.sample).collect()
}

/// Freshly initialized model at the default size.
pub fn default_model() -> Model<f32> {
    Model::new(PipelineConfig::default().model_config()).unwrap()
}

/// Instruction-format sequences for `samples`.
pub fn sft_batch<'a>(model: &Model<f32>, samples: &'a [CropSample]) -> Vec<(&'a CropSample, TokenSequence)> {
    let vocab = model.config.vocab();
    samples.iter().map(|s| (s, codec::format_sft(&vocab, s).unwrap())).collect()
}
