//! Shared fixtures for unit tests.

use crate::episodes::Corpus;
use crate::features::{generate_synthetic_corpus, random_classes, ClassLayout, SynthCorpusConfig};
use crate::model::{EncoderConfig, ExtractorConfig, ExtractorKind, ModelConfig};

/// 4 classes × 2 datasets × 30 samples, 4 channels, 4-8 frames.
pub fn small_corpus() -> Corpus {
    let layout = ClassLayout {
        num_classes: 4,
        channels: 4,
        separation: 2.0,
        noise: 0.5,
        shift: 0.5,
        length_range: (4, 8),
    };
    generate_synthetic_corpus(&SynthCorpusConfig {
        classes: random_classes(&layout, 3),
        per_class: 30,
        num_datasets: 2,
        seed: 3,
        ..SynthCorpusConfig::default()
    })
    .unwrap()
}

pub fn small_model(kind: ExtractorKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_channels: 4,
            hidden_channels: 6,
            num_layers: 1,
            kernel_width: 3,
        },
        extractor: ExtractorConfig {
            kind,
            embedding_dim: 8,
            glu_kernel: 4,
            ..ExtractorConfig::default()
        },
        discriminator: None,
        init_seed: 5,
    }
}
