//! Frame-feature ingestion, augmentation and synthetic corpora.

mod augment;
mod logmel;
mod store;
mod synth;

use std::path::Path;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use logmel::{log_mel, mel_filterbank, read_wav, LogMelConfig};
pub use store::{decode_fseq, encode_fseq, read_fseq, write_fseq, FSEQ_MAGIC, FSEQ_VERSION};
pub use synth::{
    generate_synthetic_corpus, random_classes, ClassLayout, DatasetRole, SynthClassSpec,
    SynthCorpusConfig,
};

use crate::episodes::SampleRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Longest retained utterance: 150,000 samples at 16 kHz.
pub const MAX_DURATION_S: f64 = 9.375;

/// One utterance as a `T×F` matrix of frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    pub sample_rate_hz: Option<u32>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, sample_rate_hz: Option<u32>) -> Result<Self> {
        frames.dims2()?;
        if !frames.all_finite() {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            sample_rate_hz,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, None)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Drops records strictly longer than `max_duration_s`. Nothing is truncated.
pub fn filter_by_length(records: &[SampleRecord], max_duration_s: f64) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| r.duration_s <= max_duration_s)
        .cloned()
        .collect()
}

/// Frame budget equivalent to a duration cap at the given hop.
pub fn max_frames_for(max_duration_s: f64, hop: usize, sample_rate_hz: u32) -> usize {
    (max_duration_s * f64::from(sample_rate_hz) / hop as f64).floor() as usize
}

/// Reads an `.fseq` feature file, or a `.wav` file through the log-mel frontend.
pub fn read_any(path: &Path) -> Result<FeatureSequence> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let pcm = read_wav(path)?;
        log_mel(&pcm, &LogMelConfig::default())
    } else {
        read_fseq(path)
    }
}
