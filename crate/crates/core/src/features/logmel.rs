use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub frame_length: usize,
    pub hop: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            frame_length: 400,
            hop: 160,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style filters, `n_mels × (n_fft/2 + 1)`, spanning 0..Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * f64::from(sample_rate) / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = bin_hz(b);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Magnitude STFT (periodic Hann window, FFT size = frame length), mel
/// filterbank, then `ln(x + 1e-6)`.
///
/// Frame count is `1 + (len - frame_length) / hop`.
pub fn log_mel(pcm: &[f64], cfg: &LogMelConfig) -> Result<FeatureSequence> {
    if cfg.n_mels == 0 || cfg.frame_length == 0 || cfg.hop == 0 {
        return Err(Error::Parameter(format!("invalid log-mel config {cfg:?}")));
    }
    if pcm.len() < cfg.frame_length {
        return Err(Error::Length(format!(
            "{} samples is shorter than one {}-sample frame",
            pcm.len(),
            cfg.frame_length
        )));
    }
    let n = cfg.frame_length;
    let frames = 1 + (pcm.len() - n) / cfg.hop;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_mels, n, SAMPLE_RATE_HZ);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(pcm[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&mags).map(|(w, m)| w * m).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    FeatureSequence::new(
        Tensor::matrix(frames, cfg.n_mels, out)?,
        Some(SAMPLE_RATE_HZ),
    )
}

/// Reads a mono 16 kHz PCM16 WAV file as samples in [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE_HZ
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format(format!(
            "{}: expected mono 16 kHz PCM16, got {spec:?}",
            path.display()
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_log_floor() {
        let seq = log_mel(&vec![0.0; 2000], &LogMelConfig::default()).unwrap();
        assert!(seq.frames().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn frame_count() {
        let seq = log_mel(&vec![0.0; 16_000], &LogMelConfig::default()).unwrap();
        assert_eq!(seq.len(), 98);
        assert_eq!(seq.channels(), 40);
    }

    #[test]
    fn too_short_is_length_error() {
        let err = log_mel(&[0.0; 399], &LogMelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn sine_peaks_in_one_band() {
        let pcm: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let seq = log_mel(&pcm, &LogMelConfig::default()).unwrap();
        let argmax = |row: &[f64]| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        let first = argmax(seq.frames().row(0));
        for t in 0..seq.len() {
            assert_eq!(argmax(seq.frames().row(t)), first);
        }
        // The winning band's centre lies near 440 Hz.
        let top = hz_to_mel(8000.0);
        let centre = mel_to_hz(top * (first + 1) as f64 / 41.0);
        assert!((centre - 440.0).abs() < 150.0, "centre {centre}");
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..800 {
            w.write_sample(((i % 50) as i16 - 25) * 100).unwrap();
        }
        w.finalize().unwrap();
        let pcm = read_wav(&path).unwrap();
        assert_eq!(pcm.len(), 800);
        assert_eq!(pcm[0], -2500.0 / 32768.0);
        let seq = super::super::read_any(&path).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.sample_rate_hz, Some(16_000));
    }
}
