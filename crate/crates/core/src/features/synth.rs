//! Gaussian synthetic corpora with per-dataset domain shift.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, SAMPLE_RATE_HZ};
use crate::episodes::{Corpus, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

/// One synthetic class. A sample from dataset `d` draws i.i.d. frames with
/// mean `channel_means + (d + 1) * dataset_shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClassSpec {
    pub class_id: String,
    pub channel_means: Vec<f64>,
    pub channel_stddevs: Vec<f64>,
    pub length_range: (usize, usize),
    pub dataset_shift: Vec<f64>,
}

impl SynthClassSpec {
    fn validate(&self) -> Result<()> {
        let f = self.channel_means.len();
        if f == 0 || self.channel_stddevs.len() != f || self.dataset_shift.len() != f {
            return Err(Error::Config(format!(
                "class {:?}: means, stddevs and shift must share a positive length",
                self.class_id
            )));
        }
        if self.channel_stddevs.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "class {:?}: stddevs must be finite and non-negative",
                self.class_id
            )));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!(
                "class {:?}: invalid length range {lo}..={hi}",
                self.class_id
            )));
        }
        Ok(())
    }

    /// Mean frame for dataset index `d`.
    pub fn mean_for_dataset(&self, d: usize) -> Vec<f64> {
        let k = (d + 1) as f64;
        self.channel_means
            .iter()
            .zip(&self.dataset_shift)
            .map(|(m, s)| m + k * s)
            .collect()
    }
}

/// How a dataset's samples are assigned to splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    /// Each class is cut into disjoint train / validation / test portions.
    Mixed,
    /// Every sample goes to one split (a held-out corpus).
    Only(Split),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCorpusConfig {
    pub classes: Vec<SynthClassSpec>,
    pub per_class: usize,
    pub num_datasets: usize,
    pub seed: u64,
    /// Prefix for ids, dataset names and file paths, so that several
    /// generated corpora can be merged.
    pub prefix: String,
    /// Per-dataset roles; missing entries default to `Mixed`.
    pub roles: Vec<DatasetRole>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Hop in waveform samples per frame, used to report durations.
    pub hop: usize,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            per_class: 30,
            num_datasets: 2,
            seed: 0,
            prefix: "synth".into(),
            roles: Vec::new(),
            train_fraction: 0.6,
            validation_fraction: 0.2,
            hop: 160,
        }
    }
}

/// Parameters for [`random_classes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassLayout {
    pub num_classes: usize,
    pub channels: usize,
    /// Standard deviation of class mean coordinates.
    pub separation: f64,
    /// Per-frame noise standard deviation.
    pub noise: f64,
    /// Standard deviation of the per-class dataset shift coordinates.
    pub shift: f64,
    pub length_range: (usize, usize),
}

impl Default for ClassLayout {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 16,
            separation: 1.0,
            noise: 1.0,
            shift: 0.5,
            length_range: (8, 24),
        }
    }
}

/// Draws class means and shifts from a seeded Gaussian.
pub fn random_classes(layout: &ClassLayout, seed_value: u64) -> Vec<SynthClassSpec> {
    let mut rng = seed::named_rng(seed_value, "synth-classes");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let f = layout.channels;
    let shift: Vec<f64> = (0..f).map(|_| layout.shift * std.sample(&mut rng)).collect();
    (0..layout.num_classes)
        .map(|c| SynthClassSpec {
            class_id: format!("class{c}"),
            channel_means: (0..f).map(|_| layout.separation * std.sample(&mut rng)).collect(),
            channel_stddevs: vec![layout.noise; f],
            length_range: layout.length_range,
            dataset_shift: shift.clone(),
        })
        .collect()
}

fn role(cfg: &SynthCorpusConfig, d: usize) -> DatasetRole {
    cfg.roles.get(d).copied().unwrap_or(DatasetRole::Mixed)
}

fn split_for(cfg: &SynthCorpusConfig, d: usize, i: usize) -> Split {
    match role(cfg, d) {
        DatasetRole::Only(s) => s,
        DatasetRole::Mixed => {
            let n = cfg.per_class as f64;
            let train = (cfg.train_fraction * n).round() as usize;
            let val = (cfg.validation_fraction * n).round() as usize;
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Validation
            } else {
                Split::Test
            }
        }
    }
}

/// Generates `classes × per_class × num_datasets` samples. Values are rounded
/// to `f32` so the in-memory corpus equals its on-disk form.
pub fn generate_synthetic_corpus(cfg: &SynthCorpusConfig) -> Result<Corpus> {
    if cfg.per_class == 0 || cfg.num_datasets == 0 {
        return Err(Error::Config("per_class and num_datasets must be >= 1".into()));
    }
    if cfg.classes.is_empty() {
        return Err(Error::Config("no synthetic classes".into()));
    }
    if !(0.0..=1.0).contains(&(cfg.train_fraction + cfg.validation_fraction))
        || cfg.train_fraction < 0.0
        || cfg.validation_fraction < 0.0
    {
        return Err(Error::Config("split fractions must be non-negative and sum to <= 1".into()));
    }
    let f = cfg.classes[0].channel_means.len();
    for c in &cfg.classes {
        c.validate()?;
        if c.channel_means.len() != f {
            return Err(Error::Config("classes disagree on channel count".into()));
        }
    }
    let hop = cfg.hop.max(1);
    let mut records = Vec::new();
    let mut features = Vec::new();
    for d in 0..cfg.num_datasets {
        let dataset = format!("{}-d{d}", cfg.prefix);
        for (ci, class) in cfg.classes.iter().enumerate() {
            let mean = class.mean_for_dataset(d);
            for i in 0..cfg.per_class {
                let id = format!("{dataset}-c{ci}-{i:04}");
                let mut rng = seed::named_rng(cfg.seed, &id);
                let (lo, hi) = class.length_range;
                let t_len = rng.random_range(lo..=hi);
                let mut data = Vec::with_capacity(t_len * f);
                for _ in 0..t_len {
                    for (m, s) in mean.iter().zip(&class.channel_stddevs) {
                        let v = if *s > 0.0 {
                            m + s * rng.sample::<f64, _>(rand_distr::StandardNormal)
                        } else {
                            *m
                        };
                        data.push(f64::from(v as f32));
                    }
                }
                let frames = Tensor::matrix(t_len, f, data)?;
                features.push(FeatureSequence::new(frames, None)?);
                records.push(SampleRecord {
                    path: format!("{}/d{d}/{id}.fseq", cfg.prefix),
                    id,
                    label: class.class_id.clone(),
                    dataset: dataset.clone(),
                    language: format!("lang{d}"),
                    split: split_for(cfg, d, i),
                    duration_s: (t_len * hop) as f64 / f64::from(SAMPLE_RATE_HZ),
                });
            }
        }
    }
    Corpus::new(records, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> SynthCorpusConfig {
        let layout = ClassLayout {
            noise,
            ..ClassLayout::default()
        };
        SynthCorpusConfig {
            classes: random_classes(&layout, 7),
            per_class: 30,
            num_datasets: 2,
            seed: 7,
            ..SynthCorpusConfig::default()
        }
    }

    #[test]
    fn counts_records() {
        let c = generate_synthetic_corpus(&cfg(1.0)).unwrap();
        assert_eq!(c.len(), 240);
        let train = c.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 4 * 2 * 18);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_corpus(&cfg(1.0)).unwrap();
        let b = generate_synthetic_corpus(&cfg(1.0)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(1.0);
        other.seed = 8;
        assert_ne!(generate_synthetic_corpus(&other).unwrap(), a);
    }

    #[test]
    fn zero_noise_frames_equal_shifted_mean() {
        let c = cfg(0.0);
        let corpus = generate_synthetic_corpus(&c).unwrap();
        for (r, f) in corpus.records.iter().zip(&corpus.features) {
            let ci: usize = r.label.trim_start_matches("class").parse().unwrap();
            let d = usize::from(r.dataset.ends_with("d1"));
            let mean: Vec<f64> = c.classes[ci]
                .mean_for_dataset(d)
                .iter()
                .map(|&m| f64::from(m as f32))
                .collect();
            for t in 0..f.len() {
                assert_eq!(f.frames().row(t), &mean[..]);
            }
        }
        // Dataset 0 carries exactly one unit of shift.
        let spec = &c.classes[0];
        let m0 = spec.mean_for_dataset(0);
        for ((m, base), s) in m0.iter().zip(&spec.channel_means).zip(&spec.dataset_shift) {
            assert_eq!(*m, base + s);
        }
    }

    #[test]
    fn empirical_mean_converges() {
        let mut c = cfg(1.0);
        c.per_class = 200;
        c.num_datasets = 1;
        let corpus = generate_synthetic_corpus(&c).unwrap();
        let expect = c.classes[0].mean_for_dataset(0);
        let f = expect.len();
        let mut sum = vec![0.0; f];
        let mut n = 0usize;
        for (r, seq) in corpus.records.iter().zip(&corpus.features) {
            if r.label != "class0" {
                continue;
            }
            for t in 0..seq.len() {
                for (s, v) in sum.iter_mut().zip(seq.frames().row(t)) {
                    *s += v;
                }
                n += 1;
            }
        }
        let tol = 3.0 / (n as f64).sqrt();
        for (s, e) in sum.iter().zip(&expect) {
            assert!((s / n as f64 - e).abs() < tol, "{} vs {e}", s / n as f64);
        }
    }

    #[test]
    fn held_out_role() {
        let mut c = cfg(1.0);
        c.roles = vec![DatasetRole::Mixed, DatasetRole::Only(Split::Test)];
        let corpus = generate_synthetic_corpus(&c).unwrap();
        assert!(corpus
            .records
            .iter()
            .filter(|r| r.dataset.ends_with("d1"))
            .all(|r| r.split == Split::Test));
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(1.0);
        c.per_class = 0;
        assert!(matches!(generate_synthetic_corpus(&c), Err(Error::Config(_))));
        let mut c = cfg(1.0);
        c.classes[1].length_range = (0, 4);
        assert!(matches!(generate_synthetic_corpus(&c), Err(Error::Config(_))));
    }
}
