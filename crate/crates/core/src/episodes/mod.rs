//! Corpus manifests and N-way K-shot episode sampling.
//!
//! Two sampling modes are supported. In *free* mode a class is a
//! `(dataset, label)` pair and an episode may mix corpora. In *within* mode
//! one dataset is drawn first and every class of the episode comes from it.

mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{
    load_manifest, parse_manifest, validate_records, write_manifest, Corpus, SampleRecord, Split,
};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Free,
    Within,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampling::Free => "free",
            Sampling::Within => "within",
        })
    }
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Sampling::Free),
            "within" => Ok(Sampling::Within),
            other => Err(Error::Config(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 4,
            k_shot: 5,
            query_per_class: 12,
            sampling: Sampling::Within,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 || self.query_per_class < 1 {
            return Err(Error::Config(format!(
                "k_shot and query_per_class must be >= 1, got {} and {}",
                self.k_shot, self.query_per_class
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn per_class(&self) -> usize {
        self.k_shot + self.query_per_class
    }
}

/// A sampled few-shot task. Entries are `(record index, episode label)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub source_datasets: BTreeSet<String>,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Support record indices grouped by episode label.
    pub fn support_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_way];
        for &(r, l) in &self.support {
            out[l].push(r);
        }
        out
    }

    /// The single source dataset of a within-dataset episode.
    pub fn dataset(&self) -> String {
        self.source_datasets.iter().cloned().collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone)]
struct ClassPool {
    members: Vec<usize>,
}

/// Pre-indexed view of one split of a record list.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    records: &'a [SampleRecord],
    split: Split,
    // (dataset, label) -> members, ordered for determinism
    classes: BTreeMap<(String, String), ClassPool>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(records: &'a [SampleRecord], split: Split) -> Self {
        let mut classes: BTreeMap<(String, String), ClassPool> = BTreeMap::new();
        for (i, r) in records.iter().enumerate().filter(|(_, r)| r.split == split) {
            classes
                .entry((r.dataset.clone(), r.label.clone()))
                .or_insert_with(|| ClassPool { members: Vec::new() })
                .members
                .push(i);
        }
        Self {
            records,
            split,
            classes,
        }
    }

    pub fn records(&self) -> &'a [SampleRecord] {
        self.records
    }

    fn qualifying(&self, need: usize) -> Vec<(&(String, String), &ClassPool)> {
        self.classes
            .iter()
            .filter(|(_, p)| p.members.len() >= need)
            .collect()
    }

    /// Datasets that can host a within-dataset episode for `spec`.
    pub fn eligible_datasets(&self, spec: &EpisodeSpec) -> Vec<String> {
        let mut per_dataset: BTreeMap<&str, usize> = BTreeMap::new();
        for ((d, _), _) in self.qualifying(spec.per_class()) {
            *per_dataset.entry(d.as_str()).or_default() += 1;
        }
        per_dataset
            .into_iter()
            .filter(|&(_, n)| n >= spec.n_way)
            .map(|(d, _)| d.to_string())
            .collect()
    }

    /// Checks that `spec` can be sampled from this split.
    pub fn check(&self, spec: &EpisodeSpec) -> Result<()> {
        spec.validate()?;
        let need = spec.per_class();
        match spec.sampling {
            Sampling::Free => {
                let n = self.qualifying(need).len();
                if n < spec.n_way {
                    return Err(Error::Feasibility(format!(
                        "split {}: only {n} (dataset, label) classes have >= {need} samples \
                         (k_shot + query), need n_way = {}",
                        self.split, spec.n_way
                    )));
                }
            }
            Sampling::Within => {
                if self.eligible_datasets(spec).is_empty() {
                    return Err(Error::Feasibility(format!(
                        "split {}: no dataset has {} classes with >= {need} samples \
                         (k_shot + query) each",
                        self.split, spec.n_way
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, spec: &EpisodeSpec) -> Result<Episode> {
        self.check(spec)?;
        let need = spec.per_class();
        let mut rng = seed::named_rng(spec.seed, "episode");
        let pool: Vec<&ClassPool> = match spec.sampling {
            Sampling::Free => self.qualifying(need).into_iter().map(|(_, p)| p).collect(),
            Sampling::Within => {
                let datasets = self.eligible_datasets(spec);
                let d = &datasets[rng.random_range(0..datasets.len())];
                self.qualifying(need)
                    .into_iter()
                    .filter(|((ds, _), _)| ds == d)
                    .map(|(_, p)| p)
                    .collect()
            }
        };
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let (chosen, _) = order.partial_shuffle(&mut rng, spec.n_way);
        let chosen = chosen.to_vec();

        let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut query = Vec::with_capacity(spec.n_way * spec.query_per_class);
        let mut source_datasets = BTreeSet::new();
        for (label, &ci) in chosen.iter().enumerate() {
            let mut members = pool[ci].members.clone();
            let (picked, _) = members.partial_shuffle(&mut rng, need);
            for (j, &r) in picked.iter().enumerate() {
                if j < spec.k_shot {
                    support.push((r, label));
                } else {
                    query.push((r, label));
                }
            }
            source_datasets.insert(self.records[pool[ci].members[0]].dataset.clone());
        }
        Ok(Episode {
            support,
            query,
            source_datasets,
            n_way: spec.n_way,
            k_shot: spec.k_shot,
            seed: spec.seed,
        })
    }
}

/// Samples one episode from `split` of `records`.
pub fn sample_episode(records: &[SampleRecord], spec: &EpisodeSpec, split: Split) -> Result<Episode> {
    EpisodeSampler::new(records, split).sample(spec)
}

/// Evaluation episodes: always within-dataset, episode `i` seeded `seed + i`.
pub fn make_eval_stream(
    records: &[SampleRecord],
    spec: &EpisodeSpec,
    split: Split,
    num_episodes: usize,
) -> Result<Vec<Episode>> {
    let sampler = EpisodeSampler::new(records, split);
    let within = EpisodeSpec {
        sampling: Sampling::Within,
        ..spec.clone()
    };
    sampler.check(&within)?;
    (0..num_episodes)
        .map(|i| sampler.sample(&within.with_seed(spec.seed.wrapping_add(i as u64))))
        .collect()
}
