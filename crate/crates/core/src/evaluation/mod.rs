//! Meta-test evaluation with optional per-episode fine-tuning, reports and
//! hyperparameter sweeps.

mod report;

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    render_report, render_sweep, DatasetSummary, EpisodeResult, EvalReport, SweepCell, SweepGrid,
    SweepReport,
};

use crate::episodes::{Corpus, Episode};
use crate::error::{Error, Result};
use crate::features::{spec_augment, FeatureSequence, SpecAugmentConfig};
use crate::model::{restore, snapshot, Group, Mode, ModelState, Trainable};
use crate::numerics::{Tape, Tensor};
use crate::protonet::{episode_loss, EpisodeEmbeddings, ProtoConfig};
use crate::seed;
use crate::training::{apply_gradients, embed_samples};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    A,
    B,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::A => "a",
            Variant::B => "b",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Variant::None),
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            other => Err(Error::Config(format!("unknown fine-tuning variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub variant: Variant,
    pub steps: usize,
    pub lr: f64,
    /// Inner support size per class for variant B.
    pub support_size: usize,
    /// Masks for variant A's two support copies.
    pub augment: SpecAugmentConfig,
    /// Also mask variant B's inner sets.
    pub augment_b: bool,
    /// Keep dropout active during fine-tuning steps.
    pub dropout: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            variant: Variant::None,
            steps: 0,
            lr: 1e-5,
            support_size: 2,
            augment: SpecAugmentConfig::default(),
            augment_b: false,
            dropout: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// True when no parameter update happens.
    pub fn is_noop(&self) -> bool {
        self.variant == Variant::None || self.steps == 0
    }

    pub fn validate(&self, k_shot: usize) -> Result<()> {
        if !self.is_noop() && (!(self.lr > 0.0) || !self.lr.is_finite()) {
            return Err(Error::Config(format!("fine-tune lr must be positive, got {}", self.lr)));
        }
        if self.variant == Variant::B && !(1..k_shot).contains(&self.support_size) {
            return Err(Error::Config(format!(
                "variant B needs 1 <= support_size < k_shot, got support_size {} with k_shot {k_shot}; \
                 the disjoint split cannot be used for 1-shot episodes",
                self.support_size
            )));
        }
        Ok(())
    }
}

/// Labeled support samples of one episode.
pub type Support<'a> = [(&'a FeatureSequence, usize)];

fn labels_of(support: &Support<'_>) -> Vec<usize> {
    support.iter().map(|&(_, l)| l).collect()
}

/// One Adam step on θm and θf from the prototypical loss of inner query
/// against inner support. Returns the loss.
fn finetune_step(
    model: &mut ModelState,
    inner_support: &[FeatureSequence],
    support_labels: &[usize],
    inner_query: &[FeatureSequence],
    query_labels: &[usize],
    lr: f64,
    proto: &ProtoConfig,
    dropout_rng: Option<&mut seed::Rng>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::EMBEDDING);
    let sx: Vec<&FeatureSequence> = inner_support.iter().collect();
    let qx: Vec<&FeatureSequence> = inner_query.iter().collect();
    let (s, q) = match dropout_rng {
        Some(rng) => {
            let mut mode = Mode::Train(rng);
            let (_, s) = embed_samples(model, &mut tape, &bound, &sx, &mut mode)?;
            let (_, q) = embed_samples(model, &mut tape, &bound, &qx, &mut mode)?;
            (s, q)
        }
        None => {
            let (_, s) = embed_samples(model, &mut tape, &bound, &sx, &mut Mode::Eval)?;
            let (_, q) = embed_samples(model, &mut tape, &bound, &qx, &mut Mode::Eval)?;
            (s, q)
        }
    };
    let (loss, _) = episode_loss(
        &mut tape,
        EpisodeEmbeddings { support: s, query: q },
        support_labels,
        query_labels,
        proto,
    )?;
    let mut g = tape.backward(loss)?;
    let mut take = |vars: &[crate::numerics::Var], params: &[Tensor]| -> Vec<Tensor> {
        vars.iter()
            .zip(params)
            .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let grads = vec![
        (Group::Encoder, take(&bound.encoder, &model.theta_m.tensors)),
        (Group::Extractor, take(&bound.extractor, &model.theta_f.tensors)),
    ];
    apply_gradients(model, &grads, lr)?;
    Ok(tape.value(loss).data()[0])
}

/// Per-step losses of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneTrace {
    pub losses: Vec<f64>,
}

fn fresh_optimizers(model: &mut ModelState) {
    model.opt_m = None;
    model.opt_f = None;
}

/// Support-as-query fine-tuning: every step embeds two independently
/// masked copies of each support sample, one set as inner support and the
/// other as inner query.
pub fn finetune_variant_a(
    model: &mut ModelState,
    support: &Support<'_>,
    steps: usize,
    lr: f64,
    augment: &SpecAugmentConfig,
    rng: &mut seed::Rng,
    proto: &ProtoConfig,
    dropout: bool,
) -> Result<FinetuneTrace> {
    fresh_optimizers(model);
    let labels = labels_of(support);
    let mut drop_rng = seed::rng(rng.random::<u64>());
    let mut trace = FinetuneTrace::default();
    for _ in 0..steps {
        let first: Vec<FeatureSequence> = support.iter().map(|(x, _)| spec_augment(x, augment, rng)).collect();
        let second: Vec<FeatureSequence> = support.iter().map(|(x, _)| spec_augment(x, augment, rng)).collect();
        let loss = finetune_step(
            model,
            &first,
            &labels,
            &second,
            &labels,
            lr,
            proto,
            dropout.then_some(&mut drop_rng),
        )?;
        trace.losses.push(loss);
    }
    Ok(trace)
}

/// Per class, a uniformly random split of its `k` support positions into
/// `s` inner-support and `k - s` inner-query positions.
pub fn disjoint_split<R: Rng + ?Sized>(n: usize, k: usize, s: usize, rng: &mut R) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..n)
        .map(|_| {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(rng);
            let query = order.split_off(s.min(k));
            (order, query)
        })
        .collect()
}

/// Disjoint-split fine-tuning: every step draws, per class, `s` inner
/// support samples and uses the remaining `K - s` as inner query.
#[allow(clippy::too_many_arguments)]
pub fn finetune_variant_b(
    model: &mut ModelState,
    support: &Support<'_>,
    steps: usize,
    lr: f64,
    s: usize,
    rng: &mut seed::Rng,
    proto: &ProtoConfig,
    dropout: bool,
    augment: Option<&SpecAugmentConfig>,
) -> Result<FinetuneTrace> {
    let n = support.iter().map(|&(_, l)| l + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<&FeatureSequence>> = vec![Vec::new(); n];
    for &(x, l) in support {
        by_class[l].push(x);
    }
    let k = by_class.first().map_or(0, Vec::len);
    if by_class.iter().any(|c| c.len() != k) {
        return Err(Error::Parameter("unbalanced support set".into()));
    }
    if !(1..k).contains(&s) {
        return Err(Error::Config(format!(
            "variant B needs 1 <= s < K, got s = {s}, K = {k}; not usable for 1-shot episodes"
        )));
    }
    fresh_optimizers(model);
    let mut drop_rng = seed::rng(rng.random::<u64>());
    let mut trace = FinetuneTrace::default();
    for _ in 0..steps {
        let (mut si, mut sl, mut qi, mut ql) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (label, (inner_s, inner_q)) in disjoint_split(n, k, s, rng).into_iter().enumerate() {
            let mut prep = |m: usize| match augment {
                Some(a) => spec_augment(by_class[label][m], a, rng),
                None => by_class[label][m].clone(),
            };
            for m in inner_s {
                si.push(prep(m));
                sl.push(label);
            }
            for m in inner_q {
                qi.push(prep(m));
                ql.push(label);
            }
        }
        let loss = finetune_step(model, &si, &sl, &qi, &ql, lr, proto, dropout.then_some(&mut drop_rng))?;
        trace.losses.push(loss);
    }
    Ok(trace)
}

/// Applies `ft` to `model` on one episode's support set.
pub fn finetune(
    model: &mut ModelState,
    support: &Support<'_>,
    ft: &FinetuneConfig,
    rng: &mut seed::Rng,
    proto: &ProtoConfig,
) -> Result<FinetuneTrace> {
    if ft.is_noop() {
        return Ok(FinetuneTrace::default());
    }
    match ft.variant {
        Variant::None => Ok(FinetuneTrace::default()),
        Variant::A => finetune_variant_a(model, support, ft.steps, ft.lr, &ft.augment, rng, proto, ft.dropout),
        Variant::B => finetune_variant_b(
            model,
            support,
            ft.steps,
            ft.lr,
            ft.support_size,
            rng,
            proto,
            ft.dropout,
            ft.augment_b.then_some(&ft.augment),
        ),
    }
}

/// Eval-mode accuracy on the query set with prototypes from the full support.
pub fn episode_accuracy(model: &ModelState, corpus: &Corpus, episode: &Episode, proto: &ProtoConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::NONE);
    let sx: Vec<&FeatureSequence> = episode.support.iter().map(|&(r, _)| &corpus.features[r]).collect();
    let qx: Vec<&FeatureSequence> = episode.query.iter().map(|&(r, _)| &corpus.features[r]).collect();
    let (_, s) = embed_samples(model, &mut tape, &bound, &sx, &mut Mode::Eval)?;
    let (_, q) = embed_samples(model, &mut tape, &bound, &qx, &mut Mode::Eval)?;
    let (_, acc) = episode_loss(
        &mut tape,
        EpisodeEmbeddings { support: s, query: q },
        &episode.support_labels(),
        &episode.query_labels(),
        proto,
    )?;
    Ok(acc)
}

/// Execution options for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub proto: ProtoConfig,
    /// Worker threads for episode-parallel evaluation; 0 uses the global pool.
    pub jobs: usize,
}

fn run_episode(
    bytes: &[u8],
    corpus: &Corpus,
    index: usize,
    episode: &Episode,
    ft: &FinetuneConfig,
    proto: &ProtoConfig,
) -> Result<(EpisodeResult, f64)> {
    let mut m = restore(bytes)?;
    let support: Vec<(&FeatureSequence, usize)> = episode
        .support
        .iter()
        .map(|&(r, l)| (&corpus.features[r], l))
        .collect();
    let mut rng = seed::named_rng(seed::derive_index(ft.seed, episode.seed), "finetune");
    let start = Instant::now();
    finetune(&mut m, &support, ft, &mut rng, proto)?;
    let ft_time = start.elapsed().as_secs_f64();
    let finetune_forwards = m.forward_counter().get();
    let accuracy = episode_accuracy(&m, corpus, episode, proto)?;
    Ok((
        EpisodeResult {
            index,
            dataset: episode.dataset(),
            seed: episode.seed,
            accuracy,
            finetune_forwards,
            forwards: m.forward_counter().get(),
        },
        ft_time,
    ))
}

/// Evaluates every episode on its own restored copy of `model`. The model
/// itself is never modified.
pub fn evaluate(
    model: &ModelState,
    corpus: &Corpus,
    episodes: &[Episode],
    ft: &FinetuneConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.proto.validate()?;
    if let Some(k) = episodes.first().map(|e| e.k_shot) {
        ft.validate(k)?;
    }
    let bytes = snapshot(model);
    let work = || -> Result<Vec<(EpisodeResult, f64)>> {
        episodes
            .par_iter()
            .enumerate()
            .map(|(i, ep)| run_episode(&bytes, corpus, i, ep, ft, &opts.proto))
            .collect()
    };
    let results = if opts.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?
    } else {
        work()?
    };
    let wall: f64 = results.iter().map(|(_, t)| t).sum();
    let mut report = EvalReport::from_episodes(ft, results.into_iter().map(|(r, _)| r).collect());
    report.finetune_wall_time_s = wall;
    Ok(report)
}

/// Evaluates the Cartesian product of `grid` on one shared episode stream.
pub fn sweep(
    model: &ModelState,
    corpus: &Corpus,
    episodes: &[Episode],
    grid: &SweepGrid,
    base: &FinetuneConfig,
    opts: &EvalOptions,
) -> Result<SweepReport> {
    let cells = grid.cells(base, episodes.first().map_or(0, |e| e.k_shot))?;
    let mut out = Vec::with_capacity(cells.len());
    for ft in cells {
        let r = evaluate(model, corpus, episodes, &ft, opts)?;
        out.push(SweepCell::from_report(&ft, &r));
    }
    Ok(SweepReport::new(out))
}
