//! Linear probing, episodic meta-training with gradient accumulation, the
//! domain-adversarial objective, validation-driven early stopping and
//! checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::episodes::{make_eval_stream, Corpus, Episode, EpisodeSampler, EpisodeSpec, Split};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::model::{restore, snapshot, Bound, Group, Mode, ModelState, Trainable};
use crate::numerics::{AdamState, Tape, Tensor, Var, DEFAULT_LR};
use crate::protonet::{episode_loss, EpisodeEmbeddings, ProtoConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub probe_epochs: usize,
    /// Episodes per epoch.
    pub batches_per_epoch: usize,
    /// Episodes per optimizer step; gradients are averaged over the window.
    pub accumulation: usize,
    pub lr: f64,
    pub episode: EpisodeSpec,
    pub dann: bool,
    pub lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Size of the fixed within-dataset validation stream; 0 disables
    /// validation and keeps the last epoch.
    pub validation_episodes: usize,
    pub proto: ProtoConfig,
    /// Allow meta-training a model that was never probed.
    pub skip_probe: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            probe_epochs: 5,
            batches_per_epoch: 1000,
            accumulation: 20,
            lr: DEFAULT_LR,
            episode: EpisodeSpec::default(),
            dann: false,
            lambda: crate::model::DEFAULT_LAMBDA,
            max_epochs: 10,
            patience: 2,
            validation_episodes: 100,
            proto: ProtoConfig::default(),
            skip_probe: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be >= 1".into()));
        }
        if self.batches_per_epoch == 0 || self.batches_per_epoch % self.accumulation != 0 {
            return Err(Error::Config(format!(
                "batches_per_epoch ({}) must be a positive multiple of accumulation ({})",
                self.batches_per_epoch, self.accumulation
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.dann && !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        self.proto.validate()?;
        self.episode.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.batches_per_epoch / self.accumulation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Probe,
    Meta,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    /// Mean discriminator cross-entropy, when the adversarial branch is on.
    pub mean_disc_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub optimizer_steps: u64,
    pub total_optimizer_steps: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Meta-training epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Sorted training-split dataset ids, mapped to discriminator classes.
pub fn dataset_index(corpus: &Corpus) -> BTreeMap<String, usize> {
    let mut names: Vec<&str> = corpus
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.dataset.as_str())
        .collect();
    names.sort_unstable();
    names.dedup();
    names.into_iter().enumerate().map(|(i, d)| (d.to_string(), i)).collect()
}

/// Embeds every sequence on `tape`; returns latents and the stacked
/// `len×D` embedding matrix.
pub fn embed_samples(
    model: &ModelState,
    tape: &mut Tape,
    bound: &Bound,
    xs: &[&FeatureSequence],
    mode: &mut Mode<'_>,
) -> Result<(Vec<Var>, Var)> {
    let mut zs = Vec::with_capacity(xs.len());
    let mut es = Vec::with_capacity(xs.len());
    for x in xs {
        let (z, e) = model.embed(tape, bound, x, mode)?;
        zs.push(z);
        es.push(e);
    }
    let stacked = tape.stack_rows(&es)?;
    Ok((zs, stacked))
}

/// Loss terms and parameter gradients of one training episode.
#[derive(Debug, Clone)]
pub struct EpisodeGrad {
    pub loss: f64,
    pub proto_loss: f64,
    pub disc_loss: Option<f64>,
    pub accuracy: f64,
    pub grads: Vec<(Group, Vec<Tensor>)>,
}

/// Dropout streams for one phase. The discriminator has its own stream so
/// switching it off leaves the embedding path's randomness untouched.
pub struct DropoutRngs {
    pub embed: seed::Rng,
    pub disc: seed::Rng,
}

impl DropoutRngs {
    pub fn new(seed_value: u64, label: &str) -> Self {
        Self {
            embed: seed::named_rng(seed_value, &format!("dropout-{label}")),
            disc: seed::named_rng(seed_value, &format!("disc-dropout-{label}")),
        }
    }
}

/// Forward and backward pass of one episode in training mode.
///
/// With `datasets` set, the discriminator cross-entropy on every sample's
/// latent sequence is added to the prototypical loss with unit weight.
pub fn episode_gradients(
    model: &ModelState,
    corpus: &Corpus,
    episode: &Episode,
    trainable: Trainable,
    proto: &ProtoConfig,
    datasets: Option<&BTreeMap<String, usize>>,
    rngs: &mut DropoutRngs,
) -> Result<EpisodeGrad> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let idx: Vec<usize> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|&(r, _)| r)
        .collect();
    let xs: Vec<&FeatureSequence> = idx.iter().map(|&i| &corpus.features[i]).collect();
    let (zs, all) = embed_samples(model, &mut tape, &bound, &xs, &mut Mode::Train(&mut rngs.embed))?;
    let ns = episode.support.len();
    let support = tape.gather_rows(all, &(0..ns).collect::<Vec<_>>())?;
    let query = tape.gather_rows(all, &(ns..idx.len()).collect::<Vec<_>>())?;
    let (proto_loss, accuracy) = episode_loss(
        &mut tape,
        EpisodeEmbeddings { support, query },
        &episode.support_labels(),
        &episode.query_labels(),
        proto,
    )?;
    let mut total = proto_loss;
    let mut disc_loss = None;
    if let Some(map) = datasets {
        let targets = idx
            .iter()
            .map(|&i| {
                let d = &corpus.records[i].dataset;
                map.get(d).copied().ok_or_else(|| {
                    Error::Mapping(format!("dataset {d:?} is not among the training datasets"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = zs
            .iter()
            .map(|&z| model.discriminate(&mut tape, &bound, z, &mut Mode::Train(&mut rngs.disc)))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.stack_rows(&logits)?;
        let dl = tape.cross_entropy(logits, &targets)?;
        disc_loss = Some(tape.value(dl).data()[0]);
        total = tape.add(proto_loss, dl)?;
    }
    let mut g = tape.backward(total)?;
    let mut grads = Vec::new();
    for group in [Group::Encoder, Group::Extractor, Group::Discriminator] {
        if !trainable.includes(group) {
            continue;
        }
        let (Some(vars), Some(params)) = (bound.group(group), model.group(group)) else {
            continue;
        };
        let gs = vars
            .iter()
            .zip(&params.tensors)
            .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        grads.push((group, gs));
    }
    Ok(EpisodeGrad {
        loss: tape.value(total).data()[0],
        proto_loss: tape.value(proto_loss).data()[0],
        disc_loss,
        accuracy,
        grads,
    })
}

/// Running sum of episode gradients over one accumulation window.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sums: Vec<(Group, Vec<Tensor>)>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: Vec<(Group, Vec<Tensor>)>) {
        if self.sums.is_empty() {
            self.sums = grads;
        } else {
            for ((_, acc), (_, g)) in self.sums.iter_mut().zip(&grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    a.add_assign(b);
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient per group; resets the window.
    pub fn take_mean(&mut self) -> Vec<(Group, Vec<Tensor>)> {
        let n = self.count.max(1) as f64;
        self.count = 0;
        let mut out = std::mem::take(&mut self.sums);
        for (_, gs) in &mut out {
            for g in gs {
                g.scale(1.0 / n);
            }
        }
        out
    }
}

/// One Adam step per group at `lr`, creating optimizer state as needed.
pub fn apply_gradients(model: &mut ModelState, grads: &[(Group, Vec<Tensor>)], lr: f64) -> Result<()> {
    for (group, gs) in grads {
        let mut params = std::mem::take(
            &mut model
                .group_mut(*group)
                .ok_or_else(|| Error::Config(format!("model has no {} group", group.tag())))?
                .tensors,
        );
        let opt = model
            .optimizer_mut(*group)
            .get_or_insert_with(|| AdamState::new(&params, lr));
        opt.lr = lr;
        let r = opt.step(&mut params, gs);
        model.group_mut(*group).expect("checked above").tensors = params;
        r?;
    }
    Ok(())
}

fn check_dann(model: &ModelState, corpus: &Corpus, cfg: &TrainConfig) -> Result<Option<BTreeMap<String, usize>>> {
    if !cfg.dann {
        return Ok(None);
    }
    let Some(d) = &model.config.discriminator else {
        return Err(Error::Config(
            "domain-adversarial training requested but the model has no discriminator".into(),
        ));
    };
    if d.lambda != cfg.lambda {
        return Err(Error::Config(format!(
            "model lambda {} differs from training lambda {}",
            d.lambda, cfg.lambda
        )));
    }
    let map = dataset_index(corpus);
    if map.len() != d.num_datasets {
        return Err(Error::Config(format!(
            "discriminator has {} outputs but the training split has {} datasets",
            d.num_datasets,
            map.len()
        )));
    }
    Ok(Some(map))
}

fn check_channels(model: &ModelState, corpus: &Corpus) -> Result<()> {
    match corpus.channels() {
        Some(c) if c != model.config.encoder.input_channels => Err(Error::Config(format!(
            "corpus has {c} feature channels, model expects {}",
            model.config.encoder.input_channels
        ))),
        _ => Ok(()),
    }
}

struct EpochStats {
    loss: f64,
    accuracy: f64,
    disc: Option<f64>,
    steps: u64,
}

/// Runs `cfg.batches_per_epoch` training episodes, stepping the optimizer
/// every `cfg.accumulation` of them.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut ModelState,
    corpus: &Corpus,
    sampler: &EpisodeSampler<'_>,
    cfg: &TrainConfig,
    trainable: Trainable,
    datasets: Option<&BTreeMap<String, usize>>,
    stream: u64,
    epoch: usize,
    rngs: &mut DropoutRngs,
) -> Result<EpochStats> {
    let mut acc = GradAccumulator::default();
    let (mut loss, mut accuracy, mut disc) = (0.0, 0.0, 0.0);
    let mut steps = 0;
    for b in 0..cfg.batches_per_epoch {
        let index = (epoch * cfg.batches_per_epoch + b) as u64;
        let spec = cfg.episode.with_seed(seed::derive_index(stream, index));
        let episode = sampler.sample(&spec)?;
        let eg = episode_gradients(model, corpus, &episode, trainable, &cfg.proto, datasets, rngs)?;
        loss += eg.loss;
        accuracy += eg.accuracy;
        disc += eg.disc_loss.unwrap_or(0.0);
        acc.add(eg.grads);
        if acc.count() == cfg.accumulation {
            apply_gradients(model, &acc.take_mean(), cfg.lr)?;
            steps += 1;
        }
    }
    let n = cfg.batches_per_epoch as f64;
    Ok(EpochStats {
        loss: loss / n,
        accuracy: accuracy / n,
        disc: datasets.map(|_| disc / n),
        steps,
    })
}

fn total_steps(model: &ModelState) -> u64 {
    [&model.opt_m, &model.opt_f, &model.opt_d]
        .iter()
        .filter_map(|o| o.as_ref().map(|a| a.step_count))
        .max()
        .unwrap_or(0)
}

/// Trains the feature head (and discriminator, if enabled) with the
/// backbone frozen.
pub fn linear_probe(model: &mut ModelState, corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_channels(model, corpus)?;
    let datasets = check_dann(model, corpus, cfg)?;
    let sampler = EpisodeSampler::new(&corpus.records, Split::Train);
    sampler.check(&cfg.episode)?;
    let trainable = Trainable {
        encoder: false,
        extractor: true,
        discriminator: datasets.is_some(),
    };
    let stream = seed::derive(cfg.seed, "episodes-probe");
    let mut rngs = DropoutRngs::new(cfg.seed, "probe");
    let mut records = Vec::with_capacity(cfg.probe_epochs);
    for epoch in 0..cfg.probe_epochs {
        let start = Instant::now();
        let s = run_epoch(model, corpus, &sampler, cfg, trainable, datasets.as_ref(), stream, epoch, &mut rngs)?;
        records.push(EpochRecord {
            phase: Phase::Probe,
            epoch,
            mean_loss: s.loss,
            mean_accuracy: s.accuracy,
            mean_disc_loss: s.disc,
            val_loss: None,
            val_accuracy: None,
            optimizer_steps: s.steps,
            total_optimizer_steps: total_steps(model),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    model.probed = true;
    Ok(records)
}

/// Mean prototypical loss and accuracy over `episodes`, in eval mode.
pub fn validation_metrics(
    model: &ModelState,
    corpus: &Corpus,
    episodes: &[Episode],
    proto: &ProtoConfig,
) -> Result<(f64, f64)> {
    if episodes.is_empty() {
        return Err(Error::Config("empty validation stream".into()));
    }
    let (mut loss, mut acc) = (0.0, 0.0);
    for ep in episodes {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::NONE);
        let sx: Vec<&FeatureSequence> = ep.support.iter().map(|&(r, _)| &corpus.features[r]).collect();
        let qx: Vec<&FeatureSequence> = ep.query.iter().map(|&(r, _)| &corpus.features[r]).collect();
        let (_, support) = embed_samples(model, &mut tape, &bound, &sx, &mut Mode::Eval)?;
        let (_, query) = embed_samples(model, &mut tape, &bound, &qx, &mut Mode::Eval)?;
        let (l, a) = episode_loss(
            &mut tape,
            EpisodeEmbeddings { support, query },
            &ep.support_labels(),
            &ep.query_labels(),
            proto,
        )?;
        loss += tape.value(l).data()[0];
        acc += a;
    }
    let n = episodes.len() as f64;
    Ok((loss / n, acc / n))
}

/// Fixed validation stream used by [`meta_train`].
pub fn validation_stream(corpus: &Corpus, cfg: &TrainConfig) -> Result<Vec<Episode>> {
    let spec = cfg.episode.with_seed(seed::derive(cfg.seed, "validation"));
    make_eval_stream(&corpus.records, &spec, Split::Validation, cfg.validation_episodes)
}

/// Full-model meta-training with validation on a fixed within-dataset stream.
pub fn meta_train(model: ModelState, corpus: &Corpus, cfg: &TrainConfig) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    let stream = if cfg.validation_episodes > 0 {
        Some(validation_stream(corpus, cfg)?)
    } else {
        None
    };
    meta_train_with(model, corpus, cfg, |m| match &stream {
        Some(s) => validation_metrics(m, corpus, s, &cfg.proto).map(Some),
        None => Ok(None),
    })
}

/// [`meta_train`] with a caller-supplied validator returning
/// `(loss, accuracy)` after each epoch. Lower loss is better; the best
/// epoch's parameters are returned.
pub fn meta_train_with(
    mut model: ModelState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut validate: impl FnMut(&ModelState) -> Result<Option<(f64, f64)>>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    check_channels(&model, corpus)?;
    if !model.probed && !cfg.skip_probe {
        return Err(Error::Config(
            "meta-training requires a linear-probed model (set skip_probe to override)".into(),
        ));
    }
    let datasets = check_dann(&model, corpus, cfg)?;
    let sampler = EpisodeSampler::new(&corpus.records, Split::Train);
    sampler.check(&cfg.episode)?;
    let trainable = Trainable {
        encoder: true,
        extractor: true,
        discriminator: datasets.is_some(),
    };
    let stream = seed::derive(cfg.seed, "episodes-meta");
    let mut rngs = DropoutRngs::new(cfg.seed, "meta");
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelState)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let s = run_epoch(&mut model, corpus, &sampler, cfg, trainable, datasets.as_ref(), stream, epoch, &mut rngs)?;
        let val = validate(&model)?;
        log.records.push(EpochRecord {
            phase: Phase::Meta,
            epoch,
            mean_loss: s.loss,
            mean_accuracy: s.accuracy,
            mean_disc_loss: s.disc,
            val_loss: val.map(|v| v.0),
            val_accuracy: val.map(|v| v.1),
            optimizer_steps: s.steps,
            total_optimizer_steps: total_steps(&model),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        let Some((vl, _)) = val else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| vl < *b) {
            best = Some((vl, model.clone()));
            log.best_epoch = Some(epoch);
            log.best_val_loss = Some(vl);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }
    let out = match best {
        Some((_, m)) => m,
        None => {
            if !log.records.is_empty() {
                log.best_epoch = Some(log.records.len() - 1);
            }
            model
        }
    };
    Ok((out, log))
}

/// Writes a checkpoint with the training configuration echoed in its header.
pub fn save_checkpoint(model: &ModelState, path: &Path, cfg: Option<&TrainConfig>) -> Result<()> {
    let mut m = model.clone();
    if let Some(c) = cfg {
        let mut meta = match m.meta {
            serde_json::Value::Object(o) => o,
            _ => serde_json::Map::new(),
        };
        meta.insert("train".into(), serde_json::to_value(c).expect("config serialises"));
        m.meta = serde_json::Value::Object(meta);
    }
    std::fs::write(path, snapshot(&m)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&bytes)
}
