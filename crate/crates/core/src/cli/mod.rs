//! Command-line surface: `synth`, `train`, `eval`, `sweep` and `inspect`.
//!
//! Every command reads an optional JSON [`RunConfig`]; flags given on the
//! command line override the file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::episodes::{make_eval_stream, Corpus, EpisodeSpec, Sampling, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, render_report, render_sweep, sweep, EvalOptions, EvalReport, FinetuneConfig, SweepGrid,
    SweepReport, Variant,
};
use crate::features::{
    decode_fseq, generate_synthetic_corpus, random_classes, ClassLayout, DatasetRole, SynthCorpusConfig,
    FSEQ_MAGIC,
};
use crate::model::{
    restore, DiscriminatorConfig, EncoderConfig, ExtractorConfig, ExtractorKind, Group, ModelConfig,
    ModelState, CHECKPOINT_MAGIC,
};
use crate::training::{dataset_index, linear_probe, load_checkpoint, meta_train, save_checkpoint, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub layout: ClassLayout,
    pub per_class: usize,
    pub num_datasets: usize,
    /// The last this-many datasets go entirely to the test split.
    pub test_only_datasets: usize,
    pub prefix: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            layout: ClassLayout::default(),
            per_class: 30,
            num_datasets: 2,
            test_only_datasets: 0,
            prefix: "synth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episode: EpisodeSpec,
    pub episodes: usize,
    pub split: Split,
    pub finetune: FinetuneConfig,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episode: EpisodeSpec::default(),
            episodes: 1000,
            split: Split::Test,
            finetune: FinetuneConfig::default(),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub grid: SweepGrid,
    pub episodes: usize,
    pub split: Split,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid: SweepGrid::default(),
            episodes: 200,
            split: Split::Validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// One document configuring every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; sub-streams for sampling, dropout, masking and
    /// initialisation are derived from it by name.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub synth: SynthSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            extractor: ExtractorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            synth: SynthSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.episode.validate()?;
        self.eval.finetune.validate(self.eval.episode.k_shot)?;
        let s = &self.synth;
        if s.test_only_datasets > s.num_datasets {
            return Err(Error::Config(format!(
                "test_only_datasets ({}) exceeds num_datasets ({})",
                s.test_only_datasets, s.num_datasets
            )));
        }
        self.model_config(self.encoder.input_channels, 1).validate()
    }

    /// Model configuration for `channels` input features and, when the
    /// adversarial branch is on, `num_datasets` discriminator outputs.
    pub fn model_config(&self, channels: usize, num_datasets: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_channels: channels,
                ..self.encoder.clone()
            },
            extractor: self.extractor.clone(),
            discriminator: self.train.dann.then_some(DiscriminatorConfig {
                num_datasets,
                lambda: self.train.lambda,
            }),
            init_seed: crate::seed::derive(self.seed, "init"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "metaproto", version, about = "Few-shot prototypical meta-learning on feature sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (feature files + manifest.json)
    Synth(SynthArgs),
    /// Linear-probe then meta-train a model
    Train(TrainArgs),
    /// Evaluate a checkpoint on test episodes
    Eval(EvalArgs),
    /// Grid search over fine-tuning hyperparameters
    Sweep(SweepArgs),
    /// Summarise a checkpoint, manifest, report or feature file
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON configuration document
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub query: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Existing output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub datasets: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    /// Put the last N datasets entirely in the test split
    #[arg(long)]
    pub test_only_datasets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines training log
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// mean_fc | lateral_inhibition | glu
    #[arg(long)]
    pub extractor: Option<ExtractorKind>,
    /// free | within
    #[arg(long)]
    pub sampling: Option<Sampling>,
    #[arg(long)]
    pub dann: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_episodes: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub glu_kernel: Option<usize>,
    #[arg(long)]
    pub skip_probe: bool,
    #[command(flatten)]
    pub episode: EpisodeArgs,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Report path prefix; writes `<out>.json` and `<out>.txt`
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// train | validation | test
    #[arg(long)]
    pub split: Option<Split>,
    /// none | a | b
    #[arg(long)]
    pub ft_variant: Option<Variant>,
    #[arg(long)]
    pub ft_steps: Option<usize>,
    #[arg(long)]
    pub ft_lr: Option<f64>,
    #[arg(long)]
    pub ft_support: Option<usize>,
    /// Parallel episode workers (0 = all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub episode: EpisodeArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated step counts
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    /// Comma-separated learning rates
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    /// Comma-separated variant-B support sizes
    #[arg(long, value_delimiter = ',')]
    pub support_sizes: Option<Vec<usize>>,
    /// Comma-separated variants (a, b)
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_episode(spec: &mut EpisodeSpec, a: &EpisodeArgs) {
    set(&mut spec.n_way, a.n_way);
    set(&mut spec.k_shot, a.k_shot);
    set(&mut spec.query_per_class, a.query);
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| Error::Config(format!("missing {what} (flag or paths section of the config)")))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path)
}

/// Resolved synth configuration.
pub fn synth_config(args: &SynthArgs) -> Result<(RunConfig, SynthCorpusConfig, PathBuf)> {
    let mut cfg = base_config(&args.common)?;
    let s = &mut cfg.synth;
    set(&mut s.layout.num_classes, args.classes);
    set(&mut s.per_class, args.per_class);
    set(&mut s.num_datasets, args.datasets);
    set(&mut s.layout.channels, args.channels);
    set(&mut s.layout.noise, args.noise);
    set(&mut s.layout.separation, args.separation);
    set(&mut s.layout.shift, args.shift);
    set(&mut s.test_only_datasets, args.test_only_datasets);
    if args.out.is_some() {
        cfg.paths.out_dir = args.out.clone();
    }
    cfg.validate()?;
    let s = &cfg.synth;
    let roles = (0..s.num_datasets)
        .map(|d| {
            if d + s.test_only_datasets >= s.num_datasets {
                DatasetRole::Only(Split::Test)
            } else {
                DatasetRole::Mixed
            }
        })
        .collect();
    let corpus_cfg = SynthCorpusConfig {
        classes: random_classes(&s.layout, crate::seed::derive(cfg.seed, "synth-layout")),
        per_class: s.per_class,
        num_datasets: s.num_datasets,
        seed: cfg.seed,
        prefix: s.prefix.clone(),
        roles,
        ..SynthCorpusConfig::default()
    };
    let out = required(&cfg.paths.out_dir, "output directory (--out)")?;
    Ok((cfg, corpus_cfg, out))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let (_, corpus_cfg, dir) = synth_config(args)?;
    let corpus = generate_synthetic_corpus(&corpus_cfg)?;
    let manifest = corpus.save(&dir)?;
    say(out, format!("wrote {} records to {}", corpus.len(), manifest.display()))
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

/// Resolved training configuration.
pub fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    let t = &mut cfg.train;
    set(&mut cfg.extractor.kind, args.extractor);
    set(&mut t.episode.sampling, args.sampling);
    if args.dann {
        t.dann = true;
    }
    set(&mut t.lambda, args.lambda);
    set(&mut t.probe_epochs, args.probe_epochs);
    set(&mut t.batches_per_epoch, args.batches_per_epoch);
    set(&mut t.accumulation, args.accumulation);
    set(&mut t.lr, args.lr);
    set(&mut t.max_epochs, args.max_epochs);
    set(&mut t.patience, args.patience);
    set(&mut t.validation_episodes, args.validation_episodes);
    if args.skip_probe {
        t.skip_probe = true;
    }
    apply_episode(&mut t.episode, &args.episode);
    set(&mut cfg.encoder.hidden_channels, args.hidden);
    set(&mut cfg.encoder.num_layers, args.layers);
    set(&mut cfg.extractor.embedding_dim, args.embedding_dim);
    set(&mut cfg.extractor.glu_kernel, args.glu_kernel);
    if args.manifest.is_some() {
        cfg.paths.manifest = args.manifest.clone();
    }
    if args.out.is_some() {
        cfg.paths.checkpoint = args.out.clone();
    }
    if args.log.is_some() {
        cfg.paths.log = args.log.clone();
    }
    cfg.train.seed = cfg.seed;
    cfg.train.episode.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = train_config(args)?;
    let manifest = required(&cfg.paths.manifest, "manifest (--manifest)")?;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint output (--out)")?;
    let corpus = load_corpus(&manifest)?;
    let channels = corpus
        .channels()
        .ok_or_else(|| Error::Config("manifest has no records".into()))?;
    let datasets = dataset_index(&corpus);
    let mut model = ModelState::new(cfg.model_config(channels, datasets.len().max(1)))?;
    model.meta = serde_json::json!({ "run": &cfg });
    say(
        out,
        "stages: pre-training is replaced by random initialisation; running linear probe, then meta-training",
    )?;
    say(
        out,
        format!(
            "extractor {} | sampling {} | adversarial {} | {} train datasets",
            cfg.extractor.kind,
            cfg.train.episode.sampling,
            if cfg.train.dann { format!("on (lambda {})", cfg.train.lambda) } else { "off".into() },
            datasets.len()
        ),
    )?;
    let probe = if cfg.train.skip_probe {
        Vec::new()
    } else {
        linear_probe(&mut model, &corpus, &cfg.train)?
    };
    for r in &probe {
        say(out, format!("probe epoch {}: loss {:.4} acc {:.3} steps {}", r.epoch, r.mean_loss, r.mean_accuracy, r.optimizer_steps))?;
    }
    let (best, mut log) = meta_train(model, &corpus, &cfg.train)?;
    for r in &log.records {
        say(
            out,
            format!(
                "meta epoch {}: loss {:.4} acc {:.3} val_loss {} val_acc {} steps {}",
                r.epoch,
                r.mean_loss,
                r.mean_accuracy,
                r.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                r.val_accuracy.map_or("-".into(), |v| format!("{v:.3}")),
                r.optimizer_steps
            ),
        )?;
    }
    log.records.splice(0..0, probe);
    save_checkpoint(&best, &ckpt, Some(&cfg.train))?;
    if let Some(p) = &cfg.paths.log {
        log.write_jsonl(p)?;
    }
    say(out, format!("best epoch {:?}; checkpoint written to {}", log.best_epoch, ckpt.display()))
}

/// Resolved evaluation configuration.
pub fn eval_config(args: &EvalArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    let e = &mut cfg.eval;
    set(&mut e.episodes, args.episodes);
    set(&mut e.split, args.split);
    set(&mut e.finetune.variant, args.ft_variant);
    set(&mut e.finetune.steps, args.ft_steps);
    set(&mut e.finetune.lr, args.ft_lr);
    set(&mut e.finetune.support_size, args.ft_support);
    set(&mut e.jobs, args.jobs);
    apply_episode(&mut e.episode, &args.episode);
    e.episode.seed = crate::seed::derive(cfg.seed, "eval-episodes");
    e.finetune.seed = crate::seed::derive(cfg.seed, "finetune");
    if args.manifest.is_some() {
        cfg.paths.manifest = args.manifest.clone();
    }
    if args.checkpoint.is_some() {
        cfg.paths.checkpoint = args.checkpoint.clone();
    }
    if args.out.is_some() {
        cfg.paths.report = args.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn eval_inputs(cfg: &RunConfig) -> Result<(ModelState, Corpus)> {
    let manifest = required(&cfg.paths.manifest, "manifest (--manifest)")?;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint (--checkpoint)")?;
    let model = load_checkpoint(&ckpt)?;
    let corpus = load_corpus(&manifest)?;
    Ok((model, corpus))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let cfg = eval_config(args)?;
    let (model, corpus) = eval_inputs(&cfg)?;
    let e = &cfg.eval;
    let stream = make_eval_stream(&corpus.records, &e.episode, e.split, e.episodes)?;
    let opts = EvalOptions {
        proto: cfg.train.proto,
        jobs: e.jobs,
    };
    let report = evaluate(&model, &corpus, &stream, &e.finetune, &opts)?;
    let text = render_report(&report);
    write!(out, "{text}").map_err(|err| Error::io("<stdout>", err))?;
    if let Some(p) = &cfg.paths.report {
        let jp = with_ext(p, "json");
        std::fs::write(&jp, report.to_json()).map_err(|err| Error::io(&jp, err))?;
        let tp = with_ext(p, "txt");
        std::fs::write(&tp, text).map_err(|err| Error::io(&tp, err))?;
    }
    Ok(report)
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<SweepReport> {
    let mut cfg = eval_config(&args.eval)?;
    let s = &mut cfg.sweep;
    set(&mut s.grid.steps, args.steps.clone());
    set(&mut s.grid.lrs, args.lrs.clone());
    set(&mut s.grid.support_sizes, args.support_sizes.clone());
    set(&mut s.grid.variants, args.variants.clone());
    set(&mut s.episodes, args.eval.episodes);
    set(&mut s.split, args.eval.split);
    let cells = s.grid.cells(&cfg.eval.finetune, cfg.eval.episode.k_shot)?;
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let (model, corpus) = eval_inputs(&cfg)?;
    let stream = make_eval_stream(&corpus.records, &cfg.eval.episode, cfg.sweep.split, cfg.sweep.episodes)?;
    let opts = EvalOptions {
        proto: cfg.train.proto,
        jobs: cfg.eval.jobs,
    };
    let report = sweep(&model, &corpus, &stream, &cfg.sweep.grid, &cfg.eval.finetune, &opts)?;
    let text = render_sweep(&report);
    write!(out, "{text}").map_err(|err| Error::io("<stdout>", err))?;
    if let Some(p) = &cfg.paths.report {
        let jp = with_ext(p, "json");
        std::fs::write(&jp, report.to_json()).map_err(|err| Error::io(&jp, err))?;
        let tp = with_ext(p, "txt");
        std::fs::write(&tp, text).map_err(|err| Error::io(&tp, err))?;
    }
    Ok(report)
}

fn describe_checkpoint(m: &ModelState) -> String {
    let mut s = String::new();
    s.push_str(&format!("checkpoint (format version {})\n", crate::model::CHECKPOINT_VERSION));
    for g in [Group::Encoder, Group::Extractor, Group::Discriminator] {
        match m.group(g) {
            Some(p) => {
                s.push_str(&format!("  {:<8} {:>10} parameters\n", g.tag(), p.count()));
                for (n, t) in p.names.iter().zip(&p.tensors) {
                    s.push_str(&format!("    {n:<16} {:?}\n", t.shape()));
                }
            }
            None => s.push_str(&format!("  {:<8} {:>10}\n", g.tag(), "absent")),
        }
    }
    s.push_str(&format!("  probed: {}\n", m.probed));
    s.push_str(&format!(
        "  config: {}\n",
        serde_json::to_string(&m.config).expect("config serialises")
    ));
    s
}

fn describe_manifest(records: &[SampleRecord]) -> String {
    let mut counts: BTreeMap<(&str, &str), [usize; 3]> = BTreeMap::new();
    for r in records {
        let slot = counts.entry((&r.dataset, &r.label)).or_default();
        slot[match r.split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }] += 1;
    }
    let mut s = format!("manifest: {} records\n", records.len());
    s.push_str(&format!("{:<20} {:<16} {:>6} {:>6} {:>6}\n", "dataset", "class", "train", "val", "test"));
    for ((d, l), c) in counts {
        s.push_str(&format!("{d:<20} {l:<16} {:>6} {:>6} {:>6}\n", c[0], c[1], c[2]));
    }
    s
}

/// Human-readable summary of an artifact, chosen by content.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        return Ok(describe_checkpoint(&restore(&bytes)?));
    }
    if bytes.starts_with(FSEQ_MAGIC) {
        let f = decode_fseq(&bytes)?;
        return Ok(format!("feature sequence: {} frames x {} channels\n", f.len(), f.channels()));
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|_| Error::Format(format!("{}: not a checkpoint, manifest, report or feature file", path.display())))?;
    if value.is_array() {
        let records = crate::episodes::parse_manifest(std::str::from_utf8(&bytes).expect("valid JSON is UTF-8"))?;
        return Ok(describe_manifest(&records));
    }
    if value.get("per_dataset").is_some() {
        let r: EvalReport = serde_json::from_value(value).map_err(|e| Error::Format(format!("report: {e}")))?;
        return Ok(render_report(&r));
    }
    if value.get("cells").is_some() {
        let r: SweepReport = serde_json::from_value(value).map_err(|e| Error::Format(format!("sweep report: {e}")))?;
        return Ok(render_sweep(&r));
    }
    Err(Error::Format(format!("{}: unrecognised JSON document", path.display())))
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let text = inspect(&args.path)?;
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(a, out).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
