//! The trainable network: a convolutional sequence encoder, a pooling head
//! that turns a `T×H` latent sequence into a fixed-length embedding, and an
//! optional dataset discriminator behind a gradient reversal layer.

mod checkpoint;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{restore, snapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::numerics::{channel_dropout, dropout, AdamState, Tape, Tensor, Var};
use crate::seed;

pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub num_layers: usize,
    pub kernel_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 40,
            hidden_channels: 64,
            num_layers: 3,
            kernel_width: 5,
        }
    }
}

impl EncoderConfig {
    /// Hidden width of the pre-trained speech backbone.
    pub fn full_width(input_channels: usize) -> Self {
        Self {
            input_channels,
            hidden_channels: 1024,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    MeanFc,
    LateralInhibition,
    Glu,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::MeanFc => "mean_fc",
            ExtractorKind::LateralInhibition => "lateral_inhibition",
            ExtractorKind::Glu => "glu",
        })
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_fc" | "mean-fc" | "meanfc" => Ok(ExtractorKind::MeanFc),
            "lateral_inhibition" | "lateral-inhibition" | "li" => {
                Ok(ExtractorKind::LateralInhibition)
            }
            "glu" => Ok(ExtractorKind::Glu),
            other => Err(Error::Config(format!("unknown extractor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub embedding_dim: usize,
    pub glu_kernel: usize,
    pub glu_channel_dropout: f64,
    pub fc_dropout: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::Glu,
            embedding_dim: 256,
            glu_kernel: 32,
            glu_channel_dropout: 0.1,
            fc_dropout: 0.5,
        }
    }
}

/// Dataset discriminator settings. Its head is a GLU with the extractor's
/// kernel and dropout and one output per training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub num_datasets: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub extractor: ExtractorConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            extractor: ExtractorConfig::default(),
            discriminator: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.input_channels == 0 || e.hidden_channels == 0 || e.num_layers == 0 || e.kernel_width == 0 {
            return Err(Error::Config(format!("encoder extents must be >= 1: {e:?}")));
        }
        let x = &self.extractor;
        if x.embedding_dim == 0 || x.glu_kernel == 0 {
            return Err(Error::Config(format!("extractor extents must be >= 1: {x:?}")));
        }
        for p in [x.glu_channel_dropout, x.fc_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if let Some(d) = &self.discriminator {
            if d.num_datasets == 0 {
                return Err(Error::Config("discriminator needs >= 1 dataset".into()));
            }
            if !(d.lambda > 0.0) {
                return Err(Error::Config(format!("lambda must be > 0, got {}", d.lambda)));
            }
        }
        Ok(())
    }

    /// Names and shapes of each parameter group, in storage order.
    pub fn layout(&self) -> Vec<(Group, Vec<(String, Vec<usize>)>)> {
        let e = &self.encoder;
        let x = &self.extractor;
        let h = e.hidden_channels;
        let d = x.embedding_dim;
        let mut m = Vec::new();
        for l in 0..e.num_layers {
            let cin = if l == 0 { e.input_channels } else { h };
            m.push((format!("enc{l}.kernel"), vec![e.kernel_width, cin, h]));
            m.push((format!("enc{l}.bias"), vec![h]));
        }
        let glu = |out: usize| {
            vec![
                ("conv_a.kernel".to_string(), vec![x.glu_kernel, h, out]),
                ("conv_a.bias".to_string(), vec![out]),
                ("conv_b.kernel".to_string(), vec![x.glu_kernel, h, out]),
                ("conv_b.bias".to_string(), vec![out]),
            ]
        };
        let f = match x.kind {
            ExtractorKind::MeanFc => vec![
                ("fc.weight".to_string(), vec![h, d]),
                ("fc.bias".to_string(), vec![d]),
            ],
            ExtractorKind::LateralInhibition => vec![
                ("li.weight".to_string(), vec![h, h]),
                ("li.bias".to_string(), vec![h]),
                ("fc.weight".to_string(), vec![h, d]),
                ("fc.bias".to_string(), vec![d]),
            ],
            ExtractorKind::Glu => glu(d),
        };
        let mut out = vec![(Group::Encoder, m), (Group::Extractor, f)];
        if let Some(disc) = &self.discriminator {
            out.push((Group::Discriminator, glu(disc.num_datasets)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Extractor,
    Discriminator,
}

impl Group {
    pub fn tag(self) -> &'static str {
        match self {
            Group::Encoder => "theta_m",
            Group::Extractor => "theta_f",
            Group::Discriminator => "theta_d",
        }
    }
}

/// Named tensors of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }
}

/// Which parameter groups receive gradients on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub extractor: bool,
    pub discriminator: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        extractor: true,
        discriminator: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        extractor: false,
        discriminator: false,
    };
    /// Everything except the backbone.
    pub const HEADS: Trainable = Trainable {
        encoder: false,
        extractor: true,
        discriminator: true,
    };
    /// Backbone and feature head, without the discriminator.
    pub const EMBEDDING: Trainable = Trainable {
        encoder: true,
        extractor: true,
        discriminator: false,
    };

    pub fn includes(self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Extractor => self.extractor,
            Group::Discriminator => self.discriminator,
        }
    }
}

/// Tape handles for every parameter, grouped like the model.
#[derive(Debug, Clone)]
pub struct Bound {
    pub encoder: Vec<Var>,
    pub extractor: Vec<Var>,
    pub discriminator: Option<Vec<Var>>,
}

impl Bound {
    pub fn group(&self, g: Group) -> Option<&[Var]> {
        match g {
            Group::Encoder => Some(&self.encoder),
            Group::Extractor => Some(&self.extractor),
            Group::Discriminator => self.discriminator.as_deref(),
        }
    }
}

/// Dropout behaviour of a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut crate::seed::Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Shared counter of embedding-head forward invocations.
#[derive(Debug, Default)]
pub struct ForwardCounter(AtomicU64);

impl ForwardCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Parameters, optimizer moments and configuration of one model.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub theta_m: ParamGroup,
    pub theta_f: ParamGroup,
    pub theta_d: Option<ParamGroup>,
    pub opt_m: Option<AdamState>,
    pub opt_f: Option<AdamState>,
    pub opt_d: Option<AdamState>,
    /// Set once the heads have been linearly probed.
    pub probed: bool,
    /// Free-form configuration echo stored with checkpoints.
    pub meta: serde_json::Value,
    counter: Arc<ForwardCounter>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.theta_m == other.theta_m
            && self.theta_f == other.theta_f
            && self.theta_d == other.theta_d
            && self.opt_m == other.opt_m
            && self.opt_f == other.opt_f
            && self.opt_d == other.opt_d
            && self.probed == other.probed
            && self.meta == other.meta
    }
}

fn init_tensor(group: Group, name: &str, shape: &[usize], rng: &mut crate::seed::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    if name.ends_with("bias") {
        return Tensor::zeros(shape);
    }
    // fan-in: every axis but the last
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let bound = match group {
        Group::Encoder => (6.0 / fan_in as f64).sqrt(),
        Group::Extractor => (1.0 / fan_in as f64).sqrt(),
        // small output branch: near-uniform dataset logits at start
        Group::Discriminator if name.starts_with("conv_a") => 0.1 * (1.0 / fan_in as f64).sqrt(),
        Group::Discriminator => (1.0 / fan_in as f64).sqrt(),
    };
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("layout shapes are positive")
}

impl ModelState {
    /// Randomly initialised model (seeded by `config.init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut groups = Vec::new();
        for (g, params) in config.layout() {
            let mut rng = seed::named_rng(config.init_seed, g.tag());
            let (names, tensors) = params
                .into_iter()
                .map(|(n, s)| {
                    let t = init_tensor(g, &n, &s, &mut rng);
                    (n, t)
                })
                .unzip();
            groups.push(ParamGroup { names, tensors });
        }
        let mut it = groups.into_iter();
        let theta_m = it.next().expect("encoder group");
        let theta_f = it.next().expect("extractor group");
        let theta_d = it.next();
        Ok(Self {
            config,
            theta_m,
            theta_f,
            theta_d,
            opt_m: None,
            opt_f: None,
            opt_d: None,
            probed: false,
            meta: serde_json::Value::Null,
            counter: Arc::default(),
        })
    }

    pub fn dann_enabled(&self) -> bool {
        self.theta_d.is_some()
    }

    pub fn lambda(&self) -> Option<f64> {
        self.config.discriminator.as_ref().map(|d| d.lambda)
    }

    pub fn group(&self, g: Group) -> Option<&ParamGroup> {
        match g {
            Group::Encoder => Some(&self.theta_m),
            Group::Extractor => Some(&self.theta_f),
            Group::Discriminator => self.theta_d.as_ref(),
        }
    }

    pub fn group_mut(&mut self, g: Group) -> Option<&mut ParamGroup> {
        match g {
            Group::Encoder => Some(&mut self.theta_m),
            Group::Extractor => Some(&mut self.theta_f),
            Group::Discriminator => self.theta_d.as_mut(),
        }
    }

    pub fn optimizer_mut(&mut self, g: Group) -> &mut Option<AdamState> {
        match g {
            Group::Encoder => &mut self.opt_m,
            Group::Extractor => &mut self.opt_f,
            Group::Discriminator => &mut self.opt_d,
        }
    }

    pub fn forward_counter(&self) -> &ForwardCounter {
        &self.counter
    }

    /// Copy with its own forward counter.
    pub fn fork(&self) -> Self {
        Self {
            counter: Arc::default(),
            ..self.clone()
        }
    }

    /// SHA-256 over the serialised snapshot.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(snapshot(self));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// SHA-256 over one parameter group's values.
    pub fn group_hash(&self, g: Group) -> Option<String> {
        let group = self.group(g)?;
        let mut h = Sha256::new();
        for t in &group.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Registers parameters on `tape`; groups not in `trainable` become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        let mut put = |group: &ParamGroup, g: Group| -> Vec<Var> {
            group
                .tensors
                .iter()
                .map(|t| {
                    if trainable.includes(g) {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect()
        };
        let encoder = put(&self.theta_m, Group::Encoder);
        let extractor = put(&self.theta_f, Group::Extractor);
        let discriminator = self
            .theta_d
            .as_ref()
            .map(|d| put(d, Group::Discriminator));
        Bound {
            encoder,
            extractor,
            discriminator,
        }
    }

    /// Backbone: same-padded conv + ReLU layers, `T×F -> T×H`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: &FeatureSequence) -> Result<Var> {
        let f = self.config.encoder.input_channels;
        if x.channels() != f {
            return Err(Error::Dimension(format!(
                "input has {} channels, encoder expects {f}",
                x.channels()
            )));
        }
        let mut h = tape.constant(x.frames().clone());
        for layer in bound.encoder.chunks(2) {
            h = tape.conv1d(h, layer[0], layer[1])?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Pools a latent sequence into the embedding vector.
    pub fn extract(&self, tape: &mut Tape, bound: &Bound, z: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let cfg = &self.config.extractor;
        let p = &bound.extractor;
        match cfg.kind {
            ExtractorKind::MeanFc => {
                let pooled = tape.mean_over_time(z)?;
                let pooled = fc_dropout(tape, pooled, cfg.fc_dropout, mode)?;
                let row = tape.reshape(pooled, &[1, tape.value(pooled).len()])?;
                let y = tape.matmul(row, p[0])?;
                let y = tape.add_row(y, p[1])?;
                tape.reshape(y, &[cfg.embedding_dim])
            }
            ExtractorKind::LateralInhibition => {
                let gated = lateral_inhibition(tape, z, p[0], p[1])?;
                let gated = fc_dropout(tape, gated, cfg.fc_dropout, mode)?;
                let y = tape.matmul(gated, p[2])?;
                let y = tape.add_row(y, p[3])?;
                tape.mean_over_time(y)
            }
            ExtractorKind::Glu => glu_head(tape, z, p, cfg.glu_channel_dropout, mode),
        }
    }

    /// Encoder followed by the feature head. Counts one forward.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &FeatureSequence,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        self.counter.bump();
        let z = self.encode(tape, bound, x)?;
        let e = self.extract(tape, bound, z, mode)?;
        Ok((z, e))
    }

    /// Dataset logits for a latent sequence, behind gradient reversal.
    pub fn discriminate(&self, tape: &mut Tape, bound: &Bound, z: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let (Some(cfg), Some(params)) = (&self.config.discriminator, &bound.discriminator) else {
            return Err(Error::Config(
                "dataset discriminator called with domain-adversarial training disabled".into(),
            ));
        };
        let r = tape.grad_reverse(z, cfg.lambda)?;
        glu_head(tape, r, params, self.config.extractor.glu_channel_dropout, mode)
    }

    /// Eval-mode embedding as a plain tensor.
    pub fn embed_eval(&self, x: &FeatureSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let (_, e) = self.embed(&mut tape, &bound, x, &mut Mode::Eval)?;
        Ok(tape.value(e).clone())
    }
}

fn fc_dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => dropout(tape, x, p, *rng, true),
    }
}

/// Per-frame gate `H(x · ZeroDiag(Wᵀ) + b)` applied elementwise to `x`.
pub fn lateral_inhibition(tape: &mut Tape, z: Var, w: Var, b: Var) -> Result<Var> {
    let c = tape.value(w).dims2()?.0;
    let wt = tape.transpose(w)?;
    let off_diag = (0..c * c)
        .map(|i| if i / c == i % c { 0.0 } else { 1.0 })
        .collect();
    let wt = tape.mask(wt, off_diag)?;
    let pre = tape.matmul(z, wt)?;
    let pre = tape.add_row(pre, b)?;
    let gate = tape.heaviside_ste(pre)?;
    tape.mul(z, gate)
}

/// `max_t (Conv_A(x) ⊙ σ(Conv_B(x)))` with channel dropout on the input.
fn glu_head(tape: &mut Tape, z: Var, p: &[Var], channel_p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let zd = match mode {
        Mode::Eval => z,
        Mode::Train(rng) => channel_dropout(tape, z, channel_p, *rng, true)?,
    };
    let a = tape.conv1d(zd, p[0], p[1])?;
    let b = tape.conv1d(zd, p[2], p[3])?;
    let gate = tape.sigmoid(b)?;
    let g = tape.mul(a, gate)?;
    tape.max_over_time(g)
}
