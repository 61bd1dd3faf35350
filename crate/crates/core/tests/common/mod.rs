//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use metaproto::episodes::{Corpus, Split};
use metaproto::features::{generate_synthetic_corpus, random_classes, ClassLayout, DatasetRole, SynthCorpusConfig};
use metaproto::model::{EncoderConfig, ExtractorConfig, ExtractorKind, ModelConfig};
use metaproto::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Tape, &[Var], u64) -> metaproto::Result<Var>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Moves every entry at least `margin` away from zero, keeping its sign.
pub fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// Central differences of `f` at every coordinate of `inputs[which]`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize, h: f64) -> Tensor {
    let mut work = inputs.to_vec();
    let g = (0..inputs[which].len())
        .map(|i| {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let up = f(&work);
            work[which].data_mut()[i] = orig - h;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    Tensor::new(inputs[which].shape().to_vec(), g).unwrap()
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with the denominator floored at 1e-8.
pub fn rel_err(a: &Tensor, n: &Tensor) -> f64 {
    assert_eq!(a.shape(), n.shape());
    let diff = norm(a.data().iter().zip(n.data()).map(|(x, y)| x - y));
    let scale = norm(a.data().iter().copied()).max(norm(n.data().iter().copied()));
    diff / scale.max(1e-8)
}

/// Fixed per-instance weights for the scalar probe `sum(out ⊙ c)`.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(&mut rng(seed ^ 0x5eed), shape)
}

fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let c = probe_weights(tape.value(out).shape(), seed);
    let cv = tape.constant(c);
    let l = tape.mul(out, cv).unwrap();
    tape.sum(l).unwrap()
}

/// Worst relative error over all inputs between the tape gradient of
/// `build` and finite differences of `numeric`, scaled per input.
pub fn gradient_error(inputs: &[Tensor], seed: u64, build: Build, numeric: Build, scale: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars, seed).unwrap();
    let loss = probe(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();
    let f = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = numeric(&mut t, &vs, seed).unwrap();
        let l = probe(&mut t, out, seed);
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut n = numeric_grad(&f, inputs, i, 1e-6);
        n.scale(scale.get(i).copied().unwrap_or(1.0));
        worst = worst.max(rel_err(&analytic, &n));
    }
    worst
}

pub fn model_config(kind: ExtractorKind, channels: usize, hidden: usize, layers: usize, dim: usize, glu_kernel: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_channels: channels,
            hidden_channels: hidden,
            num_layers: layers,
            kernel_width: 5,
        },
        extractor: ExtractorConfig {
            kind,
            embedding_dim: dim,
            glu_kernel,
            ..ExtractorConfig::default()
        },
        discriminator: None,
        init_seed: 11,
    }
}

/// Synthetic corpus with the given dataset roles.
pub fn corpus(layout: &ClassLayout, per_class: usize, roles: Vec<DatasetRole>, seed: u64) -> Corpus {
    generate_synthetic_corpus(&SynthCorpusConfig {
        classes: random_classes(layout, seed),
        per_class,
        num_datasets: roles.len(),
        seed,
        roles,
        ..SynthCorpusConfig::default()
    })
    .unwrap()
}

pub fn only(split: Split) -> DatasetRole {
    DatasetRole::Only(split)
}
