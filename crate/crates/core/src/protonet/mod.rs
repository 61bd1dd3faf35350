//! Prototypical-network classifier on cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Norm floor used when normalising embeddings and prototypes.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    /// Multiplier on cosine similarities before the softmax.
    pub temperature: f64,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self { temperature: 10.0 }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Class prototypes, row `i` for episode label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Tensor,
    pub class_order: Vec<usize>,
}

/// Number of classes and shots implied by balanced labels.
pub fn balanced_shape(labels: &[usize]) -> Result<(usize, usize)> {
    let n = labels.iter().max().map_or(0, |m| m + 1);
    if n == 0 {
        return Err(Error::Parameter("empty support set".into()));
    }
    let mut counts = vec![0usize; n];
    for &l in labels {
        counts[l] += 1;
    }
    let k = counts[0];
    if let Some(c) = counts.iter().position(|&c| c != k) {
        return Err(Error::Parameter(format!(
            "unbalanced support: label 0 has {k} samples, label {c} has {}",
            counts[c]
        )));
    }
    Ok((n, k))
}

/// `N×(N·K)` matrix whose row `i` averages the rows labelled `i`.
fn averaging_matrix(labels: &[usize]) -> Result<Tensor> {
    let (n, k) = balanced_shape(labels)?;
    let m = labels.len();
    let mut data = vec![0.0; n * m];
    let w = 1.0 / k as f64;
    for (j, &l) in labels.iter().enumerate() {
        data[l * m + j] = w;
    }
    Tensor::matrix(n, m, data)
}

/// Differentiable per-class means of `support` (`(N·K)×D`).
pub fn prototypes_on(tape: &mut Tape, support: Var, labels: &[usize]) -> Result<Var> {
    let (rows, _) = tape.value(support).dims2()?;
    if rows != labels.len() {
        return Err(Error::Dimension(format!(
            "{rows} support embeddings but {} labels",
            labels.len()
        )));
    }
    let avg = tape.constant(averaging_matrix(labels)?);
    tape.matmul(avg, support)
}

pub fn compute_prototypes(support: &Tensor, labels: &[usize]) -> Result<PrototypeSet> {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let p = prototypes_on(&mut tape, s, labels)?;
    let prototypes = tape.value(p).clone();
    let class_order = (0..prototypes.shape()[0]).collect();
    Ok(PrototypeSet {
        prototypes,
        class_order,
    })
}

fn reject_zero_rows(t: &Tensor, what: &str) -> Result<()> {
    let (r, _) = t.dims2()?;
    for i in 0..r {
        if t.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateEmbedding(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// `temperature · cos(query_m, proto_i)` as an `M×N` matrix.
pub fn cosine_logits(tape: &mut Tape, query: Var, protos: Var, cfg: &ProtoConfig) -> Result<Var> {
    cfg.validate()?;
    let (_, dq) = tape.value(query).dims2()?;
    let (_, dp) = tape.value(protos).dims2()?;
    if dq != dp {
        return Err(Error::Dimension(format!(
            "query dimension {dq} vs prototype dimension {dp}"
        )));
    }
    reject_zero_rows(tape.value(query), "query embedding")?;
    reject_zero_rows(tape.value(protos), "prototype")?;
    let q = tape.normalize_rows(query, NORM_EPS)?;
    let p = tape.normalize_rows(protos, NORM_EPS)?;
    let pt = tape.transpose(p)?;
    let cos = tape.matmul(q, pt)?;
    tape.scale(cos, cfg.temperature)
}

pub fn classify(query: &Tensor, protos: &PrototypeSet, cfg: &ProtoConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let p = tape.constant(protos.prototypes.clone());
    let l = cosine_logits(&mut tape, q, p, cfg)?;
    Ok(tape.value(l).clone())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let (r, _) = logits.dims2().expect("logits are a matrix");
    (0..r)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = predict(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Embeddings of one episode, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeEmbeddings {
    pub support: Var,
    pub query: Var,
}

/// Cross-entropy of the query logits against `query_labels`, plus accuracy.
pub fn episode_loss(
    tape: &mut Tape,
    emb: EpisodeEmbeddings,
    support_labels: &[usize],
    query_labels: &[usize],
    cfg: &ProtoConfig,
) -> Result<(Var, f64)> {
    let protos = prototypes_on(tape, emb.support, support_labels)?;
    let n = tape.value(protos).shape()[0];
    if let Some(&bad) = query_labels.iter().find(|&&l| l >= n) {
        return Err(Error::Parameter(format!(
            "query label {bad} has no prototype ({n} classes)"
        )));
    }
    let logits = cosine_logits(tape, emb.query, protos, cfg)?;
    let acc = accuracy(tape.value(logits), query_labels);
    let loss = tape.cross_entropy(logits, query_labels)?;
    Ok((loss, acc))
}

#[cfg(test)]
mod tests;
