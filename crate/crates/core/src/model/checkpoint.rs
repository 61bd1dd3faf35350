//! Binary checkpoint codec.
//!
//! Layout (little-endian): magic `PEPC`, `u32` version, `u64`-prefixed JSON
//! header (model config, meta echo, probe flag), `u32` group count, then for
//! each group its tag, tensor table (name, rank, dims, f64 payload) and an
//! optional Adam state with the same tensor shapes.

use serde::{Deserialize, Serialize};

use super::{Group, ModelConfig, ModelState, ParamGroup};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PEPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
    probed: bool,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

/// Serialises parameters, optimizer moments and configuration.
pub fn snapshot(state: &ModelState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let header = Header {
        model: state.config.clone(),
        meta: state.meta.clone(),
        probed: state.probed,
    };
    w.bytes(&serde_json::to_vec(&header).expect("header serialises"));
    let groups: Vec<(Group, &ParamGroup, &Option<AdamState>)> = [
        (Group::Encoder, Some(&state.theta_m), &state.opt_m),
        (Group::Extractor, Some(&state.theta_f), &state.opt_f),
        (Group::Discriminator, state.theta_d.as_ref(), &state.opt_d),
    ]
    .into_iter()
    .filter_map(|(g, p, o)| p.map(|p| (g, p, o)))
    .collect();
    w.u32(groups.len() as u32);
    for (g, params, opt) in groups {
        w.bytes(g.tag().as_bytes());
        w.u32(params.tensors.len() as u32);
        for (name, t) in params.names.iter().zip(&params.tensors) {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }
        match opt {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step_count);
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.f64(v);
                }
                for t in a.m.iter().chain(&a.v) {
                    w.tensor(t);
                }
            }
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u64(what)?;
        let n = usize::try_from(n).map_err(|_| fmt_err(format!("{what} length overflow")))?;
        self.take(n, what)
    }
    fn string(&mut self, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(what)?.to_vec())
            .map_err(|_| fmt_err(format!("{what} is not UTF-8")))
    }
    /// Reads a tensor and checks it against the expected shape.
    fn tensor(&mut self, what: &str, expect: &[usize]) -> Result<Tensor> {
        let rank = self.u32(what)? as usize;
        if rank != expect.len() {
            return Err(fmt_err(format!(
                "{what}: rank {rank}, config expects {}",
                expect.len()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        if shape != expect {
            return Err(fmt_err(format!(
                "{what}: shape {shape:?}, config expects {expect:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Inverse of [`snapshot`]. Any mismatch between the stored tensors and the
/// embedded configuration is a format error naming the offending field.
pub fn restore(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(fmt_err("bad magic, not a PEPC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header: Header = serde_json::from_slice(r.bytes("header")?)
        .map_err(|e| fmt_err(format!("header: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| fmt_err(format!("header config: {e}")))?;
    let layout = header.model.layout();
    let n_groups = r.u32("group count")? as usize;
    if n_groups != layout.len() {
        return Err(fmt_err(format!(
            "{n_groups} parameter groups, config expects {}",
            layout.len()
        )));
    }
    let mut state = ModelState::new(header.model.clone())?;
    state.meta = header.meta;
    state.probed = header.probed;
    for (g, params) in layout {
        let tag = r.string("group tag")?;
        if tag != g.tag() {
            return Err(fmt_err(format!("group {tag:?}, expected {:?}", g.tag())));
        }
        let count = r.u32(&format!("{tag} tensor count"))? as usize;
        if count != params.len() {
            return Err(fmt_err(format!(
                "{tag}: {count} tensors, config expects {}",
                params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in &params {
            let stored = r.string(&format!("{tag} tensor name"))?;
            if &stored != name {
                return Err(fmt_err(format!("{tag}: tensor {stored:?}, expected {name:?}")));
            }
            tensors.push(r.tensor(&format!("{tag}.{name}"), shape)?);
        }
        let opt = match r.u8(&format!("{tag} optimizer flag"))? {
            0 => None,
            1 => {
                let step_count = r.u64(&format!("{tag} optimizer step"))?;
                let mut hyper = [0.0; 4];
                for h in &mut hyper {
                    *h = r.f64(&format!("{tag} optimizer hyperparameters"))?;
                }
                let mut moments = Vec::with_capacity(2 * count);
                for which in ["m", "v"] {
                    for (name, shape) in &params {
                        moments.push(r.tensor(&format!("{tag} adam.{which}.{name}"), shape)?);
                    }
                }
                let v = moments.split_off(count);
                Some(AdamState {
                    step_count,
                    lr: hyper[0],
                    beta1: hyper[1],
                    beta2: hyper[2],
                    eps: hyper[3],
                    m: moments,
                    v,
                })
            }
            f => return Err(fmt_err(format!("{tag}: bad optimizer flag {f}"))),
        };
        let group = state.group_mut(g).expect("layout matches config");
        group.tensors = tensors;
        *state.optimizer_mut(g) = opt;
    }
    if r.pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(state)
}
