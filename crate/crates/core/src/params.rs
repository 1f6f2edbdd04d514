//! Named parameter collections and the binary checkpoint format.
//!
//! A checkpoint is the magic `SQSM`, a little-endian `u32` format version,
//! then records until end of file. Each record is
//! `name_len: u32, name: [u8], rank: u32, extents: [u32; rank], data: [f32]`.
//! Optimiser state follows the parameters as records under the `adam.`
//! prefix.

use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::Rng;

use crate::ad::{Gradients, Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQSM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn extend_from(&mut self, other: &Params<T>) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Params<T> {
        Params {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Params<T> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Fan-in scaled uniform initialisation in `±sqrt(1 / fan_in)`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, T::c(value)));
    }

    /// Records every entry on `tape` once. Entries for which `trainable`
    /// returns false become constants.
    pub fn register(&self, tape: &Tape<T>, trainable: impl Fn(&str) -> bool) -> Result<ParamVars> {
        let mut vars = IndexMap::with_capacity(self.entries.len());
        for (name, value) in &self.entries {
            let v = if trainable(name) {
                tape.param(value.clone())?
            } else {
                tape.constant(value.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(ParamVars { vars })
    }

    /// Gathers the gradients of the registered entries, skipping constants.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &Gradients<T>, tape: &Tape<T>) -> Params<T> {
        let mut out = Params::new();
        for (name, &v) in &vars.vars {
            if !tape.requires_grad(v) {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.entries[name].shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    /// `self += other` over matching names.
    pub fn accumulate(&mut self, other: &Params<T>) -> Result<()> {
        for (name, g) in other.iter() {
            match self.entries.get_mut(name) {
                Some(t) if t.shape() == g.shape() => t.add_assign(g),
                Some(t) => {
                    return Err(shape_err(
                        "accumulate",
                        format!("{name}: {:?} vs {:?}", t.shape(), g.shape()),
                    ))
                }
                None => {
                    self.entries.insert(name.to_string(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        let a = T::c(a);
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|e| *e *= a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

/// Tape handles of a registered [`Params`] set, shared by every use site.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Binds names to nodes that are already on a tape.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| arg_err("params", format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    let name_len = u32::try_from(name.len()).map_err(|_| Error::Format("name too long".into()))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Writes parameters (as `f32`) and optional optimiser state.
pub fn write_checkpoint<T: Real, W: Write>(
    w: &mut W,
    params: &Params<T>,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in params.iter() {
        if name.starts_with("adam.") {
            return Err(arg_err("checkpoint", "parameter names may not start with `adam.`"));
        }
        write_record(w, name, &t.cast())?;
    }
    if let Some(state) = adam {
        let cfg = state.config();
        let scalars = [
            ("adam.step", state.step() as f64),
            ("adam.lr", cfg.lr),
            ("adam.beta1", cfg.beta1),
            ("adam.beta2", cfg.beta2),
            ("adam.eps", cfg.eps),
        ];
        for (name, v) in scalars {
            write_record(w, name, &Tensor::scalar(v as f32))?;
        }
        for (name, t) in state.first_moment().iter() {
            write_record(w, &format!("adam.m.{name}"), &t.cast())?;
        }
        for (name, t) in state.second_moment().iter() {
            write_record(w, &format!("adam.v.{name}"), &t.cast())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Params<f32>, Option<AdamState<f32>>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut params = Params::new();
    let mut adam_scalars = IndexMap::new();
    let mut m = Params::new();
    let mut v = Params::new();
    while !c.done() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("record name is not utf-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = c.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix("adam.") {
            adam_scalars.insert(rest.to_string(), t.item() as f64);
        } else {
            params.insert(name, t);
        }
    }
    let adam = if adam_scalars.is_empty() {
        None
    } else {
        let get = |k: &str| {
            adam_scalars
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing adam.{k}")))
        };
        let cfg = AdamConfig {
            lr: get("lr")?,
            beta1: get("beta1")?,
            beta2: get("beta2")?,
            eps: get("eps")?,
        };
        Some(AdamState::from_parts(cfg, get("step")? as u64, m, v))
    };
    Ok((params, adam))
}
