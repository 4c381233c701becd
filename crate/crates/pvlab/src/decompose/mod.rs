//! Hidden-state banks and the mean-based decomposition.
//!
//! A bank accumulates hidden states of one stream (a layer output or a
//! per-head query/key/value projection) over N equal-length corpus windows.
//! Decomposing a bank yields, per position t: the positional vector `p[t]`
//! (the across-sample mean), the mean vector `u` (mean of `p[1..=C]`), the
//! positional basis `m[t] = p[t] - u`, and per-sample semantic residuals
//! `c[s][t] = h[s][t] - p[t]` when the bank retained its samples.

use crate::container::{read_container, write_container, TensorData, TensorEntry};
use crate::model::{CaptureFlags, InterventionSpec, LanguageModel, ModelError, TokenId};
use crate::numerics::Matrix;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("corpus too small: requested {requested} windows, only {achievable} available")]
    Data { requested: usize, achievable: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("container format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DecomposeError>;

/// A captured stream. Layers and heads are 1-based, matching reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamId {
    LayerOutput { layer: usize },
    Query { layer: usize, head: usize },
    Key { layer: usize, head: usize },
    Value { layer: usize, head: usize },
}

impl StreamId {
    pub fn layer(&self) -> usize {
        match *self {
            StreamId::LayerOutput { layer }
            | StreamId::Query { layer, .. }
            | StreamId::Key { layer, .. }
            | StreamId::Value { layer, .. } => layer,
        }
    }

    fn needs_qkv(&self) -> bool {
        !matches!(self, StreamId::LayerOutput { .. })
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamId::LayerOutput { layer } => write!(f, "layer_output.{layer}"),
            StreamId::Query { layer, head } => write!(f, "query.{layer}.{head}"),
            StreamId::Key { layer, head } => write!(f, "key.{layer}.{head}"),
            StreamId::Value { layer, head } => write!(f, "value.{layer}.{head}"),
        }
    }
}

impl FromStr for StreamId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('.').collect();
        let parse = |v: &str| v.parse::<usize>().map_err(|_| format!("bad stream id {s}"));
        match parts.as_slice() {
            ["layer_output", l] => Ok(StreamId::LayerOutput { layer: parse(l)? }),
            ["query", l, h] => Ok(StreamId::Query { layer: parse(l)?, head: parse(h)? }),
            ["key", l, h] => Ok(StreamId::Key { layer: parse(l)?, head: parse(h)? }),
            ["value", l, h] => Ok(StreamId::Value { layer: parse(l)?, head: parse(h)? }),
            _ => Err(format!("bad stream id {s}")),
        }
    }
}

/// Deterministic source of equal-length token windows.
pub trait SampleSource: Sync {
    /// How many disjoint windows of length `t_len` the source can yield.
    fn available(&self, t_len: usize) -> usize;

    /// The idx-th window. Must be deterministic for a given source.
    fn window(&self, idx: usize, t_len: usize) -> Vec<TokenId>;
}

/// Windows cut directly from a token slice; used by tests and the harness.
pub struct SliceWindows<'a> {
    pub tokens: &'a [TokenId],
}

impl SampleSource for SliceWindows<'_> {
    fn available(&self, t_len: usize) -> usize {
        if t_len == 0 {
            0
        } else {
            self.tokens.len() / t_len
        }
    }

    fn window(&self, idx: usize, t_len: usize) -> Vec<TokenId> {
        self.tokens[idx * t_len..(idx + 1) * t_len].to_vec()
    }
}

/// What to collect for one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamRequest {
    pub stream: StreamId,
    /// Keep every per-sample matrix (needed for semantic vectors and offline
    /// attention recomputation). Costs `N x T x dim` floats.
    pub retain: bool,
}

impl StreamRequest {
    pub fn mean_only(stream: StreamId) -> Self {
        StreamRequest { stream, retain: false }
    }

    pub fn retained(stream: StreamId) -> Self {
        StreamRequest { stream, retain: true }
    }
}

/// Running 64-bit sums (and optionally retained samples) of one stream.
#[derive(Debug, Clone)]
pub struct HiddenStateBank {
    stream: StreamId,
    n: usize,
    t_len: usize,
    dim: usize,
    sums: Vec<f64>,
    retained: Option<Vec<Matrix>>,
}

impl HiddenStateBank {
    pub fn stream(&self) -> StreamId {
        self.stream
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn retained(&self) -> Option<&[Matrix]> {
        self.retained.as_deref()
    }

    pub fn from_samples(stream: StreamId, samples: &[Matrix], retain: bool) -> Self {
        let mut bank = HiddenStateBank::empty(
            stream,
            samples[0].rows(),
            samples[0].cols(),
            retain,
        );
        for s in samples {
            bank.add_sample(s);
        }
        bank
    }

    fn empty(stream: StreamId, t_len: usize, dim: usize, retain: bool) -> Self {
        HiddenStateBank {
            stream,
            n: 0,
            t_len,
            dim,
            sums: vec![0.0; t_len * dim],
            retained: retain.then(Vec::new),
        }
    }

    fn add_sample(&mut self, states: &Matrix) {
        debug_assert_eq!(states.rows(), self.t_len);
        debug_assert_eq!(states.cols(), self.dim);
        for (s, &v) in self.sums.iter_mut().zip(states.data()) {
            *s += v as f64;
        }
        self.n += 1;
        if let Some(r) = self.retained.as_mut() {
            r.push(states.clone());
        }
    }

    fn merge(&mut self, other: HiddenStateBank) {
        debug_assert_eq!(self.stream, other.stream);
        for (s, o) in self.sums.iter_mut().zip(other.sums) {
            *s += o;
        }
        self.n += other.n;
        if let (Some(r), Some(o)) = (self.retained.as_mut(), other.retained) {
            r.extend(o);
        }
    }

    /// The mean state per position, rounded to f32.
    pub fn mean(&self) -> Matrix {
        let inv = 1.0 / self.n as f64;
        Matrix::from_vec_unchecked(
            self.t_len,
            self.dim,
            self.sums.iter().map(|s| (s * inv) as f32).collect(),
        )
    }
}

fn extract_stream(trace: &crate::model::ForwardTrace, stream: StreamId) -> Result<Matrix> {
    let missing = || DecomposeError::Capability(format!("forward trace lacks stream {stream}"));
    match stream {
        StreamId::LayerOutput { layer } => Ok(trace
            .layer_outputs
            .as_ref()
            .ok_or_else(missing)?
            .get(layer - 1)
            .ok_or_else(missing)?
            .clone()),
        StreamId::Query { layer, head } => Ok(trace.qkv.as_ref().ok_or_else(missing)?[layer - 1]
            .q
            .get(head - 1)
            .ok_or_else(missing)?
            .clone()),
        StreamId::Key { layer, head } => Ok(trace.qkv.as_ref().ok_or_else(missing)?[layer - 1]
            .k
            .get(head - 1)
            .ok_or_else(missing)?
            .clone()),
        StreamId::Value { layer, head } => Ok(trace.qkv.as_ref().ok_or_else(missing)?[layer - 1]
            .v
            .get(head - 1)
            .ok_or_else(missing)?
            .clone()),
    }
}

/// Run the model over `n` disjoint sampler windows of length `t_len` and
/// accumulate one bank per requested stream.
///
/// Samples are processed in fixed chunks whose partial sums merge in chunk
/// order, so the result does not depend on the worker count. Interventions,
/// when given, are applied to every forward pass (the ablation study relies
/// on this).
pub fn collect_bank(
    model: &dyn LanguageModel,
    sampler: &dyn SampleSource,
    n: usize,
    t_len: usize,
    requests: &[StreamRequest],
    interventions: &[InterventionSpec],
) -> Result<Vec<HiddenStateBank>> {
    let achievable = sampler.available(t_len);
    if achievable < n || n == 0 {
        return Err(DecomposeError::Data { requested: n, achievable });
    }
    if requests.is_empty() {
        return Err(DecomposeError::Shape("no streams requested".into()));
    }
    let cfg = model.config();
    for r in requests {
        let l = r.stream.layer();
        if l < 1 || l > cfg.layers {
            return Err(DecomposeError::Shape(format!(
                "stream {} outside 1..={} layers",
                r.stream, cfg.layers
            )));
        }
    }
    let capture = CaptureFlags {
        layer_outputs: requests.iter().any(|r| !r.stream.needs_qkv()),
        qkv: requests.iter().any(|r| r.stream.needs_qkv()),
        attention: false,
    };
    let dim_of = |s: StreamId| match s {
        StreamId::LayerOutput { .. } => cfg.model_dim,
        _ => cfg.head_dim(),
    };

    const CHUNK: usize = 8;
    let chunk_ids: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let partials: Vec<Result<Vec<HiddenStateBank>>> = chunk_ids
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut banks: Vec<HiddenStateBank> = requests
                .iter()
                .map(|r| HiddenStateBank::empty(r.stream, t_len, dim_of(r.stream), r.retain))
                .collect();
            for idx in lo..hi {
                let tokens = sampler.window(idx, t_len);
                let trace = model.forward(&tokens, interventions, capture)?;
                for (bank, req) in banks.iter_mut().zip(requests) {
                    let states = extract_stream(&trace, req.stream)?;
                    bank.add_sample(&states);
                }
            }
            Ok(banks)
        })
        .collect();

    let mut merged: Option<Vec<HiddenStateBank>> = None;
    for partial in partials {
        let partial = partial?;
        match merged.as_mut() {
            None => merged = Some(partial),
            Some(m) => {
                for (a, b) in m.iter_mut().zip(partial) {
                    a.merge(b);
                }
            }
        }
    }
    Ok(merged.unwrap())
}

/// The decomposition of one bank: `p[t] = u + m[t]` holds exactly.
#[derive(Debug, Clone)]
pub struct PositionalDecomposition {
    stream: StreamId,
    n_samples: usize,
    c: usize,
    p: Matrix,
    u: Vec<f32>,
    m: Matrix,
}

impl PositionalDecomposition {
    pub fn stream(&self) -> StreamId {
        self.stream
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn context_window(&self) -> usize {
        self.c
    }

    pub fn t_len(&self) -> usize {
        self.p.rows()
    }

    pub fn dim(&self) -> usize {
        self.p.cols()
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn m(&self) -> &Matrix {
        &self.m
    }

    pub fn from_parts(
        stream: StreamId,
        n_samples: usize,
        c: usize,
        p: Matrix,
        u: Vec<f32>,
        m: Matrix,
    ) -> Self {
        PositionalDecomposition { stream, n_samples, c, p, u, m }
    }
}

/// Mean-based decomposition of a bank, with `u` computed over positions
/// `1..=c` even when the bank spans more.
pub fn decompose(bank: &HiddenStateBank, c: usize) -> Result<PositionalDecomposition> {
    if c == 0 || c > bank.t_len {
        return Err(DecomposeError::Shape(format!(
            "context window {c} outside 1..={}",
            bank.t_len
        )));
    }
    let (t_len, d) = (bank.t_len, bank.dim);
    let inv_n = 1.0 / bank.n as f64;

    // u from the 64-bit sums over positions 1..=c
    let mut u64v = vec![0.0f64; d];
    for t in 0..c {
        for (u, s) in u64v.iter_mut().zip(&bank.sums[t * d..(t + 1) * d]) {
            *u += s;
        }
    }
    let inv_c = inv_n / c as f64;
    let u: Vec<f32> = u64v.iter().map(|v| (v * inv_c) as f32).collect();

    // m = p_raw - u in f32, then p is re-derived as u + m so the
    // p = u + m identity is exact in 32-bit.
    let mut m = Matrix::zeros(t_len, d);
    let mut p = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let sums = &bank.sums[t * d..(t + 1) * d];
        let m_row = m.row_mut(t);
        for j in 0..d {
            m_row[j] = (sums[j] * inv_n) as f32 - u[j];
        }
        let p_row = p.row_mut(t);
        for j in 0..d {
            p_row[j] = u[j] + m_row[j];
        }
    }

    Ok(PositionalDecomposition { stream: bank.stream, n_samples: bank.n, c, p, u, m })
}

/// Per-sample semantic vectors `c[s] = h[s] - p`. Requires a retained bank.
pub fn semantic_vectors(
    bank: &HiddenStateBank,
    decomposition: &PositionalDecomposition,
) -> Result<Vec<Matrix>> {
    let retained = bank.retained().ok_or_else(|| {
        DecomposeError::Capability("semantic vectors need a bank with retained samples".into())
    })?;
    if decomposition.t_len() != bank.t_len || decomposition.dim() != bank.dim {
        return Err(DecomposeError::Shape(
            "decomposition does not match the bank shape".into(),
        ));
    }
    let p = decomposition.p();
    Ok(retained
        .iter()
        .map(|h| {
            let mut c = h.clone();
            for (cv, pv) in c.data_mut().iter_mut().zip(p.data()) {
                *cv -= pv;
            }
            c
        })
        .collect())
}

/// A keyed set of decompositions, serializable as a `PVDEC1` container.
#[derive(Debug, Clone, Default)]
pub struct DecompositionSet {
    entries: BTreeMap<StreamId, PositionalDecomposition>,
}

pub const DECOMPOSITION_MAGIC: &str = "PVDEC1";

impl DecompositionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dec: PositionalDecomposition) {
        self.entries.insert(dec.stream(), dec);
    }

    pub fn get(&self, stream: &StreamId) -> Option<&PositionalDecomposition> {
        self.entries.get(stream)
    }

    pub fn streams(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = vec![("format".to_string(), "pvlab-decomposition".to_string())];
        let mut tensors = Vec::new();
        for (id, dec) in &self.entries {
            header.push((format!("stream.{id}"), format!("n={} c={}", dec.n_samples, dec.c)));
            tensors.push(TensorEntry {
                name: format!("{id}.p"),
                rows: dec.p.rows(),
                cols: dec.p.cols(),
                data: TensorData::F32(dec.p.data()),
            });
            tensors.push(TensorEntry {
                name: format!("{id}.u"),
                rows: 1,
                cols: dec.u.len(),
                data: TensorData::F32(&dec.u),
            });
            tensors.push(TensorEntry {
                name: format!("{id}.m"),
                rows: dec.m.rows(),
                cols: dec.m.cols(),
                data: TensorData::F32(dec.m.data()),
            });
        }
        write_container(path, DECOMPOSITION_MAGIC, &header, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let parsed = read_container(path, DECOMPOSITION_MAGIC)
            .map_err(|e| DecomposeError::Format { offset: e.offset, message: e.message })?;
        let mut set = DecompositionSet::new();
        for (key, val) in &parsed.header {
            let Some(id_str) = key.strip_prefix("stream.") else {
                continue;
            };
            let id: StreamId = id_str
                .parse()
                .map_err(|e| DecomposeError::Format { offset: 0, message: e })?;
            let mut n = None;
            let mut c = None;
            for part in val.split(' ') {
                if let Some(v) = part.strip_prefix("n=") {
                    n = v.parse::<usize>().ok();
                } else if let Some(v) = part.strip_prefix("c=") {
                    c = v.parse::<usize>().ok();
                }
            }
            let (n, c) = match (n, c) {
                (Some(n), Some(c)) => (n, c),
                _ => {
                    return Err(DecomposeError::Format {
                        offset: 0,
                        message: format!("bad stream header for {id_str}"),
                    })
                }
            };
            let fetch = |suffix: &str| -> Result<(usize, usize, Vec<f32>)> {
                let name = format!("{id_str}.{suffix}");
                let t = parsed.tensors.iter().find(|t| t.name == name).ok_or_else(|| {
                    DecomposeError::Format {
                        offset: 0,
                        message: format!("missing tensor {name}"),
                    }
                })?;
                let data = parsed
                    .tensor_f32(t)
                    .map_err(|e| DecomposeError::Format { offset: e.offset, message: e.message })?;
                Ok((t.rows, t.cols, data))
            };
            let (pr, pc, p) = fetch("p")?;
            let (_, uc, u) = fetch("u")?;
            let (mr, mc, m) = fetch("m")?;
            if pc != uc || pr != mr || pc != mc {
                return Err(DecomposeError::Format {
                    offset: 0,
                    message: format!("inconsistent tensor shapes for {id_str}"),
                });
            }
            set.insert(PositionalDecomposition {
                stream: id,
                n_samples: n,
                c,
                p: Matrix::from_vec_unchecked(pr, pc, p),
                u,
                m: Matrix::from_vec_unchecked(mr, mc, m),
            });
        }
        Ok(set)
    }
}

pub const BANK_MAGIC: &str = "PVBNK1";

/// Serialize mean-only banks (64-bit sums) in the shared container layout.
/// Retained per-sample states are not persisted; analyses that need them
/// recollect.
pub fn save_banks(path: &Path, banks: &[HiddenStateBank]) -> Result<()> {
    let mut header = vec![("format".to_string(), "pvlab-bank".to_string())];
    let mut tensors = Vec::new();
    for b in banks {
        header.push((
            format!("bank.{}", b.stream),
            format!("n={} t={} dim={}", b.n, b.t_len, b.dim),
        ));
        tensors.push(crate::container::TensorEntry {
            name: format!("{}.sum", b.stream),
            rows: b.t_len,
            cols: b.dim,
            data: crate::container::TensorData::F64(&b.sums),
        });
    }
    crate::container::write_container(path, BANK_MAGIC, &header, &tensors)?;
    Ok(())
}

pub fn load_banks(path: &Path) -> Result<Vec<HiddenStateBank>> {
    let parsed = crate::container::read_container(path, BANK_MAGIC)
        .map_err(|e| DecomposeError::Format { offset: e.offset, message: e.message })?;
    let mut banks = Vec::new();
    for (key, val) in &parsed.header {
        let Some(id_str) = key.strip_prefix("bank.") else {
            continue;
        };
        let stream: StreamId = id_str
            .parse()
            .map_err(|e| DecomposeError::Format { offset: 0, message: e })?;
        let mut n = None;
        for part in val.split(' ') {
            if let Some(v) = part.strip_prefix("n=") {
                n = v.parse::<usize>().ok();
            }
        }
        let n = n.ok_or_else(|| DecomposeError::Format {
            offset: 0,
            message: format!("bad bank header for {id_str}"),
        })?;
        let name = format!("{id_str}.sum");
        let t = parsed
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| DecomposeError::Format {
                offset: 0,
                message: format!("missing tensor {name}"),
            })?;
        let sums = parsed
            .tensor_f64(t)
            .map_err(|e| DecomposeError::Format { offset: e.offset, message: e.message })?;
        banks.push(HiddenStateBank {
            stream,
            n,
            t_len: t.rows,
            dim: t.cols,
            sums,
            retained: None,
        });
    }
    Ok(banks)
}
