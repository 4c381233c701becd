//! Forward pass: causal (optionally windowed) multi-head attention with
//! pre-norm RMS normalization and a SiLU-gated FFN, plus the hooks the rest of
//! the crate needs — stream interventions, attention overrides used by the
//! context-window extension wrappers, and state capture.

use super::intervention::{EditKind, LayerEdits, LogitOp, ResolvedPlan};
use super::{ModelError, PeKind, Result, Tens, TokenId, TransformerModel};
use crate::numerics::{matmul_into_f32, softmax_row, Matrix};

/// What a forward pass should retain besides the logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureFlags {
    /// Per-layer outputs `H_l` (T x D).
    pub layer_outputs: bool,
    /// Per-layer, per-head q/k/v (T x head_dim). Queries and keys are captured
    /// before any rotary rotation so component decompositions stay
    /// position-mechanism free.
    pub qkv: bool,
    /// Per-layer, per-head attention probability maps (T x T, causal support).
    pub attention: bool,
}

impl CaptureFlags {
    pub fn none() -> Self {
        CaptureFlags::default()
    }

    pub fn outputs() -> Self {
        CaptureFlags { layer_outputs: true, ..Default::default() }
    }

    pub fn all() -> Self {
        CaptureFlags { layer_outputs: true, qkv: true, attention: true }
    }
}

/// Captured per-head projections of one layer.
#[derive(Debug, Clone)]
pub struct LayerQkv {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layer_outputs: Option<Vec<Matrix>>,
    pub qkv: Option<Vec<LayerQkv>>,
    pub attention: Option<Vec<Vec<Matrix>>>,
    /// Final logits, T x V.
    pub logits: Matrix,
    /// Set when positional vector replacement had to clamp its subtraction
    /// index to the end of the bank.
    pub pvr_clamped: bool,
}

/// Rotary-base adjustment used by extension wrappers.
#[derive(Debug, Clone, Copy)]
pub enum RopeOverride {
    Static(f64),
    /// Base rescaled per current sequence length `T` once `T > C`:
    /// `base * ((factor*T/C) - (factor-1))^(dh/(dh-2))`.
    DynamicNtk { factor: f64 },
}

/// Positional vector replacement plan, precomputed by the wrapper.
#[derive(Debug, Clone)]
pub struct PvrPlan {
    /// 1-based layer whose output is rewritten.
    pub layer: usize,
    pub alpha: f32,
    pub initial_k: usize,
    /// Original positional vectors of that layer (bank length x D).
    pub bank: Matrix,
    /// Interpolated replacements covering positions `initial_k+1 ..` onward.
    pub interpolated: Matrix,
}

/// Knobs the extension wrappers turn without touching the weights.
#[derive(Debug, Clone)]
pub struct AttnOverrides {
    /// Multiplies every `q·k/sqrt(dh)` logit.
    pub logit_scale: f32,
    /// `(lambda, k)`: additionally multiplies logits into key columns `<= k`.
    pub initial_scale: Option<(f32, usize)>,
    /// Replaces the attention window size.
    pub window_override: Option<usize>,
    pub rope_override: Option<RopeOverride>,
    pub pvr: Option<PvrPlan>,
}

impl Default for AttnOverrides {
    fn default() -> Self {
        AttnOverrides {
            logit_scale: 1.0,
            initial_scale: None,
            window_override: None,
            rope_override: None,
            pvr: None,
        }
    }
}

/// Activations cached for the backward pass.
pub(crate) struct LayerCache {
    pub x_in: Matrix,
    pub normed1: Matrix,
    pub inv_rms1: Vec<f32>,
    pub q_rot: Vec<Matrix>,
    pub k_rot: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub x_mid: Matrix,
    pub normed2: Matrix,
    pub inv_rms2: Vec<f32>,
    pub gate: Matrix,
    pub up: Matrix,
    pub act: Matrix,
}

pub(crate) struct TrainCache {
    pub layers: Vec<LayerCache>,
    pub x_final: Matrix,
    pub final_normed: Matrix,
    pub final_inv_rms: Vec<f32>,
}

impl TrainCache {
    pub fn empty() -> Self {
        TrainCache {
            layers: Vec::new(),
            x_final: Matrix::zeros(0, 0),
            final_normed: Matrix::zeros(0, 0),
            final_inv_rms: Vec::new(),
        }
    }
}

/// RMS norm with gain: `out[t] = x[t] * inv_rms(x[t]) * gain`.
pub(crate) fn rms_norm_rows(
    x: &Matrix,
    gain: &[f32],
    eps: f32,
    out: &mut Matrix,
    inv_rms: &mut Vec<f32>,
) {
    let d = x.cols();
    inv_rms.clear();
    for t in 0..x.rows() {
        let row = x.row(t);
        let ms: f64 = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps as f64).sqrt();
        inv_rms.push(r as f32);
        for (o, (&v, &g)) in out.row_mut(t).iter_mut().zip(row.iter().zip(gain.iter())) {
            *o = (v as f64 * r) as f32 * g;
        }
    }
}

/// cos/sin tables, `T x dh/2`, for rotary rotation at the given base.
pub fn rope_tables(t_len: usize, head_dim: usize, base: f64) -> (Matrix, Matrix) {
    let half = head_dim / 2;
    let mut cos = Matrix::zeros(t_len, half);
    let mut sin = Matrix::zeros(t_len, half);
    for pos in 0..t_len {
        for j in 0..half {
            let freq = base.powf(-2.0 * j as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.set(pos, j, angle.cos() as f32);
            sin.set(pos, j, angle.sin() as f32);
        }
    }
    (cos, sin)
}

/// Effective rotary base under an optional override for a sequence of length
/// `t_len` (the dynamic-NTK rule reduces to the configured base at `t <= C`).
pub fn effective_rope_base(
    config_base: f64,
    rope_override: Option<RopeOverride>,
    head_dim: usize,
    t_len: usize,
    context_window: usize,
) -> f64 {
    match rope_override {
        None => config_base,
        Some(RopeOverride::Static(b)) => b,
        Some(RopeOverride::DynamicNtk { factor }) => {
            if t_len <= context_window {
                config_base
            } else {
                let dh = head_dim as f64;
                let arg = factor * t_len as f64 / context_window as f64 - (factor - 1.0);
                config_base * arg.powf(dh / (dh - 2.0))
            }
        }
    }
}

/// Rotate rows of a `T x dh` head in place (half-split pairing). `sign = -1`
/// applies the inverse rotation, which is what gradients need.
pub(crate) fn rope_rotate(x: &mut Matrix, cos: &Matrix, sin: &Matrix, sign: f32) {
    let half = cos.cols();
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        let (c_row, s_row) = (cos.row(t), sin.row(t));
        for j in 0..half {
            let (c, s) = (c_row[j], s_row[j] * sign);
            let a = row[j];
            let b = row[j + half];
            row[j] = a * c - b * s;
            row[j + half] = a * s + b * c;
        }
    }
}

/// Apply the rotary rotation to a head's rows in place (public wrapper used
/// by offline attention recomputation).
pub fn apply_rope(x: &mut Matrix, cos: &Matrix, sin: &Matrix) {
    rope_rotate(x, cos, sin, 1.0);
}

/// ALiBi slope for 1-based head `h` of `n_heads`: `2^(-8h/H)`.
pub fn alibi_slope(h: usize, n_heads: usize) -> f64 {
    (2.0f64).powf(-8.0 * h as f64 / n_heads as f64)
}

fn split_heads(x: &Matrix, heads: usize) -> Vec<Matrix> {
    let t = x.rows();
    let dh = x.cols() / heads;
    (0..heads)
        .map(|h| {
            let mut m = Matrix::zeros(t, dh);
            for i in 0..t {
                m.row_mut(i).copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
            }
            m
        })
        .collect()
}

fn apply_head_edit(stream: &mut Matrix, positions: &std::ops::Range<usize>, kind: &EditKind) {
    for t in positions.clone() {
        let local = t - positions.start;
        let row = stream.row_mut(t);
        match kind {
            EditKind::RemoveWhole => row.fill(0.0),
            EditKind::ScaleWhole(f) => row.iter_mut().for_each(|v| *v *= f),
            EditKind::SetRows(rows) => row.copy_from_slice(rows.row(local)),
            EditKind::AddScaledRows { rows, scale } => {
                for (v, r) in row.iter_mut().zip(rows.row(local)) {
                    *v += scale * r;
                }
            }
        }
    }
}

/// The forward pass. `plan` carries resolved interventions, `overrides` the
/// extension-wrapper knobs, and `train_cache` is populated when training needs
/// the intermediate activations.
pub(crate) fn forward_pass(
    model: &TransformerModel,
    tokens: &[TokenId],
    plan: &ResolvedPlan,
    capture: CaptureFlags,
    overrides: &AttnOverrides,
    mut train_cache: Option<&mut TrainCache>,
) -> Result<ForwardTrace> {
    let cfg = model.config();
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(ModelError::Shape("empty token sequence".into()));
    }
    for &tok in tokens {
        if tok as usize >= cfg.vocab {
            return Err(ModelError::Shape(format!(
                "token id {tok} outside vocab {}",
                cfg.vocab
            )));
        }
    }
    if let Some(pvr) = &overrides.pvr {
        let max = pvr.initial_k + pvr.interpolated.rows();
        if t_len > max {
            return Err(ModelError::ExtensionExhausted { len: t_len, max });
        }
    }

    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    // effective window: override wins, otherwise the config, otherwise full
    let window = overrides
        .window_override
        .or(cfg.window())
        .unwrap_or(usize::MAX)
        .max(1);

    let rope_tables = match cfg.pe_kind {
        PeKind::Rope { base } => {
            let eff = effective_rope_base(
                base,
                overrides.rope_override,
                dh,
                t_len,
                cfg.context_window,
            );
            Some(rope_tables(t_len, dh, eff))
        }
        _ => None,
    };

    // embed
    let emb = model.embedding();
    let mut x = Matrix::zeros(t_len, d);
    for (i, &tok) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(emb.row(tok as usize));
    }

    let mut layer_outputs = capture.layer_outputs.then(|| Vec::with_capacity(cfg.layers));
    let mut qkv_cap = capture.qkv.then(|| Vec::with_capacity(cfg.layers));
    let mut attn_cap = capture.attention.then(|| Vec::with_capacity(cfg.layers));
    let mut pvr_clamped = false;

    let mut normed = Matrix::zeros(t_len, d);
    let mut inv_rms1 = Vec::new();
    let mut inv_rms2 = Vec::new();

    for l in 1..=cfg.layers {
        let lw = model.layer(l);
        let edits: &LayerEdits = &plan.layers[l - 1];

        rms_norm_rows(&x, lw.attn_norm, cfg.norm_eps, &mut normed, &mut inv_rms1);

        let q_all = mat_mul(&normed, lw.wq);
        let k_all = mat_mul(&normed, lw.wk);
        let v_all = mat_mul(&normed, lw.wv);
        let mut q_heads = split_heads(&q_all, heads);
        let mut k_heads = split_heads(&k_all, heads);
        let mut v_heads = split_heads(&v_all, heads);

        for (head, positions, kind) in &edits.value {
            apply_head_edit(&mut v_heads[*head], positions, kind);
        }
        for (head, positions, kind) in &edits.query {
            apply_head_edit(&mut q_heads[*head], positions, kind);
        }
        for (head, positions, kind) in &edits.key {
            apply_head_edit(&mut k_heads[*head], positions, kind);
        }

        if let Some(cap) = qkv_cap.as_mut() {
            cap.push(LayerQkv {
                q: q_heads.clone(),
                k: k_heads.clone(),
                v: v_heads.clone(),
            });
        }

        if let Some((cos, sin)) = &rope_tables {
            for h in 0..heads {
                rope_rotate(&mut q_heads[h], cos, sin, 1.0);
                rope_rotate(&mut k_heads[h], cos, sin, 1.0);
            }
        }

        let mut ctx = Matrix::zeros(t_len, d);
        let mut probs_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let slope = match cfg.pe_kind {
                PeKind::Alibi => Some(alibi_slope(h + 1, heads)),
                _ => None,
            };
            let probs = attention_probs(
                &q_heads[h],
                &k_heads[h],
                window,
                inv_sqrt_dh,
                overrides.logit_scale,
                overrides.initial_scale,
                slope,
                &edits.logits,
            )?;
            // ctx_h = probs * v_h
            let mut ctx_h = Matrix::zeros(t_len, dh);
            matmul_into_f32(
                probs.data(),
                v_heads[h].data(),
                t_len,
                t_len,
                dh,
                ctx_h.data_mut(),
            );
            for i in 0..t_len {
                ctx.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(ctx_h.row(i));
            }
            probs_heads.push(probs);
        }
        if let Some(cap) = attn_cap.as_mut() {
            cap.push(probs_heads.clone());
        }

        let attn_out = mat_mul(&ctx, lw.wo);
        let mut x_mid = x.clone();
        add_assign(&mut x_mid, &attn_out);

        rms_norm_rows(&x_mid, lw.ffn_norm, cfg.norm_eps, &mut normed, &mut inv_rms2);
        let gate = mat_mul(&normed, lw.w_gate);
        let up = mat_mul(&normed, lw.w_up);
        let mut act = Matrix::zeros(t_len, cfg.ffn_dim);
        for i in 0..t_len {
            let (g_row, u_row) = (gate.row(i), up.row(i));
            for (a, (&g, &u)) in act.row_mut(i).iter_mut().zip(g_row.iter().zip(u_row)) {
                *a = silu(g) * u;
            }
        }
        let ffn_out = mat_mul(&act, lw.w_down);
        let mut x_out = x_mid.clone();
        add_assign(&mut x_out, &ffn_out);

        if let Some(cache) = train_cache.as_deref_mut() {
            cache.layers.push(LayerCache {
                x_in: x.clone(),
                normed1: {
                    let mut n1 = Matrix::zeros(t_len, d);
                    rms_norm_rows(&x, lw.attn_norm, cfg.norm_eps, &mut n1, &mut Vec::new());
                    n1
                },
                inv_rms1: inv_rms1.clone(),
                q_rot: q_heads,
                k_rot: k_heads,
                v: v_heads,
                probs: probs_heads,
                ctx,
                x_mid: x_mid.clone(),
                normed2: normed.clone(),
                inv_rms2: inv_rms2.clone(),
                gate,
                up,
                act,
            });
        }

        x = x_out;

        // positional vector replacement at this layer's output
        if let Some(pvr) = &overrides.pvr {
            if pvr.layer == l {
                let bank_len = pvr.bank.rows();
                for t in pvr.initial_k..t_len {
                    let sub_idx = t.min(bank_len - 1);
                    if sub_idx != t {
                        pvr_clamped = true;
                    }
                    let sub = pvr.bank.row(sub_idx);
                    let rep = pvr.interpolated.row(t - pvr.initial_k);
                    for ((v, &s), &r) in x.row_mut(t).iter_mut().zip(sub).zip(rep) {
                        *v = *v - s + pvr.alpha * r;
                    }
                }
            }
        }

        for (positions, kind) in &edits.output {
            apply_head_edit(&mut x, positions, kind);
        }

        if let Some(cap) = layer_outputs.as_mut() {
            cap.push(x.clone());
        }
    }

    // final norm + unembedding
    let mut final_normed = Matrix::zeros(t_len, d);
    let mut final_inv_rms = Vec::new();
    rms_norm_rows(&x, model.final_norm(), cfg.norm_eps, &mut final_normed, &mut final_inv_rms);
    let logits = unembed(model, &final_normed);

    if let Some(cache) = train_cache.as_deref_mut() {
        cache.x_final = x;
        cache.final_normed = final_normed;
        cache.final_inv_rms = final_inv_rms;
    }

    Ok(ForwardTrace {
        layer_outputs,
        qkv: qkv_cap,
        attention: attn_cap,
        logits,
        pvr_clamped,
    })
}

/// Project normalized final states into vocabulary logits, handling tied
/// embeddings.
pub(crate) fn unembed(model: &TransformerModel, final_normed: &Matrix) -> Matrix {
    let cfg = model.config();
    match model.unembedding() {
        Some(u) => {
            let mut logits = Matrix::zeros(final_normed.rows(), cfg.vocab);
            matmul_into_f32(
                final_normed.data(),
                u.data,
                final_normed.rows(),
                cfg.model_dim,
                cfg.vocab,
                logits.data_mut(),
            );
            logits
        }
        None => {
            let emb = model.embedding();
            let mut logits = Matrix::zeros(final_normed.rows(), cfg.vocab);
            for t in 0..final_normed.rows() {
                let row = final_normed.row(t);
                for v in 0..cfg.vocab {
                    logits.set(t, v, crate::numerics::dot_f64(row, emb.row(v)) as f32);
                }
            }
            logits
        }
    }
}

/// Attention probabilities for one head under a causal window mask.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_probs(
    q: &Matrix,
    k: &Matrix,
    window: usize,
    inv_sqrt_dh: f64,
    logit_scale: f32,
    initial_scale: Option<(f32, usize)>,
    alibi_slope: Option<f64>,
    logit_edits: &[(std::ops::Range<usize>, LogitOp)],
) -> Result<Matrix> {
    let t_len = q.rows();
    let mut probs = Matrix::zeros(t_len, t_len);
    let mut row_logits = vec![0.0f32; t_len];
    for i in 0..t_len {
        let lo = i.saturating_sub(window - 1);
        let span = &mut row_logits[lo..=i];
        for (off, logit) in span.iter_mut().enumerate() {
            let j = lo + off;
            let mut val =
                crate::numerics::dot_f64(q.row(i), k.row(j)) * inv_sqrt_dh * logit_scale as f64;
            if let Some((lambda, k_init)) = initial_scale {
                if j < k_init {
                    val *= lambda as f64;
                }
            }
            if let Some(slope) = alibi_slope {
                val -= slope * (i - j) as f64;
            }
            *logit = val as f32;
            for (cols, op) in logit_edits {
                if cols.contains(&j) {
                    match op {
                        LogitOp::Scale(f) => *logit *= f,
                        LogitOp::Mask => *logit = f32::NEG_INFINITY,
                    }
                }
            }
        }
        let (head_span, _) = probs.row_mut(i).split_at_mut(i + 1);
        softmax_row(&row_logits[lo..=i], &mut head_span[lo..=i])?;
    }
    Ok(probs)
}

pub(crate) fn silu(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x as f64).exp());
    (x as f64 * s) as f32
}

pub(crate) fn mat_mul(a: &Matrix, b: Tens<'_>) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols);
    matmul_into_f32(a.data(), b.data, a.rows(), a.cols(), b.cols, out.data_mut());
    out
}

pub(crate) fn add_assign(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}
