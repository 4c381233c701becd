//! Shared helpers for the integration suites: an all-f64 reference forward
//! pass written directly from the layer equations, independent of the crate's
//! f32 kernels. Used as the finite-difference oracle.

#![allow(dead_code)]

use pvlab::model::{AttnKind, PeKind, TokenId, TransformerModel};

pub struct Tensor64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor64 {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn tensor64(model: &TransformerModel, name: &str) -> Tensor64 {
    let t = model.tensor(name).unwrap_or_else(|| panic!("missing {name}"));
    Tensor64 {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|v| *v as f64).collect(),
    }
}

fn matmul64(a: &Tensor64, b: &Tensor64) -> Tensor64 {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0f64; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out[i * b.cols + j] += av * b.data[k * b.cols + j];
            }
        }
    }
    Tensor64 { rows: a.rows, cols: b.cols, data: out }
}

fn rms_norm64(x: &Tensor64, gain: &Tensor64, eps: f64) -> Tensor64 {
    let mut out = vec![0.0f64; x.data.len()];
    for t in 0..x.rows {
        let row = x.row(t);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for j in 0..x.cols {
            out[t * x.cols + j] = row[j] * r * gain.data[j];
        }
    }
    Tensor64 { rows: x.rows, cols: x.cols, data: out }
}

/// Mean cross-entropy over (inputs -> targets) computed entirely in f64.
pub fn oracle_sequence_loss(model: &TransformerModel, window: &[TokenId]) -> f64 {
    let cfg = model.config();
    let inputs = &window[..window.len() - 1];
    let targets = &window[1..];
    let t_len = inputs.len();
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let eps = cfg.norm_eps as f64;

    let emb = tensor64(model, "embedding");
    let mut x = Tensor64 {
        rows: t_len,
        cols: d,
        data: inputs
            .iter()
            .flat_map(|&tok| emb.row(tok as usize).to_vec())
            .collect(),
    };

    let window_size = match cfg.attn_kind {
        AttnKind::Window { size } => size,
        AttnKind::Full => usize::MAX,
    };

    for l in 1..=cfg.layers {
        let attn_norm = tensor64(model, &format!("layers.{l}.attn_norm"));
        let wq = tensor64(model, &format!("layers.{l}.wq"));
        let wk = tensor64(model, &format!("layers.{l}.wk"));
        let wv = tensor64(model, &format!("layers.{l}.wv"));
        let wo = tensor64(model, &format!("layers.{l}.wo"));
        let ffn_norm = tensor64(model, &format!("layers.{l}.ffn_norm"));
        let w_gate = tensor64(model, &format!("layers.{l}.w_gate"));
        let w_up = tensor64(model, &format!("layers.{l}.w_up"));
        let w_down = tensor64(model, &format!("layers.{l}.w_down"));

        let normed = rms_norm64(&x, &attn_norm, eps);
        let mut q = matmul64(&normed, &wq);
        let mut k = matmul64(&normed, &wk);
        let v = matmul64(&normed, &wv);

        if let PeKind::Rope { base } = cfg.pe_kind {
            for m in [&mut q, &mut k] {
                for t in 0..t_len {
                    for h in 0..heads {
                        for j in 0..dh / 2 {
                            let freq = base.powf(-2.0 * j as f64 / dh as f64);
                            let angle = t as f64 * freq;
                            let (s, c) = angle.sin_cos();
                            let i0 = t * d + h * dh + j;
                            let i1 = i0 + dh / 2;
                            let (a, b) = (m.data[i0], m.data[i1]);
                            m.data[i0] = a * c - b * s;
                            m.data[i1] = a * s + b * c;
                        }
                    }
                }
            }
        }

        let mut ctx = vec![0.0f64; t_len * d];
        for h in 0..heads {
            let slope = match cfg.pe_kind {
                PeKind::Alibi => (2.0f64).powf(-8.0 * (h + 1) as f64 / heads as f64),
                _ => 0.0,
            };
            for i in 0..t_len {
                let lo = i.saturating_sub(window_size - 1);
                let mut logits = Vec::new();
                for j in lo..=i {
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q.data[i * d + h * dh + e] * k.data[j * d + h * dh + e];
                    }
                    let mut val = dot / (dh as f64).sqrt();
                    if cfg.pe_kind == PeKind::Alibi {
                        val -= slope * (i - j) as f64;
                    }
                    logits.push(val);
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
                for (off, lg) in logits.iter().enumerate() {
                    let p = (lg - max).exp() / denom;
                    let j = lo + off;
                    for e in 0..dh {
                        ctx[i * d + h * dh + e] += p * v.data[j * d + h * dh + e];
                    }
                }
            }
        }
        let ctx = Tensor64 { rows: t_len, cols: d, data: ctx };
        let attn_out = matmul64(&ctx, &wo);
        let mut x_mid = x;
        for (a, b) in x_mid.data.iter_mut().zip(attn_out.data) {
            *a += b;
        }

        let normed2 = rms_norm64(&x_mid, &ffn_norm, eps);
        let gate = matmul64(&normed2, &w_gate);
        let up = matmul64(&normed2, &w_up);
        let mut act = Tensor64 {
            rows: t_len,
            cols: cfg.ffn_dim,
            data: vec![0.0; t_len * cfg.ffn_dim],
        };
        for i in 0..act.data.len() {
            let g = gate.data[i];
            act.data[i] = g / (1.0 + (-g).exp()) * up.data[i];
        }
        let ffn_out = matmul64(&act, &w_down);
        let mut x_out = x_mid;
        for (a, b) in x_out.data.iter_mut().zip(ffn_out.data) {
            *a += b;
        }
        x = x_out;
    }

    let final_norm = tensor64(model, "final_norm");
    let fn_out = rms_norm64(&x, &final_norm, eps);
    let logits = match model.tensor("unembedding") {
        Some(_) => matmul64(&fn_out, &tensor64(model, "unembedding")),
        None => {
            // tied: logits[t][v] = fn[t] . emb[v]
            let mut out = vec![0.0f64; t_len * cfg.vocab];
            for t in 0..t_len {
                for vv in 0..cfg.vocab {
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += fn_out.data[t * d + e] * emb.data[vv * d + e];
                    }
                    out[t * cfg.vocab + vv] = dot;
                }
            }
            Tensor64 { rows: t_len, cols: cfg.vocab, data: out }
        }
    };

    let mut loss = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
        loss += denom.ln() - (row[target as usize] - max);
    }
    loss / targets.len() as f64
}

/// Mean of `oracle_sequence_loss` over windows.
pub fn oracle_batch_loss(model: &TransformerModel, windows: &[Vec<TokenId>]) -> f64 {
    windows.iter().map(|w| oracle_sequence_loss(model, w)).sum::<f64>() / windows.len() as f64
}

/// Cycled deterministic token sequence.
pub fn cycle_tokens(len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|i| ((i * 7 + 3) % vocab) as TokenId).collect()
}
