//! Training: cross-entropy next-token objective, explicit backward pass,
//! AdamW with warmup + cosine decay and global-norm gradient clipping.
//!
//! Gradients accumulate in f64 per sequence in batch order, so a run is
//! reproducible for a fixed seed regardless of worker threads.

use super::forward::{forward_pass, rope_rotate, AttnOverrides, CaptureFlags, TrainCache};
use super::intervention::ResolvedPlan;
use super::{ModelError, PeKind, Result, Tens, TokenId, TransformerModel};
use crate::numerics::{matmul_into_f32, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Sequence length per sample; the model trains on `seq_len + 1` windows.
    pub seq_len: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default(seq_len: usize) -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            seq_len,
            lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss per step (natural log).
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps.saturating_sub(cfg.warmup_steps)).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `out[i][j] += sum_t a[t][i] * b[t][j]` — the `A^T B` used for weight
/// grads. The per-sequence product runs in f32 (reduction depth is the
/// sequence length) and folds into the 64-bit batch accumulator once.
fn at_b_acc(a: &Matrix, b: &Matrix, out: &mut [f64]) {
    let prod = at_b(a, b);
    for (ov, &pv) in out.iter_mut().zip(prod.data()) {
        *ov += pv as f64;
    }
}

/// `A^T B` into a fresh f32 matrix.
fn at_b(a: &Matrix, b: &Matrix) -> Matrix {
    let at = a.transpose();
    let mut out = Matrix::zeros(a.cols(), b.cols());
    matmul_into_f32(at.data(), b.data(), a.cols(), a.rows(), b.cols(), out.data_mut());
    out
}

/// `A B^T`: `out[i][j] = a[i] . b[j]` with f32 SIMD-friendly accumulation.
fn a_bt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.cols());
    let k = a.cols();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = [0.0f32; 8];
            let chunks = k / 8;
            for c in 0..chunks {
                for l in 0..8 {
                    acc[l] += arow[c * 8 + l] * brow[c * 8 + l];
                }
            }
            let mut sum: f32 = acc.iter().sum();
            for l in chunks * 8..k {
                sum += arow[l] * brow[l];
            }
            *o = sum;
        }
    }
    out
}

/// RMS-norm backward: given d(normed) where `normed = (x*r) .* gain`,
/// accumulate into dx and d(gain).
fn rms_norm_backward(
    x: &Matrix,
    inv_rms: &[f32],
    gain: &[f32],
    d_normed: &Matrix,
    dx: &mut Matrix,
    d_gain: &mut [f64],
) {
    let d = x.cols();
    for t in 0..x.rows() {
        let r = inv_rms[t] as f64;
        let x_row = x.row(t);
        let dn_row = d_normed.row(t);
        let mut dot = 0.0f64;
        for j in 0..d {
            let dn_scaled = dn_row[j] as f64 * gain[j] as f64;
            dot += dn_scaled * x_row[j] as f64;
            d_gain[j] += dn_row[j] as f64 * x_row[j] as f64 * r;
        }
        let coeff = r * r * r * dot / d as f64;
        let dx_row = dx.row_mut(t);
        for j in 0..d {
            let dn_scaled = dn_row[j] as f64 * gain[j] as f64;
            dx_row[j] += (r * dn_scaled - coeff * x_row[j] as f64) as f32;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Grad buffer aligned with the flat parameter layout.
pub struct GradBuffer {
    pub data: Vec<f64>,
}

impl GradBuffer {
    fn zeros(n: usize) -> Self {
        GradBuffer { data: vec![0.0; n] }
    }

    fn slice_mut(&mut self, model: &TransformerModel, name: &str) -> &mut [f64] {
        let spec = model
            .specs()
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("missing tensor {name}"));
        &mut self.data[spec.offset..spec.offset + spec.len()]
    }
}

/// Loss of one sequence plus gradient accumulation into `grads`, scaled by
/// `loss_scale` (1 / (targets * batch) for a mean-of-means objective).
fn backward_sequence(
    model: &TransformerModel,
    inputs: &[TokenId],
    targets: &[TokenId],
    loss_scale: f64,
    grads: &mut GradBuffer,
) -> Result<f64> {
    let cfg = model.config().clone();
    let t_len = inputs.len();
    debug_assert_eq!(targets.len(), t_len);
    let plan = ResolvedPlan::empty(cfg.layers);
    let mut cache = TrainCache::empty();
    let trace = forward_pass(
        model,
        inputs,
        &plan,
        CaptureFlags::none(),
        &AttnOverrides::default(),
        Some(&mut cache),
    )?;

    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    // softmax + cross entropy
    let logits = &trace.logits;
    let mut d_logits = Matrix::zeros(t_len, cfg.vocab);
    let mut loss = 0.0f64;
    for t in 0..t_len {
        let row = logits.row(t);
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        let target = targets[t] as usize;
        loss += log_denom - (row[target] - max) as f64;
        let dl_row = d_logits.row_mut(t);
        for (j, o) in dl_row.iter_mut().enumerate() {
            let p = ((row[j] - max) as f64 - log_denom).exp();
            let grad = if j == target { p - 1.0 } else { p };
            *o = (grad * loss_scale) as f32;
        }
    }
    loss /= t_len as f64;

    // unembedding backward
    let mut d_x = match model.unembedding() {
        Some(u) => {
            at_b_acc(
                &cache.final_normed,
                &d_logits,
                grads.slice_mut(model, "unembedding"),
            );
            // d(final_normed)[t][k] = sum_v d_logits[t][v] * U[k][v]
            let u_mat = Matrix::from_vec_unchecked(u.rows, u.cols, u.data.to_vec());
            a_bt(&d_logits, &u_mat)
        }
        None => {
            // tied: logits = fn * E^T
            let emb = model.embedding();
            at_b_acc(&d_logits, &cache.final_normed, grads.slice_mut(model, "embedding"));
            let emb_mat = Matrix::from_vec_unchecked(emb.rows, emb.cols, emb.data.to_vec());
            a_b_plain(&d_logits, &emb_mat)
        }
    };

    // final norm backward
    let mut d_x_final = Matrix::zeros(t_len, d);
    rms_norm_backward(
        &cache.x_final,
        &cache.final_inv_rms,
        model.final_norm(),
        &d_x,
        &mut d_x_final,
        grads.slice_mut(model, "final_norm"),
    );
    d_x = d_x_final;

    // layers in reverse
    for l in (1..=cfg.layers).rev() {
        let lc = &cache.layers[l - 1];
        let lw = model.layer(l);

        // x_out = x_mid + act . w_down
        let mut d_x_mid = d_x.clone();
        let d_act = a_bt(&d_x, &tens_to_matrix(lw.w_down));
        at_b_acc(&lc.act, &d_x, grads.slice_mut(model, &format!("layers.{l}.w_down")));

        // act = silu(gate) . up
        let mut d_gate = Matrix::zeros(t_len, cfg.ffn_dim);
        let mut d_up = Matrix::zeros(t_len, cfg.ffn_dim);
        for t in 0..t_len {
            let (da, g_row, u_row) = (d_act.row(t), lc.gate.row(t), lc.up.row(t));
            let (dg_row, du_row) = (d_gate.row_mut(t), d_up.row_mut(t));
            for j in 0..cfg.ffn_dim {
                let g = g_row[j] as f64;
                let s = sigmoid(g);
                let silu = g * s;
                let dsilu = s * (1.0 + g * (1.0 - s));
                dg_row[j] = (da[j] as f64 * u_row[j] as f64 * dsilu) as f32;
                du_row[j] = (da[j] as f64 * silu) as f32;
            }
        }
        let mut d_normed2 = a_bt(&d_gate, &tens_to_matrix(lw.w_gate));
        let d_normed2_up = a_bt(&d_up, &tens_to_matrix(lw.w_up));
        crate::model::forward::add_assign(&mut d_normed2, &d_normed2_up);
        at_b_acc(&lc.normed2, &d_gate, grads.slice_mut(model, &format!("layers.{l}.w_gate")));
        at_b_acc(&lc.normed2, &d_up, grads.slice_mut(model, &format!("layers.{l}.w_up")));

        rms_norm_backward(
            &lc.x_mid,
            &lc.inv_rms2,
            lw.ffn_norm,
            &d_normed2,
            &mut d_x_mid,
            grads.slice_mut(model, &format!("layers.{l}.ffn_norm")),
        );

        // x_mid = x_in + ctx . wo
        let mut d_x_in = d_x_mid.clone();
        let d_ctx = a_bt(&d_x_mid, &tens_to_matrix(lw.wo));
        at_b_acc(&lc.ctx, &d_x_mid, grads.slice_mut(model, &format!("layers.{l}.wo")));

        // attention heads
        let rope_tables = match cfg.pe_kind {
            PeKind::Rope { base } => Some(super::forward::rope_tables(t_len, dh, base)),
            _ => None,
        };
        let mut d_q_all = Matrix::zeros(t_len, d);
        let mut d_k_all = Matrix::zeros(t_len, d);
        let mut d_v_all = Matrix::zeros(t_len, d);
        for h in 0..heads {
            let mut d_ctx_h = Matrix::zeros(t_len, dh);
            for t in 0..t_len {
                d_ctx_h
                    .row_mut(t)
                    .copy_from_slice(&d_ctx.row(t)[h * dh..(h + 1) * dh]);
            }
            let probs = &lc.probs[h];
            let d_probs = a_bt(&d_ctx_h, &lc.v[h]);
            let d_v_h = at_b(probs, &d_ctx_h);

            // softmax backward per row, confined to the visible span
            let mut d_scores = Matrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let p_row = probs.row(i);
                let dp_row = d_probs.row(i);
                let mut dot = 0.0f64;
                for j in 0..=i {
                    dot += p_row[j] as f64 * dp_row[j] as f64;
                }
                let ds_row = d_scores.row_mut(i);
                for j in 0..=i {
                    ds_row[j] = ((p_row[j] as f64 * (dp_row[j] as f64 - dot)) * inv_sqrt_dh) as f32;
                }
            }

            let mut d_q_h = a_b_plain(&d_scores, &lc.k_rot[h]);
            let mut d_k_h = at_b(&d_scores, &lc.q_rot[h]);
            if let Some((cos, sin)) = &rope_tables {
                rope_rotate(&mut d_q_h, cos, sin, -1.0);
                rope_rotate(&mut d_k_h, cos, sin, -1.0);
            }
            for t in 0..t_len {
                d_q_all.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(d_q_h.row(t));
                d_k_all.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(d_k_h.row(t));
                d_v_all.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(d_v_h.row(t));
            }
        }

        let mut d_normed1 = a_bt(&d_q_all, &tens_to_matrix(lw.wq));
        let dk_contrib = a_bt(&d_k_all, &tens_to_matrix(lw.wk));
        let dv_contrib = a_bt(&d_v_all, &tens_to_matrix(lw.wv));
        crate::model::forward::add_assign(&mut d_normed1, &dk_contrib);
        crate::model::forward::add_assign(&mut d_normed1, &dv_contrib);
        at_b_acc(&lc.normed1, &d_q_all, grads.slice_mut(model, &format!("layers.{l}.wq")));
        at_b_acc(&lc.normed1, &d_k_all, grads.slice_mut(model, &format!("layers.{l}.wk")));
        at_b_acc(&lc.normed1, &d_v_all, grads.slice_mut(model, &format!("layers.{l}.wv")));

        rms_norm_backward(
            &lc.x_in,
            &lc.inv_rms1,
            lw.attn_norm,
            &d_normed1,
            &mut d_x_in,
            grads.slice_mut(model, &format!("layers.{l}.attn_norm")),
        );

        d_x = d_x_in;
    }

    // embedding scatter
    {
        let emb_grad = grads.slice_mut(model, "embedding");
        for (t, &tok) in inputs.iter().enumerate() {
            let row = &mut emb_grad[tok as usize * d..(tok as usize + 1) * d];
            for (g, &v) in row.iter_mut().zip(d_x.row(t)) {
                *g += v as f64;
            }
        }
    }

    Ok(loss)
}

fn tens_to_matrix(t: Tens<'_>) -> Matrix {
    Matrix::from_vec_unchecked(t.rows, t.cols, t.data.to_vec())
}

fn a_b_plain(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    matmul_into_f32(a.data(), b.data(), a.rows(), a.cols(), b.cols(), out.data_mut());
    out
}

/// Mean loss and full gradient over a fixed batch of (seq_len+1)-token
/// windows. Exposed for gradient checking.
pub fn batch_loss_and_grads(
    model: &TransformerModel,
    windows: &[Vec<TokenId>],
) -> Result<(f64, GradBuffer)> {
    let mut grads = GradBuffer::zeros(model.params().len());
    let mut loss = 0.0;
    let scale = 1.0 / (windows.len() as f64 * (windows[0].len() - 1) as f64);
    for w in windows {
        let inputs = &w[..w.len() - 1];
        let targets = &w[1..];
        loss += backward_sequence(model, inputs, targets, scale, &mut grads)?;
    }
    Ok((loss / windows.len() as f64, grads))
}

/// Mean loss over a fixed batch, forward only. Used by finite differences.
pub fn batch_loss(model: &TransformerModel, windows: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0f64;
    for w in windows {
        let inputs = &w[..w.len() - 1];
        let targets = &w[1..];
        let trace = forward_pass(
            model,
            inputs,
            &ResolvedPlan::empty(model.config().layers),
            CaptureFlags::none(),
            &AttnOverrides::default(),
            None,
        )?;
        let mut loss = 0.0f64;
        for (t, &target) in targets.iter().enumerate() {
            let row = trace.logits.row(t);
            let mut max = f32::NEG_INFINITY;
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            loss += denom.ln() - (row[target as usize] - max) as f64;
        }
        total += loss / targets.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Train in place. Windows are sampled uniformly (with replacement) from the
/// token stream with the config seed.
pub fn train(
    model: &mut TransformerModel,
    tokens: &[TokenId],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if tokens.len() < cfg.seq_len + 1 {
        return Err(ModelError::Training {
            step: 0,
            message: format!(
                "corpus of {} tokens cannot yield a length-{} window",
                tokens.len(),
                cfg.seq_len + 1
            ),
        });
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Config("steps and batch_size must be > 0".into()));
    }
    let n_params = model.params().len();
    let mut adam_m = vec![0.0f64; n_params];
    let mut adam_v = vec![0.0f64; n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    // decay mask: norm gains are not decayed
    let decay_mask: Vec<bool> = {
        let mut mask = vec![true; n_params];
        for s in model.specs() {
            if s.name.ends_with("norm") {
                mask[s.offset..s.offset + s.len()].fill(false);
            }
        }
        mask
    };

    let max_start = tokens.len() - cfg.seq_len - 1;
    for step in 1..=cfg.steps {
        let windows: Vec<Vec<TokenId>> = (0..cfg.batch_size)
            .map(|_| {
                let start = rng.random_range(0..=max_start);
                tokens[start..start + cfg.seq_len + 1].to_vec()
            })
            .collect();
        let (loss, grads) = batch_loss_and_grads(model, &windows)?;
        if !loss.is_finite() {
            return Err(ModelError::Training {
                step,
                message: format!("loss became {loss}"),
            });
        }
        losses.push(loss);

        // clip by global norm
        let norm: f64 = grads.data.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip_scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };

        let lr = lr_at(cfg, step);
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        let params = model.params_mut();
        for i in 0..n_params {
            let g = grads.data[i] * clip_scale;
            adam_m[i] = cfg.beta1 * adam_m[i] + (1.0 - cfg.beta1) * g;
            adam_v[i] = cfg.beta2 * adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = adam_m[i] / bc1;
            let v_hat = adam_v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + 1e-8);
            if decay_mask[i] {
                update += cfg.weight_decay * params[i] as f64;
            }
            params[i] = (params[i] as f64 - lr * update) as f32;
        }
    }

    let final_loss = *losses.last().unwrap();
    Ok(TrainReport { losses, final_loss })
}
