use pvlab::harness::synthetic_text;
use pvlab::model::*;
use std::time::Instant;

fn main() {
    let text = synthetic_text(3, 1 << 20);
    let tokens: Vec<TokenId> = text.bytes().map(|b| b as TokenId).collect();
    for (l, d, h, f, c, batch) in [
        (6usize, 64usize, 4usize, 256usize, 64usize, 16usize),
        (8, 64, 4, 256, 64, 16),
        (6, 48, 4, 192, 64, 16),
        (4, 64, 4, 256, 64, 16),
    ] {
        let cfg = ModelConfig {
            layers: l, heads: h, model_dim: d, ffn_dim: f, vocab: 256,
            context_window: c, pe_kind: PeKind::NoPe, attn_kind: AttnKind::Full,
            norm_eps: 1e-5, tied_embeddings: false,
        };
        let mut model = build_model(&cfg, 0).unwrap();
        let tc = TrainConfig { steps: 20, batch_size: batch, seq_len: c, lr: 1e-3, min_lr: 1e-4,
            warmup_steps: 5, weight_decay: 0.1, beta1: 0.9, beta2: 0.95, grad_clip: 1.0, seed: 0 };
        let t0 = Instant::now();
        let report = train(&mut model, &tokens, &tc).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let tok_per_step = (batch * c) as f64;
        println!("L{l} D{d} F{f} C{c} b{batch}: {:.3}s/step, {:.0} tok/s, loss {:.3} -> {:.3}",
                 dt / 20.0, 20.0 * tok_per_step / dt, report.losses[0], report.final_loss);
        // forward-only speed
        let probe: Vec<TokenId> = tokens[..4*c].to_vec();
        let t0 = Instant::now();
        for _ in 0..20 { let _ = model.forward(&probe, &[], CaptureFlags::none()).unwrap(); }
        let dt = t0.elapsed().as_secs_f64();
        println!("   forward 4C: {:.1} ms -> {:.0} tok/s", dt / 20.0 * 1e3, 20.0 * (4*c) as f64 / dt);
    }
}
