use super::*;
use crate::decompose::{collect_bank, decompose, SliceWindows, StreamRequest};
use crate::model::testutil::{cycle_tokens, tiny_config};
use crate::model::{build_model, CaptureFlags, TokenId};

fn arc_model(cfg: &crate::model::ModelConfig, seed: u64) -> Arc<TransformerModel> {
    Arc::new(build_model(cfg, seed).unwrap())
}

fn logits_of(model: &dyn LanguageModel, tokens: &[TokenId]) -> Vec<f32> {
    model
        .forward(tokens, &[], CaptureFlags::none())
        .unwrap()
        .logits
        .data()
        .to_vec()
}

#[test]
fn identity_lambda_is_bit_identical() {
    let cfg = tiny_config();
    let model = arc_model(&cfg, 3);
    let tokens = cycle_tokens(10, cfg.vocab);
    let base = logits_of(model.as_ref(), &tokens);
    let scaled = attention_scaling(model.clone(), 1.0).unwrap();
    assert_eq!(logits_of(&scaled, &tokens), base);
    let init = initial_scaling(model.clone(), 1.0, 4).unwrap();
    assert_eq!(logits_of(&init, &tokens), base);
}

#[test]
fn scaled_attention_matches_hand_softmax() {
    let mut cfg = tiny_config();
    cfg.layers = 1;
    let model = arc_model(&cfg, 9);
    let tokens = cycle_tokens(3, cfg.vocab);
    let lambda = 2.0f32;
    let wrapped = attention_scaling(model.clone(), lambda).unwrap();
    let trace = wrapped.forward(&tokens, &[], CaptureFlags::all()).unwrap();
    let qkv = &trace.qkv.as_ref().unwrap()[0];
    let dh = cfg.head_dim();
    for h in 0..cfg.heads {
        for i in 0..3 {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    lambda as f64 * crate::numerics::dot_f64(qkv.q[h].row(i), qkv.k[h].row(j))
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
            for (j, lg) in logits.iter().enumerate() {
                let want = (lg - max).exp() / denom;
                let got = trace.attention.as_ref().unwrap()[0][h].get(i, j) as f64;
                assert!((got - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn attention_scaling_equals_temperature_reciprocal() {
    // lambda-scaled logits are exactly a softmax temperature of 1/lambda:
    // recompute with logits / tau from the captured q/k
    let mut cfg = tiny_config();
    cfg.layers = 1;
    let model = arc_model(&cfg, 29);
    let tokens = cycle_tokens(6, cfg.vocab);
    let lambda = 1.4f32;
    let tau = 1.0 / lambda as f64;
    let wrapped = attention_scaling(model.clone(), lambda).unwrap();
    let trace = wrapped.forward(&tokens, &[], CaptureFlags::all()).unwrap();
    let qkv = &trace.qkv.as_ref().unwrap()[0];
    let dh = cfg.head_dim();
    for h in 0..cfg.heads {
        for i in 0..tokens.len() {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    crate::numerics::dot_f64(qkv.q[h].row(i), qkv.k[h].row(j))
                        / (dh as f64).sqrt()
                        / tau
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
            for (j, lg) in logits.iter().enumerate() {
                let want = (lg - max).exp() / denom;
                let got = trace.attention.as_ref().unwrap()[0][h].get(i, j) as f64;
                assert!((got - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn initial_scaling_only_touches_early_columns() {
    let mut cfg = tiny_config();
    cfg.layers = 1;
    let model = arc_model(&cfg, 9);
    let tokens = cycle_tokens(3, cfg.vocab);
    let lambda = 1.9f32;
    let wrapped = initial_scaling(model.clone(), lambda, 1).unwrap();
    let trace = wrapped.forward(&tokens, &[], CaptureFlags::all()).unwrap();
    let qkv = &trace.qkv.as_ref().unwrap()[0];
    let dh = cfg.head_dim();
    for h in 0..cfg.heads {
        let i = 2;
        let logits: Vec<f64> = (0..=i)
            .map(|j| {
                let base =
                    crate::numerics::dot_f64(qkv.q[h].row(i), qkv.k[h].row(j)) / (dh as f64).sqrt();
                if j < 1 {
                    base * lambda as f64
                } else {
                    base
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        for (j, lg) in logits.iter().enumerate() {
            let want = (lg - max).exp() / denom;
            let got = trace.attention.as_ref().unwrap()[0][h].get(i, j) as f64;
            assert!((got - want).abs() < 1e-6);
        }
    }
}

#[test]
fn dynamic_ntk_is_identity_within_context() {
    let mut cfg = tiny_config();
    cfg.pe_kind = crate::model::PeKind::rope();
    let model = arc_model(&cfg, 5);
    let tokens = cycle_tokens(cfg.context_window, cfg.vocab);
    let wrapped = dynamic_ntk(model.clone(), 2 * cfg.context_window).unwrap();
    assert_eq!(logits_of(&wrapped, &tokens), logits_of(model.as_ref(), &tokens));
    // and beyond the window it differs
    let long = cycle_tokens(cfg.context_window + 4, cfg.vocab);
    assert_ne!(logits_of(&wrapped, &long), logits_of(model.as_ref(), &long));
}

#[test]
fn dynamic_ntk_requires_rope() {
    let cfg = tiny_config();
    let model = arc_model(&cfg, 5);
    assert!(matches!(
        dynamic_ntk(model, 32),
        Err(ModelError::Capability(_))
    ));
}

/// Model whose hidden states depend on positions only: every embedding row is
/// identical, so all inputs produce the same states.
fn position_deterministic_model(cfg: &crate::model::ModelConfig, seed: u64) -> Arc<TransformerModel> {
    let mut model = build_model(cfg, seed).unwrap();
    let spec = model.specs().iter().find(|s| s.name == "embedding").unwrap().clone();
    let d = cfg.model_dim;
    let first: Vec<f32> = model.params()[spec.offset..spec.offset + d].to_vec();
    for row in 1..cfg.vocab {
        model.params_mut()[spec.offset + row * d..spec.offset + (row + 1) * d]
            .copy_from_slice(&first);
    }
    Arc::new(model)
}

fn layer_output_decomposition(
    model: &Arc<TransformerModel>,
    t_len: usize,
    layer: usize,
) -> DecompositionSet {
    let cfg = model.config();
    let tokens = cycle_tokens(4 * t_len, cfg.vocab);
    let req = [StreamRequest::mean_only(StreamId::LayerOutput { layer })];
    let banks = collect_bank(
        model.as_ref(),
        &SliceWindows { tokens: &tokens },
        2,
        t_len,
        &req,
        &[],
    )
    .unwrap();
    let mut set = DecompositionSet::new();
    set.insert(decompose(&banks[0], t_len).unwrap());
    set
}

#[test]
fn pvr_identity_on_position_deterministic_model_is_bit_exact() {
    let mut cfg = tiny_config();
    cfg.context_window = 12;
    let model = position_deterministic_model(&cfg, 17);
    let set = layer_output_decomposition(&model, cfg.context_window, 1);
    let wrapped = ExtensionSpec::PositionalVectorReplacement {
        layer: 1,
        r: 1.0,
        alpha: 1.0,
        initial_k: 4,
    }
    .build(model.clone(), Some(&set))
    .unwrap();
    let tokens = cycle_tokens(cfg.context_window, cfg.vocab);
    assert_eq!(logits_of(&wrapped, &tokens), logits_of(model.as_ref(), &tokens));
    assert_eq!(wrapped.max_supported_len(), Some(cfg.context_window));
}

#[test]
fn pvr_interpolates_linear_ramp_exactly() {
    // constructed p[t] = t * e1 over positions 5..=C: with r = 2 the affine
    // index map puts (5 + k/2) * e1 at new position 5 + k
    let mut cfg = tiny_config();
    cfg.context_window = 12;
    let c = cfg.context_window;
    let model = arc_model(&cfg, 1);
    let d = cfg.model_dim;
    let p = crate::numerics::Matrix::from_fn(c, d, |t, j| if j == 0 { (t + 1) as f32 } else { 0.0 });
    let dec = PositionalDecomposition::from_parts(
        StreamId::LayerOutput { layer: 2 },
        4,
        c,
        p.clone(),
        vec![0.0; d],
        p,
    );
    let wrapped =
        positional_vector_replacement(model, &dec, 2, 2.0, 1.0, 4).unwrap();
    let interp = wrapped.interpolated_bank().unwrap();
    assert_eq!(interp.rows(), 2 * (c - 4));
    // new position 5 + k (k from 0) holds value 5 + k * (c-5)/(2(c-4)-1)
    let src_span = (c - 5) as f64;
    let tgt_span = (2 * (c - 4) - 1) as f64;
    for k in 0..interp.rows() {
        let want = 5.0 + k as f64 * src_span / tgt_span;
        let got = interp.get(k, 0) as f64;
        assert!((got - want).abs() < 1e-5, "row {k}: {got} vs {want}");
        for j in 1..d {
            assert_eq!(interp.get(k, j), 0.0);
        }
    }
}

#[test]
fn pvr_rejects_sequences_beyond_supported_length() {
    let mut cfg = tiny_config();
    cfg.context_window = 12;
    let model = position_deterministic_model(&cfg, 17);
    let set = layer_output_decomposition(&model, cfg.context_window, 1);
    let wrapped = ExtensionSpec::PositionalVectorReplacement {
        layer: 1,
        r: 2.0,
        alpha: 1.0,
        initial_k: 4,
    }
    .build(model, Some(&set))
    .unwrap();
    let max = wrapped.max_supported_len().unwrap();
    assert_eq!(max, 4 + 2 * (12 - 4));
    let too_long = cycle_tokens(max + 1, cfg.vocab);
    assert!(matches!(
        wrapped.forward(&too_long, &[], CaptureFlags::none()),
        Err(ModelError::ExtensionExhausted { .. })
    ));
}

#[test]
fn awe_identity_parameters_are_bit_identical() {
    let mut cfg = tiny_config();
    cfg.attn_kind = AttnKind::Window { size: 4 };
    let model = arc_model(&cfg, 7);
    let tokens = cycle_tokens(10, cfg.vocab);
    let wrapped = attention_window_extension(model.clone(), 1.0, 1.0).unwrap();
    assert_eq!(logits_of(&wrapped, &tokens), logits_of(model.as_ref(), &tokens));
}

#[test]
fn awe_widens_window_and_matches_hand_softmax() {
    let mut cfg = tiny_config();
    cfg.layers = 1;
    cfg.attn_kind = AttnKind::Window { size: 2 };
    let model = arc_model(&cfg, 7);
    let tokens = cycle_tokens(5, cfg.vocab);
    let lambda = 1.3f32;
    let wrapped = attention_window_extension(model, 2.0, lambda).unwrap();
    let trace = wrapped.forward(&tokens, &[], CaptureFlags::all()).unwrap();
    let qkv = &trace.qkv.as_ref().unwrap()[0];
    let dh = cfg.head_dim();
    for h in 0..cfg.heads {
        let attn = &trace.attention.as_ref().unwrap()[0][h];
        // query 5 now sees keys {2,3,4,5}
        assert_eq!(attn.get(4, 0), 0.0);
        let logits: Vec<f64> = (1..=4)
            .map(|j| {
                lambda as f64 * crate::numerics::dot_f64(qkv.q[h].row(4), qkv.k[h].row(j))
                    / (dh as f64).sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        for (off, lg) in logits.iter().enumerate() {
            let want = (lg - max).exp() / denom;
            assert!((attn.get(4, 1 + off) as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn awe_lambda_preserves_argmax_key() {
    let mut cfg = tiny_config();
    cfg.attn_kind = AttnKind::Window { size: 3 };
    let model = arc_model(&cfg, 19);
    let tokens = cycle_tokens(12, cfg.vocab);
    let base = attention_window_extension(model.clone(), 2.0, 1.0).unwrap();
    let scaled = attention_window_extension(model, 2.0, 1.6).unwrap();
    let ta = base.forward(&tokens, &[], CaptureFlags::all()).unwrap();
    let tb = scaled.forward(&tokens, &[], CaptureFlags::all()).unwrap();
    let argmax = |row: &[f32]| -> usize {
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    for (la, lb) in ta.attention.unwrap().iter().zip(tb.attention.unwrap().iter()) {
        for (ha, hb) in la.iter().zip(lb) {
            for i in 0..tokens.len() {
                assert_eq!(argmax(ha.row(i)), argmax(hb.row(i)), "row {i}");
            }
        }
    }
}

#[test]
fn awe_requires_window_model() {
    let cfg = tiny_config();
    let model = arc_model(&cfg, 7);
    assert!(matches!(
        attention_window_extension(model, 2.0, 1.1),
        Err(ModelError::Capability(_))
    ));
}

#[test]
fn wrappers_compose_with_noop_interventions() {
    let mut cfg = tiny_config();
    cfg.attn_kind = AttnKind::Window { size: 4 };
    let model = arc_model(&cfg, 23);
    let wrapped = attention_window_extension(model, 2.0, 1.2).unwrap();
    let tokens = cycle_tokens(9, cfg.vocab);
    let noop = InterventionSpec {
        target: crate::model::InterventionTarget::AttentionValue,
        component: crate::model::Component::Whole,
        action: crate::model::InterventionAction::Remove,
        positions: 2..2,
        layers: 1..cfg.layers + 1,
        decomposition: None,
    };
    let a = wrapped.forward(&tokens, &[], CaptureFlags::none()).unwrap();
    let b = wrapped.forward(&tokens, &[noop], CaptureFlags::none()).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
}

#[test]
fn spec_invariants_are_validated() {
    assert!(ExtensionSpec::AttentionScaling { lambda: 0.9 }.validate().is_err());
    assert!(ExtensionSpec::PositionalVectorReplacement { layer: 1, r: 0.5, alpha: 1.0, initial_k: 4 }
        .validate()
        .is_err());
    assert!(ExtensionSpec::PositionalVectorReplacement { layer: 1, r: 2.0, alpha: 0.5, initial_k: 4 }
        .validate()
        .is_err());
    assert!(ExtensionSpec::AttentionWindowExtension { r: 2.0, lambda: 0.2 }.validate().is_err());
    assert!(ExtensionSpec::AttentionScaling { lambda: 1.2 }.validate().is_ok());
}

#[test]
fn single_candidate_sweep_equals_direct_pvr_ppl() {
    let mut cfg = tiny_config();
    cfg.context_window = 12;
    let model = position_deterministic_model(&cfg, 31);
    let set = layer_output_decomposition(&model, cfg.context_window, 2);
    let eval: Vec<Vec<TokenId>> = vec![cycle_tokens(16, cfg.vocab)];
    let (rows, best) =
        replacement_layer_sweep(&model, &set, &[2], 2.0, 1.0, 4, &eval).unwrap();
    assert_eq!(best, 2);
    let direct = ExtensionSpec::PositionalVectorReplacement {
        layer: 2,
        r: 2.0,
        alpha: 1.0,
        initial_k: 4,
    }
    .build(model, Some(&set))
    .unwrap();
    let want = crate::model::perplexity_over_samples(&direct, &eval, &[]).unwrap().ppl;
    assert_eq!(rows[0].1, want);
}

#[test]
fn ratio_per_layer_identity_is_one() {
    let mut cfg = tiny_config();
    cfg.context_window = 12;
    let model = arc_model(&cfg, 3);
    // decompositions over 2C with distinct synthetic vectors per position
    let d = cfg.model_dim;
    let t_len = 24;
    let mut set = DecompositionSet::new();
    for layer in 1..=2 {
        let p = crate::numerics::Matrix::from_fn(t_len, d, |t, j| {
            ((t * 31 + j * 7 + layer) % 13) as f32 + 0.5
        });
        set.insert(PositionalDecomposition::from_parts(
            StreamId::LayerOutput { layer },
            4,
            12,
            p.clone(),
            vec![0.0; d],
            p,
        ));
    }
    let rows = ratio_per_layer(&set, &set, &[1, 2], 12).unwrap();
    for (_, r) in rows {
        assert_eq!(r.ratio, 1.0);
    }
    let _ = model;
}

#[test]
fn ratio_per_layer_recovers_constructed_maps() {
    // layer 1 compressed by 2, layer 2 by 1.5 over c = 8, t = 16
    let (c, t_len) = (8usize, 16usize);
    let dim = t_len;
    let mut orig = DecompositionSet::new();
    let mut ext = DecompositionSet::new();
    for (layer, ratio) in [(1usize, 2.0f64), (2, 1.5)] {
        let p = crate::numerics::Matrix::from_fn(t_len, dim, |t, j| if t == j { 1.0 } else { 0.0 });
        orig.insert(PositionalDecomposition::from_parts(
            StreamId::LayerOutput { layer },
            4,
            c,
            p.clone(),
            vec![0.0; dim],
            p,
        ));
        let pe = crate::numerics::Matrix::from_fn(t_len, dim, |t, j| {
            let src = (((t + 1) as f64 / ratio).ceil() as usize).clamp(1, t_len) - 1;
            if src == j {
                1.0
            } else {
                0.0
            }
        });
        ext.insert(PositionalDecomposition::from_parts(
            StreamId::LayerOutput { layer },
            4,
            c,
            pe.clone(),
            vec![0.0; dim],
            pe,
        ));
    }
    let rows = ratio_per_layer(&orig, &ext, &[1, 2], c).unwrap();
    assert_eq!(rows[0].1.ratio, 2.0);
    assert_eq!(rows[1].1.ratio, 1.5);
}

#[test]
fn sweep_values_are_permutation_invariant() {
    let mut cfg = tiny_config();
    cfg.context_window = 12;
    let model = position_deterministic_model(&cfg, 31);
    let mut set = layer_output_decomposition(&model, cfg.context_window, 1);
    for dec_set in [layer_output_decomposition(&model, cfg.context_window, 2)] {
        for s in dec_set.streams().collect::<Vec<_>>() {
            set.insert(dec_set.get(&s).unwrap().clone());
        }
    }
    let eval: Vec<Vec<TokenId>> = vec![cycle_tokens(16, cfg.vocab)];
    let (fwd, _) = replacement_layer_sweep(&model, &set, &[1, 2], 2.0, 1.0, 4, &eval).unwrap();
    let (rev, _) = replacement_layer_sweep(&model, &set, &[2, 1], 2.0, 1.0, 4, &eval).unwrap();
    for (l, ppl) in &fwd {
        let other = rev.iter().find(|(rl, _)| rl == l).unwrap().1;
        assert_eq!(*ppl, other, "layer {l}");
    }
}

#[test]
fn scale_by_one_intervention_is_bitwise_noop() {
    let cfg = tiny_config();
    let model = arc_model(&cfg, 41);
    let tokens = cycle_tokens(10, cfg.vocab);
    let set = layer_output_decomposition(&model, 10, 1);
    let spec = InterventionSpec {
        target: crate::model::InterventionTarget::LayerOutput,
        component: crate::model::Component::PositionalVector,
        action: crate::model::InterventionAction::Scale(1.0),
        positions: 1..9,
        layers: 1..2,
        decomposition: Some(Arc::new(set)),
    };
    let clean = model.forward(&tokens, &[], CaptureFlags::none()).unwrap();
    let scaled = model.forward(&tokens, &[spec], CaptureFlags::none()).unwrap();
    assert_eq!(clean.logits.data(), scaled.logits.data());
}
