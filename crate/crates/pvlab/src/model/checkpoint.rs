//! `PVLAB1` checkpoint container: config header plus the flat weight buffer.

use super::{AttnKind, ModelConfig, ModelError, PeKind, Result, TransformerModel};
use crate::container::{read_container, write_container, TensorData, TensorEntry};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "PVLAB1";

fn fmt_err(offset: u64, message: impl Into<String>) -> ModelError {
    ModelError::Format { offset, message: message.into() }
}

pub(super) fn save(model: &TransformerModel, path: &Path) -> Result<()> {
    let cfg = model.config();
    let pe = match cfg.pe_kind {
        PeKind::NoPe => "nope".to_string(),
        PeKind::Rope { base } => format!("rope {base}"),
        PeKind::Alibi => "alibi".to_string(),
    };
    let attention = match cfg.attn_kind {
        AttnKind::Full => "full".to_string(),
        AttnKind::Window { size } => format!("window {size}"),
    };
    let header = vec![
        ("format".to_string(), "pvlab-checkpoint".to_string()),
        ("version".to_string(), "1".to_string()),
        ("layers".to_string(), cfg.layers.to_string()),
        ("heads".to_string(), cfg.heads.to_string()),
        ("model_dim".to_string(), cfg.model_dim.to_string()),
        ("ffn_dim".to_string(), cfg.ffn_dim.to_string()),
        ("vocab".to_string(), cfg.vocab.to_string()),
        ("context_window".to_string(), cfg.context_window.to_string()),
        ("pe".to_string(), pe),
        ("attention".to_string(), attention),
        ("norm_eps".to_string(), format!("{}", cfg.norm_eps)),
        ("tied_embeddings".to_string(), cfg.tied_embeddings.to_string()),
    ];
    let tensors: Vec<TensorEntry<'_>> = model
        .specs()
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            rows: s.rows,
            cols: s.cols,
            data: TensorData::F32(&model.params()[s.offset..s.offset + s.len()]),
        })
        .collect();
    write_container(path, CHECKPOINT_MAGIC, &header, &tensors)?;
    Ok(())
}

pub(super) fn load(path: &Path) -> Result<TransformerModel> {
    let parsed = read_container(path, CHECKPOINT_MAGIC)
        .map_err(|e| fmt_err(e.offset, e.message))?;
    let get = |key: &str| -> Result<&str> {
        parsed
            .header_value(key)
            .ok_or_else(|| fmt_err(0, format!("missing header key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| fmt_err(0, format!("bad integer for {key}")))
    };
    let pe_kind = match get("pe")? {
        "nope" => PeKind::NoPe,
        "alibi" => PeKind::Alibi,
        other => match other.strip_prefix("rope ") {
            Some(base) => PeKind::Rope {
                base: base.parse().map_err(|_| fmt_err(0, "bad rope base"))?,
            },
            None => return Err(fmt_err(0, format!("unknown pe kind {other}"))),
        },
    };
    let attn_kind = match get("attention")? {
        "full" => AttnKind::Full,
        other => match other.strip_prefix("window ") {
            Some(size) => AttnKind::Window {
                size: size.parse().map_err(|_| fmt_err(0, "bad window size"))?,
            },
            None => return Err(fmt_err(0, format!("unknown attention kind {other}"))),
        },
    };
    let config = ModelConfig {
        layers: parse_usize("layers")?,
        heads: parse_usize("heads")?,
        model_dim: parse_usize("model_dim")?,
        ffn_dim: parse_usize("ffn_dim")?,
        vocab: parse_usize("vocab")?,
        context_window: parse_usize("context_window")?,
        pe_kind,
        attn_kind,
        norm_eps: get("norm_eps")?
            .parse()
            .map_err(|_| fmt_err(0, "bad norm_eps"))?,
        tied_embeddings: get("tied_embeddings")?
            .parse()
            .map_err(|_| fmt_err(0, "bad tied_embeddings"))?,
    };
    config.validate().map_err(|e| fmt_err(0, e.to_string()))?;

    // the directory must match the config exactly — no partial models
    let expected = super::tensor_specs(&config);
    if parsed.tensors.len() != expected.len() {
        return Err(fmt_err(
            0,
            format!(
                "tensor directory has {} entries, config implies {}",
                parsed.tensors.len(),
                expected.len()
            ),
        ));
    }
    let total: usize = expected.iter().map(|s| s.len()).sum();
    let mut params = vec![0.0f32; total];
    for (want, got) in expected.iter().zip(parsed.tensors.iter()) {
        if want.name != got.name || want.rows != got.rows || want.cols != got.cols {
            return Err(fmt_err(
                got.offset as u64,
                format!(
                    "tensor {} is {}x{}, config implies {} {}x{}",
                    got.name, got.rows, got.cols, want.name, want.rows, want.cols
                ),
            ));
        }
        let data = parsed
            .tensor_f32(got)
            .map_err(|e| fmt_err(e.offset, e.message))?;
        params[want.offset..want.offset + want.len()].copy_from_slice(&data);
    }
    TransformerModel::from_parts(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{cycle_tokens, tiny_config};
    use crate::model::{build_model, CaptureFlags, LanguageModel};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pvlab-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = tiny_config();
        cfg.pe_kind = crate::model::PeKind::Rope { base: 12345.5 };
        cfg.attn_kind = crate::model::AttnKind::Window { size: 5 };
        let model = build_model(&cfg, 42).unwrap();
        let path = tmp("roundtrip.pvlab");
        model.save_checkpoint(&path).unwrap();
        let loaded = TransformerModel::load_checkpoint(&path).unwrap();
        assert_eq!(model.config(), loaded.config());
        assert_eq!(model.params(), loaded.params());

        let tokens = cycle_tokens(9, cfg.vocab);
        let a = model.forward(&tokens, &[], CaptureFlags::none()).unwrap();
        let b = loaded.forward(&tokens, &[], CaptureFlags::none()).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn flipped_magic_is_format_error() {
        let model = build_model(&tiny_config(), 1).unwrap();
        let path = tmp("magic.pvlab");
        model.save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            TransformerModel::load_checkpoint(&path),
            Err(ModelError::Format { .. })
        ));
    }

    #[test]
    fn header_payload_mismatch_is_format_error() {
        let model = build_model(&tiny_config(), 1).unwrap();
        let path = tmp("vocab.pvlab");
        model.save_checkpoint(&path).unwrap();
        // bump the declared vocab without touching the payload
        let bytes = std::fs::read(&path).unwrap();
        let text_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 1;
        let text = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
        let patched = text.replace("vocab: 11", "vocab: 12");
        let mut out = patched.into_bytes();
        out.extend_from_slice(&bytes[text_end..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(
            TransformerModel::load_checkpoint(&path),
            Err(ModelError::Format { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_format_error_with_offset() {
        let model = build_model(&tiny_config(), 1).unwrap();
        let path = tmp("trunc.pvlab");
        model.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        match TransformerModel::load_checkpoint(&path) {
            Err(ModelError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
