//! Tokenizers: byte-level (vocab 256) and greedy longest-match over a fixed
//! BPE-style vocabulary loaded from a file.

use super::{HarnessError, Result};
use crate::model::TokenId;
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub enum Tokenizer {
    /// One token per byte; encode/decode is the identity on any input.
    ByteLevel,
    /// Greedy longest-match against a fixed vocabulary that includes every
    /// single byte, so encoding never fails. `bos` is an optional special id
    /// callers may prepend to sequences; encoding never emits it.
    GreedyBpe {
        vocab: Vec<Vec<u8>>,
        lookup: HashMap<Vec<u8>, TokenId>,
        max_len: usize,
        bos: Option<TokenId>,
    },
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        Tokenizer::ByteLevel
    }

    /// The optional beginning-of-sequence id (byte-level has none).
    pub fn bos_id(&self) -> Option<TokenId> {
        match self {
            Tokenizer::ByteLevel => None,
            Tokenizer::GreedyBpe { bos, .. } => *bos,
        }
    }

    pub fn with_bos(mut self, id: TokenId) -> Result<Self> {
        match &mut self {
            Tokenizer::ByteLevel => Err(HarnessError::Validation(
                "byte-level vocabulary has no free id for BOS".into(),
            )),
            Tokenizer::GreedyBpe { vocab, bos, .. } => {
                if id as usize >= vocab.len() {
                    return Err(HarnessError::Validation(format!(
                        "BOS id {id} outside vocab {}",
                        vocab.len()
                    )));
                }
                *bos = Some(id);
                Ok(self)
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::ByteLevel => 256,
            Tokenizer::GreedyBpe { vocab, .. } => vocab.len(),
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        match self {
            Tokenizer::ByteLevel => bytes.iter().map(|b| *b as TokenId).collect(),
            Tokenizer::GreedyBpe { lookup, max_len, .. } => {
                let mut out = Vec::with_capacity(bytes.len() / 2);
                let mut pos = 0usize;
                while pos < bytes.len() {
                    let top = (*max_len).min(bytes.len() - pos);
                    let mut matched = 1usize;
                    let mut id = bytes[pos] as TokenId;
                    for len in (1..=top).rev() {
                        if let Some(&tok) = lookup.get(&bytes[pos..pos + len]) {
                            matched = len;
                            id = tok;
                            break;
                        }
                    }
                    out.push(id);
                    pos += matched;
                }
                out
            }
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let v = self.vocab_size() as TokenId;
        let mut out = Vec::new();
        for &id in ids {
            if id >= v {
                return Err(HarnessError::Validation(format!(
                    "token id {id} outside vocab {v}"
                )));
            }
            match self {
                Tokenizer::ByteLevel => out.push(id as u8),
                Tokenizer::GreedyBpe { vocab, .. } => {
                    out.extend_from_slice(&vocab[id as usize])
                }
            }
        }
        Ok(out)
    }

    fn from_vocab(vocab: Vec<Vec<u8>>) -> Result<Self> {
        for b in 0u16..256 {
            if !vocab.iter().any(|t| t.as_slice() == [b as u8]) {
                return Err(HarnessError::Validation(format!(
                    "BPE vocab misses single byte {b}; encoding could fail"
                )));
            }
        }
        let max_len = vocab.iter().map(Vec::len).max().unwrap_or(1);
        let lookup = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Ok(Tokenizer::GreedyBpe { vocab, lookup, max_len, bos: None })
    }

    /// Vocab file: one token per line, backslash escapes for newline, tab,
    /// backslash and arbitrary bytes (`\n`, `\t`, `\\`, `\xNN`).
    pub fn load_bpe(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut vocab = Vec::new();
        for (i, line) in text.lines().enumerate() {
            vocab.push(unescape(line).map_err(|e| {
                HarnessError::Validation(format!("{}:{}: {e}", path.display(), i + 1))
            })?);
        }
        Tokenizer::from_vocab(vocab)
    }

    pub fn save_bpe(vocab: &[Vec<u8>], path: &Path) -> Result<()> {
        let mut text = String::new();
        for tok in vocab {
            text.push_str(&escape(tok));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        match b {
            b'\n' => out.push_str("\\n"),
            b'\t' => out.push_str("\\t"),
            b'\\' => out.push_str("\\\\"),
            0x20..=0x7e => out.push(b as char),
            _ => out.push_str(&format!("\\x{b:02x}")),
        }
    }
    out
}

fn unescape(line: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let mut chars = line.bytes().peekable();
    while let Some(b) = chars.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match chars.next() {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hi = chars.next().ok_or("truncated \\x escape")?;
                let lo = chars.next().ok_or("truncated \\x escape")?;
                let hex = [hi, lo];
                let s = std::str::from_utf8(&hex).map_err(|_| "bad \\x escape")?;
                out.push(u8::from_str_radix(s, 16).map_err(|_| "bad \\x escape")?);
            }
            other => return Err(format!("bad escape {other:?}")),
        }
    }
    Ok(out)
}

/// Train a greedy-BPE vocabulary by iterative pair merging over a byte
/// sample. The result always contains the 256 single bytes first.
pub fn build_bpe_vocab(sample: &[u8], target_vocab: usize) -> Vec<Vec<u8>> {
    let mut vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
    if target_vocab <= 256 {
        return vocab;
    }
    let mut seq: Vec<u32> = sample.iter().map(|b| *b as u32).collect();
    while vocab.len() < target_vocab {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
        // deterministic argmax: highest count, then smallest pair
        let Some((&pair, &count)) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        else {
            break;
        };
        if count < 2 {
            break;
        }
        let new_id = vocab.len() as u32;
        let mut merged = Vec::with_capacity(vocab[pair.0 as usize].len() + vocab[pair.1 as usize].len());
        merged.extend_from_slice(&vocab[pair.0 as usize]);
        merged.extend_from_slice(&vocab[pair.1 as usize]);
        vocab.push(merged);
        let mut out = Vec::with_capacity(seq.len());
        let mut i = 0;
        while i < seq.len() {
            if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
                out.push(new_id);
                i += 2;
            } else {
                out.push(seq[i]);
                i += 1;
            }
        }
        seq = out;
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_level_is_identity_on_ascii() {
        let t = Tokenizer::byte_level();
        let ids = t.encode(b"abc");
        assert_eq!(ids, vec![97, 98, 99]);
        assert_eq!(t.decode(&ids).unwrap(), b"abc");
    }

    #[test]
    fn byte_level_round_trips_arbitrary_utf8() {
        let t = Tokenizer::byte_level();
        let text = "żółć — 模型 🤖\n\ttab";
        let ids = t.encode(text.as_bytes());
        assert_eq!(t.decode(&ids).unwrap(), text.as_bytes());
    }

    #[test]
    fn decode_rejects_out_of_vocab() {
        let t = Tokenizer::byte_level();
        assert!(t.decode(&[256]).is_err());
    }

    #[test]
    fn bpe_vocab_round_trips_through_file() {
        let sample = b"the cat sat on the mat, the cat sat on the mat.";
        let vocab = build_bpe_vocab(sample, 280);
        assert!(vocab.len() > 256);
        let dir = std::env::temp_dir().join("pvlab-tok-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        Tokenizer::save_bpe(&vocab, &path).unwrap();
        let tok = Tokenizer::load_bpe(&path).unwrap();
        assert_eq!(tok.vocab_size(), vocab.len());
        let ids = tok.encode(sample);
        assert!(ids.len() < sample.len(), "merges should compress");
        assert_eq!(tok.decode(&ids).unwrap(), sample);
    }

    #[test]
    fn greedy_encoding_prefers_longest_match() {
        let mut vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        vocab.push(b"ab".to_vec());
        vocab.push(b"abc".to_vec());
        let ids = {
            let t = Tokenizer::from_vocab(vocab.clone()).unwrap();
            t.encode(b"abcab")
        };
        assert_eq!(ids, vec![257, 256]);
    }

    #[test]
    fn bos_id_is_optional_and_validated() {
        let vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        let t = Tokenizer::from_vocab(vocab).unwrap();
        assert_eq!(t.bos_id(), None);
        let t = t.with_bos(32).unwrap();
        assert_eq!(t.bos_id(), Some(32));
        assert!(t.with_bos(4096).is_err());
        assert!(Tokenizer::byte_level().with_bos(0).is_err());
    }

    #[test]
    fn vocab_missing_bytes_is_rejected() {
        let vocab: Vec<Vec<u8>> = (0u16..255).map(|b| vec![b as u8]).collect();
        assert!(Tokenizer::from_vocab(vocab).is_err());
    }
}
