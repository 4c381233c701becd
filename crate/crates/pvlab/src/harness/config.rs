//! Run configuration: a flat sectioned key-value text format (INI-like),
//! chosen for diff-friendliness and zero-dependency parsing.
//!
//! ```text
//! [model]
//! layers = 6
//! pe = nope            # nope | rope | rope:<base> | alibi
//! attention = window:16
//!
//! [variant.window]     # optional named variants override pe/attention
//! attention = window:16
//!
//! [experiments]        # repeated keys accumulate
//! analysis = distinct-count model=window
//! extend = pvr model=nope layer=3 r=2 alpha=1.1 eval_len=128
//! ```
//!
//! `#` starts a comment; whitespace around keys and values is trimmed; keys
//! may repeat (values accumulate in order). Seeds are explicit — there are no
//! wall-clock defaults anywhere.

use super::{HarnessError, Result};
use crate::model::{AttnKind, ModelConfig, PeKind, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Raw parsed file: section -> ordered (key, value) pairs.
#[derive(Debug, Clone, Default)]
pub struct IniDoc {
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

impl IniDoc {
    pub fn parse(text: &str) -> Result<IniDoc> {
        let mut doc = IniDoc::default();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    HarnessError::Validation(format!("line {}: unterminated section", lineno + 1))
                })?;
                current = name.trim().to_string();
                doc.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Validation(format!("line {}: expected key = value", lineno + 1))
            })?;
            if current.is_empty() {
                return Err(HarnessError::Validation(format!(
                    "line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            doc.sections
                .get_mut(&current)
                .unwrap()
                .push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)?
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, section: &str, key: &str) -> Vec<&str> {
        self.sections
            .get(section)
            .map(|pairs| {
                pairs
                    .iter()
                    .filter(|(k, _)| k == key)
                    .map(|(_, v)| v.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerSpec {
    ByteLevel,
    GreedyBpe { vocab_file: PathBuf },
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub corpus_paths: Vec<PathBuf>,
    pub tokenizer: TokenizerSpec,
    pub train_split: f64,
    pub sampler_seed: u64,
    pub bank_samples: usize,
    /// Length of bank windows (typically several context windows).
    pub bank_len: usize,
    /// Held-out evaluation windows per PPL measurement.
    pub eval_samples: usize,
}

/// One experiment line from the `[experiments]` section.
#[derive(Debug, Clone)]
pub struct ExperimentEntry {
    /// `analysis` or `extend`.
    pub kind: String,
    /// First word of the value, e.g. `pca` or `pvr`.
    pub name: String,
    /// Remaining `key=value` parameters.
    pub params: BTreeMap<String, String>,
}

impl ExperimentEntry {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn param_or(&self, key: &str, default: &str) -> String {
        self.param(key).unwrap_or(default).to_string()
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Named model variants (pe/attention overrides of the base config).
    pub variants: Vec<(String, ModelConfig)>,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub experiments: Vec<ExperimentEntry>,
    pub out_dir: PathBuf,
}

fn parse_num<T: std::str::FromStr>(doc: &IniDoc, section: &str, key: &str, default: T) -> Result<T> {
    match doc.get(section, key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| {
            HarnessError::Validation(format!("[{section}] {key} = {v}: cannot parse"))
        }),
    }
}

fn require<'a>(doc: &'a IniDoc, section: &str, key: &str) -> Result<&'a str> {
    doc.get(section, key).ok_or_else(|| {
        HarnessError::Validation(format!("missing required [{section}] {key}"))
    })
}

pub fn parse_pe(value: &str) -> Result<PeKind> {
    match value {
        "nope" => Ok(PeKind::NoPe),
        "alibi" => Ok(PeKind::Alibi),
        "rope" => Ok(PeKind::rope()),
        other => match other.strip_prefix("rope:") {
            Some(base) => Ok(PeKind::Rope {
                base: base
                    .parse()
                    .map_err(|_| HarnessError::Validation(format!("bad rope base {base}")))?,
            }),
            None => Err(HarnessError::Validation(format!("unknown pe kind {other}"))),
        },
    }
}

pub fn parse_attention(value: &str) -> Result<AttnKind> {
    match value {
        "full" => Ok(AttnKind::Full),
        other => match other.strip_prefix("window:") {
            Some(size) => Ok(AttnKind::Window {
                size: size
                    .parse()
                    .map_err(|_| HarnessError::Validation(format!("bad window size {size}")))?,
            }),
            None => Err(HarnessError::Validation(format!(
                "unknown attention kind {other}"
            ))),
        },
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parse and validate. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let doc = IniDoc::parse(text)?;

        let mut model = ModelConfig {
            layers: parse_num(&doc, "model", "layers", 8)?,
            heads: parse_num(&doc, "model", "heads", 8)?,
            model_dim: parse_num(&doc, "model", "model_dim", 256)?,
            ffn_dim: parse_num(&doc, "model", "ffn_dim", 1024)?,
            vocab: parse_num(&doc, "model", "vocab", 256)?,
            context_window: parse_num(&doc, "model", "context_window", 256)?,
            pe_kind: parse_pe(doc.get("model", "pe").unwrap_or("nope"))?,
            attn_kind: parse_attention(doc.get("model", "attention").unwrap_or("full"))?,
            norm_eps: parse_num(&doc, "model", "norm_eps", 1e-5f32)?,
            tied_embeddings: parse_num(&doc, "model", "tied_embeddings", false)?,
        };

        // variants: sections named variant.<name> overriding pe/attention
        let mut variants = Vec::new();
        for (section, _) in doc.sections.iter() {
            let Some(name) = section.strip_prefix("variant.") else {
                continue;
            };
            let mut cfg = model.clone();
            if let Some(pe) = doc.get(section, "pe") {
                cfg.pe_kind = parse_pe(pe)?;
            }
            if let Some(attn) = doc.get(section, "attention") {
                cfg.attn_kind = parse_attention(attn)?;
            }
            cfg.validate()
                .map_err(|e| HarnessError::Validation(format!("[{section}]: {e}")))?;
            variants.push((name.to_string(), cfg));
        }
        if variants.is_empty() {
            model
                .validate()
                .map_err(|e| HarnessError::Validation(format!("[model]: {e}")))?;
            variants.push(("model".to_string(), model.clone()));
        } else {
            // base still validated so derived numbers are sane
            model.validate().ok();
            model = variants[0].1.clone();
        }

        let seq_len = parse_num(&doc, "training", "seq_len", model.context_window)?;
        let training = TrainConfig {
            steps: parse_num(&doc, "training", "steps", 2000)?,
            batch_size: parse_num(&doc, "training", "batch_size", 16)?,
            seq_len,
            lr: parse_num(&doc, "training", "lr", 1e-3)?,
            min_lr: parse_num(&doc, "training", "min_lr", 1e-4)?,
            warmup_steps: parse_num(&doc, "training", "warmup_steps", 100)?,
            weight_decay: parse_num(&doc, "training", "weight_decay", 0.1)?,
            beta1: parse_num(&doc, "training", "beta1", 0.9)?,
            beta2: parse_num(&doc, "training", "beta2", 0.95)?,
            grad_clip: parse_num(&doc, "training", "grad_clip", 1.0)?,
            seed: require(&doc, "training", "seed")?.parse().map_err(|_| {
                HarnessError::Validation("[training] seed must be an integer".into())
            })?,
        };

        let corpus_paths: Vec<PathBuf> = require(&doc, "data", "corpus")?
            .split(',')
            .map(|p| {
                let p = Path::new(p.trim());
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base_dir.join(p)
                }
            })
            .collect();
        for p in &corpus_paths {
            if !p.exists() {
                return Err(HarnessError::Validation(format!(
                    "corpus path {} does not exist",
                    p.display()
                )));
            }
        }
        let tokenizer = match doc.get("data", "tokenizer").unwrap_or("byte") {
            "byte" => TokenizerSpec::ByteLevel,
            other => match other.strip_prefix("bpe:") {
                Some(f) => {
                    let path = if Path::new(f).is_absolute() {
                        PathBuf::from(f)
                    } else {
                        base_dir.join(f)
                    };
                    if !path.exists() {
                        return Err(HarnessError::Validation(format!(
                            "tokenizer vocab {} does not exist",
                            path.display()
                        )));
                    }
                    TokenizerSpec::GreedyBpe { vocab_file: path }
                }
                None => {
                    return Err(HarnessError::Validation(format!(
                        "unknown tokenizer {other}"
                    )))
                }
            },
        };
        let data = DataConfig {
            corpus_paths,
            tokenizer,
            train_split: parse_num(&doc, "data", "train_split", 0.95)?,
            sampler_seed: require(&doc, "data", "sampler_seed")?.parse().map_err(|_| {
                HarnessError::Validation("[data] sampler_seed must be an integer".into())
            })?,
            bank_samples: parse_num(&doc, "data", "bank_samples", 256)?,
            bank_len: parse_num(&doc, "data", "bank_len", 4 * model.context_window)?,
            eval_samples: parse_num(&doc, "data", "eval_samples", 64)?,
        };
        if !(data.train_split > 0.0 && data.train_split < 1.0) {
            return Err(HarnessError::Validation(
                "[data] train_split must be in (0, 1)".into(),
            ));
        }

        let mut experiments = Vec::new();
        for kind in ["analysis", "extend"] {
            for value in doc.get_all("experiments", kind) {
                let mut words = value.split_whitespace();
                let name = words
                    .next()
                    .ok_or_else(|| {
                        HarnessError::Validation(format!("empty {kind} experiment entry"))
                    })?
                    .to_string();
                let mut params = BTreeMap::new();
                for w in words {
                    let (k, v) = w.split_once('=').ok_or_else(|| {
                        HarnessError::Validation(format!(
                            "experiment parameter {w} is not key=value"
                        ))
                    })?;
                    params.insert(k.to_string(), v.to_string());
                }
                experiments.push(ExperimentEntry { kind: kind.to_string(), name, params });
            }
        }

        let out_dir = {
            let p = Path::new(doc.get("output", "dir").unwrap_or("runs/out"));
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };

        Ok(RunConfig { model, variants, training, data, experiments, out_dir })
    }

    pub fn variant(&self, name: &str) -> Option<&ModelConfig> {
        self.variants
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg(dir: &Path) -> String {
        std::fs::write(dir.join("c.txt"), "hello world, this is a corpus").unwrap();
        format!(
            "[model]\nlayers = 2\nheads = 2\nmodel_dim = 8\nffn_dim = 16\nvocab = 256\ncontext_window = 16\n\n\
             [training]\nsteps = 5\nseed = 3\n\n\
             [data]\ncorpus = {}\nsampler_seed = 9\n\n\
             [experiments]\nanalysis = pca model=model layer=1\nanalysis = distinct-count model=model\nextend = pvr model=model layer=1 r=2 alpha=1.1\n\n\
             [output]\ndir = out\n",
            dir.join("c.txt").display()
        )
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("pvlab-config-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn parses_a_full_config() {
        let dir = tmp("full");
        let cfg = RunConfig::parse(&base_cfg(&dir), &dir).unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.training.steps, 5);
        assert_eq!(cfg.experiments.len(), 3);
        assert_eq!(cfg.experiments[0].name, "pca");
        assert_eq!(cfg.experiments[2].kind, "extend");
        assert_eq!(cfg.experiments[2].param("r"), Some("2"));
        assert_eq!(cfg.variants.len(), 1);
    }

    #[test]
    fn variants_override_pe_and_attention() {
        let dir = tmp("variants");
        let text = base_cfg(&dir)
            + "\n[variant.nope]\npe = nope\n\n[variant.window]\npe = nope\nattention = window:4\n\n[variant.rope]\npe = rope:500\n";
        let cfg = RunConfig::parse(&text, &dir).unwrap();
        assert_eq!(cfg.variants.len(), 3);
        let w = cfg.variant("window").unwrap();
        assert_eq!(w.attn_kind, AttnKind::Window { size: 4 });
        let r = cfg.variant("rope").unwrap();
        assert_eq!(r.pe_kind, PeKind::Rope { base: 500.0 });
    }

    #[test]
    fn missing_seed_is_validation_error() {
        let dir = tmp("noseed");
        let text = base_cfg(&dir).replace("seed = 3\n", "");
        assert!(matches!(
            RunConfig::parse(&text, &dir),
            Err(HarnessError::Validation(_))
        ));
    }

    #[test]
    fn missing_corpus_path_is_validation_error() {
        let dir = tmp("nocorpus");
        let text = base_cfg(&dir).replace("c.txt", "missing.txt");
        let err = RunConfig::parse(&text, &dir).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn comments_and_whitespace_are_tolerated() {
        let dir = tmp("comments");
        let text = base_cfg(&dir).replace("layers = 2", "layers = 2   # desk scale");
        let cfg = RunConfig::parse(&text, &dir).unwrap();
        assert_eq!(cfg.model.layers, 2);
    }

    #[test]
    fn bad_experiment_param_is_validation_error() {
        let dir = tmp("badparam");
        let text = base_cfg(&dir).replace("extend = pvr model=model layer=1 r=2 alpha=1.1",
                                          "extend = pvr oops");
        assert!(RunConfig::parse(&text, &dir).is_err());
    }
}
