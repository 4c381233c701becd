//! Experiment orchestration: train, bank, decompose, analyze, extend-eval and
//! report stages with content-hash caching. Identical configs and seeds
//! reproduce every emitted byte; a cache hit is taken only when the hash of
//! every upstream artifact matches.

use super::cache::{cache_dir, content_hash, CacheKey};
use super::config::{ExperimentEntry, RunConfig, TokenizerSpec};
use super::corpus::{disjoint_windows, ingest_corpus, TokenStream, WindowSampler};
use super::report::{fmt_f64, CsvWriter, ExperimentReport};
use super::svg;
use super::tokenizer::Tokenizer;
use super::{HarnessError, Result};
use crate::analysis::{
    ablation_study, attention_component_maps, distinct_count, effective_interpolation_ratio,
    extrapolation_curves, ood_logit_similarity, pca_positions, synthetic_preference_experiment,
    AblationConfig, AblationVariant, MapSetting, RatioFlag, SyntheticConfig, SyntheticPe,
};
use crate::decompose::{
    collect_bank, decompose, DecompositionSet, StreamId, StreamRequest,
};
use crate::extend::ExtensionSpec;
use crate::model::{
    build_model, perplexity_over_samples, train, AttnKind, LanguageModel, ModelConfig, PeKind,
    TokenId, TransformerModel,
};
use std::path::PathBuf;
use std::sync::Arc;

pub struct Pipeline {
    config: RunConfig,
    cache: PathBuf,
    tokenizer: Tokenizer,
    stream: TokenStream,
    corpus_hash: String,
}

fn config_fingerprint(cfg: &ModelConfig) -> String {
    format!(
        "L{}H{}D{}F{}V{}C{}pe{:?}attn{:?}eps{}tied{}",
        cfg.layers,
        cfg.heads,
        cfg.model_dim,
        cfg.ffn_dim,
        cfg.vocab,
        cfg.context_window,
        cfg.pe_kind,
        cfg.attn_kind,
        cfg.norm_eps,
        cfg.tied_embeddings
    )
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Pipeline> {
        let tokenizer = match &config.data.tokenizer {
            TokenizerSpec::ByteLevel => Tokenizer::byte_level(),
            TokenizerSpec::GreedyBpe { vocab_file } => Tokenizer::load_bpe(vocab_file)?,
        };
        let stream = ingest_corpus(&config.data.corpus_paths, &tokenizer)?;
        // token -> byte layout is deterministic, so hashing token ids is a
        // faithful corpus fingerprint
        let token_bytes: Vec<u8> = stream.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        let corpus_hash = CacheKey::new("corpus")
            .field("tokenizer", match &config.data.tokenizer {
                TokenizerSpec::ByteLevel => "byte".to_string(),
                TokenizerSpec::GreedyBpe { vocab_file } => format!("bpe:{}", vocab_file.display()),
            })
            .bytes("tokens", &token_bytes)
            .digest();
        let cache = cache_dir(&config.out_dir);
        std::fs::create_dir_all(&cache)?;
        std::fs::create_dir_all(&config.out_dir)?;
        Ok(Pipeline { config, cache, tokenizer, stream, corpus_hash })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn cache_path(&self) -> &PathBuf {
        &self.cache
    }

    pub fn train_tokens(&self) -> &[TokenId] {
        self.stream.split(self.config.data.train_split).0
    }

    pub fn eval_tokens(&self) -> &[TokenId] {
        self.stream.split(self.config.data.train_split).1
    }

    pub fn train_key(&self, variant: &str) -> Result<CacheKey> {
        let cfg = self.config.variant(variant).ok_or_else(|| {
            HarnessError::Validation(format!("unknown model variant {variant}"))
        })?;
        let t = &self.config.training;
        Ok(CacheKey::new("train")
            .field("model", config_fingerprint(cfg))
            .field(
                "training",
                format!(
                    "steps{}batch{}seq{}lr{}min{}warm{}wd{}b1{}b2{}clip{}seed{}",
                    t.steps,
                    t.batch_size,
                    t.seq_len,
                    t.lr,
                    t.min_lr,
                    t.warmup_steps,
                    t.weight_decay,
                    t.beta1,
                    t.beta2,
                    t.grad_clip,
                    t.seed
                ),
            )
            .field("split", self.config.data.train_split)
            .field("corpus", &self.corpus_hash))
    }

    /// Train (or load from cache) one named variant.
    pub fn train_variant(&self, variant: &str) -> Result<Arc<TransformerModel>> {
        let cfg = self
            .config
            .variant(variant)
            .ok_or_else(|| HarnessError::Validation(format!("unknown model variant {variant}")))?
            .clone();
        let key = self.train_key(variant)?;
        let path = self.cache.join(format!("train_{}.pvlab", key.short()));
        if path.exists() {
            return Ok(Arc::new(TransformerModel::load_checkpoint(&path)?));
        }
        let mut model = build_model(&cfg, self.config.training.seed)?;
        let report = train(&mut model, self.train_tokens(), &self.config.training)?;
        model.save_checkpoint(&path)?;
        // the loss curve is an artifact worth keeping next to the checkpoint
        let mut csv = CsvWriter::new(&["step", "loss"]);
        for (i, l) in report.losses.iter().enumerate() {
            csv.row(&[(i + 1).to_string(), fmt_f64(*l)]);
        }
        csv.write_to(&self.cache.join(format!("train_{}_loss.csv", key.short())))?;
        Ok(Arc::new(model))
    }

    /// Decomposition set for `streams` of `model`, collected over
    /// `n` bank windows of `t_len` tokens and cached under the model identity
    /// (`model_key`) plus all sampling parameters.
    pub fn decomposition(
        &self,
        model: &dyn LanguageModel,
        model_key: &str,
        streams: &[StreamId],
        t_len: usize,
        n: usize,
        c: usize,
    ) -> Result<Arc<DecompositionSet>> {
        let streams_tag: String =
            streams.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+");
        let key = CacheKey::new("decompose")
            .field("model", model_key)
            .field("streams", &streams_tag)
            .field("t_len", t_len)
            .field("n", n)
            .field("c", c)
            .field("sampler_seed", self.config.data.sampler_seed)
            .field("corpus", &self.corpus_hash);
        let path = self.cache.join(format!("dec_{}.pvdec", key.short()));
        if path.exists() {
            return Ok(Arc::new(DecompositionSet::load(&path)?));
        }
        let sampler = WindowSampler::new(self.train_tokens(), self.config.data.sampler_seed);
        let requests: Vec<StreamRequest> =
            streams.iter().map(|s| StreamRequest::mean_only(*s)).collect();
        let banks = collect_bank(model, &sampler, n, t_len, &requests, &[])?;
        let mut set = DecompositionSet::new();
        for b in banks {
            set.insert(decompose(&b, c)?);
        }
        set.save(&path)?;
        Ok(Arc::new(set))
    }

    /// Held-out evaluation windows from the eval split.
    pub fn eval_windows(&self, n: usize, t_len: usize) -> Result<Vec<Vec<TokenId>>> {
        disjoint_windows(self.eval_tokens(), n, t_len)
    }

    fn layer_output_streams(&self, cfg: &ModelConfig) -> Vec<StreamId> {
        (1..=cfg.layers).map(|l| StreamId::LayerOutput { layer: l }).collect()
    }

    fn value_streams(&self, cfg: &ModelConfig) -> Vec<StreamId> {
        (1..=cfg.layers)
            .flat_map(|l| (1..=cfg.heads).map(move |h| StreamId::Value { layer: l, head: h }))
            .collect()
    }

    /// Execute every experiment entry, emitting CSV/SVG artifacts and a
    /// manifest. Failed stages are recorded; completed artifacts persist.
    pub fn run(&self) -> Result<ExperimentReport> {
        let mut report = ExperimentReport::default();
        report.manifest.put("corpus_hash", &self.corpus_hash);
        report.manifest.put("train_seed", self.config.training.seed.to_string());
        report.manifest.put("sampler_seed", self.config.data.sampler_seed.to_string());
        report
            .manifest
            .put("crate_version", env!("CARGO_PKG_VERSION"));
        for (name, _) in &self.config.variants {
            report
                .manifest
                .put(format!("train_key.{name}"), self.train_key(name)?.short());
        }

        let entries = self.config.experiments.clone();
        for entry in &entries {
            let stage = format!("{} {}", entry.kind, entry.name);
            match self.run_entry(entry, &mut report) {
                Ok(()) => {}
                Err(e) => {
                    report.failures.push((stage, e.to_string()));
                }
            }
        }

        for a in &report.artifacts {
            let rel = a.strip_prefix(&self.config.out_dir).unwrap_or(a);
            let bytes = std::fs::read(a)?;
            report
                .manifest
                .put(format!("artifact.{}", rel.display()), &content_hash(&bytes)[..16]);
        }
        for (stage, err) in &report.failures {
            report.manifest.put(format!("failed.{stage}"), err);
        }
        report.manifest.write_to(&self.config.out_dir.join("manifest.txt"))?;
        Ok(report)
    }

    fn entry_variant(&self, entry: &ExperimentEntry) -> Result<(String, ModelConfig)> {
        let name = entry.param_or("model", &self.config.variants[0].0);
        let cfg = self
            .config
            .variant(&name)
            .ok_or_else(|| HarnessError::Validation(format!("unknown model variant {name}")))?
            .clone();
        Ok((name, cfg))
    }

    /// Execute a single experiment entry (the CLI's analyze/extend-eval path).
    pub fn run_one(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        self.run_entry(entry, report)
    }

    fn run_entry(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        match (entry.kind.as_str(), entry.name.as_str()) {
            ("analysis", "pca") => self.run_pca(entry, report),
            ("analysis", "distinct-count") => self.run_distinct(entry, report),
            ("analysis", "ablation") => self.run_ablation(entry, report),
            ("analysis", "attention-maps") => self.run_attention_maps(entry, report),
            ("analysis", "extrapolation") => self.run_extrapolation(entry, report),
            ("analysis", "ood-logits") => self.run_ood_logits(entry, report),
            ("analysis", "synthetic") => self.run_synthetic(entry, report),
            ("extend", _) => self.run_extend(entry, report),
            (kind, name) => Err(HarnessError::Validation(format!(
                "unknown experiment {kind} {name}"
            ))),
        }
    }

    fn param_usize(entry: &ExperimentEntry, key: &str, default: usize) -> Result<usize> {
        match entry.param(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                HarnessError::Validation(format!("experiment param {key}={v}: not an integer"))
            }),
        }
    }

    fn param_f64(entry: &ExperimentEntry, key: &str, default: f64) -> Result<f64> {
        match entry.param(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                HarnessError::Validation(format!("experiment param {key}={v}: not a number"))
            }),
        }
    }

    fn run_pca(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let layer = Self::param_usize(entry, "layer", 1)?;
        let k = Self::param_usize(entry, "k", 2)?;
        let model = self.train_variant(&vname)?;
        let set = self.decomposition(
            model.as_ref(),
            &self.train_key(&vname)?.short(),
            &[StreamId::LayerOutput { layer }],
            cfg.context_window,
            self.config.data.bank_samples,
            cfg.context_window,
        )?;
        let dec = set.get(&StreamId::LayerOutput { layer }).unwrap();
        let res = pca_positions(dec, k)?;

        let base = self.config.out_dir.join(format!("pca_{vname}_layer{layer}"));
        let mut csv = CsvWriter::new(&["position", "pc1", "pc2"]);
        let mut points = Vec::new();
        for t in 0..res.coords.rows() {
            let (x, y) = (res.coords.get(t, 0) as f64, res.coords.get(t, 1.min(k - 1)) as f64);
            csv.row(&[(t + 1).to_string(), fmt_f64(x), fmt_f64(y)]);
            points.push((x, y));
        }
        csv.write_to(&base.with_extension("csv"))?;
        svg::write_svg(
            &base.with_extension("svg"),
            &svg::scatter_plot(
                &format!("positional vectors, {vname} layer {layer}"),
                "pc1",
                "pc2",
                &points,
            ),
        )?;
        report.push_artifact(base.with_extension("csv"));
        report.push_artifact(base.with_extension("svg"));
        Ok(())
    }

    fn run_distinct(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let AttnKind::Window { size } = cfg.attn_kind else {
            return Err(HarnessError::Validation(
                "distinct-count needs a window-attention variant".into(),
            ));
        };
        let threshold = Self::param_f64(entry, "threshold", 0.99)?;
        let t_len = Self::param_usize(entry, "len", self.config.data.bank_len)?;
        let model = self.train_variant(&vname)?;
        let streams = self.layer_output_streams(&cfg);
        let set = self.decomposition(
            model.as_ref(),
            &self.train_key(&vname)?.short(),
            &streams,
            t_len,
            self.config.data.bank_samples,
            cfg.context_window.min(t_len),
        )?;
        let base = self.config.out_dir.join(format!("distinct_count_{vname}"));
        let mut csv = CsvWriter::new(&["layer", "distinct_count", "trf", "saturated"]);
        let mut count_series = Vec::new();
        let mut trf_series = Vec::new();
        for l in 1..=cfg.layers {
            let dec = set.get(&StreamId::LayerOutput { layer: l }).unwrap();
            let row = distinct_count(dec, size, cfg.layers, threshold)?;
            csv.row(&[
                l.to_string(),
                row.distinct_count.to_string(),
                row.trf.to_string(),
                row.saturated.to_string(),
            ]);
            count_series.push((l as f64, row.distinct_count as f64));
            trf_series.push((l as f64, row.trf as f64));
        }
        csv.write_to(&base.with_extension("csv"))?;
        svg::write_svg(
            &base.with_extension("svg"),
            &svg::line_plot(
                &format!("distinct positional vectors vs TRF, {vname}"),
                "layer",
                "count",
                &[
                    ("distinct".to_string(), count_series),
                    ("trf".to_string(), trf_series),
                ],
            ),
        )?;
        report.push_artifact(base.with_extension("csv"));
        report.push_artifact(base.with_extension("svg"));
        Ok(())
    }

    fn run_ablation(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let model = self.train_variant(&vname)?;
        let c = cfg.context_window;
        let bank_n = Self::param_usize(entry, "bank_n", self.config.data.bank_samples / 2)?;
        let set = self.decomposition(
            model.as_ref(),
            &self.train_key(&vname)?.short(),
            &self.value_streams(&cfg),
            c,
            self.config.data.bank_samples,
            c,
        )?;
        let acfg = AblationConfig::for_context(c, bank_n.max(1));
        let eval = self.eval_windows(self.config.data.eval_samples, c)?;
        let sampler = WindowSampler::new(self.train_tokens(), self.config.data.sampler_seed);
        let variants = [
            AblationVariant::Original,
            AblationVariant::WoValue,
            AblationVariant::WoPositionalVector,
            AblationVariant::WoPositionalBasis,
            AblationVariant::WoSemanticVector,
        ];
        let rows = ablation_study(model.as_ref(), set, &sampler, &eval, &variants, &acfg)?;
        let base = self.config.out_dir.join(format!("ablation_{vname}"));
        let mut csv = CsvWriter::new(&["variant", "group_start", "group_end", "sim", "ppl"]);
        for r in &rows {
            csv.row(&[
                r.variant.label().to_string(),
                r.group.start.to_string(),
                r.group.end.to_string(),
                fmt_f64(r.sim),
                fmt_f64(r.ppl),
            ]);
        }
        csv.write_to(&base.with_extension("csv"))?;
        report.push_artifact(base.with_extension("csv"));
        Ok(())
    }

    fn run_attention_maps(
        &self,
        entry: &ExperimentEntry,
        report: &mut ExperimentReport,
    ) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let layer = Self::param_usize(entry, "layer", (cfg.layers + 1) / 2)?;
        let first_n = Self::param_usize(entry, "first_n", cfg.context_window)?;
        let heads: Vec<usize> = match entry.param("heads") {
            Some("all") | None => (1..=cfg.heads).collect(),
            Some(h) => vec![h.parse().map_err(|_| {
                HarnessError::Validation(format!("bad heads param {h}"))
            })?],
        };
        let model = self.train_variant(&vname)?;

        // retained banks are collected fresh (they are not serialized)
        let sampler = WindowSampler::new(self.train_tokens(), self.config.data.sampler_seed);
        let mut requests = Vec::new();
        for &h in &heads {
            requests.push(StreamRequest::retained(StreamId::Query { layer, head: h }));
            requests.push(StreamRequest::retained(StreamId::Key { layer, head: h }));
        }
        let n = Self::param_usize(entry, "bank_n", self.config.data.bank_samples / 2)?.max(1);
        let banks = collect_bank(model.as_ref(), &sampler, n, first_n, &requests, &[])?;
        let mut set = DecompositionSet::new();
        for b in &banks {
            set.insert(decompose(b, first_n)?);
        }
        let q_banks: Vec<&crate::decompose::HiddenStateBank> =
            banks.iter().step_by(2).collect();
        let k_banks: Vec<&crate::decompose::HiddenStateBank> =
            banks.iter().skip(1).step_by(2).collect();

        let base = self.config.out_dir.join(format!("attention_maps_{vname}_layer{layer}"));
        let mut csv = CsvWriter::new(&["setting", "layer", "heads", "sink_strength", "decay_slope"]);
        for setting in [
            MapSetting::Original,
            MapSetting::WoSemanticVector,
            MapSetting::WoPositionalVector,
            MapSetting::WoPositionalBasis,
        ] {
            let profile = attention_component_maps(
                &cfg, layer, &heads, &q_banks, &k_banks, &set, setting, first_n, 4,
            )?;
            csv.row(&[
                setting.label().to_string(),
                layer.to_string(),
                heads.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("+"),
                fmt_f64(profile.sink_strength),
                fmt_f64(profile.decay_slope),
            ]);
            let map_path = base.with_file_name(format!(
                "attention_maps_{vname}_layer{layer}_{}.svg",
                setting.label()
            ));
            svg::write_svg(
                &map_path,
                &svg::heatmap_log(
                    &format!("{} attention, {vname} layer {layer}", setting.label()),
                    &profile.map,
                ),
            )?;
            report.push_artifact(map_path);
        }
        csv.write_to(&base.with_extension("csv"))?;
        report.push_artifact(base.with_extension("csv"));
        Ok(())
    }

    fn run_extrapolation(
        &self,
        entry: &ExperimentEntry,
        report: &mut ExperimentReport,
    ) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let t_len = Self::param_usize(entry, "len", self.config.data.bank_len)?;
        let model = self.train_variant(&vname)?;
        let set = self.decomposition(
            model.as_ref(),
            &self.train_key(&vname)?.short(),
            &self.layer_output_streams(&cfg),
            t_len,
            self.config.data.bank_samples,
            cfg.context_window,
        )?;
        let layers: Vec<usize> = (2..=cfg.layers).collect();
        let eval_n = Self::param_usize(
            entry,
            "eval_n",
            (self.config.data.eval_samples / 4).max(2),
        )?;
        let eval = self.eval_windows(eval_n, t_len)?;
        let curves = extrapolation_curves(
            model.as_ref(),
            &set,
            &layers,
            &eval,
            cfg.context_window,
            (cfg.context_window / 8).max(1),
        )?;
        let base = self.config.out_dir.join(format!("extrapolation_{vname}"));
        let mut csv = CsvWriter::new(&["position", "ppl", "max_sim"]);
        let mut sim_at = std::collections::BTreeMap::new();
        for (pos, sim) in &curves.max_sim_by_position {
            sim_at.insert(*pos, *sim);
        }
        for (pos, ppl) in &curves.ppl_by_position {
            let sim = sim_at.get(pos).copied().unwrap_or(f64::NAN);
            csv.row(&[pos.to_string(), fmt_f64(*ppl), fmt_f64(sim)]);
        }
        csv.write_to(&base.with_extension("csv"))?;
        svg::write_svg(
            &base.with_extension("svg"),
            &svg::line_plot(
                &format!("direct extrapolation, {vname}"),
                "position",
                "value",
                &[
                    (
                        "ppl".to_string(),
                        curves.ppl_by_position.iter().map(|(p, v)| (*p as f64, *v)).collect(),
                    ),
                    (
                        "max_sim".to_string(),
                        curves
                            .max_sim_by_position
                            .iter()
                            .map(|(p, v)| (*p as f64, *v))
                            .collect(),
                    ),
                ],
            ),
        )?;
        report.summary.push((format!("extrapolation.{vname}.within_ppl"), curves.within_ppl));
        report.summary.push((format!("extrapolation.{vname}.beyond_ppl"), curves.beyond_ppl));
        report.push_artifact(base.with_extension("csv"));
        report.push_artifact(base.with_extension("svg"));
        Ok(())
    }

    fn run_ood_logits(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let t_len = Self::param_usize(entry, "len", self.config.data.bank_len)?;
        let model = self.train_variant(&vname)?;
        let set = self.decomposition(
            model.as_ref(),
            &self.train_key(&vname)?.short(),
            &[StreamId::LayerOutput { layer: cfg.layers }],
            t_len,
            self.config.data.bank_samples,
            cfg.context_window,
        )?;
        let dec = set.get(&StreamId::LayerOutput { layer: cfg.layers }).unwrap();
        let raw = entry.param("raw") == Some("true");
        let sim = ood_logit_similarity(dec, model.as_ref(), cfg.context_window, raw)?;
        let base = self.config.out_dir.join(format!("ood_logits_{vname}"));
        let mut csv = CsvWriter::new(&["block", "mean_cosine"]);
        csv.row(&["within_within".to_string(), fmt_f64(sim.within_mean)]);
        csv.row(&["within_beyond".to_string(), fmt_f64(sim.cross_mean)]);
        csv.row(&["beyond_beyond".to_string(), fmt_f64(sim.beyond_mean)]);
        csv.write_to(&base.with_extension("csv"))?;
        svg::write_svg(
            &base.with_extension("svg"),
            &svg::heatmap_log(&format!("logit similarity, {vname}"), &sim.matrix),
        )?;
        report.summary.push((format!("ood.{vname}.within_mean"), sim.within_mean));
        report.summary.push((format!("ood.{vname}.cross_mean"), sim.cross_mean));
        report.push_artifact(base.with_extension("csv"));
        report.push_artifact(base.with_extension("svg"));
        Ok(())
    }

    fn run_synthetic(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        let n_seqs = Self::param_usize(entry, "n_seqs", 2000)?;
        let seed = Self::param_usize(entry, "seed", 1)? as u64;
        let base = self.config.out_dir.join("synthetic_preference");
        let mut csv = CsvWriter::new(&["position", "mean_nope", "se_nope", "mean_rope", "se_rope"]);
        let mut cfg_nope = SyntheticConfig::desk_default(SyntheticPe::NoPe, seed);
        cfg_nope.n_seqs = n_seqs;
        let mut cfg_rope = SyntheticConfig::desk_default(SyntheticPe::Rope, seed);
        cfg_rope.n_seqs = n_seqs;
        let nope = synthetic_preference_experiment(&cfg_nope);
        let rope = synthetic_preference_experiment(&cfg_rope);
        let mut series_nope = Vec::new();
        let mut series_rope = Vec::new();
        for (i, pos) in nope.positions.iter().enumerate() {
            csv.row(&[
                pos.to_string(),
                fmt_f64(nope.mean_first[i]),
                fmt_f64(nope.se_first[i]),
                fmt_f64(rope.mean_first[i]),
                fmt_f64(rope.se_first[i]),
            ]);
            series_nope.push((*pos as f64, nope.mean_first[i]));
            series_rope.push((*pos as f64, rope.mean_first[i]));
        }
        csv.write_to(&base.with_extension("csv"))?;
        svg::write_svg(
            &base.with_extension("svg"),
            &svg::line_plot(
                "single-head preference: averaged first output element",
                "position",
                "mean first element",
                &[("nope".to_string(), series_nope), ("rope".to_string(), series_rope)],
            ),
        )?;
        report.push_artifact(base.with_extension("csv"));
        report.push_artifact(base.with_extension("svg"));
        Ok(())
    }

    /// Build an extension wrapper for an `extend` experiment entry.
    pub fn build_extension(
        &self,
        entry: &ExperimentEntry,
        model: Arc<TransformerModel>,
        vname: &str,
    ) -> Result<crate::extend::ExtendedModel> {
        let cfg = model.config().clone();
        let eval_len = Self::param_usize(entry, "eval_len", 2 * cfg.context_window)?;
        let spec = match entry.name.as_str() {
            "pvr" => ExtensionSpec::PositionalVectorReplacement {
                layer: Self::param_usize(entry, "layer", (cfg.layers / 2).max(1))?,
                r: Self::param_f64(entry, "r", 2.0)?,
                alpha: Self::param_f64(entry, "alpha", 1.1)? as f32,
                initial_k: Self::param_usize(entry, "initial_k", 4)?,
            },
            "awe" => ExtensionSpec::AttentionWindowExtension {
                r: Self::param_f64(entry, "r", 2.0)?,
                lambda: Self::param_f64(entry, "lambda", 1.1)? as f32,
            },
            "attn-scale" => ExtensionSpec::AttentionScaling {
                lambda: Self::param_f64(entry, "lambda", 1.2)? as f32,
            },
            "init-scale" => ExtensionSpec::InitialScaling {
                lambda: Self::param_f64(entry, "lambda", 1.2)? as f32,
                initial_k: Self::param_usize(entry, "initial_k", 4)?,
            },
            "dynamic-ntk" => ExtensionSpec::DynamicNtk { target_len: eval_len },
            other => {
                return Err(HarnessError::Validation(format!(
                    "unknown extension method {other}"
                )))
            }
        };
        let decs = if matches!(spec, ExtensionSpec::PositionalVectorReplacement { .. }) {
            let ExtensionSpec::PositionalVectorReplacement { layer, .. } = spec else {
                unreachable!()
            };
            // the replacement bank must span the evaluated length so
            // subtraction can index absolute positions without clamping
            let t_len = self.config.data.bank_len.max(eval_len);
            Some(self.decomposition(
                model.as_ref(),
                &self.train_key(vname)?.short(),
                &[StreamId::LayerOutput { layer }],
                t_len,
                self.config.data.bank_samples,
                cfg.context_window,
            )?)
        } else {
            None
        };
        Ok(spec.build(model, decs.as_deref())?)
    }

    fn run_extend(&self, entry: &ExperimentEntry, report: &mut ExperimentReport) -> Result<()> {
        let (vname, cfg) = self.entry_variant(entry)?;
        let model = self.train_variant(&vname)?;
        let mut eval_len = Self::param_usize(entry, "eval_len", 2 * cfg.context_window)?;
        let eval_n = Self::param_usize(
            entry,
            "eval_n",
            (self.config.data.eval_samples / 4).max(2),
        )?;
        let wrapped = self.build_extension(entry, model.clone(), &vname)?;
        if let Some(max) = wrapped.max_supported_len() {
            if entry.param("eval_len").is_some() && eval_len > max {
                return Err(HarnessError::Validation(format!(
                    "eval_len {eval_len} exceeds the wrapper's supported {max} tokens"
                )));
            }
            eval_len = eval_len.min(max);
        }

        let eval = self.eval_windows(eval_n, eval_len)?;
        let extended = perplexity_over_samples(&wrapped, &eval, &[])?;
        let baseline = perplexity_over_samples(model.as_ref(), &eval, &[])?;
        let within = self.eval_windows(
            self.config.data.eval_samples.max(eval_n),
            cfg.context_window,
        )?;
        let within_ppl = perplexity_over_samples(model.as_ref(), &within, &[])?.ppl;

        // effective interpolation ratio: original vs extended positional
        // vectors over the evaluated length, median over layers >= 2
        let layers: Vec<usize> = (2..=cfg.layers).collect();
        let streams = self.layer_output_streams(&cfg);
        let orig_set = self.decomposition(
            model.as_ref(),
            &self.train_key(&vname)?.short(),
            &streams,
            eval_len,
            self.config.data.bank_samples,
            cfg.context_window,
        )?;
        let ext_key = format!("{}-{}", self.train_key(&vname)?.short(), wrapped.describe());
        let ext_set = self.decomposition(
            &wrapped,
            &ext_key,
            &streams,
            eval_len,
            self.config.data.bank_samples,
            cfg.context_window,
        )?;
        let mut ratios = Vec::new();
        for &l in &layers {
            let (Some(o), Some(e)) = (
                orig_set.get(&StreamId::LayerOutput { layer: l }),
                ext_set.get(&StreamId::LayerOutput { layer: l }),
            ) else {
                continue;
            };
            let r = effective_interpolation_ratio(o.p(), e.p(), cfg.context_window)?;
            if !matches!(r.flag, RatioFlag::NotFound) {
                ratios.push(r.ratio);
            }
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ratio_median = if ratios.is_empty() {
            f64::NAN
        } else {
            ratios[ratios.len() / 2]
        };

        let tag = wrapped.describe();
        let base = self.config.out_dir.join(format!("extend_{tag}"));
        let mut csv = CsvWriter::new(&[
            "method",
            "eval_len",
            "ppl",
            "baseline_ppl",
            "within_window_ppl",
            "effective_ratio_median",
        ]);
        csv.row(&[
            entry.name.clone(),
            eval_len.to_string(),
            fmt_f64(extended.ppl),
            fmt_f64(baseline.ppl),
            fmt_f64(within_ppl),
            fmt_f64(ratio_median),
        ]);
        csv.write_to(&base.with_extension("csv"))?;
        report.summary.push((format!("extend.{tag}.ppl"), extended.ppl));
        report.summary.push((format!("extend.{tag}.baseline_ppl"), baseline.ppl));
        report.summary.push((format!("extend.{tag}.ratio"), ratio_median));
        report.push_artifact(base.with_extension("csv"));
        Ok(())
    }
}

/// Map pe/attention of the six reference variants onto config sections; used
/// by the bundled preset files and by tests.
pub fn paper_variants(c: usize) -> Vec<(&'static str, PeKind, AttnKind)> {
    let w = (c / 4).max(1);
    let w_small = (c * 10 / 256).max(2);
    vec![
        ("nope", PeKind::NoPe, AttnKind::Full),
        ("rope", PeKind::rope(), AttnKind::Full),
        ("alibi", PeKind::Alibi, AttnKind::Full),
        ("window", PeKind::NoPe, AttnKind::Window { size: w }),
        ("window-small", PeKind::NoPe, AttnKind::Window { size: w_small }),
        ("window-rope", PeKind::rope(), AttnKind::Window { size: w }),
    ]
}
