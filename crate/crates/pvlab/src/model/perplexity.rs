//! Sliding-window perplexity.
//!
//! Windows of `eval_window` tokens advance by `stride`; every token is scored
//! exactly once (the first window scores all its targets, later windows only
//! the fresh tail). Negative log-likelihoods are kept per within-window
//! position so extrapolation curves can be drawn from the same pass.

use super::{InterventionSpec, LanguageModel, ModelError, Result, TokenId};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct PerplexityConfig {
    /// Window length; clamped to the sequence length.
    pub eval_window: usize,
    pub stride: usize,
}

impl PerplexityConfig {
    /// Window `C`, stride `C/2` — the defaults for in-window evaluation.
    pub fn for_context(c: usize) -> Self {
        PerplexityConfig { eval_window: c, stride: (c / 2).max(1) }
    }

    /// One window covering the whole sequence; per-position curves come out
    /// position-aligned.
    pub fn single_window(len: usize) -> Self {
        PerplexityConfig { eval_window: len, stride: len }
    }
}

#[derive(Debug, Clone)]
pub struct PerplexityReport {
    /// Natural-log NLL per scored token, keyed by 1-based position within its
    /// evaluation window (position of the predicted token).
    pub nll_by_position: Vec<(usize, f64)>,
    pub token_count: usize,
    pub mean_nll: f64,
    pub ppl: f64,
}

impl PerplexityReport {
    /// Mean PPL over tokens whose within-window position lies in `range`
    /// (1-based, half-open). `None` when no token fell in the range.
    pub fn ppl_in_positions(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (pos, nll) in &self.nll_by_position {
            if range.contains(pos) {
                sum += nll;
                n += 1;
            }
        }
        (n > 0).then(|| (sum / n as f64).exp())
    }

    /// Average PPL per position bucket of `width`, as (bucket_end, ppl).
    pub fn bucketed(&self, width: usize) -> Vec<(usize, f64)> {
        let max_pos = self.nll_by_position.iter().map(|(p, _)| *p).max().unwrap_or(0);
        let mut out = Vec::new();
        let mut start = 1usize;
        while start <= max_pos {
            let end = start + width;
            if let Some(ppl) = self.ppl_in_positions(start..end) {
                out.push((end - 1, ppl));
            }
            start = end;
        }
        out
    }

    fn merge(&mut self, other: PerplexityReport) {
        self.nll_by_position.extend(other.nll_by_position);
        self.token_count += other.token_count;
    }

    fn finalize(&mut self) {
        let sum: f64 = self.nll_by_position.iter().map(|(_, n)| n).sum();
        self.mean_nll = if self.token_count == 0 { 0.0 } else { sum / self.token_count as f64 };
        self.ppl = self.mean_nll.exp();
    }
}

fn nll_from_logits(logits: &Matrix, target: TokenId, row: usize) -> f64 {
    let r = logits.row(row);
    let mut max = f32::NEG_INFINITY;
    for &v in r {
        if v > max {
            max = v;
        }
    }
    let mut denom = 0.0f64;
    for &v in r {
        denom += ((v - max) as f64).exp();
    }
    denom.ln() - (r[target as usize] - max) as f64
}

/// Sliding-window perplexity of `tokens` under `model`.
pub fn perplexity(
    model: &dyn LanguageModel,
    tokens: &[TokenId],
    config: PerplexityConfig,
    interventions: &[InterventionSpec],
) -> Result<PerplexityReport> {
    if tokens.len() < 2 {
        return Err(ModelError::Shape("perplexity needs at least 2 tokens".into()));
    }
    if config.stride == 0 {
        return Err(ModelError::Config("stride must be > 0".into()));
    }
    let window = config.eval_window.min(tokens.len()).max(2);
    let stride = config.stride.min(window);

    let mut report = PerplexityReport {
        nll_by_position: Vec::new(),
        token_count: 0,
        mean_nll: 0.0,
        ppl: 0.0,
    };

    let mut start = 0usize;
    let mut scored_until = 0usize; // absolute index of the first unscored target
    loop {
        let end = (start + window).min(tokens.len());
        let slice = &tokens[start..end];
        let trace = model.forward(slice, interventions, super::CaptureFlags::none())?;
        // targets are absolute positions start+1 .. end-1 (predicting token i+1
        // from prefix up to i); score only the not-yet-scored tail
        let first_target = scored_until.max(start + 1);
        let mut part = PerplexityReport {
            nll_by_position: Vec::new(),
            token_count: 0,
            mean_nll: 0.0,
            ppl: 0.0,
        };
        for abs in first_target..end {
            let local = abs - start; // predicted token's index within the window
            let nll = nll_from_logits(&trace.logits, tokens[abs], local - 1);
            part.nll_by_position.push((local + 1, nll));
            part.token_count += 1;
        }
        report.merge(part);
        scored_until = end;
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    report.finalize();
    Ok(report)
}

/// Disjoint-sample perplexity: each sample is scored as one full window.
/// Reports are pooled; per-position NLLs stay aligned because every sample
/// has equal length.
pub fn perplexity_over_samples(
    model: &dyn LanguageModel,
    samples: &[Vec<TokenId>],
    interventions: &[InterventionSpec],
) -> Result<PerplexityReport> {
    use rayon::prelude::*;
    let parts: Vec<Result<PerplexityReport>> = samples
        .par_iter()
        .map(|s| {
            perplexity(
                model,
                s,
                PerplexityConfig::single_window(s.len()),
                interventions,
            )
        })
        .collect();
    let mut report = PerplexityReport {
        nll_by_position: Vec::new(),
        token_count: 0,
        mean_nll: 0.0,
        ppl: 0.0,
    };
    for p in parts {
        report.merge(p?);
    }
    report.finalize();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{cycle_tokens, tiny_config};
    use crate::model::build_model;

    /// Model with a zeroed unembedding: logits are uniformly zero.
    fn uniform_model() -> crate::model::TransformerModel {
        let cfg = tiny_config();
        let mut model = build_model(&cfg, 0).unwrap();
        let spec = model
            .specs()
            .iter()
            .find(|s| s.name == "unembedding")
            .unwrap()
            .clone();
        model.params_mut()[spec.offset..spec.offset + spec.len()].fill(0.0);
        model
    }

    #[test]
    fn uniform_predictor_ppl_equals_vocab() {
        let model = uniform_model();
        let v = model.config().vocab as f64;
        let tokens = cycle_tokens(40, model.config().vocab);
        let report = perplexity(&model, &tokens, PerplexityConfig::for_context(16), &[]).unwrap();
        assert!(
            (report.ppl - v).abs() <= 0.005 * v,
            "ppl {} vs vocab {v}",
            report.ppl
        );
        assert_eq!(report.token_count, tokens.len() - 1);
    }

    #[test]
    fn stride_equal_to_window_is_disjoint_chunks() {
        let cfg = tiny_config();
        let model = build_model(&cfg, 5).unwrap();
        let tokens = cycle_tokens(33, cfg.vocab);
        let report = perplexity(
            &model,
            &tokens,
            PerplexityConfig { eval_window: 8, stride: 8 },
            &[],
        )
        .unwrap();
        // hand-computed disjoint-chunk evaluation
        let mut nlls = Vec::new();
        let mut start = 0;
        while start < tokens.len() - 1 {
            let end = (start + 8).min(tokens.len());
            let trace = model
                .forward(&tokens[start..end], &[], crate::model::CaptureFlags::none())
                .unwrap();
            for t in start + 1..end {
                nlls.push(nll_from_logits(&trace.logits, tokens[t], t - start - 1));
            }
            start = end;
        }
        let want = (nlls.iter().sum::<f64>() / nlls.len() as f64).exp();
        assert_eq!(report.token_count, nlls.len());
        assert!((report.ppl - want).abs() < 1e-9, "{} vs {want}", report.ppl);
    }

    #[test]
    fn every_token_scored_exactly_once_with_overlap() {
        let cfg = tiny_config();
        let model = build_model(&cfg, 5).unwrap();
        let tokens = cycle_tokens(41, cfg.vocab);
        let report = perplexity(
            &model,
            &tokens,
            PerplexityConfig { eval_window: 16, stride: 8 },
            &[],
        )
        .unwrap();
        assert_eq!(report.token_count, tokens.len() - 1);
    }

    #[test]
    fn zero_stride_is_config_error() {
        let cfg = tiny_config();
        let model = build_model(&cfg, 5).unwrap();
        let tokens = cycle_tokens(10, cfg.vocab);
        assert!(matches!(
            perplexity(&model, &tokens, PerplexityConfig { eval_window: 8, stride: 0 }, &[]),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn too_short_input_is_shape_error() {
        let cfg = tiny_config();
        let model = build_model(&cfg, 5).unwrap();
        assert!(matches!(
            perplexity(&model, &[1], PerplexityConfig::for_context(8), &[]),
            Err(ModelError::Shape(_))
        ));
    }
}
