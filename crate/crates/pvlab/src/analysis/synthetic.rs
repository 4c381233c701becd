//! Synthetic single-head construction: embeddings whose first dimension is
//! standard normal per vocabulary entry and whose second dimension is one,
//! with projection matrices that make the attention logit for key j equal the
//! key token's first embedding element (times `cos((i-j)/base)` under rotary
//! rotation). The averaged first output element per position shows the
//! attention preference forming positional structure at initial positions.

use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticPe {
    NoPe,
    Rope,
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub pe: SyntheticPe,
    pub n_seqs: usize,
    pub length: usize,
    pub vocab: usize,
    /// 1-based positions whose outputs are evaluated (prefix cost is linear
    /// in the position, so only requested positions are computed).
    pub positions: Vec<usize>,
    pub rope_base: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Desk defaults: 2000 sequences of length 1024 over a 1024-entry
    /// vocabulary, evaluated densely over 1..=16 and sparsely beyond.
    pub fn desk_default(pe: SyntheticPe, seed: u64) -> Self {
        let mut positions: Vec<usize> = (1..=16).collect();
        positions.extend([24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024]);
        SyntheticConfig {
            pe,
            n_seqs: 2000,
            length: 1024,
            vocab: 1024,
            positions,
            rope_base: 10_000.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticResult {
    pub positions: Vec<usize>,
    /// Mean first output element per requested position.
    pub mean_first: Vec<f64>,
    /// Standard error of that mean.
    pub se_first: Vec<f64>,
    pub n_seqs: usize,
    /// Empirical mean of the vocabulary's first embedding dimension — the
    /// value the uniform-attention identity converges to.
    pub value_mean: f64,
}

impl SyntheticResult {
    pub fn value_at(&self, position: usize) -> Option<f64> {
        self.positions
            .iter()
            .position(|p| *p == position)
            .map(|i| self.mean_first[i])
    }

    pub fn se_at(&self, position: usize) -> Option<f64> {
        self.positions
            .iter()
            .position(|p| *p == position)
            .map(|i| self.se_first[i])
    }
}

fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    // Box-Muller on two uniform draws
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn run(cfg: &SyntheticConfig, uniform_attention: bool) -> SyntheticResult {
    use rand::SeedableRng;
    assert!(cfg.positions.iter().all(|p| *p >= 1 && *p <= cfg.length));

    // first embedding dimension per vocabulary entry
    let mut emb_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let e1: Vec<f64> = (0..cfg.vocab).map(|_| gaussian(&mut emb_rng)).collect();
    let value_mean = e1.iter().sum::<f64>() / cfg.vocab as f64;

    let n_pos = cfg.positions.len();
    const CHUNK: usize = 64;
    let chunks: Vec<usize> = (0..cfg.n_seqs.div_ceil(CHUNK)).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .map(|&chunk| {
            let lo = chunk * CHUNK;
            let hi = ((chunk + 1) * CHUNK).min(cfg.n_seqs);
            let mut sum = vec![0.0f64; n_pos];
            let mut sumsq = vec![0.0f64; n_pos];
            for seq in lo..hi {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ (seq as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                let max_pos = *cfg.positions.iter().max().unwrap();
                let tokens: Vec<usize> =
                    (0..max_pos).map(|_| rng.random_range(0..cfg.vocab)).collect();
                for (slot, &pos) in cfg.positions.iter().enumerate() {
                    let i = pos - 1;
                    let out = if uniform_attention {
                        // forced a_{i,j} = 1/i: the output is the plain mean
                        tokens[..=i].iter().map(|&t| e1[t]).sum::<f64>() / (i + 1) as f64
                    } else {
                        let mut max = f64::NEG_INFINITY;
                        let mut logits = Vec::with_capacity(i + 1);
                        for (j, &t) in tokens[..=i].iter().enumerate() {
                            let mut a = e1[t];
                            if cfg.pe == SyntheticPe::Rope {
                                a *= (((i - j) as f64) / cfg.rope_base).cos();
                            }
                            if a > max {
                                max = a;
                            }
                            logits.push(a);
                        }
                        let mut denom = 0.0f64;
                        let mut num = 0.0f64;
                        for (j, a) in logits.iter().enumerate() {
                            let w = (a - max).exp();
                            denom += w;
                            num += w * e1[tokens[j]];
                        }
                        num / denom
                    };
                    sum[slot] += out;
                    sumsq[slot] += out * out;
                }
            }
            (sum, sumsq)
        })
        .collect();

    let mut sum = vec![0.0f64; n_pos];
    let mut sumsq = vec![0.0f64; n_pos];
    for (s, sq) in partials {
        for i in 0..n_pos {
            sum[i] += s[i];
            sumsq[i] += sq[i];
        }
    }
    let n = cfg.n_seqs as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    SyntheticResult {
        positions: cfg.positions.clone(),
        mean_first: mean,
        se_first: se,
        n_seqs: cfg.n_seqs,
        value_mean,
    }
}

/// The experiment with softmax attention over the constructed logits.
pub fn synthetic_preference_experiment(cfg: &SyntheticConfig) -> SyntheticResult {
    run(cfg, false)
}

/// The identity oracle: attention forced uniform, so the averaged first
/// element is the plain population mean (0) at every position.
pub fn synthetic_uniform_oracle(cfg: &SyntheticConfig) -> SyntheticResult {
    run(cfg, true)
}
