use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::decode::Decoder;
use crate::lm::model::PolicyCheckpoint;
use crate::lm::vocab::{TokenSequence, EOS};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_k: 128,
            max_len: 40,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_len: usize) -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_k: 1,
            max_len,
        }
    }

    pub fn validate(&self, model: &PolicyCheckpoint) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        let v = model.arch.vocab.size();
        if self.top_k == 0 || self.top_k > v {
            return Err(Error::config("top_k", format!("must be in 1..={v}")));
        }
        if self.max_len == 0 || self.max_len > model.arch.max_response_len {
            return Err(Error::config(
                "max_len",
                format!("must be in 1..={}", model.arch.max_response_len),
            ));
        }
        Ok(())
    }
}

/// Ancestral sampling from the temperature-scaled, top-k-truncated
/// distribution. Stops after EOS or at `max_len` tokens. Equal
/// log-probabilities are ordered by token id, so `top_k = 1` is greedy
/// decoding with ties going to the lowest id.
pub fn sample(
    model: &PolicyCheckpoint,
    x: &TokenSequence,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<TokenSequence> {
    cfg.validate(model)?;
    let start = Decoder::start(model, x)?;
    run(start, cfg, seed).map(|(y, _)| y)
}

/// One sample per seed, sharing the prompt computation.
pub fn sample_many(
    model: &PolicyCheckpoint,
    x: &TokenSequence,
    cfg: &SamplingConfig,
    seeds: &[u64],
) -> Result<Vec<TokenSequence>> {
    cfg.validate(model)?;
    let start = Decoder::start(model, x)?;
    seeds.iter().map(|&s| run(start.clone(), cfg, s).map(|(y, _)| y)).collect()
}

/// Like [`sample_many`], also returning each sample's untempered
/// `log π(y|x)` accumulated during decoding.
pub fn sample_many_scored(
    model: &PolicyCheckpoint,
    x: &TokenSequence,
    cfg: &SamplingConfig,
    seeds: &[u64],
) -> Result<Vec<(TokenSequence, f64)>> {
    cfg.validate(model)?;
    let start = Decoder::start(model, x)?;
    seeds.iter().map(|&s| run(start.clone(), cfg, s)).collect()
}

fn run(mut dec: Decoder<'_>, cfg: &SamplingConfig, seed: u64) -> Result<(TokenSequence, f64)> {
    let mut rng = seed::rng(seed, "sample", &[]);
    let mut out = Vec::with_capacity(cfg.max_len);
    let mut logp = 0.0;
    loop {
        let lp = dec.next_logprobs();
        let tok = if cfg.top_k == 1 {
            argmax(lp)
        } else {
            draw(lp, cfg, &mut rng)
        } as u32;
        logp += lp[tok as usize];
        out.push(tok);
        if tok == EOS || out.len() == cfg.max_len {
            break;
        }
        dec.push(tok)?;
    }
    Ok((TokenSequence::response(out), logp))
}

pub fn greedy(model: &PolicyCheckpoint, x: &TokenSequence, max_len: usize) -> Result<TokenSequence> {
    sample(model, x, &SamplingConfig::greedy(max_len), 0)
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn draw(lp: &[f64], cfg: &SamplingConfig, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..lp.len()).collect();
    if cfg.top_k < lp.len() {
        order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        order.truncate(cfg.top_k);
    }
    let max = order.iter().map(|&i| lp[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((lp[i] - max) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("top_k >= 1")
}
