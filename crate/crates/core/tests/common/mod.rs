#![allow(dead_code)]

pub mod fd;
pub mod oracles;

use mpo_core::lm::{build_model, ArchConfig, PolicyCheckpoint, TokenSequence, Vocabulary, EOS, BOS, SEP};
use mpo_core::objectives::PreferencePair;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        vocab: Vocabulary {
            text_tokens: 6,
            speakers: 2,
            speech_tokens: 8,
        },
        layers: 2,
        embed_dim: 8,
        heads: 2,
        mlp_hidden: 16,
        context: 24,
        response_offset: 3,
        max_response_len: 12,
    }
}

/// A model whose weights have been pushed away from initialization so
/// that every parameter matters.
pub fn noisy_model(arch: &ArchConfig, seed: u64, std: f64) -> PolicyCheckpoint {
    let mut m = build_model(arch, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let n = Normal::new(0.0, std).unwrap();
    for p in &mut m.params {
        for v in p.value.data_mut() {
            *v += n.sample(&mut r);
        }
    }
    m
}

/// `[BOS, speaker, text.., SEP]` with `text_len` random characters.
pub fn random_prompt(v: &Vocabulary, r: &mut impl Rng, text_len: usize) -> TokenSequence {
    let mut ids = vec![BOS, v.speaker_id(r.gen_range(0..v.speakers))];
    ids.extend((0..text_len).map(|_| v.text_id(r.gen_range(0..v.text_tokens))));
    ids.push(SEP);
    TokenSequence::prompt(ids)
}

/// Speech tokens followed by EOS, `len` tokens in total.
pub fn random_response(v: &Vocabulary, r: &mut impl Rng, len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = (0..len - 1).map(|_| v.speech_id(r.gen_range(0..v.speech_tokens))).collect();
    ids.push(EOS);
    TokenSequence::response(ids)
}

pub fn random_pairs<R: Rng>(v: &Vocabulary, r: &mut R, n: usize, text_len: (usize, usize), resp_len: (usize, usize)) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| {
            let tl = r.gen_range(text_len.0..=text_len.1);
            let x = random_prompt(v, r, tl);
            let resp = |r: &mut R| {
                let len = r.gen_range(resp_len.0..=resp_len.1);
                random_response(v, r, len)
            };
            let y_w = resp(r);
            let mut y_l = resp(r);
            while y_l == y_w {
                y_l = resp(r);
            }
            PreferencePair { x, y_w, y_l }
        })
        .collect()
}
