//! Deterministic toy text-to-speech world.
//!
//! Every speech token is a (symbol, color) pair behind a random permutation.
//! The symbol is what the oracle transcriber hears; the color is the speaker
//! whose centroid the token carries into the speaker embedding. Token
//! embeddings and F0 values are drawn independently of both, so the three
//! metrics can disagree about the same candidate.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, TokenSequence, Vocabulary, BOS, EOS, SEP};
use crate::metrics::{self, MetricScores, ProsodyContour};
use crate::seed;

pub const EMBED_DIM: usize = 16;
pub const F0_MIN: f64 = 80.0;
pub const F0_MAX: f64 = 400.0;
pub const MIN_TEXT_LEN: usize = 4;
pub const MAX_TEXT_LEN: usize = 16;
const MAX_CENTROID_COS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub centroid: Vec<f64>,
    pub f0_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub seed: u64,
    pub vocab: Vocabulary,
    /// Transcript symbol of each speech token (index = speech index).
    pub token_symbol: Vec<usize>,
    /// Speaker whose centroid each speech token carries.
    pub token_color: Vec<usize>,
    pub token_embedding: Vec<Vec<f64>>,
    pub token_f0: Vec<f64>,
    pub speakers: Vec<SpeakerProfile>,
}

/// What the toy evaluators hear in a response.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// One symbol per content token; non-speech tokens map to [`SynthWorld::unk_symbol`].
    pub transcript: Vec<usize>,
    /// `None` when nothing in the response carries speaker information.
    pub embedding: Option<Vec<f64>>,
    /// `None` for an empty response.
    pub contour: Option<ProsodyContour>,
}

pub fn make_world(seed: u64) -> SynthWorld {
    make_world_with(Vocabulary::default(), seed).expect("default vocabulary is valid")
}

pub fn make_world_with(vocab: Vocabulary, seed: u64) -> Result<SynthWorld> {
    vocab.validate()?;
    let symbols = vocab.text_tokens;
    let speakers = vocab.speakers;
    if vocab.speech_tokens != symbols * speakers {
        return Err(Error::config(
            "vocab.speech_tokens",
            format!("must equal text_tokens × speakers = {}", symbols * speakers),
        ));
    }
    let mut rng = seed::rng(seed, "world", &[]);
    let mut slots: Vec<usize> = (0..vocab.speech_tokens).collect();
    slots.shuffle(&mut rng);
    let token_symbol = slots.iter().map(|&s| s % symbols).collect();
    let token_color = slots.iter().map(|&s| s / symbols).collect();
    let token_embedding = (0..vocab.speech_tokens)
        .map(|_| unit_vector(&mut rng))
        .collect();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(speakers);
    while centroids.len() < speakers {
        let c = unit_vector(&mut rng);
        if centroids.iter().all(|o| cosine(o, &c) < MAX_CENTROID_COS) {
            centroids.push(c);
        }
    }
    let profiles: Vec<SpeakerProfile> = centroids
        .into_iter()
        .map(|centroid| SpeakerProfile {
            centroid,
            f0_scale: rng.gen_range(0.8..1.25),
        })
        .collect();
    let token_f0 = (0..vocab.speech_tokens)
        .map(|i| {
            let base: f64 = rng.gen_range(F0_MIN..F0_MAX);
            let color = slots[i] / symbols;
            (base * profiles[color].f0_scale).clamp(F0_MIN, F0_MAX)
        })
        .collect();
    Ok(SynthWorld {
        seed,
        vocab,
        token_symbol,
        token_color,
        token_embedding,
        token_f0,
        speakers: profiles,
    })
}

fn unit_vector(rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    metrics::speaker_similarity(a, b).unwrap_or(0.0)
}

impl SynthWorld {
    pub fn symbols(&self) -> usize {
        self.vocab.text_tokens
    }

    /// Transcript symbol assigned to anything that is not a speech token.
    pub fn unk_symbol(&self) -> usize {
        self.symbols()
    }

    /// F0 assigned to non-speech tokens: the geometric middle of the range.
    pub fn unk_f0(&self) -> f64 {
        (F0_MIN * F0_MAX).sqrt()
    }

    /// The speech token with the given symbol and color.
    pub fn token_for(&self, symbol: usize, color: usize) -> TokenId {
        let idx = (0..self.vocab.speech_tokens)
            .find(|&i| self.token_symbol[i] == symbol && self.token_color[i] == color)
            .expect("every (symbol, color) pair has a token");
        self.vocab.speech_id(idx)
    }

    pub fn decode(&self, y: &TokenSequence) -> Decoded {
        let content = y.content();
        let mut transcript = Vec::with_capacity(content.len());
        let mut contour = Vec::with_capacity(content.len());
        let mut tok = vec![0.0; EMBED_DIM];
        let mut spk = vec![0.0; EMBED_DIM];
        for &t in content {
            match self.vocab.speech_index(t) {
                Some(i) => {
                    transcript.push(self.token_symbol[i]);
                    contour.push(self.token_f0[i]);
                    let c = &self.speakers[self.token_color[i]].centroid;
                    for k in 0..EMBED_DIM {
                        tok[k] += self.token_embedding[i][k];
                        spk[k] += c[k];
                    }
                }
                None => {
                    transcript.push(self.unk_symbol());
                    contour.push(self.unk_f0());
                }
            }
        }
        let n = content.len().max(1) as f64;
        let embedding: Vec<f64> = tok.iter().zip(&spk).map(|(a, b)| 0.5 * a / n + 0.5 * b / n).collect();
        let embedding = (embedding.iter().any(|&v| v != 0.0)).then_some(embedding);
        Decoded {
            transcript,
            embedding,
            contour: ProsodyContour::new(contour).ok(),
        }
    }

    /// Scores `y` against a corpus item's reference. Responses the evaluators
    /// cannot use get worst-case values: CER of the (possibly empty)
    /// transcript, similarity −1, and the widest possible log-F0 gap.
    pub fn score(&self, item: &CorpusItem, y: &TokenSequence) -> MetricScores {
        let d = self.decode(y);
        let cer = metrics::cer(&d.transcript, &item.transcript).expect("non-empty reference");
        let spk_sim = match &d.embedding {
            Some(e) => metrics::speaker_similarity(e, &item.ref_embedding).unwrap_or(-1.0),
            None => -1.0,
        };
        let prosody_rmse = match &d.contour {
            Some(c) => metrics::log_f0_rmse_dtw(c, &item.ref_contour),
            None => (F0_MAX / F0_MIN).ln(),
        };
        MetricScores {
            cer,
            spk_sim,
            prosody_rmse,
        }
    }
}

/// How references choose token colors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusStyle {
    /// Every token carries the prompt speaker's color.
    Studio,
    /// Noisy recordings: each token carries the speaker's color with
    /// probability 0.35, the next speaker's color with 0.55, and any other
    /// color with the remaining mass shared equally.
    Found,
}

impl CorpusStyle {
    pub fn parse(s: &str) -> Option<CorpusStyle> {
        match s.trim() {
            "studio" => Some(CorpusStyle::Studio),
            "found" => Some(CorpusStyle::Found),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorpusStyle::Studio => "studio",
            CorpusStyle::Found => "found",
        }
    }

    /// Probability of each color for a token spoken by `speaker`.
    pub fn color_probs(self, speaker: usize, speakers: usize) -> Vec<f64> {
        let mut p = vec![0.0; speakers];
        match self {
            CorpusStyle::Studio => p[speaker] = 1.0,
            CorpusStyle::Found if speakers == 1 => p[0] = 1.0,
            CorpusStyle::Found => {
                let drift = (speaker + 1) % speakers;
                p[speaker] = 0.35;
                if speakers == 2 {
                    p[drift] = 0.65;
                } else {
                    p[drift] = 0.55;
                    let rest = 0.10 / (speakers - 2) as f64;
                    for (c, v) in p.iter_mut().enumerate() {
                        if c != speaker && c != drift {
                            *v = rest;
                        }
                    }
                }
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: usize,
    pub speaker: usize,
    /// Target transcript; also the text-token indices of the prompt.
    pub transcript: Vec<usize>,
    pub prompt: TokenSequence,
    pub reference: TokenSequence,
    pub ref_embedding: Vec<f64>,
    pub ref_contour: ProsodyContour,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_items: usize,
    pub seed: u64,
    pub style: CorpusStyle,
    /// `(speaker, transcript)` prompts that must not appear, e.g. a held-out split.
    pub exclude: HashSet<(usize, Vec<usize>)>,
}

impl CorpusSpec {
    pub fn new(n_items: usize, seed: u64) -> Self {
        CorpusSpec {
            n_items,
            seed,
            style: CorpusStyle::Studio,
            exclude: HashSet::new(),
        }
    }
}

pub fn make_corpus(world: &SynthWorld, n_items: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    make_corpus_with(world, &CorpusSpec::new(n_items, seed))
}

/// Unique prompts of 4–16 text tokens; item `i` is spoken by speaker `i mod S`.
pub fn make_corpus_with(world: &SynthWorld, spec: &CorpusSpec) -> Result<Vec<CorpusItem>> {
    if spec.n_items == 0 {
        return Err(Error::config("n_items", "must be at least 1"));
    }
    let symbols = world.symbols();
    let speakers = world.vocab.speakers;
    let mut rng = seed::rng(spec.seed, "corpus", &[]);
    let mut seen = spec.exclude.clone();
    let mut items = Vec::with_capacity(spec.n_items);
    let mut attempts = 0usize;
    while items.len() < spec.n_items {
        attempts += 1;
        if attempts > 1000 * spec.n_items + 10_000 {
            return Err(Error::Invalid("could not draw enough unique prompts".into()));
        }
        let speaker = items.len() % speakers;
        let len = rng.gen_range(MIN_TEXT_LEN..=MAX_TEXT_LEN);
        let text: Vec<usize> = (0..len).map(|_| rng.gen_range(0..symbols)).collect();
        if !seen.insert((speaker, text.clone())) {
            continue;
        }
        let probs = spec.style.color_probs(speaker, speakers);
        let mut ids: Vec<TokenId> = text
            .iter()
            .map(|&s| world.token_for(s, pick(&probs, rng.gen::<f64>())))
            .collect();
        ids.push(EOS);
        items.push(build_item(world, items.len(), speaker, text, TokenSequence::response(ids))?);
    }
    Ok(items)
}

fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn prompt_for(world: &SynthWorld, speaker: usize, text: &[usize]) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.len() + 3);
    ids.push(BOS);
    ids.push(world.vocab.speaker_id(speaker));
    ids.extend(text.iter().map(|&c| world.vocab.text_id(c)));
    ids.push(SEP);
    TokenSequence::prompt(ids)
}

/// Assembles an item and derives its reference features, checking that the
/// reference transcribes to the target.
pub fn build_item(
    world: &SynthWorld,
    id: usize,
    speaker: usize,
    transcript: Vec<usize>,
    reference: TokenSequence,
) -> Result<CorpusItem> {
    if speaker >= world.vocab.speakers {
        return Err(Error::Invalid(format!("speaker {speaker} out of range")));
    }
    if transcript.is_empty() || transcript.iter().any(|&s| s >= world.symbols()) {
        return Err(Error::Invalid(format!("item {id}: bad transcript")));
    }
    let d = world.decode(&reference);
    if d.transcript != transcript {
        return Err(Error::Invalid(format!(
            "item {id}: reference does not transcribe to its target"
        )));
    }
    let ref_embedding = d
        .embedding
        .ok_or_else(|| Error::Invalid(format!("item {id}: reference has no speech")))?;
    let ref_contour = d
        .contour
        .ok_or_else(|| Error::Invalid(format!("item {id}: empty reference")))?;
    Ok(CorpusItem {
        id,
        speaker,
        prompt: prompt_for(world, speaker, &transcript),
        transcript,
        reference,
        ref_embedding,
        ref_contour,
    })
}

/// Serialized corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub speaker: usize,
    pub prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
    pub transcript: Vec<usize>,
}

impl CorpusItem {
    pub fn record(&self) -> CorpusRecord {
        CorpusRecord {
            id: self.id,
            speaker: self.speaker,
            prompt: self.prompt.ids.clone(),
            reference: self.reference.ids.clone(),
            transcript: self.transcript.clone(),
        }
    }

    pub fn from_record(world: &SynthWorld, r: CorpusRecord) -> Result<CorpusItem> {
        let item = build_item(
            world,
            r.id,
            r.speaker,
            r.transcript,
            TokenSequence::response(r.reference),
        )?;
        if item.prompt.ids != r.prompt {
            return Err(Error::Invalid(format!("item {}: prompt does not match transcript", r.id)));
        }
        Ok(item)
    }
}

pub fn corpus_to_jsonl(items: &[CorpusItem]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(&it.record()).expect("plain record"));
        s.push('\n');
    }
    s
}

pub fn corpus_from_jsonl(world: &SynthWorld, text: &str) -> Result<Vec<CorpusItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: CorpusRecord = serde_json::from_str(l)
                .map_err(|e| Error::Invalid(format!("line {}: {e}", n + 1)))?;
            CorpusItem::from_record(world, r)
        })
        .collect()
}

/// The prompt keys of a corpus, for building disjoint splits.
pub fn prompt_keys(items: &[CorpusItem]) -> HashSet<(usize, Vec<usize>)> {
    items
        .iter()
        .map(|it| (it.speaker, it.transcript.clone()))
        .collect()
}
