use std::ops::Deref;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::vocab::{TokenSequence, Vocabulary};
use crate::tensor::Tensor;

/// Architecture hyper-parameters of the decoder-only model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub vocab: Vocabulary,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    /// Position id of the first response token. Response token `i` sits at
    /// `response_offset + i`, so the token that predicts speech token `i`
    /// shares its position id with text token `i` of a `[BOS, speaker, text.., SEP]`
    /// prompt.
    pub response_offset: usize,
    pub max_response_len: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab: Vocabulary::default(),
            layers: 2,
            embed_dim: 64,
            heads: 4,
            mlp_hidden: 128,
            context: 128,
            response_offset: 3,
            max_response_len: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.layers < 1 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.embed_dim < 8 {
            return Err(Error::config("embed_dim", "must be at least 8"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} does not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::config("mlp_hidden", "must be positive"));
        }
        if self.context < 2 {
            return Err(Error::config("context", "must be at least 2"));
        }
        if self.max_response_len == 0 || self.response_offset + self.max_response_len > self.context {
            return Err(Error::config(
                "max_response_len",
                "response positions must fit in the context window",
            ));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab.size(), self.embed_dim, self.mlp_hidden);
        let mut specs = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc.weight"), vec![d, h]),
                (p("mlp.fc.bias"), vec![h]),
                (p("mlp.proj.weight"), vec![h, d]),
                (p("mlp.proj.bias"), vec![d]),
            ]);
        }
        specs.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, v]),
            ("head.bias".to_string(), vec![v]),
        ]);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const PER_LAYER: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Model parameters plus the metadata needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub arch: ArchConfig,
    pub params: Vec<NamedParam>,
    pub step: u64,
    /// Seeds that produced these parameters, oldest first (`init:7`, `sft:11`, ...).
    pub seed_lineage: Vec<String>,
}

/// Builds a freshly initialized model. Weights are `N(0, 0.02)`; residual
/// output projections are further scaled by `1/sqrt(2·layers)`.
pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<PolicyCheckpoint> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let proj_scale = 1.0 / ((2 * arch.layers) as f64).sqrt();
    let params = arch
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let k = if name.ends_with("out.weight") || name.ends_with("proj.weight") {
                    proj_scale
                } else {
                    1.0
                };
                (0..n).map(|_| normal.sample(&mut rng) * k).collect()
            };
            NamedParam {
                name,
                value: Tensor::new(shape, data).expect("spec shape"),
            }
        })
        .collect();
    Ok(PolicyCheckpoint {
        arch: arch.clone(),
        params,
        step: 0,
        seed_lineage: vec![format!("init:{seed}")],
    })
}

/// Parameters registered on one tape.
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.0[2 + l * PER_LAYER + k]
    }

    fn tail(&self, k: usize) -> Var {
        self.0[self.0.len() - 4 + k]
    }
}

impl PolicyCheckpoint {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Registers every parameter as a trainable leaf; slot `i` is `params[i]`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Result<BoundParams> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, &p.value))
            .collect::<Result<Vec<_>>>()
            .map(BoundParams)
    }

    fn check_pair(&self, x: &TokenSequence, y: &TokenSequence) -> Result<()> {
        let vocab = &self.arch.vocab;
        if x.is_empty() || y.is_empty() {
            return Err(Error::Sequence("prompt and response must be non-empty".into()));
        }
        if let Some(&t) = x.ids.iter().chain(&y.ids).find(|&&t| !vocab.contains(t)) {
            return Err(Error::Sequence(format!("token {t} outside vocabulary")));
        }
        let len = x.len() + y.len();
        if len > self.arch.context || self.arch.response_offset + y.len() > self.arch.context {
            return Err(Error::ContextOverflow {
                len,
                context: self.arch.context,
            });
        }
        Ok(())
    }

    /// Stream `x ++ y[..len-1]` with its position ids.
    fn stream(&self, x: &[u32], y_prefix: &[u32]) -> (Vec<usize>, Vec<usize>) {
        let tokens = x.iter().chain(y_prefix).map(|&t| t as usize).collect();
        let positions = (0..x.len())
            .chain((0..y_prefix.len()).map(|i| self.arch.response_offset + i))
            .collect();
        (tokens, positions)
    }

    /// Log-probabilities over the full vocabulary at each row `from..` of the stream.
    fn log_probs_from(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        tokens: &[usize],
        positions: &[usize],
        from: usize,
    ) -> Result<Var> {
        let a = &self.arch;
        let tok = tape.embed(p.0[0], tokens)?;
        let pos = tape.embed(p.0[1], positions)?;
        let mut h = tape.add(tok, pos)?;
        for l in 0..a.layers {
            let n1 = tape.layer_norm(h, p.layer(l, 0), p.layer(l, 1))?;
            let qkv = tape.matmul(n1, p.layer(l, 2))?;
            let qkv = tape.add_row(qkv, p.layer(l, 3))?;
            let att = tape.causal_attention(qkv, a.heads)?;
            let att = tape.matmul(att, p.layer(l, 4))?;
            let att = tape.add_row(att, p.layer(l, 5))?;
            h = tape.add(h, att)?;
            let n2 = tape.layer_norm(h, p.layer(l, 6), p.layer(l, 7))?;
            let f = tape.matmul(n2, p.layer(l, 8))?;
            let f = tape.add_row(f, p.layer(l, 9))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p.layer(l, 10))?;
            let f = tape.add_row(f, p.layer(l, 11))?;
            h = tape.add(h, f)?;
        }
        let rows = tokens.len() - from;
        let h = tape.slice_rows(h, from, rows)?;
        let h = tape.layer_norm(h, p.tail(0), p.tail(1))?;
        let logits = tape.matmul(h, p.tail(2))?;
        let logits = tape.add_row(logits, p.tail(3))?;
        tape.log_softmax(logits)
    }

    /// Per-token `log π(y_i | x, y_<i)` under teacher forcing, as a `[len(y)]` node.
    pub fn token_logprobs(
        &self,
        tape: &mut Tape<'_>,
        p: &BoundParams,
        x: &TokenSequence,
        y: &TokenSequence,
    ) -> Result<Var> {
        self.check_pair(x, y)?;
        let (tokens, positions) = self.stream(&x.ids, &y.ids[..y.len() - 1]);
        let lp = self.log_probs_from(tape, p, &tokens, &positions, x.len() - 1)?;
        let targets: Vec<usize> = y.ids.iter().map(|&t| t as usize).collect();
        tape.gather(lp, &targets)
    }

    /// `log π(y|x)` with its per-token terms, evaluated without keeping a graph.
    pub fn sequence_logprob(&self, x: &TokenSequence, y: &TokenSequence) -> Result<SequenceLogProb> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape)?;
        let lp = self.token_logprobs(&mut tape, &p, x, y)?;
        let per_token = tape.value(lp).data().to_vec();
        let total = per_token.iter().sum();
        Ok(SequenceLogProb { total, per_token })
    }

    /// Full-vocabulary log-distribution of the token following `x ++ prefix`.
    pub fn next_token_logprobs(&self, x: &TokenSequence, prefix: &[u32]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(Error::Sequence("empty prompt".into()));
        }
        let len = x.len() + prefix.len() + 1;
        if len > self.arch.context || self.arch.response_offset + prefix.len() + 1 > self.arch.context {
            return Err(Error::ContextOverflow {
                len,
                context: self.arch.context,
            });
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape)?;
        let (tokens, positions) = self.stream(&x.ids, prefix);
        let last = tokens.len() - 1;
        let lp = self.log_probs_from(&mut tape, &p, &tokens, &positions, last)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Per-position full-vocabulary log-distributions while teacher forcing `y`.
    pub fn position_distributions(&self, x: &TokenSequence, y: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        self.check_pair(x, y)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape)?;
        let (tokens, positions) = self.stream(&x.ids, &y.ids[..y.len() - 1]);
        let lp = self.log_probs_from(&mut tape, &p, &tokens, &positions, x.len() - 1)?;
        let v = self.arch.vocab.size();
        Ok(tape.value(lp).data().chunks(v).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// Read-only reference policy. Holds its own deep copy of the parameters
/// and exposes no mutable access, so no update can reach it.
#[derive(Clone, Debug)]
pub struct FrozenPolicy(Arc<PolicyCheckpoint>);

pub fn clone_frozen(model: &PolicyCheckpoint) -> FrozenPolicy {
    FrozenPolicy(Arc::new(model.clone()))
}

impl FrozenPolicy {
    pub fn checkpoint(&self) -> &PolicyCheckpoint {
        &self.0
    }
}

impl Deref for FrozenPolicy {
    type Target = PolicyCheckpoint;

    fn deref(&self) -> &PolicyCheckpoint {
        &self.0
    }
}
