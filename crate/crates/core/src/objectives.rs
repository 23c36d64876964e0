//! Training objectives: per-token cross-entropy, the DPO loss with its
//! Bradley-Terry view, the combined `λ·dpo + ce` loss, and a Monte Carlo
//! KL diagnostic.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{sample_many_scored, FrozenPolicy, PolicyCheckpoint, SamplingConfig, TokenSequence};
use crate::par;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: TokenSequence,
    pub y_w: TokenSequence,
    pub y_l: TokenSequence,
}

/// Reference log-probabilities of one pair; constants during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefLogProbs {
    pub w: f64,
    pub l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeSource {
    /// Cross-entropy on the preferred response of every pair.
    PreferredResponses,
    /// Cross-entropy on separately supplied supervised examples.
    HeldOutSftData,
}

impl CeSource {
    pub fn parse(s: &str) -> Option<CeSource> {
        match s.trim() {
            "preferred-responses" => Some(CeSource::PreferredResponses),
            "held-out-sft-data" => Some(CeSource::HeldOutSftData),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CeSource::PreferredResponses => "preferred-responses",
            CeSource::HeldOutSftData => "held-out-sft-data",
        }
    }
}

/// Which terms are differentiated. Every term is still evaluated and logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Sft,
    DpoOnly { beta: f64 },
    Mpo { beta: f64, lambda: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub ce: f64,
    /// The differentiated quantity: `λ·dpo + ce`, `dpo`, or `ce`.
    pub combined: f64,
    /// Mean implicit-reward margin `r_w − r_l` over the batch.
    pub reward_margin: f64,
}

/// One optimization batch. For [`CeSource::PreferredResponses`] `ce_examples`
/// is ignored and the CE term uses each pair's `y_w`.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub pairs: Vec<PreferencePair>,
    pub ref_logprobs: Vec<RefLogProbs>,
    pub ce_examples: Vec<(TokenSequence, TokenSequence)>,
}

/// `σ(β·(logratio_w − logratio_l))`. Negative arguments go through
/// `1 − σ(−z)` so that swapping `w` and `l` gives exactly `1 − p`.
pub fn bt_probability(logratio_w: f64, logratio_l: f64, beta: f64) -> f64 {
    let z = beta * (logratio_w - logratio_l);
    if z >= 0.0 {
        sigmoid(z)
    } else {
        1.0 - sigmoid(-z)
    }
}

/// `β·log(π_θ(y|x)/π_ref(y|x))`.
pub fn implicit_reward(
    model: &PolicyCheckpoint,
    reference: &FrozenPolicy,
    x: &TokenSequence,
    y: &TokenSequence,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let lp = model.sequence_logprob(x, y)?.total;
    let lr = reference.sequence_logprob(x, y)?.total;
    Ok(beta * (lp - lr))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::config("beta", "must be positive"))
    }
}

/// `−log σ(β·margin)` for a single pair, from sequence log-probabilities.
pub fn dpo_term(lp_w: f64, lp_l: f64, ref_w: f64, ref_l: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l)))
}

/// Mean per-token negative log-likelihood of `y` under teacher forcing.
pub fn ce_loss(model: &PolicyCheckpoint, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
    let lp = model.sequence_logprob(x, y)?;
    Ok(-lp.total / lp.per_token.len() as f64)
}

pub fn reference_logprobs(reference: &FrozenPolicy, pairs: &[PreferencePair]) -> Result<Vec<RefLogProbs>> {
    par::try_map(pairs, |p| {
        Ok(RefLogProbs {
            w: reference.sequence_logprob(&p.x, &p.y_w)?.total,
            l: reference.sequence_logprob(&p.x, &p.y_l)?.total,
        })
    })
}

/// Batch-mean DPO loss.
pub fn dpo_loss(
    model: &PolicyCheckpoint,
    reference: &FrozenPolicy,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    if pairs.is_empty() {
        return Err(Error::Invalid("empty preference batch".into()));
    }
    let refs = reference_logprobs(reference, pairs)?;
    let terms = par::try_map_range(pairs.len(), |i| {
        let p = &pairs[i];
        let w = model.sequence_logprob(&p.x, &p.y_w)?.total;
        let l = model.sequence_logprob(&p.x, &p.y_l)?.total;
        Ok(dpo_term(w, l, refs[i].w, refs[i].l, beta))
    })?;
    Ok(terms.iter().sum::<f64>() / pairs.len() as f64)
}

/// The combined loss value with its breakdown; no gradient.
pub fn mpo_loss(
    model: &PolicyCheckpoint,
    reference: &FrozenPolicy,
    pairs: &[PreferencePair],
    ce_source: CeSource,
    ce_examples: &[(TokenSequence, TokenSequence)],
    beta: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    let batch = Batch {
        ref_logprobs: reference_logprobs(reference, pairs)?,
        pairs: pairs.to_vec(),
        ce_examples: ce_examples.to_vec(),
    };
    Ok(loss_and_grad(model, &batch, Objective::Mpo { beta, lambda }, ce_source, false)?.0)
}

/// Loss breakdown and, when `want_grad`, the gradient of `combined` for
/// every parameter (same order as `model.params`). Work fans out per pair;
/// partial gradients are summed in batch order so the result does not
/// depend on the thread count.
pub fn loss_and_grad(
    model: &PolicyCheckpoint,
    batch: &Batch,
    objective: Objective,
    ce_source: CeSource,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<f64>>>)> {
    let (beta, w_dpo, w_ce) = match objective {
        Objective::Sft => (1.0, 0.0, 1.0),
        Objective::DpoOnly { beta } => (beta, 1.0, 0.0),
        Objective::Mpo { beta, lambda } => {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::config("lambda", "must be non-negative"));
            }
            (beta, lambda, 1.0)
        }
    };
    check_beta(beta)?;
    let sft = matches!(objective, Objective::Sft);
    let separate_ce = sft || ce_source == CeSource::HeldOutSftData;
    if !sft {
        if batch.pairs.is_empty() {
            return Err(Error::Invalid("empty preference batch".into()));
        }
        if batch.ref_logprobs.len() != batch.pairs.len() {
            return Err(Error::Invalid("reference log-probs do not match pairs".into()));
        }
    }
    if separate_ce && batch.ce_examples.is_empty() {
        return Err(Error::Invalid("empty cross-entropy batch".into()));
    }
    let n_pairs = if sft { 0 } else { batch.pairs.len() };
    let n_ce = if separate_ce { batch.ce_examples.len() } else { n_pairs };

    // work items: pairs first, then separate CE examples
    let jobs = n_pairs + if separate_ce { n_ce } else { 0 };
    let parts = par::try_map_range(jobs, |j| -> Result<Part> {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape)?;
        let mut part = Part::default();
        let loss: Var;
        if j < n_pairs {
            let pair = &batch.pairs[j];
            let r = batch.ref_logprobs[j];
            let tw = model.token_logprobs(&mut tape, &p, &pair.x, &pair.y_w)?;
            let tl = model.token_logprobs(&mut tape, &p, &pair.x, &pair.y_l)?;
            let lw = tape.sum(tw)?;
            let ll = tape.sum(tl)?;
            let diff = tape.sub(lw, ll)?;
            let k = tape.scalar(r.l - r.w)?;
            let margin = tape.add(diff, k)?;
            let scaled = tape.scale(margin, beta)?;
            let ls = tape.log_sigmoid(scaled)?;
            let dpo = tape.scale(ls, -1.0)?;
            part.dpo = tape.value(dpo).item();
            part.margin = tape.value(scaled).item();
            let d = tape.scale(dpo, w_dpo / n_pairs as f64)?;
            if separate_ce {
                loss = d;
            } else {
                let m = tape.mean(tw)?;
                let ce = tape.scale(m, -1.0)?;
                part.ce = tape.value(ce).item();
                let c = tape.scale(ce, w_ce / n_ce as f64)?;
                loss = tape.add(d, c)?;
            }
        } else {
            let (x, y) = &batch.ce_examples[j - n_pairs];
            let t = model.token_logprobs(&mut tape, &p, x, y)?;
            let m = tape.mean(t)?;
            let ce = tape.scale(m, -1.0)?;
            part.ce = tape.value(ce).item();
            loss = tape.scale(ce, w_ce / n_ce as f64)?;
        }
        if want_grad {
            let g = tape.backward(loss)?;
            let mut acc: Vec<Vec<f64>> = model.params.iter().map(|q| vec![0.0; q.value.len()]).collect();
            g.accumulate_params(&mut acc);
            part.grad = Some(acc);
        }
        Ok(part)
    })?;

    let mut out = LossBreakdown::default();
    let mut grad: Option<Vec<Vec<f64>>> = None;
    for (j, part) in parts.into_iter().enumerate() {
        if j < n_pairs {
            out.dpo += part.dpo;
            out.reward_margin += part.margin;
        }
        if separate_ce == (j >= n_pairs) {
            out.ce += part.ce;
        }
        if let Some(g) = part.grad {
            match grad.as_mut() {
                None => grad = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    if n_pairs > 0 {
        out.dpo /= n_pairs as f64;
        out.reward_margin /= n_pairs as f64;
    }
    out.ce /= n_ce as f64;
    out.combined = w_dpo * out.dpo + w_ce * out.ce;
    if !out.combined.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((out, grad))
}

#[derive(Default)]
struct Part {
    dpo: f64,
    ce: f64,
    margin: f64,
    grad: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte Carlo `E_x E_{y~π_θ}[log π_θ(y|x) − log π_ref(y|x)]` with plain
/// ancestral sampling up to `max_len` tokens.
pub fn kl_estimate(
    model: &PolicyCheckpoint,
    reference: &PolicyCheckpoint,
    prompts: &[TokenSequence],
    n_samples: usize,
    max_len: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if n_samples == 0 {
        return Err(Error::config("kl_samples", "must be at least 1"));
    }
    if prompts.is_empty() {
        return Err(Error::Invalid("no prompts for KL estimate".into()));
    }
    let cfg = SamplingConfig {
        temperature: 1.0,
        top_k: model.arch.vocab.size(),
        max_len,
    };
    let per_prompt = par::try_map_range(prompts.len(), |i| -> Result<Vec<f64>> {
        let seeds: Vec<u64> = (0..n_samples as u64)
            .map(|k| seed::derive(seed, "kl", &[i as u64, k]))
            .collect();
        sample_many_scored(model, &prompts[i], &cfg, &seeds)?
            .into_iter()
            .map(|(y, lp)| Ok(lp - reference.sequence_logprob(&prompts[i], &y)?.total))
            .collect()
    })?;
    let vals: Vec<f64> = per_prompt.into_iter().flatten().collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        mean,
        stderr: (var / n).sqrt(),
        samples: vals.len(),
    })
}
