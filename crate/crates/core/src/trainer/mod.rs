//! SFT and preference-optimization stages, evaluation, and run logs.

mod config;
mod optim;
mod report;

pub use config::{PairSource, Stage, TrainingConfig, CONFIG_SCHEMA_VERSION};
pub use optim::{clip_grads, grad_norm, AdamW};
pub use report::{
    compare_experiments, evaluate, heldout_ce, heldout_digest, ComparisonRow, ComparisonTable, EvalReport,
    ItemEval,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{build_model, clone_frozen, FrozenPolicy, PolicyCheckpoint, TokenSequence};
use crate::objectives::{kl_estimate, loss_and_grad, Batch, CeSource, Objective, PreferencePair, RefLogProbs};
use crate::par;
use crate::prefset::{sample_pair, PrefRecord, PreferenceExample};
use crate::seed;
use crate::synth::{CorpusItem, SynthWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub dpo: Option<f64>,
    pub ce: f64,
    pub combined: f64,
    pub reward_margin: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub cer: f64,
    pub spk_sim: f64,
    pub prosody: f64,
    pub heldout_ce: f64,
    pub kl: Option<f64>,
    pub kl_stderr: Option<f64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub const STEP_CSV_HEADER: &str = "stage,step,dpo,ce,combined,reward_margin,grad_norm,config_hash";
pub const EVAL_CSV_HEADER: &str = "step,cer,spk_sim,prosody,heldout_ce,kl,kl_stderr,config_hash";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl TrainingLog {
    pub fn steps_csv(&self) -> String {
        let mut s = format!("{STEP_CSV_HEADER}\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.stage.name(),
                r.step,
                opt(r.dpo),
                r.ce,
                r.combined,
                opt(r.reward_margin),
                r.grad_norm,
                r.config_hash
            ));
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.evals {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.cer,
                r.spk_sim,
                r.prosody,
                r.heldout_ce,
                opt(r.kl),
                opt(r.kl_stderr),
                r.config_hash
            ));
        }
        s
    }
}

/// Result of one stage. On divergence `failure` is set and `model` holds
/// the last parameters whose loss was finite.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: PolicyCheckpoint,
    pub log: TrainingLog,
    pub failure: Option<String>,
}

impl StageOutcome {
    pub fn into_result(self) -> Result<(PolicyCheckpoint, TrainingLog)> {
        match self.failure {
            None => Ok((self.model, self.log)),
            Some(reason) => Err(Error::Divergence {
                step: self.log.steps.len(),
                reason,
            }),
        }
    }
}

/// Position `p` of an endless stream that visits `0..n` once per epoch in
/// a fresh seeded order. Returns `(epoch, index)`.
pub struct EpochStream {
    n: usize,
    seed: u64,
    tag: &'static str,
    epoch: u64,
    order: Vec<usize>,
}

impl EpochStream {
    pub fn new(n: usize, seed: u64, tag: &'static str) -> Self {
        EpochStream {
            n,
            seed,
            tag,
            epoch: u64::MAX,
            order: Vec::new(),
        }
    }

    pub fn at(&mut self, p: u64) -> (u64, usize) {
        let epoch = p / self.n as u64;
        if epoch != self.epoch {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut seed::rng(self.seed, self.tag, &[epoch]));
            self.epoch = epoch;
        }
        (epoch, self.order[(p % self.n as u64) as usize])
    }
}

fn warmup_scale(cfg: &TrainingConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// The shared optimization loop. `batch_at(step)` supplies each batch;
/// `eval_at(step, model)` runs at every `eval_interval` and after the last step.
pub fn optimize(
    cfg: &TrainingConfig,
    mut model: PolicyCheckpoint,
    objective: Objective,
    mut batch_at: impl FnMut(u64) -> Result<Batch>,
    mut eval_at: impl FnMut(u64, &PolicyCheckpoint) -> Result<EvalRecord>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut opt = AdamW::new(
        &model,
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        cfg.weight_decay,
    );
    let mut log = TrainingLog::default();
    let with_pairs = !matches!(objective, Objective::Sft);
    // Parameters that last produced a finite loss and gradient.
    let mut last_good = model.clone();
    for step in 0..cfg.steps {
        if step % cfg.eval_interval == 0 {
            log.evals.push(eval_at(step, &model)?);
        }
        let batch = batch_at(step)?;
        let (loss, grads) = match loss_and_grad(&model, &batch, objective, cfg.ce_source, true) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                return Ok(StageOutcome {
                    model: last_good,
                    log,
                    failure: Some(format!("non-finite {what} at step {step}")),
                });
            }
            Err(e) => return Err(e),
        };
        let mut grads = grads.expect("gradient requested");
        let norm = clip_grads(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Ok(StageOutcome {
                model,
                log,
                failure: Some(format!("non-finite gradient at step {step}")),
            });
        }
        log.steps.push(StepRecord {
            stage: cfg.stage,
            step,
            dpo: with_pairs.then_some(loss.dpo),
            ce: loss.ce,
            combined: loss.combined,
            reward_margin: with_pairs.then_some(loss.reward_margin),
            grad_norm: norm,
            config_hash: hash.clone(),
        });
        last_good.clone_from(&model);
        opt.step(&mut model, &grads, warmup_scale(cfg, step));
        model.step += 1;
    }
    log.evals.push(eval_at(cfg.steps, &model)?);
    Ok(StageOutcome {
        model,
        log,
        failure: None,
    })
}

/// Supervised training on `(prompt, reference)` pairs. Starts from `init`
/// or from a fresh model seeded by `derive(seed, "init")`.
pub fn run_sft(
    cfg: &TrainingConfig,
    world: &SynthWorld,
    train: &[CorpusItem],
    heldout: &[CorpusItem],
    init: Option<PolicyCheckpoint>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let mut model = match init {
        Some(m) => m,
        None => build_model(&cfg.arch, seed::derive(cfg.seed, "init", &[]))?,
    };
    model.seed_lineage.push(format!("sft:{}", cfg.seed));
    let mut stream = EpochStream::new(train.len(), cfg.seed, "sft-order");
    let b = cfg.batch_size as u64;
    let hash = cfg.hash();
    optimize(
        cfg,
        model,
        Objective::Sft,
        |step| {
            let ce_examples = (0..b)
                .map(|k| {
                    let it = &train[stream.at(step * b + k).1];
                    (it.prompt.clone(), it.reference.clone())
                })
                .collect();
            Ok(Batch {
                ce_examples,
                ..Batch::default()
            })
        },
        |step, m| eval_record(m, None, world, heldout, cfg, step, &hash),
    )
}

fn eval_record(
    model: &PolicyCheckpoint,
    reference: Option<&FrozenPolicy>,
    world: &SynthWorld,
    heldout: &[CorpusItem],
    cfg: &TrainingConfig,
    step: u64,
    hash: &str,
) -> Result<EvalRecord> {
    if heldout.is_empty() {
        return Ok(EvalRecord {
            step,
            cer: f64::NAN,
            spk_sim: f64::NAN,
            prosody: f64::NAN,
            heldout_ce: f64::NAN,
            kl: None,
            kl_stderr: None,
            config_hash: hash.to_string(),
        });
    }
    let rep = evaluate(model, world, heldout, cfg.eval_max_len)?;
    let kl = match reference {
        Some(r) => {
            let prompts: Vec<TokenSequence> = heldout.iter().map(|it| it.prompt.clone()).collect();
            Some(kl_estimate(
                model,
                r,
                &prompts,
                cfg.kl_samples,
                cfg.kl_max_len,
                seed::derive(cfg.seed, "kl-eval", &[]),
            )?)
        }
        None => None,
    };
    Ok(EvalRecord {
        step,
        cer: rep.mean.cer,
        spk_sim: rep.mean.spk_sim,
        prosody: rep.mean.prosody_rmse,
        heldout_ce: rep.heldout_ce,
        kl: kl.map(|k| k.mean),
        kl_stderr: kl.map(|k| k.stderr),
        config_hash: hash.to_string(),
    })
}

/// An accepted preference example with its candidate sequences.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub item_id: usize,
    pub prompt: TokenSequence,
    pub candidates: Vec<TokenSequence>,
    pub example: PreferenceExample,
}

pub fn training_examples(records: &[PrefRecord]) -> Vec<TrainExample> {
    records
        .iter()
        .filter_map(|r| {
            r.example.as_ref().map(|e| TrainExample {
                item_id: r.item_id,
                prompt: r.prompt.clone(),
                candidates: r.candidates.iter().map(|c| c.y.clone()).collect(),
                example: e.clone(),
            })
        })
        .collect()
}

/// Preference optimization from an SFT checkpoint. The reference policy is
/// a frozen copy of `sft`; its log-probabilities for every set member are
/// computed once up front. `ce_data` feeds the CE term when the config asks
/// for held-out SFT data.
pub fn run_preference_stage(
    cfg: &TrainingConfig,
    world: &SynthWorld,
    sft: &PolicyCheckpoint,
    examples: &[TrainExample],
    heldout: &[CorpusItem],
    ce_data: &[CorpusItem],
) -> Result<StageOutcome> {
    cfg.validate()?;
    if cfg.stage == Stage::Sft {
        return Err(Error::config("stage", "preference stage needs dpo-only or mpo"));
    }
    if examples.is_empty() {
        return Err(Error::Invalid("no accepted preference examples".into()));
    }
    if cfg.ce_source == CeSource::HeldOutSftData && cfg.stage == Stage::Mpo && ce_data.is_empty() {
        return Err(Error::config("ce_source", "held-out-sft-data needs a CE corpus"));
    }
    let reference = clone_frozen(sft);
    let ref_lp = reference_table(&reference, examples)?;
    let mut model = sft.clone();
    model.seed_lineage.push(format!("{}:{}", cfg.stage.name(), cfg.seed));
    let b = cfg.batch_size as u64;
    let mut stream = EpochStream::new(examples.len(), cfg.seed, "pref-order");
    let mut ce_stream = EpochStream::new(ce_data.len().max(1), cfg.seed, "pref-ce-order");
    let hash = cfg.hash();
    optimize(
        cfg,
        model,
        cfg.objective(),
        |step| {
            let mut batch = Batch::default();
            for k in 0..b {
                let (epoch, i) = stream.at(step * b + k);
                let ex = &examples[i];
                let (w, l) = sample_pair(&ex.example, cfg.seed, ex.item_id as u64, epoch);
                batch.pairs.push(PreferencePair {
                    x: ex.prompt.clone(),
                    y_w: ex.candidates[w].clone(),
                    y_l: ex.candidates[l].clone(),
                });
                batch.ref_logprobs.push(RefLogProbs {
                    w: ref_lp[i][w],
                    l: ref_lp[i][l],
                });
                if cfg.ce_source == CeSource::HeldOutSftData && !ce_data.is_empty() {
                    let it = &ce_data[ce_stream.at(step * b + k).1];
                    batch.ce_examples.push((it.prompt.clone(), it.reference.clone()));
                }
            }
            Ok(batch)
        },
        |step, m| eval_record(m, Some(&reference), world, heldout, cfg, step, &hash),
    )
}

/// `log π_ref(y|x)` for every set member of every example; NaN elsewhere.
fn reference_table(reference: &FrozenPolicy, examples: &[TrainExample]) -> Result<Vec<Vec<f64>>> {
    par::try_map(examples, |ex| {
        let mut row = vec![f64::NAN; ex.candidates.len()];
        for &i in ex.example.w_set.iter().chain(&ex.example.l_set) {
            if i >= row.len() {
                return Err(Error::Invalid(format!("item {}: candidate {i} out of range", ex.item_id)));
            }
            row[i] = reference.sequence_logprob(&ex.prompt, &ex.candidates[i])?.total;
        }
        Ok(row)
    })
}
