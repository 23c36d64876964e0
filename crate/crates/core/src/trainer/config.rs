use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{ArchConfig, SamplingConfig};
use crate::metrics::Metric;
use crate::objectives::{CeSource, Objective};
use crate::prefset::{Constraints, PrefMethod};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sft,
    DpoOnly,
    Mpo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::DpoOnly => "dpo-only",
            Stage::Mpo => "mpo",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "sft" => Some(Stage::Sft),
            "dpo-only" => Some(Stage::DpoOnly),
            "mpo" => Some(Stage::Mpo),
            _ => None,
        }
    }
}

/// How preference pairs are formed from the candidate pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    Sets,
    CombinedRankings,
}

impl PairSource {
    pub fn name(self) -> &'static str {
        match self {
            PairSource::Sets => "sets",
            PairSource::CombinedRankings => "combined-rankings",
        }
    }

    pub fn parse(s: &str) -> Option<PairSource> {
        match s {
            "sets" => Some(PairSource::Sets),
            "combined-rankings" => Some(PairSource::CombinedRankings),
            _ => None,
        }
    }
}

/// Every knob of one pipeline stage. Serialized as a flat `key = value`
/// text file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub beta: f64,
    pub lambda: f64,
    pub ce_source: CeSource,
    pub pair_source: PairSource,
    pub metrics: Vec<Metric>,
    pub constraints: Constraints,
    pub n_candidates: usize,
    pub sampling: SamplingConfig,
    pub eval_interval: u64,
    pub eval_max_len: usize,
    pub kl_samples: usize,
    pub kl_max_len: usize,
    pub arch: ArchConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::for_stage(Stage::Mpo)
    }
}

impl TrainingConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let sft = stage == Stage::Sft;
        TrainingConfig {
            stage,
            seed: 0,
            steps: if sft { 3000 } else { 2000 },
            batch_size: if sft { 16 } else { 8 },
            lr: if sft { 1e-3 } else { 1e-4 },
            warmup_steps: if sft { 100 } else { 20 },
            weight_decay: if sft { 0.01 } else { 0.0 },
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            beta: 0.1,
            lambda: 10.0,
            ce_source: CeSource::PreferredResponses,
            pair_source: PairSource::Sets,
            metrics: Metric::ALL.to_vec(),
            constraints: Constraints::default(),
            n_candidates: 10,
            sampling: SamplingConfig::default(),
            eval_interval: if sft { 500 } else { 250 },
            eval_max_len: 40,
            kl_samples: 2,
            kl_max_len: 40,
            arch: ArchConfig::default(),
        }
    }

    pub fn objective(&self) -> Objective {
        match self.stage {
            Stage::Sft => Objective::Sft,
            Stage::DpoOnly => Objective::DpoOnly { beta: self.beta },
            Stage::Mpo => Objective::Mpo {
                beta: self.beta,
                lambda: self.lambda,
            },
        }
    }

    pub fn pref_method(&self) -> PrefMethod {
        match self.pair_source {
            PairSource::Sets => PrefMethod::Sets {
                metrics: self.metrics.clone(),
                constraints: self.constraints.clone(),
            },
            PairSource::CombinedRankings => PrefMethod::CombinedRankings {
                metrics: self.metrics.clone(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, f: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(f, "must be positive"))
            }
        };
        let nonneg = |v: f64, f: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(f, "must be non-negative"))
            }
        };
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        pos(self.lr, "lr")?;
        nonneg(self.weight_decay, "weight_decay")?;
        for (v, f) in [(self.adam_beta1, "adam_beta1"), (self.adam_beta2, "adam_beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, "must be in [0, 1)"));
            }
        }
        pos(self.adam_eps, "adam_eps")?;
        nonneg(self.grad_clip, "grad_clip")?;
        pos(self.beta, "beta")?;
        nonneg(self.lambda, "lambda")?;
        if self.metrics.is_empty() {
            return Err(Error::config("metrics", "at least one metric required"));
        }
        for (g, f) in [
            (self.constraints.min_gap_cer, "min_gap_cer"),
            (self.constraints.min_gap_spk_sim, "min_gap_spk_sim"),
            (self.constraints.min_gap_prosody, "min_gap_prosody"),
        ] {
            if let Some(g) = g {
                nonneg(g, f)?;
            }
        }
        if self.n_candidates < 2 {
            return Err(Error::config("n_candidates", "must be at least 2"));
        }
        pos(self.sampling.temperature, "temperature")?;
        if self.sampling.top_k == 0 {
            return Err(Error::config("top_k", "must be positive"));
        }
        if self.sampling.max_len == 0 || self.sampling.max_len > self.arch.max_response_len {
            return Err(Error::config("max_len", "must be in 1..=arch.max_response_len"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        for (v, f) in [(self.eval_max_len, "eval_max_len"), (self.kl_max_len, "kl_max_len")] {
            if v == 0 || v > self.arch.max_response_len {
                return Err(Error::config(f, "must be in 1..=arch.max_response_len"));
            }
        }
        if self.kl_samples == 0 {
            return Err(Error::config("kl_samples", "must be positive"));
        }
        self.arch.validate()
    }

    pub fn to_text(&self) -> String {
        let gap = |g: Option<f64>| g.map_or("none".to_string(), |v| v.to_string());
        let metrics: Vec<&str> = self.metrics.iter().map(|m| m.name()).collect();
        let a = &self.arch;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("schema_version", CONFIG_SCHEMA_VERSION.to_string());
        kv("stage", self.stage.name().into());
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("beta", self.beta.to_string());
        kv("lambda", self.lambda.to_string());
        kv("ce_source", self.ce_source.name().into());
        kv("pair_source", self.pair_source.name().into());
        kv("metrics", metrics.join(","));
        kv("zero_cer_preferred", self.constraints.zero_cer_preferred.to_string());
        kv("min_gap_cer", gap(self.constraints.min_gap_cer));
        kv("min_gap_spk_sim", gap(self.constraints.min_gap_spk_sim));
        kv("min_gap_prosody", gap(self.constraints.min_gap_prosody));
        kv("n_candidates", self.n_candidates.to_string());
        kv("temperature", self.sampling.temperature.to_string());
        kv("top_k", self.sampling.top_k.to_string());
        kv("max_len", self.sampling.max_len.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("eval_max_len", self.eval_max_len.to_string());
        kv("kl_samples", self.kl_samples.to_string());
        kv("kl_max_len", self.kl_max_len.to_string());
        kv("arch.text_tokens", a.vocab.text_tokens.to_string());
        kv("arch.speakers", a.vocab.speakers.to_string());
        kv("arch.speech_tokens", a.vocab.speech_tokens.to_string());
        kv("arch.layers", a.layers.to_string());
        kv("arch.embed_dim", a.embed_dim.to_string());
        kv("arch.heads", a.heads.to_string());
        kv("arch.mlp_hidden", a.mlp_hidden.to_string());
        kv("arch.context", a.context.to_string());
        kv("arch.response_offset", a.response_offset.to_string());
        kv("arch.max_response_len", a.max_response_len.to_string());
        s
    }

    /// Parses a config file. Keys absent from the file keep the defaults
    /// of the file's `stage` (or of `mpo` when no stage is given).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let stage = match pairs.iter().find(|(k, _)| k == "stage") {
            Some((_, v)) => Stage::parse(v).ok_or_else(|| Error::config("stage", format!("unknown stage `{v}`")))?,
            None => Stage::Mpo,
        };
        let mut c = TrainingConfig::for_stage(stage);
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(k, format!("cannot parse `{v}`")))
        }
        let gap = |v: &str| -> Result<Option<f64>> {
            if v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        };
        let k = key;
        match k {
            "schema_version" => {
                let v: u32 = num(k, value)?;
                if v != CONFIG_SCHEMA_VERSION {
                    return Err(Error::config(k, format!("unsupported version {v}")));
                }
            }
            "stage" => {
                self.stage = Stage::parse(value).ok_or_else(|| Error::config(k, format!("unknown stage `{value}`")))?
            }
            "seed" => self.seed = num(k, value)?,
            "steps" => self.steps = num(k, value)?,
            "batch_size" => self.batch_size = num(k, value)?,
            "lr" => self.lr = num(k, value)?,
            "warmup_steps" => self.warmup_steps = num(k, value)?,
            "weight_decay" => self.weight_decay = num(k, value)?,
            "adam_beta1" => self.adam_beta1 = num(k, value)?,
            "adam_beta2" => self.adam_beta2 = num(k, value)?,
            "adam_eps" => self.adam_eps = num(k, value)?,
            "grad_clip" => self.grad_clip = num(k, value)?,
            "beta" => self.beta = num(k, value)?,
            "lambda" => self.lambda = num(k, value)?,
            "ce_source" => {
                self.ce_source =
                    CeSource::parse(value).ok_or_else(|| Error::config(k, format!("unknown source `{value}`")))?
            }
            "pair_source" => {
                self.pair_source =
                    PairSource::parse(value).ok_or_else(|| Error::config(k, format!("unknown source `{value}`")))?
            }
            "metrics" => {
                self.metrics = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| Metric::parse(s).ok_or_else(|| Error::config(k, format!("unknown metric `{s}`"))))
                    .collect::<Result<_>>()?
            }
            "zero_cer_preferred" => self.constraints.zero_cer_preferred = num(k, value)?,
            "min_gap_cer" => self.constraints.min_gap_cer = gap(value)?,
            "min_gap_spk_sim" => self.constraints.min_gap_spk_sim = gap(value)?,
            "min_gap_prosody" => self.constraints.min_gap_prosody = gap(value)?,
            "n_candidates" => self.n_candidates = num(k, value)?,
            "temperature" => self.sampling.temperature = num(k, value)?,
            "top_k" => self.sampling.top_k = num(k, value)?,
            "max_len" => self.sampling.max_len = num(k, value)?,
            "eval_interval" => self.eval_interval = num(k, value)?,
            "eval_max_len" => self.eval_max_len = num(k, value)?,
            "kl_samples" => self.kl_samples = num(k, value)?,
            "kl_max_len" => self.kl_max_len = num(k, value)?,
            "arch.text_tokens" => self.arch.vocab.text_tokens = num(k, value)?,
            "arch.speakers" => self.arch.vocab.speakers = num(k, value)?,
            "arch.speech_tokens" => self.arch.vocab.speech_tokens = num(k, value)?,
            "arch.layers" => self.arch.layers = num(k, value)?,
            "arch.embed_dim" => self.arch.embed_dim = num(k, value)?,
            "arch.heads" => self.arch.heads = num(k, value)?,
            "arch.mlp_hidden" => self.arch.mlp_hidden = num(k, value)?,
            "arch.context" => self.arch.context = num(k, value)?,
            "arch.response_offset" => self.arch.response_offset = num(k, value)?,
            "arch.max_response_len" => self.arch.max_response_len = num(k, value)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for stage in [Stage::Sft, Stage::DpoOnly, Stage::Mpo] {
            let mut c = TrainingConfig::for_stage(stage);
            c.lr = 3.7e-5;
            c.constraints.min_gap_prosody = None;
            c.metrics = vec![Metric::Prosody, Metric::Cer];
            let back = TrainingConfig::from_text(&c.to_text()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = TrainingConfig::from_text("stage = mpo\nbeta = -1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "beta"));
        let err = TrainingConfig::from_text("bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "bogus"));
    }
}
