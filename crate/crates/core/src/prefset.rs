//! Candidate generation and preference-set construction.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{sample_many, PolicyCheckpoint, SamplingConfig, TokenSequence};
use crate::metrics::{Metric, MetricScores};
use crate::par;
use crate::seed;
use crate::synth::{CorpusItem, SynthWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub seed: u64,
    pub y: TokenSequence,
    pub scores: MetricScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCandidates {
    pub item_id: usize,
    pub prompt: TokenSequence,
    pub candidates: Vec<CandidateRecord>,
}

/// `n_per_prompt` samples per item. Candidate `k` of item `i` is drawn with
/// seed `derive(seed, "candidate", [i, k])`.
pub fn generate_candidates(
    model: &PolicyCheckpoint,
    world: &SynthWorld,
    items: &[CorpusItem],
    n_per_prompt: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<ItemCandidates>> {
    if n_per_prompt < 2 {
        return Err(Error::config("n_candidates", "must be at least 2"));
    }
    cfg.validate(model)?;
    par::try_map(items, |item| {
        let seeds: Vec<u64> = (0..n_per_prompt as u64)
            .map(|k| seed::derive(seed, "candidate", &[item.id as u64, k]))
            .collect();
        let ys = sample_many(model, &item.prompt, cfg, &seeds)?;
        let candidates = ys
            .into_iter()
            .zip(seeds)
            .enumerate()
            .map(|(index, (y, seed))| CandidateRecord {
                index,
                seed,
                scores: world.score(item, &y),
                y,
            })
            .collect();
        Ok(ItemCandidates {
            item_id: item.id,
            prompt: item.prompt.clone(),
            candidates,
        })
    })
}

/// Filtering rules applied while building a preference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// Only candidates with CER 0 may be preferred.
    pub zero_cer_preferred: bool,
    /// Minimum gap, in the metric's better direction, between the preferred
    /// and dispreferred member a metric contributes. `Some(g)` also demands
    /// a strictly positive gap, so `Some(0.0)` means "strictly better".
    pub min_gap_cer: Option<f64>,
    pub min_gap_spk_sim: Option<f64>,
    pub min_gap_prosody: Option<f64>,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            zero_cer_preferred: true,
            min_gap_cer: Some(0.0),
            min_gap_spk_sim: Some(0.1),
            min_gap_prosody: Some(0.1),
        }
    }
}

impl Constraints {
    pub fn none() -> Self {
        Constraints {
            zero_cer_preferred: false,
            min_gap_cer: None,
            min_gap_spk_sim: None,
            min_gap_prosody: None,
        }
    }

    pub fn min_gap(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Cer => self.min_gap_cer,
            Metric::SpkSim => self.min_gap_spk_sim,
            Metric::Prosody => self.min_gap_prosody,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub w_set: Vec<usize>,
    pub l_set: Vec<usize>,
    /// Metrics that nominated each member, parallel to the sets.
    pub w_provenance: Vec<Vec<Metric>>,
    pub l_provenance: Vec<Vec<Metric>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub reasons: Vec<String>,
}

/// Value order under `m`, better first; equal values compare equal.
fn value_order(scores: &[MetricScores], m: Metric, a: usize, b: usize) -> std::cmp::Ordering {
    let (x, y) = (scores[a].get(m), scores[b].get(m));
    if m.better(x, y) {
        std::cmp::Ordering::Less
    } else if m.better(y, x) {
        std::cmp::Ordering::Greater
    } else {
        std::cmp::Ordering::Equal
    }
}

/// Indices ordered worst first under `m`; ties keep the lower index first.
pub fn worst_first(scores: &[MetricScores], m: Metric) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| value_order(scores, m, b, a).then(a.cmp(&b)));
    idx
}

/// Builds the preferred and dispreferred sets for one prompt.
///
/// Each enabled metric nominates its best candidate (among CER-0 candidates
/// when that constraint is on) for `w_set` and its worst for `l_set`. A
/// dispreferred nominee already in `w_set` is replaced by the next-worst
/// candidate under the same metric; a metric that runs out of candidates
/// contributes nothing to `l_set`. Each metric's pair then has to clear its
/// margin, otherwise both of that metric's nominations are withdrawn. The
/// item is rejected when either set ends up empty.
pub fn build_preference_set(
    scores: &[MetricScores],
    metrics: &[Metric],
    constraints: &Constraints,
) -> std::result::Result<PreferenceExample, Rejection> {
    let reject = |r: Vec<String>| Err(Rejection { reasons: r });
    if scores.len() < 2 {
        return reject(vec!["fewer than 2 candidates".into()]);
    }
    if metrics.is_empty() {
        return reject(vec!["no metric enabled".into()]);
    }
    let pool: Vec<usize> = (0..scores.len())
        .filter(|&i| !constraints.zero_cer_preferred || scores[i].cer == 0.0)
        .collect();
    if pool.is_empty() {
        return reject(vec!["no candidate with CER 0".into()]);
    }

    let best: Vec<usize> = metrics
        .iter()
        .map(|&m| {
            *pool
                .iter()
                .min_by(|&&a, &&b| value_order(scores, m, a, b).then(a.cmp(&b)))
                .expect("non-empty pool")
        })
        .collect();
    let mut reasons = Vec::new();
    let mut w: Vec<(usize, Metric)> = Vec::new();
    let mut l: Vec<(usize, Metric)> = Vec::new();
    for (k, &m) in metrics.iter().enumerate() {
        let Some(lm) = worst_first(scores, m).into_iter().find(|i| !best.contains(i)) else {
            reasons.push(format!("{}: no dispreferred candidate outside w_set", m.name()));
            continue;
        };
        let wm = best[k];
        if let Some(g) = constraints.min_gap(m) {
            let gap = match m.polarity() {
                crate::metrics::Polarity::HigherIsBetter => scores[wm].get(m) - scores[lm].get(m),
                crate::metrics::Polarity::LowerIsBetter => scores[lm].get(m) - scores[wm].get(m),
            };
            if !(gap > 0.0 && gap >= g) {
                reasons.push(format!("{}: gap {gap:.4} below margin {g}", m.name()));
                continue;
            }
        }
        w.push((wm, m));
        l.push((lm, m));
    }
    if w.is_empty() || l.is_empty() {
        return reject(reasons);
    }
    let (w_set, w_provenance) = group(&w);
    let (l_set, l_provenance) = group(&l);
    Ok(PreferenceExample {
        w_set,
        l_set,
        w_provenance,
        l_provenance,
    })
}

fn group(nominations: &[(usize, Metric)]) -> (Vec<usize>, Vec<Vec<Metric>>) {
    let mut set: Vec<usize> = Vec::new();
    let mut prov: Vec<Vec<Metric>> = Vec::new();
    for &(i, m) in nominations {
        match set.iter().position(|&s| s == i) {
            Some(p) => prov[p].push(m),
            None => {
                set.push(i);
                prov.push(vec![m]);
            }
        }
    }
    (set, prov)
}

/// One uniform draw from each set, seeded by `(seed, item, epoch)`.
pub fn sample_pair(example: &PreferenceExample, seed: u64, item: u64, epoch: u64) -> (usize, usize) {
    let mut rng = seed::rng(seed, "pair", &[item, epoch]);
    let w = example.w_set[rng.gen_range(0..example.w_set.len())];
    let l = example.l_set[rng.gen_range(0..example.l_set.len())];
    (w, l)
}

/// Competition ranks under `m`: 0 is best, ties share the lower rank.
pub fn competition_ranks(scores: &[MetricScores], m: Metric) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            (0..scores.len())
                .filter(|&j| m.better(scores[j].get(m), scores[i].get(m)))
                .count()
        })
        .collect()
}

/// Rank-sum baseline: the lowest total is preferred (ties to the lowest
/// index), the highest dispreferred (ties to the highest index). `None` when
/// every candidate has the same total.
pub fn combined_rankings_baseline(scores: &[MetricScores], metrics: &[Metric]) -> Option<(usize, usize)> {
    if scores.len() < 2 {
        return None;
    }
    let mut total = vec![0usize; scores.len()];
    for &m in metrics {
        for (t, r) in total.iter_mut().zip(competition_ranks(scores, m)) {
            *t += r;
        }
    }
    let w = (0..total.len()).min_by_key(|&i| (total[i], i))?;
    let l = (0..total.len()).max_by_key(|&i| (total[i], i))?;
    (total[w] != total[l]).then_some((w, l))
}

/// How preference examples are formed from scored candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PrefMethod {
    Sets {
        metrics: Vec<Metric>,
        constraints: Constraints,
    },
    CombinedRankings {
        metrics: Vec<Metric>,
    },
}

/// One line of a preference dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefRecord {
    pub item_id: usize,
    pub prompt: TokenSequence,
    pub candidates: Vec<CandidateRecord>,
    pub example: Option<PreferenceExample>,
    pub rejection: Option<Rejection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefReport {
    pub items: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Count of items mentioning each reason prefix (the part before `:`).
    pub reasons: BTreeMap<String, usize>,
}

pub fn build_dataset(candidates: &[ItemCandidates], method: &PrefMethod) -> (Vec<PrefRecord>, PrefReport) {
    let records: Vec<PrefRecord> = par::map(candidates, |ic| {
        let scores: Vec<MetricScores> = ic.candidates.iter().map(|c| c.scores).collect();
        let outcome = match method {
            PrefMethod::Sets {
                metrics,
                constraints,
            } => build_preference_set(&scores, metrics, constraints),
            PrefMethod::CombinedRankings { metrics } => combined_rankings_baseline(&scores, metrics)
                .map(|(w, l)| PreferenceExample {
                    w_set: vec![w],
                    l_set: vec![l],
                    w_provenance: vec![metrics.clone()],
                    l_provenance: vec![metrics.clone()],
                })
                .ok_or_else(|| Rejection {
                    reasons: vec!["rank sums all equal".into()],
                }),
        };
        let (example, rejection) = match outcome {
            Ok(e) => (Some(e), None),
            Err(r) => (None, Some(r)),
        };
        PrefRecord {
            item_id: ic.item_id,
            prompt: ic.prompt.clone(),
            candidates: ic.candidates.clone(),
            example,
            rejection,
        }
    });
    let mut report = PrefReport {
        items: records.len(),
        accepted: 0,
        rejected: 0,
        reasons: BTreeMap::new(),
    };
    for r in &records {
        match &r.rejection {
            None => report.accepted += 1,
            Some(rej) => {
                report.rejected += 1;
                for reason in &rej.reasons {
                    let key = reason.split(':').next().unwrap_or(reason).trim().to_string();
                    *report.reasons.entry(key).or_insert(0) += 1;
                }
            }
        }
    }
    (records, report)
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("serializable"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("line {}: {e}", n + 1))))
        .collect()
}
