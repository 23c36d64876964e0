use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{greedy, PolicyCheckpoint, TokenSequence};
use crate::metrics::{Metric, MetricScores};
use crate::objectives::ce_loss;
use crate::par;
use crate::synth::{CorpusItem, SynthWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEval {
    pub item_id: usize,
    pub y: TokenSequence,
    pub scores: MetricScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub heldout_digest: String,
    pub mean: MetricScores,
    pub heldout_ce: f64,
    pub per_item: Vec<ItemEval>,
}

/// Digest of the held-out items (ids, prompts, references).
pub fn heldout_digest(items: &[CorpusItem]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update((it.id as u64).to_le_bytes());
        for t in it.prompt.ids.iter().chain(&it.reference.ids) {
            h.update(t.to_le_bytes());
        }
        h.update([0xff]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean over items of the per-token cross-entropy of each reference.
pub fn heldout_ce(model: &PolicyCheckpoint, items: &[CorpusItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("empty held-out set".into()));
    }
    let v = par::try_map(items, |it| ce_loss(model, &it.prompt, &it.reference))?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Greedy decoding of every held-out prompt, scored against its reference.
pub fn evaluate(
    model: &PolicyCheckpoint,
    world: &SynthWorld,
    items: &[CorpusItem],
    max_len: usize,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Invalid("empty held-out set".into()));
    }
    let per_item = par::try_map(items, |it| {
        let y = greedy(model, &it.prompt, max_len)?;
        Ok(ItemEval {
            item_id: it.id,
            scores: world.score(it, &y),
            y,
        })
    })?;
    let n = per_item.len() as f64;
    let mut mean = MetricScores {
        cer: 0.0,
        spk_sim: 0.0,
        prosody_rmse: 0.0,
    };
    for r in &per_item {
        mean.cer += r.scores.cer;
        mean.spk_sim += r.scores.spk_sim;
        mean.prosody_rmse += r.scores.prosody_rmse;
    }
    mean.cer /= n;
    mean.spk_sim /= n;
    mean.prosody_rmse /= n;
    Ok(EvalReport {
        name: String::new(),
        heldout_digest: heldout_digest(items),
        mean,
        heldout_ce: heldout_ce(model, items)?,
        per_item,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub scores: MetricScores,
    /// Difference from the first row, per metric.
    pub delta: MetricScores,
    /// Metrics on which this row is the best (first such row on ties).
    pub best: Vec<Metric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// One row per report in input order; deltas are against the first report.
pub fn compare_experiments(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("nothing to compare".into()))?;
    if let Some(r) = reports.iter().find(|r| r.heldout_digest != first.heldout_digest) {
        return Err(Error::Invalid(format!(
            "report `{}` was evaluated on a different held-out set",
            r.name
        )));
    }
    let best_of = |m: Metric| {
        let mut b = 0;
        for (i, r) in reports.iter().enumerate() {
            if m.better(r.mean.get(m), reports[b].mean.get(m)) {
                b = i;
            }
        }
        b
    };
    let winners: Vec<(Metric, usize)> = Metric::ALL.iter().map(|&m| (m, best_of(m))).collect();
    let base = first.mean;
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            name: r.name.clone(),
            scores: r.mean,
            delta: MetricScores {
                cer: r.mean.cer - base.cer,
                spk_sim: r.mean.spk_sim - base.spk_sim,
                prosody_rmse: r.mean.prosody_rmse - base.prosody_rmse,
            },
            best: winners.iter().filter(|(_, w)| *w == i).map(|(m, _)| *m).collect(),
        })
        .collect();
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,cer,spk_sim,prosody,d_cer,d_spk_sim,d_prosody,best\n");
        for r in &self.rows {
            let best: Vec<&str> = r.best.iter().map(|m| m.name()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.scores.cer,
                r.scores.spk_sim,
                r.scores.prosody_rmse,
                r.delta.cer,
                r.delta.spk_sim,
                r.delta.prosody_rmse,
                best.join("|")
            );
        }
        s
    }

    /// Aligned plain-text table; `*` marks the best value per column.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(10);
        let mut s = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}\n",
            "experiment", "CER", "SPK_SIM", "PROSODY", "dCER", "dSPK", "dPROS"
        );
        for r in &self.rows {
            let mark = |m: Metric, v: f64| {
                let star = if r.best.contains(&m) { "*" } else { " " };
                format!("{v:>8.4}{star}")
            };
            let _ = writeln!(
                s,
                "{:<width$}  {}  {}  {}  {:>+9.4}  {:>+9.4}  {:>+9.4}",
                r.name,
                mark(Metric::Cer, r.scores.cer),
                mark(Metric::SpkSim, r.scores.spk_sim),
                mark(Metric::Prosody, r.scores.prosody_rmse),
                r.delta.cer,
                r.delta.spk_sim,
                r.delta.prosody_rmse,
            );
        }
        s
    }
}
