//! Independent reference implementations used by tests and the acceptance run.

use mpo_core::lm::{Decoder, PolicyCheckpoint, TokenSequence, EOS};
use mpo_core::metrics::{Metric, MetricScores, Polarity};
use mpo_core::prefset::{Constraints, PreferenceExample};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::rng;

/// Textbook full-matrix Levenshtein.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

/// Every monotone path from `(0, 0)` to `(n-1, m-1)` with unit steps.
pub fn all_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn go(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n && j + 1 < m {
                go(i + 1, j + 1, n, m, cur, out);
            }
            if i + 1 < n {
                go(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                go(i, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut out = Vec::new();
    go(0, 0, n, m, &mut Vec::new(), &mut out);
    out
}

/// `a` strictly better than `b` under `m`, spelled out from the polarity.
pub fn beats(m: Metric, a: f64, b: f64) -> bool {
    match m.polarity() {
        Polarity::LowerIsBetter => a < b,
        Polarity::HigherIsBetter => a > b,
    }
}

/// Literal reading of the construction rule, by exhaustive scans.
pub fn prefset_oracle(sc: &[MetricScores], metrics: &[Metric], c: &Constraints) -> Option<PreferenceExample> {
    let n = sc.len();
    if n < 2 || metrics.is_empty() {
        return None;
    }
    let eligible = |i: usize| !c.zero_cer_preferred || sc[i].cer == 0.0;
    if !(0..n).any(eligible) {
        return None;
    }
    // best per metric among eligible candidates: nobody eligible beats it, lowest index
    let best_of = |m: Metric| {
        (0..n)
            .filter(|&i| eligible(i))
            .find(|&i| (0..n).filter(|&j| eligible(j)).all(|j| !beats(m, sc[j].get(m), sc[i].get(m))))
            .unwrap()
    };
    let raw_w: Vec<usize> = metrics.iter().map(|&m| best_of(m)).collect();
    let mut w: Vec<(usize, Metric)> = Vec::new();
    let mut l: Vec<(usize, Metric)> = Vec::new();
    for (k, &m) in metrics.iter().enumerate() {
        // walk from the worst towards better ones, skipping anything in w
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut pick = None;
        while !remaining.is_empty() {
            let worst = *remaining
                .iter()
                .find(|&&i| remaining.iter().all(|&j| !beats(m, sc[i].get(m), sc[j].get(m))))
                .unwrap();
            if !raw_w.contains(&worst) {
                pick = Some(worst);
                break;
            }
            remaining.retain(|&i| i != worst);
        }
        let Some(lm) = pick else { continue };
        let wm = raw_w[k];
        if let Some(g) = c.min_gap(m) {
            let gap = if m.polarity() == Polarity::LowerIsBetter {
                sc[lm].get(m) - sc[wm].get(m)
            } else {
                sc[wm].get(m) - sc[lm].get(m)
            };
            if gap <= 0.0 || gap < g {
                continue;
            }
        }
        w.push((wm, m));
        l.push((lm, m));
    }
    if w.is_empty() {
        return None;
    }
    let group = |v: &[(usize, Metric)]| {
        let mut set: Vec<usize> = Vec::new();
        let mut prov: Vec<Vec<Metric>> = Vec::new();
        for &(i, m) in v {
            if let Some(p) = set.iter().position(|&x| x == i) {
                prov[p].push(m);
            } else {
                set.push(i);
                prov.push(vec![m]);
            }
        }
        (set, prov)
    };
    let (w_set, w_provenance) = group(&w);
    let (l_set, l_provenance) = group(&l);
    Some(PreferenceExample {
        w_set,
        l_set,
        w_provenance,
        l_provenance,
    })
}

pub fn random_table(r: &mut impl Rng) -> Vec<MetricScores> {
    let n = r.gen_range(2..=10);
    let coarse = r.gen_bool(0.5);
    (0..n)
        .map(|_| {
            let cer = *[0.0, 0.0, 0.0, 0.125, 0.25, 0.5, 1.0].choose(r).unwrap();
            let (spk, pro) = if coarse {
                (*[-0.2, 0.3, 0.35, 0.5, 0.9].choose(r).unwrap(), *[0.0, 0.05, 0.1, 0.3, 1.6].choose(r).unwrap())
            } else {
                (r.gen_range(-1.0..1.0), r.gen_range(0.0..1.6))
            };
            MetricScores {
                cer,
                spk_sim: spk,
                prosody_rmse: pro,
            }
        })
        .collect()
}

pub fn random_constraints(r: &mut impl Rng) -> Constraints {
    let gap = |r: &mut dyn rand::RngCore| {
        if r.gen_bool(0.25) {
            None
        } else {
            Some(*[0.0, 0.05, 0.1, 0.25].choose(r).unwrap())
        }
    };
    Constraints {
        zero_cer_preferred: r.gen_bool(0.6),
        min_gap_cer: gap(r),
        min_gap_spk_sim: gap(r),
        min_gap_prosody: gap(r),
    }
}

pub fn random_metrics(r: &mut impl Rng) -> Vec<Metric> {
    let mut m: Vec<Metric> = Metric::ALL.iter().copied().filter(|_| r.gen_bool(0.6)).collect();
    if m.is_empty() {
        m.push(*Metric::ALL.choose(r).unwrap());
    }
    m.shuffle(r);
    m
}

pub fn perturbed(m: &PolicyCheckpoint, std: f64, seed: u64) -> PolicyCheckpoint {
    let mut out = m.clone();
    let n = Normal::new(0.0, std).unwrap();
    let mut r = rng(seed);
    for p in &mut out.params {
        for v in p.value.data_mut() {
            *v += n.sample(&mut r);
        }
    }
    out
}

/// `Σ_y π(y|x)·log(π(y|x)/π_ref(y|x))` over every response of at most two
/// tokens: `[EOS]`, `[a, EOS]` and `[a, b]` cut at the length limit.
pub fn exact_kl_two_tokens(m: &PolicyCheckpoint, r: &PolicyCheckpoint, x: &TokenSequence) -> f64 {
    let (dm, dr) = (Decoder::start(m, x).unwrap(), Decoder::start(r, x).unwrap());
    let (p1, q1) = (dm.next_logprobs().to_vec(), dr.next_logprobs().to_vec());
    let mut kl = 0.0;
    for a in 0..p1.len() {
        if a as u32 == EOS {
            kl += p1[a].exp() * (p1[a] - q1[a]);
            continue;
        }
        let (mut dm2, mut dr2) = (dm.clone(), dr.clone());
        dm2.push(a as u32).unwrap();
        dr2.push(a as u32).unwrap();
        let (p2, q2) = (dm2.next_logprobs(), dr2.next_logprobs());
        for b in 0..p2.len() {
            let lp = p1[a] + p2[b];
            kl += lp.exp() * (lp - (q1[a] + q2[b]));
        }
    }
    kl
}

