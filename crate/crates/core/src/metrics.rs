//! Evaluation dimensions: intelligibility (character error rate), speaker
//! similarity (cosine), and prosody (log-F0 RMSE along a DTW alignment).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cer,
    SpkSim,
    Prosody,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cer, Metric::SpkSim, Metric::Prosody];

    pub fn polarity(self) -> Polarity {
        match self {
            Metric::SpkSim => Polarity::HigherIsBetter,
            Metric::Cer | Metric::Prosody => Polarity::LowerIsBetter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cer => "cer",
            Metric::SpkSim => "spk_sim",
            Metric::Prosody => "prosody",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s.trim() {
            "cer" => Some(Metric::Cer),
            "spk_sim" | "spk" | "sim" => Some(Metric::SpkSim),
            "prosody" => Some(Metric::Prosody),
            _ => None,
        }
    }

    /// True when `a` is strictly better than `b` under this metric's polarity.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self.polarity() {
            Polarity::HigherIsBetter => a > b,
            Polarity::LowerIsBetter => a < b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub cer: f64,
    pub spk_sim: f64,
    pub prosody_rmse: f64,
}

impl MetricScores {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Cer => self.cer,
            Metric::SpkSim => self.spk_sim,
            Metric::Prosody => self.prosody_rmse,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.cer >= 0.0
            && self.cer.is_finite()
            && (-1.0..=1.0).contains(&self.spk_sim)
            && self.prosody_rmse >= 0.0
            && self.prosody_rmse.is_finite()
    }
}

/// F0-like contour; every value strictly positive so its log is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyContour(Vec<f64>);

impl ProsodyContour {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("empty prosody contour".into()));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid("prosody contour values must be positive".into()));
        }
        Ok(ProsodyContour(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by reference length; can exceed 1.
pub fn cer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("CER needs a non-empty reference".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

pub fn speaker_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "speaker_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("zero-norm speaker embedding".into()));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Optimal DTW alignment between two log-contours.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwAlignment {
    /// Sum of `|log g_i − log r_j|` along the path.
    pub cost: f64,
    /// `(generated index, reference index)` from `(0, 0)` to the last pair.
    pub path: Vec<(usize, usize)>,
    pub rmse: f64,
}

/// Full DTW with local cost `|log g_i − log r_j|` and steps
/// `{(1,0), (0,1), (1,1)}`. On equal cumulative cost the backtrack prefers
/// the diagonal, then advancing only the generated side.
pub fn dtw_align(generated: &ProsodyContour, reference: &ProsodyContour) -> DtwAlignment {
    let g: Vec<f64> = generated.values().iter().map(|v| v.ln()).collect();
    let r: Vec<f64> = reference.values().iter().map(|v| v.ln()).collect();
    let (n, m) = (g.len(), r.len());
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let local = (g[i] - r[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + local;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    let sq: f64 = path.iter().map(|&(a, b)| (g[a] - r[b]).powi(2)).sum();
    DtwAlignment {
        cost: acc[n * m - 1],
        rmse: (sq / path.len() as f64).sqrt(),
        path,
    }
}

/// RMSE of log-F0 differences along the optimal DTW path; the path length
/// is the denominator.
pub fn log_f0_rmse_dtw(generated: &ProsodyContour, reference: &ProsodyContour) -> f64 {
    dtw_align(generated, reference).rmse
}
