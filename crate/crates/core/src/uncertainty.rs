//! Entropy-based uncertainty (token, word, utterance), the utterance
//! uncertainty ratio, and the correlation statistics used to relate
//! uncertainty to error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{entropy, Distribution};
use crate::error::{validation, Result};
use crate::par;
use crate::policy::mix_seed;
use crate::seq::TokenId;

/// The model distribution at one decoding step and the token drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub dist: Distribution,
    pub token: TokenId,
}

/// Per-step distributions of one generated sequence, terminal step included.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepwiseLog {
    steps: Vec<StepRecord>,
}

impl StepwiseLog {
    pub fn new(steps: Vec<StepRecord>) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn token_entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| entropy(&s.dist)).collect()
    }
}

/// Half-open token span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

/// Mean token entropy over `[start, end)`.
pub fn word_uncertainty(log: &StepwiseLog, span: Span) -> Result<f64> {
    if span.start >= span.end {
        return Err(validation(format!("empty span [{}, {})", span.start, span.end)));
    }
    if span.end > log.len() {
        return Err(validation(format!("span end {} beyond sequence length {}", span.end, log.len())));
    }
    let sum: f64 = log.steps[span.start..span.end].iter().map(|s| entropy(&s.dist)).sum();
    Ok(sum / (span.end - span.start) as f64)
}

/// Mean token entropy over the whole sequence.
pub fn utterance_uncertainty(log: &StepwiseLog) -> Result<f64> {
    if log.is_empty() {
        return Err(validation("utterance uncertainty of an empty log"));
    }
    word_uncertainty(log, Span::new(0, log.len()))
}

/// Fixed-length chunks standing in for word boundaries; the last chunk may
/// be shorter.
pub fn chunk_spans(len: usize, width: usize) -> Vec<Span> {
    let width = width.max(1);
    (0..len).step_by(width).map(|s| Span::new(s, (s + width).min(len))).collect()
}

/// Utterance uncertainty ratio: mean of per-utterance `trained / baseline`.
pub fn uur(trained: &[f64], baseline: &[f64]) -> Result<f64> {
    if trained.len() != baseline.len() {
        return Err(validation(format!("length mismatch: {} vs {}", trained.len(), baseline.len())));
    }
    if trained.is_empty() {
        return Err(validation("uur needs at least one utterance"));
    }
    if let Some(i) = baseline.iter().position(|&b| !(b > 0.0)) {
        return Err(validation(format!("baseline uncertainty at index {i} is not positive")));
    }
    Ok(trained.iter().zip(baseline).map(|(t, b)| t / b).sum::<f64>() / trained.len() as f64)
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(validation(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(validation("need at least two points"));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(validation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; ties share their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Least-squares `(slope, intercept)`.
pub fn linreg(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_pair(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(validation("degenerate x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    Pearson,
    Spearman,
}

impl Statistic {
    pub fn compute(&self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        match self {
            Statistic::Pearson => pearson(xs, ys),
            Statistic::Spearman => spearman(xs, ys),
        }
    }
}

/// Two-sided permutation p-value `(1 + #{|r_perm| >= |r_obs|}) / (n_perm + 1)`.
pub fn permutation_p_value(xs: &[f64], ys: &[f64], statistic: Statistic, n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm < 100 {
        return Err(validation(format!("n_perm must be >= 100, got {n_perm}")));
    }
    let observed = statistic.compute(xs, ys)?.abs();
    let hits = par::map_range(n_perm, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
        let mut perm = ys.to_vec();
        perm.shuffle(&mut rng);
        statistic.compute(xs, &perm).map(|r| r.abs() >= observed - 1e-12)
    });
    let mut count = 0usize;
    for h in hits {
        count += h? as usize;
    }
    Ok((1 + count) as f64 / (n_perm + 1) as f64)
}
