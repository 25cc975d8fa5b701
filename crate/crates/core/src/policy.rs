//! Softmax next-token policies with exact log-probabilities and analytic
//! gradients.
//!
//! A policy stores logit rows keyed by [`ContextKey`]. Rows that were never
//! written fall back to the policy's [`RowInit`], which is a pure function of
//! the key. A trained policy created with [`ReferenceModel::clone_reference`]
//! shares the reference's `RowInit`, so an untouched row always reads exactly
//! the reference logits and reads never mutate the table.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{log_softmax_in_place, Distribution};
use crate::error::{validation, Error, Result};
use crate::seq::{Prompt, TokenId, TokenSequence, Vocabulary};

/// Lower bound used when a probability of zero has to be stored as a logit.
pub const LOGIT_FLOOR: f64 = -60.0;

/// How rows are keyed by the prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    /// One row per full prefix.
    Tabular,
    /// One row per last-`k` suffix of the prefix.
    KGram { k: usize },
}

/// How the prompt enters the row key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Rows are keyed by prompt id.
    #[default]
    PromptId,
    /// The prompt is ignored.
    Unconditional,
    /// Rows are keyed by the prompt token aligned with the current position
    /// (or the terminal id once the prompt is exhausted). Shares parameters
    /// across prompts.
    Aligned,
}

/// Prompt component of a [`ContextKey`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CondKey {
    None,
    Prompt(u32),
    Aligned(TokenId),
}

impl CondKey {
    pub(crate) fn tag(&self) -> (u8, u32) {
        match *self {
            CondKey::None => (0, 0),
            CondKey::Prompt(id) => (1, id),
            CondKey::Aligned(t) => (2, t),
        }
    }

    pub(crate) fn from_tag(tag: u8, value: u32) -> Option<Self> {
        match tag {
            0 => Some(CondKey::None),
            1 => Some(CondKey::Prompt(value)),
            2 => Some(CondKey::Aligned(value)),
            _ => None,
        }
    }
}

/// Row key: prompt component plus the (possibly truncated) prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey {
    pub cond: CondKey,
    pub suffix: Vec<TokenId>,
}

/// Logits for rows that were never written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RowInit {
    /// All-zero logits (uniform next-token distribution).
    Zeros,
    /// I.i.d. `N(0, sigma²)` logits, derived deterministically from the key.
    Gaussian { seed: u64, sigma: f64 },
    /// Copy the aligned prompt token with probability `1 - noise`, spreading
    /// the remaining mass evenly over the other tokens. `noise[v]` applies
    /// when token `v` is intended, `end_noise` when the terminal is.
    NoisyCopy { noise: Vec<f64>, end_noise: f64 },
}

impl RowInit {
    /// Per-token noise rates with mean `eps`, spread linearly by `spread` in
    /// `[0, 1)` (token 0 easiest, token `size-1` hardest).
    pub fn noisy_copy(vocab: &Vocabulary, eps: f64, spread: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&eps) {
            return Err(validation(format!("noise rate {eps} outside [0, 0.5)")));
        }
        if !(0.0..1.0).contains(&spread) {
            return Err(validation(format!("noise spread {spread} outside [0, 1)")));
        }
        let c = vocab.size() as f64;
        let noise = (0..vocab.size())
            .map(|v| eps * (1.0 + spread * (2.0 * v as f64 / (c - 1.0) - 1.0)))
            .collect();
        Ok(RowInit::NoisyCopy { noise, end_noise: eps })
    }

    fn row(&self, vocab: &Vocabulary, key: &ContextKey, intended: Option<TokenId>) -> Vec<f64> {
        let n = vocab.alphabet();
        match self {
            RowInit::Zeros => vec![0.0; n],
            RowInit::Gaussian { seed, sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(key_seed(*seed, key));
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sigma * z
                    })
                    .collect()
            }
            RowInit::NoisyCopy { noise, end_noise } => {
                let target = intended.expect("noisy-copy rows need an aligned token");
                let eps = if target == vocab.terminal() { *end_noise } else { noise[target as usize] };
                let other = eps / (n - 1) as f64;
                (0..n)
                    .map(|v| {
                        let p = if v as TokenId == target { 1.0 - eps } else { other };
                        if p > 0.0 {
                            p.ln().max(LOGIT_FLOOR)
                        } else {
                            LOGIT_FLOOR
                        }
                    })
                    .collect()
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Platform-stable seed for a context row.
fn key_seed(seed: u64, key: &ContextKey) -> u64 {
    let (tag, value) = key.cond.tag();
    let mut h = splitmix(seed ^ 0x5EED);
    h = splitmix(h ^ ((tag as u64) << 32 | value as u64));
    h = splitmix(h ^ key.suffix.len() as u64);
    for &t in &key.suffix {
        h = splitmix(h ^ t as u64);
    }
    h
}

/// Mixes several words into one seed; used for per-rollout rng streams.
pub fn mix_seed(words: &[u64]) -> u64 {
    words.iter().fold(0x243F_6A88_85A3_08D3, |h, &w| splitmix(h ^ w))
}

/// Sparse table of logit-gradient rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradTable {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl GradTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &ContextKey) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub(crate) fn row_mut(&mut self, key: ContextKey, width: usize) -> &mut Vec<f64> {
        self.rows.entry(key).or_insert_with(|| vec![0.0; width])
    }

    /// Adds `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        for (k, row) in &other.rows {
            let dst = self.row_mut(k.clone(), row.len());
            for (d, g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Softmax policy over `|C| + 1` next tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricPolicy {
    vocab: Vocabulary,
    backend: Backend,
    conditioning: Conditioning,
    max_len: usize,
    init: RowInit,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl ParametricPolicy {
    pub fn new(
        vocab: Vocabulary,
        backend: Backend,
        conditioning: Conditioning,
        max_len: usize,
        init: RowInit,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(validation("max_len must be positive"));
        }
        if let RowInit::NoisyCopy { noise, .. } = &init {
            if noise.len() != vocab.size() as usize {
                return Err(validation("noisy-copy noise table does not match the vocabulary"));
            }
            if conditioning != Conditioning::Aligned
                && !(conditioning == Conditioning::PromptId && backend == Backend::Tabular)
            {
                return Err(validation(
                    "noisy-copy rows need aligned conditioning or a prompt-keyed tabular backend",
                ));
            }
        }
        if let RowInit::Gaussian { sigma, .. } = init {
            if !(sigma >= 0.0) {
                return Err(validation(format!("reference sigma {sigma} must be non-negative")));
            }
        }
        Ok(Self { vocab, backend, conditioning, max_len, init, rows: BTreeMap::new() })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    /// Cap on ordinary tokens; at this length the terminal is forced.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn init(&self) -> &RowInit {
        &self.init
    }

    /// Materialized rows, in key order.
    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Overwrites (or creates) the logit row for `key`.
    pub fn set_row(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab.alphabet() {
            return Err(validation(format!(
                "logit row has {} entries, expected {}",
                logits.len(),
                self.vocab.alphabet()
            )));
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    /// The same policy with every materialized row dropped.
    pub fn without_rows(&self) -> Self {
        Self { rows: BTreeMap::new(), ..self.clone() }
    }

    pub fn is_forced(&self, prefix_len: usize) -> bool {
        prefix_len >= self.max_len
    }

    fn aligned_token(&self, prompt: &Prompt, pos: usize) -> TokenId {
        prompt.tokens.get(pos).copied().unwrap_or(self.vocab.terminal())
    }

    /// Row key for a prefix of ordinary tokens.
    pub fn key(&self, prompt: &Prompt, prefix: &[TokenId]) -> ContextKey {
        let cond = match self.conditioning {
            Conditioning::PromptId => CondKey::Prompt(prompt.id),
            Conditioning::Unconditional => CondKey::None,
            Conditioning::Aligned => CondKey::Aligned(self.aligned_token(prompt, prefix.len())),
        };
        let suffix = match self.backend {
            Backend::Tabular => prefix.to_vec(),
            Backend::KGram { k } => prefix[prefix.len().saturating_sub(k)..].to_vec(),
        };
        ContextKey { cond, suffix }
    }

    fn init_row(&self, prompt: &Prompt, prefix_len: usize, key: &ContextKey) -> Vec<f64> {
        let intended = match key.cond {
            CondKey::Aligned(t) => Some(t),
            _ => Some(self.aligned_token(prompt, prefix_len)),
        };
        self.init.row(&self.vocab, key, intended)
    }

    /// Logits for a prefix (materialized row or the init fallback).
    pub fn logits(&self, prompt: &Prompt, prefix: &[TokenId]) -> Vec<f64> {
        let key = self.key(prompt, prefix);
        match self.rows.get(&key) {
            Some(r) => r.clone(),
            None => self.init_row(prompt, prefix.len(), &key),
        }
    }

    /// Log-softmax of the prefix's row, or `None` if the terminal is forced.
    pub fn step_log_probs(&self, prompt: &Prompt, prefix: &[TokenId]) -> Option<Vec<f64>> {
        if self.is_forced(prefix.len()) {
            return None;
        }
        let mut row = self.logits(prompt, prefix);
        log_softmax_in_place(&mut row);
        Some(row)
    }

    /// ln P(token | prefix); 0 for the forced terminal.
    pub fn step_log_prob(&self, prompt: &Prompt, prefix: &[TokenId], token: TokenId) -> f64 {
        match self.step_log_probs(prompt, prefix) {
            Some(lp) => lp[token as usize],
            None if token == self.vocab.terminal() => 0.0,
            None => f64::NEG_INFINITY,
        }
    }

    /// Next-token distribution over ordinary tokens plus terminal.
    pub fn next_distribution(&self, prompt: &Prompt, prefix: &TokenSequence) -> Result<Distribution> {
        if prefix.terminated() {
            return Err(Error::State("prefix is already terminated".into()));
        }
        if prefix.len() > self.max_len {
            return Err(Error::State(format!("prefix length {} exceeds cap {}", prefix.len(), self.max_len)));
        }
        Ok(self.next_distribution_raw(prompt, prefix.tokens()))
    }

    pub(crate) fn next_distribution_raw(&self, prompt: &Prompt, prefix: &[TokenId]) -> Distribution {
        match self.step_log_probs(prompt, prefix) {
            None => Distribution::one_hot(self.vocab.alphabet(), self.vocab.terminal() as usize),
            Some(lp) => Distribution::from_probs_unchecked(lp.into_iter().map(f64::exp).collect()),
        }
    }

    /// ln P of a terminated sequence along its unique state path.
    pub fn log_prob_sequence(&self, prompt: &Prompt, seq: &TokenSequence) -> Result<f64> {
        if !seq.terminated() {
            return Err(Error::State("sequence is not terminated".into()));
        }
        if seq.len() > self.max_len {
            return Err(Error::State(format!("sequence length {} exceeds cap {}", seq.len(), self.max_len)));
        }
        let toks = seq.tokens();
        let mut total = 0.0;
        for t in 0..toks.len() {
            total += self.step_log_prob(prompt, &toks[..t], toks[t]);
        }
        total += self.step_log_prob(prompt, toks, self.vocab.terminal());
        Ok(total)
    }

    /// Adds `weight * d ln P(token | prefix) / d logits` into `grads`, using
    /// `d ln softmax_a / d logit_v = [v = a] - p_v`. Forced steps and zero
    /// weights leave `grads` untouched.
    pub fn accumulate_grad_log_prob(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        token: TokenId,
        weight: f64,
        grads: &mut GradTable,
    ) {
        if weight == 0.0 {
            return;
        }
        let Some(lp) = self.step_log_probs(prompt, prefix) else {
            return;
        };
        let row = grads.row_mut(self.key(prompt, prefix), lp.len());
        for (v, (g, l)) in row.iter_mut().zip(&lp).enumerate() {
            let indicator = if v as TokenId == token { 1.0 } else { 0.0 };
            *g += weight * (indicator - l.exp());
        }
    }

    pub(crate) fn existing_row_mut(&mut self, key: &ContextKey) -> Option<&mut Vec<f64>> {
        self.rows.get_mut(key)
    }

    /// Copies the init logits of a prefix's row into the table so it can be
    /// updated. No-op for forced prefixes and rows that already exist.
    pub fn materialize(&mut self, prompt: &Prompt, prefix: &[TokenId]) {
        if self.is_forced(prefix.len()) {
            return;
        }
        let key = self.key(prompt, prefix);
        if !self.rows.contains_key(&key) {
            let init = self.init_row(prompt, prefix.len(), &key);
            self.rows.insert(key, init);
        }
    }

    /// Mutable logits for a key, materializing it on first use. Only valid
    /// when the suffix is the full prefix (tabular backends).
    #[cfg(test)]
    pub(crate) fn row_for_update(&mut self, key: &ContextKey, prompt: &Prompt) -> &mut Vec<f64> {
        if !self.rows.contains_key(key) {
            let init = self.init_row(prompt, key.suffix.len(), key);
            self.rows.insert(key.clone(), init);
        }
        self.rows.get_mut(key).expect("row just inserted")
    }
}

/// A frozen policy used for rewards and as the training initialization.
#[derive(Debug, Clone)]
pub struct ReferenceModel(Arc<ParametricPolicy>);

impl ReferenceModel {
    pub fn new(policy: ParametricPolicy) -> Self {
        Self(Arc::new(policy))
    }

    pub fn policy(&self) -> &ParametricPolicy {
        &self.0
    }

    /// A trainable copy; its untouched rows read the reference logits.
    pub fn clone_reference(&self) -> ParametricPolicy {
        (*self.0).clone()
    }
}

impl std::ops::Deref for ReferenceModel {
    type Target = ParametricPolicy;

    fn deref(&self) -> &ParametricPolicy {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vocab(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    fn gaussian(n: u32, max_len: usize, seed: u64) -> ParametricPolicy {
        ParametricPolicy::new(
            vocab(n),
            Backend::Tabular,
            Conditioning::PromptId,
            max_len,
            RowInit::Gaussian { seed, sigma: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = ParametricPolicy::new(vocab(3), Backend::Tabular, Conditioning::Unconditional, 4, RowInit::Zeros)
            .unwrap();
        let d = p.next_distribution(&Prompt::unconditional(), &TokenSequence::empty()).unwrap();
        for &q in d.probs() {
            assert_abs_diff_eq!(q, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn prefix_at_cap_forces_terminal() {
        let p = gaussian(3, 2, 1);
        let v = vocab(3);
        let pre = TokenSequence::new(&v, vec![0, 1], false).unwrap();
        let d = p.next_distribution(&Prompt::unconditional(), &pre).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn explicit_logits_softmax_ratios() {
        let mut p = gaussian(3, 4, 1);
        let prompt = Prompt::unconditional();
        let key = p.key(&prompt, &[]);
        p.set_row(key, vec![1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]).unwrap();
        let d = p.next_distribution(&prompt, &TokenSequence::empty()).unwrap();
        for (q, want) in d.probs().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert_abs_diff_eq!(*q, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn terminated_prefix_is_a_state_error() {
        let p = gaussian(3, 4, 1);
        let v = vocab(3);
        let pre = TokenSequence::new(&v, vec![0], true).unwrap();
        assert!(matches!(p.next_distribution(&Prompt::unconditional(), &pre), Err(Error::State(_))));
        let open = TokenSequence::new(&v, vec![0], false).unwrap();
        assert!(matches!(p.log_prob_sequence(&Prompt::unconditional(), &open), Err(Error::State(_))));
    }

    #[test]
    fn uniform_sequence_log_probs() {
        let p = ParametricPolicy::new(vocab(3), Backend::Tabular, Conditioning::PromptId, 4, RowInit::Zeros).unwrap();
        let v = vocab(3);
        let q = Prompt::unconditional();
        let s = TokenSequence::new(&v, vec![1, 2], true).unwrap();
        assert_abs_diff_eq!(p.log_prob_sequence(&q, &s).unwrap(), 3.0 * 0.25f64.ln(), epsilon = 1e-12);
        let e = TokenSequence::new(&v, vec![], true).unwrap();
        assert_abs_diff_eq!(p.log_prob_sequence(&q, &e).unwrap(), 0.25f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_rows_are_stable_and_key_dependent() {
        let p = gaussian(4, 5, 9);
        let q = Prompt::unconditional();
        assert_eq!(p.logits(&q, &[1, 2]), p.logits(&q, &[1, 2]));
        assert_ne!(p.logits(&q, &[1, 2]), p.logits(&q, &[2, 1]));
        let other = Prompt { id: 3, tokens: vec![] };
        assert_ne!(p.logits(&q, &[1]), p.logits(&other, &[1]));
    }

    #[test]
    fn zero_weight_and_forced_steps_are_no_ops() {
        let p = gaussian(3, 2, 4);
        let q = Prompt::unconditional();
        let mut g = GradTable::new();
        p.accumulate_grad_log_prob(&q, &[0], 1, 0.0, &mut g);
        p.accumulate_grad_log_prob(&q, &[0, 1], 3, 1.0, &mut g);
        assert!(g.is_empty());
    }

    #[test]
    fn one_hot_policy_has_vanishing_gradient() {
        let mut p = gaussian(3, 4, 4);
        let q = Prompt::unconditional();
        p.set_row(p.key(&q, &[]), vec![-200.0, 0.0, -200.0, -200.0]).unwrap();
        let mut g = GradTable::new();
        p.accumulate_grad_log_prob(&q, &[], 1, 1.0, &mut g);
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn clone_is_isolated_from_reference() {
        let r = ReferenceModel::new(gaussian(4, 5, 2));
        let mut c = r.clone_reference();
        let q = Prompt { id: 1, tokens: vec![] };
        let key = c.key(&q, &[0]);
        c.row_for_update(&key, &q)[0] += 1.0;
        assert_ne!(c.logits(&q, &[0]), r.logits(&q, &[0]));
        assert_eq!(r.row_count(), 0);
    }

    #[test]
    fn kgram_keys_truncate() {
        let p = ParametricPolicy::new(vocab(4), Backend::KGram { k: 2 }, Conditioning::Unconditional, 6, RowInit::Zeros)
            .unwrap();
        assert_eq!(p.key(&Prompt::unconditional(), &[0, 1, 2, 3]).suffix, vec![2, 3]);
        assert_eq!(p.key(&Prompt::unconditional(), &[3]).suffix, vec![3]);
    }

    #[test]
    fn noisy_copy_rows() {
        let v = vocab(4);
        let init = RowInit::noisy_copy(&v, 0.1, 0.0).unwrap();
        let p = ParametricPolicy::new(v, Backend::KGram { k: 0 }, Conditioning::Aligned, 6, init).unwrap();
        let q = Prompt::new(&v, 0, vec![2, 0]).unwrap();
        let d = p.next_distribution(&q, &TokenSequence::empty()).unwrap();
        assert_abs_diff_eq!(d.probs()[2], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[0], 0.025, epsilon = 1e-12);
        let d = p.next_distribution(&q, &TokenSequence::new(&v, vec![2, 0], false).unwrap()).unwrap();
        assert_abs_diff_eq!(d.probs()[4], 0.9, epsilon = 1e-12);
        // noisy copy cannot be keyed by prompt id under a k-gram backend
        let init = RowInit::noisy_copy(&v, 0.1, 0.0).unwrap();
        assert!(ParametricPolicy::new(v, Backend::KGram { k: 1 }, Conditioning::PromptId, 6, init).is_err());
    }

    #[test]
    fn noisy_spread_keeps_mean() {
        let v = vocab(5);
        let RowInit::NoisyCopy { noise, .. } = RowInit::noisy_copy(&v, 0.1, 0.8).unwrap() else { unreachable!() };
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        assert_abs_diff_eq!(mean, 0.1, epsilon = 1e-12);
        assert!(noise.windows(2).all(|w| w[0] < w[1]));
    }
}
