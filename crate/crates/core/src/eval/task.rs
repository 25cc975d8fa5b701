use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::policy::{Backend, Conditioning, ParametricPolicy, RowInit};
use crate::seq::{Prompt, TokenId, TokenSequence, Vocabulary};

/// Noisy-copy benchmark: the ground truth for each prompt is the prompt
/// itself, and the reference copies it with token-dependent noise.
///
/// Noise rates grow with the token id. Each prompt draws a difficulty level
/// `c ~ U(0, |C|-1)` and takes its tokens from a band of half-width
/// `max(1, |C|/8)` around `c`, so prompts differ in how noisy their tokens
/// are and uncertainty and error covary across prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    vocab: Vocabulary,
    eps: f64,
    spread: f64,
    init: RowInit,
    prompts: Vec<Prompt>,
    targets: Vec<TokenSequence>,
}

impl SyntheticTask {
    pub fn noisy_copy(
        vocab: Vocabulary,
        n: usize,
        prompt_len: usize,
        eps: f64,
        spread: f64,
        seed: u64,
        id_offset: u32,
    ) -> Result<Self> {
        if n == 0 || prompt_len == 0 {
            return Err(validation("noisy-copy task needs at least one non-empty prompt"));
        }
        let init = RowInit::noisy_copy(&vocab, eps, spread)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = (vocab.size() - 1) as f64;
        let width = (vocab.size() as f64 / 8.0).max(1.0);
        let mut prompts = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let level = rng.random::<f64>() * top;
            let tokens: Vec<TokenId> = (0..prompt_len)
                .map(|_| (level + rng.random_range(-width..width)).round().clamp(0.0, top) as TokenId)
                .collect();
            targets.push(TokenSequence::new(&vocab, tokens.clone(), true)?);
            prompts.push(Prompt::new(&vocab, id_offset + i as u32, tokens)?);
        }
        Ok(Self { vocab, eps, spread, init, prompts, targets })
    }

    /// Builds a task from explicit prompts; targets are exact copies.
    pub fn from_prompts(vocab: Vocabulary, prompts: Vec<Prompt>, eps: f64, spread: f64) -> Result<Self> {
        let init = RowInit::noisy_copy(&vocab, eps, spread)?;
        let targets = prompts
            .iter()
            .map(|p| TokenSequence::new(&vocab, p.tokens.clone(), true))
            .collect::<Result<_>>()?;
        Ok(Self { vocab, eps, spread, init, prompts, targets })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn target(&self, i: usize) -> &TokenSequence {
        &self.targets[i]
    }

    /// Per-token noise rates of the reference.
    pub fn noise(&self) -> (&[f64], f64) {
        match &self.init {
            RowInit::NoisyCopy { noise, end_noise } => (noise, *end_noise),
            _ => unreachable!("noisy-copy task always carries noisy-copy rows"),
        }
    }

    /// The noisy reference. Rows are keyed by the aligned prompt token, so
    /// the parameters transfer to unseen prompts.
    pub fn reference_policy(&self, max_len: usize, backend: Backend) -> Result<ParametricPolicy> {
        ParametricPolicy::new(self.vocab, backend, Conditioning::Aligned, max_len, self.init.clone())
    }

    /// Closed-form probability that the reference reproduces prompt `i`
    /// exactly under multinomial sampling.
    pub fn expected_exact_match(&self, i: usize, max_len: usize) -> f64 {
        let (noise, end_noise) = self.noise();
        let toks = &self.prompts[i].tokens;
        if toks.len() > max_len {
            return 0.0;
        }
        let body: f64 = toks.iter().map(|&t| 1.0 - noise[t as usize]).product();
        if toks.len() < max_len {
            body * (1.0 - end_noise)
        } else {
            body
        }
    }
}
