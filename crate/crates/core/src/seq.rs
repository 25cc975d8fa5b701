//! Vocabulary, token sequences, prompts and trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

pub type TokenId = u32;

/// Ordinary tokens `0..size` plus the terminal token `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(validation(format!("vocabulary size must be >= 2, got {size}")));
        }
        Ok(Self { size })
    }

    /// Number of ordinary tokens.
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn terminal(&self) -> TokenId {
        self.size
    }

    /// Size of every next-token distribution (ordinary tokens plus terminal).
    pub fn alphabet(&self) -> usize {
        self.size as usize + 1
    }

    pub fn is_ordinary(&self, t: TokenId) -> bool {
        t < self.size
    }
}

/// A token sequence. Ordinary tokens are stored in `tokens`; the terminal
/// token is represented by the `terminated` flag so it can only ever sit at
/// the end.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    terminated: bool,
}

impl TokenSequence {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a sequence from ordinary tokens.
    pub fn new(vocab: &Vocabulary, tokens: Vec<TokenId>, terminated: bool) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| !vocab.is_ordinary(t)) {
            return Err(validation(format!(
                "token {bad} is not an ordinary token of a size-{} vocabulary",
                vocab.size()
            )));
        }
        Ok(Self { tokens, terminated })
    }

    /// Builds a sequence from raw ids where the terminal id may appear once,
    /// as the last element.
    pub fn from_ids(vocab: &Vocabulary, ids: &[TokenId]) -> Result<Self> {
        let (body, terminated) = match ids.split_last() {
            Some((&last, body)) if last == vocab.terminal() => (body, true),
            _ => (ids, false),
        };
        for (pos, &t) in body.iter().enumerate() {
            if t == vocab.terminal() {
                return Err(Error::State(format!("terminal token at position {pos} is not last")));
            }
        }
        Self::new(vocab, body.to_vec(), terminated)
    }

    pub(crate) fn from_parts_unchecked(tokens: Vec<TokenId>, terminated: bool) -> Self {
        Self { tokens, terminated }
    }

    /// Ordinary tokens, without the terminal.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    /// Number of ordinary tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Raw ids including the terminal id when terminated.
    pub fn ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut v = self.tokens.clone();
        if self.terminated {
            v.push(vocab.terminal());
        }
        v
    }

    /// Prefix of the first `k` ordinary tokens (never terminated).
    pub fn prefix(&self, k: usize) -> TokenSequence {
        Self { tokens: self.tokens[..k].to_vec(), terminated: false }
    }

    pub fn push(&mut self, vocab: &Vocabulary, t: TokenId) -> Result<()> {
        if self.terminated {
            return Err(Error::State("cannot extend a terminated sequence".into()));
        }
        if t == vocab.terminal() {
            self.terminated = true;
        } else if vocab.is_ordinary(t) {
            self.tokens.push(t);
        } else {
            return Err(validation(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }
}

/// Conditioning input. An empty token list is used for unconditional runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Prompt {
    pub id: u32,
    pub tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(vocab: &Vocabulary, id: u32, tokens: Vec<TokenId>) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|&&t| !vocab.is_ordinary(t)) {
            return Err(validation(format!("prompt {id} contains non-ordinary token {bad}")));
        }
        Ok(Self { id, tokens })
    }

    pub fn unconditional() -> Self {
        Self::default()
    }
}

/// One step of a trajectory: the action taken from the current prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub token: TokenId,
    /// ln P of the action under the generating policy (0 for forced steps).
    pub logprob: f64,
    /// True when the action was the forced terminal at the length cap.
    pub forced: bool,
}

/// A complete rollout `a_0 -> a_1 -> ... -> a⊤`.
///
/// States are implicit: state `k` is the prefix of the first `k` ordinary
/// tokens, and the final state is the terminated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Prompt,
    pub steps: Vec<Transition>,
}

impl Trajectory {
    /// Number of transitions, including the terminal step.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_complete(&self, vocab: &Vocabulary) -> bool {
        match self.steps.split_last() {
            Some((last, body)) => {
                last.token == vocab.terminal() && body.iter().all(|s| vocab.is_ordinary(s.token))
            }
            None => false,
        }
    }

    /// The prefix state before transition `k`.
    pub fn state(&self, k: usize) -> TokenSequence {
        TokenSequence::from_parts_unchecked(self.steps[..k].iter().map(|s| s.token).collect(), false)
    }

    /// The terminated sequence this trajectory produced.
    pub fn terminal(&self, vocab: &Vocabulary) -> Result<TokenSequence> {
        if !self.is_complete(vocab) {
            return Err(Error::State("trajectory is not complete".into()));
        }
        let n = self.steps.len() - 1;
        Ok(TokenSequence::from_parts_unchecked(
            self.steps[..n].iter().map(|s| s.token).collect(),
            true,
        ))
    }

    /// Rebuilds the unique state path of a terminated sequence; transition
    /// log-probabilities are left at zero.
    pub fn from_terminal(prompt: Prompt, seq: &TokenSequence, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if !seq.terminated() {
            return Err(Error::State("sequence is not terminated".into()));
        }
        let mut steps: Vec<Transition> =
            seq.tokens().iter().map(|&token| Transition { token, logprob: 0.0, forced: false }).collect();
        steps.push(Transition { token: vocab.terminal(), logprob: 0.0, forced: seq.len() >= max_len });
        Ok(Self { prompt, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_bounds() {
        assert!(Vocabulary::new(1).is_err());
        let v = Vocabulary::new(3).unwrap();
        assert_eq!(v.terminal(), 3);
        assert_eq!(v.alphabet(), 4);
    }

    #[test]
    fn terminal_only_at_end() {
        let v = Vocabulary::new(3).unwrap();
        let s = TokenSequence::from_ids(&v, &[0, 2, 3]).unwrap();
        assert!(s.terminated());
        assert_eq!(s.tokens(), &[0, 2]);
        assert_eq!(s.ids(&v), vec![0, 2, 3]);
        assert!(TokenSequence::from_ids(&v, &[3, 1]).is_err());
        assert!(TokenSequence::from_ids(&v, &[4]).is_err());
    }

    #[test]
    fn push_after_terminal_fails() {
        let v = Vocabulary::new(2).unwrap();
        let mut s = TokenSequence::empty();
        s.push(&v, 1).unwrap();
        s.push(&v, 2).unwrap();
        assert!(matches!(s.push(&v, 0), Err(Error::State(_))));
    }

    #[test]
    fn trajectory_states_extend_by_one() {
        let v = Vocabulary::new(3).unwrap();
        let seq = TokenSequence::from_ids(&v, &[1, 0, 3]).unwrap();
        let tr = Trajectory::from_terminal(Prompt::unconditional(), &seq, &v, 5).unwrap();
        assert_eq!(tr.len(), 3);
        assert!(tr.state(0).is_empty());
        for k in 1..tr.len() {
            assert_eq!(&tr.state(k).tokens()[..k - 1], tr.state(k - 1).tokens());
        }
        assert_eq!(tr.terminal(&v).unwrap(), seq);
    }
}
