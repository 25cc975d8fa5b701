use crate::dist::{lse, Distribution};
use crate::error::{Error, Result};
use crate::par;
use crate::policy::ParametricPolicy;
use crate::reward::{check_temperature, RewardModel};
use crate::seq::{Prompt, TokenSequence, Vocabulary};

/// Default cap on the number of enumerated terminals.
pub const DEFAULT_BUDGET: u128 = 1_000_000;

/// `Σ_{l=0}^{max_len} size^l`, or `None` on overflow.
pub fn terminal_count(size: u32, max_len: usize) -> Option<u128> {
    let c = size as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for l in 0..=max_len {
        if l > 0 {
            level = level.checked_mul(c)?;
        }
        total = total.checked_add(level)?;
    }
    Some(total)
}

/// Every terminated sequence with at most `max_len` ordinary tokens, in
/// lexicographic order of the ordinary tokens (a prefix precedes its
/// extensions).
pub fn enumerate_terminals(vocab: &Vocabulary, max_len: usize, budget: u128) -> Result<Vec<TokenSequence>> {
    enumerate_with(vocab.size(), max_len, budget)
}

fn enumerate_with(size: u32, max_len: usize, budget: u128) -> Result<Vec<TokenSequence>> {
    let required = terminal_count(size, max_len).unwrap_or(u128::MAX);
    if required > budget {
        return Err(Error::Budget { required, budget });
    }
    let mut out = Vec::with_capacity(required as usize);
    let mut prefix = Vec::with_capacity(max_len);
    fn walk(c: u32, max_len: usize, prefix: &mut Vec<u32>, out: &mut Vec<TokenSequence>) {
        out.push(TokenSequence::from_parts_unchecked(prefix.clone(), true));
        if prefix.len() == max_len {
            return;
        }
        for t in 0..c {
            prefix.push(t);
            walk(c, max_len, prefix, out);
            prefix.pop();
        }
    }
    walk(size, max_len, &mut prefix, &mut out);
    Ok(out)
}

/// `ln P⊤(x)` for each terminal, in enumeration order.
pub fn terminal_log_probs(policy: &ParametricPolicy, prompt: &Prompt, terminals: &[TokenSequence]) -> Result<Vec<f64>> {
    par::map_slice(terminals, |s| policy.log_prob_sequence(prompt, s)).into_iter().collect()
}

fn to_distribution(logs: &[f64]) -> Distribution {
    Distribution::from_probs_unchecked(logs.iter().map(|l| l.exp()).collect())
}

/// Exact terminal distribution of a policy.
pub fn terminal_distribution(policy: &ParametricPolicy, prompt: &Prompt, budget: u128) -> Result<Distribution> {
    let terms = enumerate_terminals(policy.vocab(), policy.max_len(), budget)?;
    let logs = terminal_log_probs(policy, prompt, &terms)?;
    Distribution::new(logs.iter().map(|l| l.exp()).collect())
}

/// Normalized sharpened reward `p_ref(x)^(1/T) / Z` in log space. At `T = 1`
/// the reference terminal distribution is already normalized and is
/// returned unchanged.
fn target_logs(reference_logs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return reference_logs.to_vec();
    }
    let scaled: Vec<f64> = reference_logs.iter().map(|l| l / temperature).collect();
    let z = lse(&scaled);
    scaled.into_iter().map(|l| l - z).collect()
}

/// The distribution an aligned policy should reproduce: `P⊤(x) ∝ R(x)`.
pub fn target_distribution(rm: &RewardModel, prompt: &Prompt, temperature: f64, budget: u128) -> Result<Distribution> {
    check_temperature(temperature)?;
    let r = rm.reference();
    let terms = enumerate_terminals(r.vocab(), r.max_len(), budget)?;
    let logs = terminal_log_probs(r, prompt, &terms)?;
    Ok(to_distribution(&target_logs(&logs, temperature)))
}

/// Per-terminal log-probabilities under the policy, the reference and the
/// sharpened target.
#[derive(Debug, Clone)]
pub struct TerminalTable {
    pub terminals: Vec<TokenSequence>,
    pub policy: Vec<f64>,
    pub reference: Vec<f64>,
    pub target: Vec<f64>,
    pub temperature: f64,
}

impl TerminalTable {
    pub fn build(
        policy: &ParametricPolicy,
        rm: &RewardModel,
        prompt: &Prompt,
        temperature: f64,
        budget: u128,
    ) -> Result<Self> {
        check_temperature(temperature)?;
        let r = rm.reference();
        if policy.vocab() != r.vocab() || policy.max_len() != r.max_len() {
            return Err(crate::error::validation("policy and reference disagree on vocabulary or length cap"));
        }
        let terminals = enumerate_terminals(policy.vocab(), policy.max_len(), budget)?;
        let pol = terminal_log_probs(policy, prompt, &terminals)?;
        let reference = terminal_log_probs(r, prompt, &terminals)?;
        let target = target_logs(&reference, temperature);
        Ok(Self { terminals, policy: pol, reference, target, temperature })
    }

    pub fn policy_distribution(&self) -> Distribution {
        to_distribution(&self.policy)
    }

    pub fn reference_distribution(&self) -> Distribution {
        to_distribution(&self.reference)
    }

    pub fn target_distribution(&self) -> Distribution {
        to_distribution(&self.target)
    }

    /// Total variation between policy and target.
    pub fn tv(&self) -> f64 {
        super::total_variation(&self.policy_distribution(), &self.target_distribution()).expect("same support")
    }

    /// KL(policy || target).
    pub fn kl(&self) -> f64 {
        super::kl_divergence(&self.policy_distribution(), &self.target_distribution()).expect("target has full support")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::entropy;
    use crate::policy::{Backend, Conditioning, ReferenceModel, RowInit};
    use crate::reward::TemperatureSchedule;
    use approx::assert_abs_diff_eq;

    fn v(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    #[test]
    fn counts() {
        // A one-token alphabet is below the vocabulary minimum but still
        // exercises the walk: ⊤, a⊤, aa⊤.
        let one = enumerate_with(1, 2, DEFAULT_BUDGET).unwrap();
        let lens: Vec<usize> = one.iter().map(|s| s.len()).collect();
        assert_eq!(lens, vec![0, 1, 2]);
        assert_eq!(terminal_count(2, 2), Some(7));
        assert_eq!(terminal_count(4, 5), Some(1365));
        assert_eq!(terminal_count(u32::MAX, 40), None);
        let e = enumerate_terminals(&v(2), 2, DEFAULT_BUDGET).unwrap();
        assert_eq!(e.len(), 7);
        let e = enumerate_terminals(&v(4), 5, DEFAULT_BUDGET).unwrap();
        assert_eq!(e.len(), (0..=5).map(|l| 4usize.pow(l)).sum::<usize>());
        assert_eq!(e.len(), 1365);
        let mut sorted = e.clone();
        sorted.sort();
        assert_eq!(sorted, e);
        assert!(e.iter().all(|s| s.terminated()));
    }

    #[test]
    fn budget_refusal_reports_requirement() {
        match enumerate_terminals(&v(4), 5, 1000) {
            Err(Error::Budget { required, budget }) => {
                assert_eq!(required, 1365);
                assert_eq!(budget, 1000);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn uniform_two_token_cap_two() {
        // |C| = 2 uniform: ⊤ has 1/3; each 1-token prefix 1/3·1/3; each
        // 2-token terminal 1/9 (forced terminal).
        let p = ParametricPolicy::new(v(2), Backend::Tabular, Conditioning::Unconditional, 2, RowInit::Zeros).unwrap();
        let d = terminal_distribution(&p, &Prompt::unconditional(), DEFAULT_BUDGET).unwrap();
        let want = [1.0 / 3.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0];
        for (a, b) in d.probs().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn deterministic_policy_is_one_hot() {
        let mut p = ParametricPolicy::new(v(3), Backend::KGram { k: 0 }, Conditioning::Unconditional, 3, RowInit::Zeros).unwrap();
        p.set_row(p.key(&Prompt::unconditional(), &[]), vec![-1e3, 50.0, -1e3, -1e3]).unwrap();
        let d = terminal_distribution(&p, &Prompt::unconditional(), DEFAULT_BUDGET).unwrap();
        assert!((d.probs().iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    fn rm(seed: u64, sigma: f64) -> RewardModel {
        let p = ParametricPolicy::new(v(4), Backend::Tabular, Conditioning::PromptId, 5, RowInit::Gaussian { seed, sigma })
            .unwrap();
        RewardModel::new(ReferenceModel::new(p), TemperatureSchedule::default()).unwrap()
    }

    #[test]
    fn unit_temperature_target_is_reference_bitwise() {
        let r = rm(3, 1.0);
        let q = Prompt { id: 2, tokens: vec![] };
        let t = TerminalTable::build(&r.reference().clone_reference(), &r, &q, 1.0, DEFAULT_BUDGET).unwrap();
        for (a, b) in t.target.iter().zip(&t.reference) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(t.tv(), 0.0);
        let sum: f64 = t.policy.iter().map(|l| l.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let r = rm(5, 1.0);
        let q = Prompt::unconditional();
        let reference = terminal_distribution(r.reference(), &q, DEFAULT_BUDGET).unwrap();
        let cold = target_distribution(&r, &q, 0.01, DEFAULT_BUDGET).unwrap();
        assert_eq!(cold.argmax(), reference.argmax());
        assert!(cold.probs()[cold.argmax()] > 0.99);
    }

    #[test]
    fn sharpened_target_has_lower_entropy() {
        for seed in 0..10 {
            let r = rm(seed, 1.0);
            let q = Prompt::unconditional();
            let hot = entropy(&target_distribution(&r, &q, 1.0, DEFAULT_BUDGET).unwrap());
            let cold = entropy(&target_distribution(&r, &q, 0.825, DEFAULT_BUDGET).unwrap());
            assert!(cold < hot);
        }
    }
}
