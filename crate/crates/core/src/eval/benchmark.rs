use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{validation, Result};
use crate::par;
use crate::policy::{mix_seed, ParametricPolicy};
use crate::sampling::{generate_logged, SamplerConfig};
use crate::seq::TokenSequence;
use crate::uncertainty::{utterance_uncertainty, uur};

use super::edit::error_rate;
use super::task::SyntheticTask;

/// One generated sample scored against its target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub prompt_id: u32,
    pub sample: u32,
    #[serde(serialize_with = "ser_tokens")]
    pub output: TokenSequence,
    pub uncertainty: f64,
    pub error_rate: f64,
    pub exact: bool,
}

fn ser_tokens<S: serde::Serializer>(s: &TokenSequence, ser: S) -> std::result::Result<S::Ok, S::Error> {
    ser.collect_seq(s.tokens())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptReport {
    pub prompt_id: u32,
    pub mean_error_rate: f64,
    pub mean_uncertainty: f64,
    pub exact_match_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub strategy: crate::sampling::Strategy,
    pub samples_per_prompt: u32,
    pub seed: u64,
    pub mean_error_rate: f64,
    pub mean_uncertainty: f64,
    pub exact_match_rate: f64,
    pub prompts: Vec<PromptReport>,
}

/// Aligned-versus-baseline summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline_error_rate: f64,
    pub aligned_error_rate: f64,
    /// `aligned / baseline - 1`; negative means fewer errors.
    pub relative_error_change: f64,
    pub baseline_exact_match: f64,
    pub aligned_exact_match: f64,
    /// Mean per-prompt ratio of aligned to baseline utterance uncertainty.
    pub uur: f64,
}

/// Draws `n_samples` outputs per prompt. Sample `s` of prompt `p` uses its
/// own rng stream, so results do not depend on scheduling.
pub fn collect_samples(
    policy: &ParametricPolicy,
    task: &SyntheticTask,
    sampler: &SamplerConfig,
    n_samples: u32,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    sampler.validate()?;
    if policy.vocab() != task.vocab() {
        return Err(validation("policy and task vocabularies differ"));
    }
    if n_samples == 0 {
        return Err(validation("need at least one sample per prompt"));
    }
    let n = task.len() * n_samples as usize;
    par::map_range(n, |idx| {
        let i = idx / n_samples as usize;
        let s = (idx % n_samples as usize) as u32;
        let prompt = &task.prompts()[i];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, prompt.id as u64, s as u64]));
        let (output, log) = generate_logged(policy, prompt, sampler, &mut rng)?;
        let target = task.target(i);
        Ok(SampleRecord {
            prompt_id: prompt.id,
            sample: s,
            uncertainty: utterance_uncertainty(&log)?,
            error_rate: error_rate(&output, target)?,
            exact: output.tokens() == target.tokens(),
            output,
        })
    })
    .into_iter()
    .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Samples the task and aggregates per prompt and overall.
pub fn run_hallucination_benchmark(
    policy: &ParametricPolicy,
    task: &SyntheticTask,
    sampler: &SamplerConfig,
    n_samples: u32,
    seed: u64,
) -> Result<BenchmarkReport> {
    let records = collect_samples(policy, task, sampler, n_samples, seed)?;
    let prompts: Vec<PromptReport> = records
        .chunks(n_samples as usize)
        .map(|rs| PromptReport {
            prompt_id: rs[0].prompt_id,
            mean_error_rate: mean(rs.iter().map(|r| r.error_rate)),
            mean_uncertainty: mean(rs.iter().map(|r| r.uncertainty)),
            exact_match_rate: mean(rs.iter().map(|r| if r.exact { 1.0 } else { 0.0 })),
        })
        .collect();
    Ok(BenchmarkReport {
        strategy: sampler.strategy,
        samples_per_prompt: n_samples,
        seed,
        mean_error_rate: mean(prompts.iter().map(|p| p.mean_error_rate)),
        mean_uncertainty: mean(prompts.iter().map(|p| p.mean_uncertainty)),
        exact_match_rate: mean(prompts.iter().map(|p| p.exact_match_rate)),
        prompts,
    })
}

/// Compares two reports over the same prompts.
pub fn compare_reports(aligned: &BenchmarkReport, baseline: &BenchmarkReport) -> Result<Comparison> {
    let same = aligned.prompts.len() == baseline.prompts.len()
        && aligned.prompts.iter().zip(&baseline.prompts).all(|(a, b)| a.prompt_id == b.prompt_id);
    if !same {
        return Err(validation("reports cover different prompts"));
    }
    let trained: Vec<f64> = aligned.prompts.iter().map(|p| p.mean_uncertainty).collect();
    let base: Vec<f64> = baseline.prompts.iter().map(|p| p.mean_uncertainty).collect();
    Ok(Comparison {
        baseline_error_rate: baseline.mean_error_rate,
        aligned_error_rate: aligned.mean_error_rate,
        relative_error_change: aligned.mean_error_rate / baseline.mean_error_rate - 1.0,
        baseline_exact_match: baseline.exact_match_rate,
        aligned_exact_match: aligned.exact_match_rate,
        uur: uur(&trained, &base)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Backend;
    use crate::sampling::Strategy;
    use crate::seq::Vocabulary;

    fn task(eps: f64) -> SyntheticTask {
        SyntheticTask::noisy_copy(Vocabulary::new(6).unwrap(), 20, 4, eps, 0.5, 3, 0).unwrap()
    }

    #[test]
    fn noiseless_greedy_copy_is_exact() {
        let t = task(0.0);
        let p = t.reference_policy(6, Backend::KGram { k: 0 }).unwrap();
        let greedy = SamplerConfig { strategy: Strategy::TopK, k: 1, ..SamplerConfig::rms() };
        let r = run_hallucination_benchmark(&p, &t, &greedy, 3, 1).unwrap();
        assert_eq!(r.mean_error_rate, 0.0);
        assert_eq!(r.exact_match_rate, 1.0);
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let t = task(0.1);
        let p = t.reference_policy(6, Backend::KGram { k: 0 }).unwrap();
        let a = run_hallucination_benchmark(&p, &t, &SamplerConfig::rms(), 5, 7).unwrap();
        let b = run_hallucination_benchmark(&p, &t, &SamplerConfig::rms(), 5, 7).unwrap();
        assert_eq!(a, b);
        par::set_parallel(false);
        let c = run_hallucination_benchmark(&p, &t, &SamplerConfig::rms(), 5, 7).unwrap();
        par::set_parallel(cfg!(feature = "parallel"));
        assert_eq!(a, c);
    }

    #[test]
    fn self_comparison() {
        let t = task(0.1);
        let p = t.reference_policy(6, Backend::KGram { k: 0 }).unwrap();
        let r = run_hallucination_benchmark(&p, &t, &SamplerConfig::rms(), 4, 2).unwrap();
        let c = compare_reports(&r, &r).unwrap();
        assert_eq!(c.uur, 1.0);
        assert_eq!(c.relative_error_change, 0.0);
    }

    #[test]
    fn baseline_exact_match_within_three_sigma() {
        let t = SyntheticTask::noisy_copy(Vocabulary::new(6).unwrap(), 40, 4, 0.1, 0.5, 11, 0).unwrap();
        let max_len = 6;
        let p = t.reference_policy(max_len, Backend::KGram { k: 0 }).unwrap();
        let n = 500u32;
        let r = run_hallucination_benchmark(&p, &t, &SamplerConfig::rms(), n, 5).unwrap();
        // Independent Bernoulli trials per prompt: pool means and variances.
        let total = (t.len() as u32 * n) as f64;
        let (mut mu, mut var) = (0.0, 0.0);
        for i in 0..t.len() {
            let q = t.expected_exact_match(i, max_len);
            mu += q * n as f64;
            var += q * (1.0 - q) * n as f64;
        }
        let observed = r.exact_match_rate * total;
        assert!((observed - mu).abs() <= 3.0 * var.sqrt(), "observed {observed}, expected {mu} ± {}", 3.0 * var.sqrt());
    }
}
