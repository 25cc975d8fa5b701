//! Decoding strategies: multinomial, low temperature, top-k, top-p and
//! repetition-aware sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{validation, Error, Result};
use crate::policy::ParametricPolicy;
use crate::seq::{Prompt, TokenId, TokenSequence};
use crate::uncertainty::{StepRecord, StepwiseLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Plain multinomial over the model distribution.
    Rms,
    /// Multinomial after decode-temperature scaling.
    LtRms,
    TopK,
    TopP,
    /// Top-k then top-p, with a repetition guard.
    Ras,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" => Ok(Strategy::Rms),
            "lt-rms" => Ok(Strategy::LtRms),
            "topk" => Ok(Strategy::TopK),
            "topp" => Ok(Strategy::TopP),
            "ras" => Ok(Strategy::Ras),
            _ => Err(validation(format!("unknown sampling strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Per-step decode temperature. Ignored by `rms`.
    pub decode_temperature: f64,
    pub k: usize,
    pub p: f64,
    pub rep_window: usize,
    pub rep_limit: usize,
    /// Enables the single unfiltered redraw of `ras` on repetition.
    pub ras_redraw: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Rms,
            decode_temperature: 1.0,
            k: 25,
            p: 0.8,
            rep_window: 10,
            rep_limit: 3,
            ras_redraw: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn rms() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decode_temperature > 0.0) {
            return Err(validation(format!("decode temperature {} must be positive", self.decode_temperature)));
        }
        if self.k == 0 {
            return Err(validation("top-k needs k >= 1"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(validation(format!("top-p {} outside (0, 1]", self.p)));
        }
        Ok(())
    }
}

/// `p_i^(1/t)`, renormalized.
pub fn apply_decode_temperature(d: &Distribution, t: f64) -> Result<Distribution> {
    if !(t > 0.0) {
        return Err(validation(format!("decode temperature {t} must be positive")));
    }
    if t == 1.0 {
        return Ok(d.clone());
    }
    let logs: Vec<f64> = d.probs().iter().map(|&p| if p > 0.0 { p.ln() / t } else { f64::NEG_INFINITY }).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Distribution::from_weights(logs.iter().map(|l| (l - m).exp()).collect())
}

/// Indices sorted by descending probability, ties to the lower index.
fn ranked(d: &Distribution) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d.probs()[b].total_cmp(&d.probs()[a]).then(a.cmp(&b)));
    idx
}

fn keep_only(d: &Distribution, keep: &[usize]) -> Distribution {
    let mut w = vec![0.0; d.len()];
    for &i in keep {
        w[i] = d.probs()[i];
    }
    Distribution::from_weights(w).expect("kept entries carry positive mass")
}

/// Keeps the `k` most likely entries.
pub fn filter_top_k(d: &Distribution, k: usize) -> Distribution {
    if k >= d.len() {
        return d.clone();
    }
    let r = ranked(d);
    keep_only(d, &r[..k.max(1)])
}

/// Keeps the smallest most-likely prefix whose mass reaches `p`.
pub fn filter_top_p(d: &Distribution, p: f64) -> Distribution {
    if p >= 1.0 {
        return d.clone();
    }
    let r = ranked(d);
    let mut acc = 0.0;
    let mut n = 0;
    for &i in &r {
        acc += d.probs()[i];
        n += 1;
        if acc >= p - 1e-12 {
            break;
        }
    }
    keep_only(d, &r[..n])
}

/// The distribution a strategy draws from, before the repetition guard.
pub fn filtered(d: &Distribution, cfg: &SamplerConfig) -> Result<Distribution> {
    cfg.validate()?;
    let tempered = match cfg.strategy {
        Strategy::Rms => return Ok(d.clone()),
        _ => apply_decode_temperature(d, cfg.decode_temperature)?,
    };
    Ok(match cfg.strategy {
        Strategy::Rms | Strategy::LtRms => tempered,
        Strategy::TopK => filter_top_k(&tempered, cfg.k),
        Strategy::TopP => filter_top_p(&tempered, cfg.p),
        Strategy::Ras => filter_top_p(&filter_top_k(&tempered, cfg.k), cfg.p),
    })
}

fn draw<R: Rng + ?Sized>(d: &Distribution, rng: &mut R) -> TokenId {
    d.sample_with(rng.random::<f64>()) as TokenId
}

fn sample_from<R: Rng + ?Sized>(model: &Distribution, prefix: &[TokenId], cfg: &SamplerConfig, rng: &mut R) -> Result<TokenId> {
    let f = filtered(model, cfg)?;
    let token = draw(&f, rng);
    if cfg.strategy == Strategy::Ras && cfg.ras_redraw {
        let window = &prefix[prefix.len().saturating_sub(cfg.rep_window)..];
        let repeats = window.iter().filter(|&&t| t == token).count();
        if repeats >= cfg.rep_limit {
            return Ok(draw(model, rng));
        }
    }
    Ok(token)
}

/// Draws the next token for a prefix.
pub fn sample_next<R: Rng + ?Sized>(
    policy: &ParametricPolicy,
    prompt: &Prompt,
    prefix: &TokenSequence,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TokenId> {
    let model = policy.next_distribution(prompt, prefix)?;
    sample_from(&model, prefix.tokens(), cfg, rng)
}

/// Samples a full sequence, recording the model distribution at every step.
pub fn generate_logged<R: Rng + ?Sized>(
    policy: &ParametricPolicy,
    prompt: &Prompt,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(TokenSequence, StepwiseLog)> {
    let vocab = *policy.vocab();
    let mut seq = TokenSequence::empty();
    let mut log = Vec::new();
    while !seq.terminated() {
        let model = policy.next_distribution_raw(prompt, seq.tokens());
        let token = sample_from(&model, seq.tokens(), cfg, rng)?;
        seq.push(&vocab, token)?;
        log.push(StepRecord { dist: model, token });
    }
    Ok((seq, StepwiseLog::new(log)))
}

/// Samples tokens until the terminal (forced at the length cap).
pub fn generate<R: Rng + ?Sized>(
    policy: &ParametricPolicy,
    prompt: &Prompt,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    generate_logged(policy, prompt, cfg, rng).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::entropy;
    use crate::policy::{Backend, Conditioning, RowInit};
    use crate::seq::Vocabulary;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use super::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn close(a: &Distribution, b: &[f64]) {
        for (x, y) in a.probs().iter().zip(b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_temperature_examples() {
        close(&apply_decode_temperature(&d(&[0.2, 0.8]), 1.0).unwrap(), &[0.2, 0.8]);
        let g = apply_decode_temperature(&d(&[0.1, 0.9]), 1e-6).unwrap();
        assert!(g.probs()[1] > 1.0 - 1e-12);
        close(&apply_decode_temperature(&d(&[0.2, 0.8]), 0.5).unwrap(), &[0.04 / 0.68, 0.64 / 0.68]);
        assert!(apply_decode_temperature(&d(&[0.2, 0.8]), 0.0).is_err());
    }

    #[test]
    fn top_k_examples() {
        let x = d(&[0.2, 0.5, 0.3]);
        close(&filter_top_k(&x, 3), &[0.2, 0.5, 0.3]);
        close(&filter_top_k(&x, 7), &[0.2, 0.5, 0.3]);
        close(&filter_top_k(&x, 1), &[0.0, 1.0, 0.0]);
        close(&filter_top_k(&x, 2), &[0.0, 0.625, 0.375]);
        close(&filter_top_k(&d(&[0.4, 0.2, 0.4]), 1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn top_p_examples() {
        let x = d(&[0.6, 0.3, 0.1]);
        close(&filter_top_p(&x, 1.0), &[0.6, 0.3, 0.1]);
        close(&filter_top_p(&x, 0.5), &[1.0, 0.0, 0.0]);
        close(&filter_top_p(&x, 0.8), &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
        close(&filter_top_p(&x, 0.9), &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    fn always_terminal() -> ParametricPolicy {
        let v = Vocabulary::new(3).unwrap();
        let mut p = ParametricPolicy::new(v, Backend::KGram { k: 0 }, Conditioning::Unconditional, 5, RowInit::Zeros).unwrap();
        let key = p.key(&Prompt::unconditional(), &[]);
        p.set_row(key, vec![-100.0, -100.0, -100.0, 100.0]).unwrap();
        p
    }

    #[test]
    fn always_terminal_policy_emits_empty_sequence() {
        let p = always_terminal();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = generate(&p, &Prompt::unconditional(), &SamplerConfig::rms(), &mut rng).unwrap();
        assert!(s.terminated() && s.is_empty());
    }

    #[test]
    fn length_cap_and_determinism() {
        let v = Vocabulary::new(3).unwrap();
        let mut p = ParametricPolicy::new(v, Backend::KGram { k: 0 }, Conditioning::Unconditional, 4, RowInit::Zeros).unwrap();
        let key = p.key(&Prompt::unconditional(), &[]);
        p.set_row(key, vec![3.0, 3.0, 3.0, -5.0]).unwrap();
        for strategy in [Strategy::Rms, Strategy::LtRms, Strategy::TopK, Strategy::TopP, Strategy::Ras] {
            let cfg = SamplerConfig { strategy, k: 2, p: 0.7, decode_temperature: 0.7, ..SamplerConfig::default() };
            let mut a = ChaCha8Rng::seed_from_u64(11);
            let mut b = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..200 {
                let s = generate(&p, &Prompt::unconditional(), &cfg, &mut a).unwrap();
                assert!(s.terminated() && s.len() <= 4);
                assert_eq!(s, generate(&p, &Prompt::unconditional(), &cfg, &mut b).unwrap());
            }
        }
    }

    #[test]
    fn one_hot_filtered_is_deterministic() {
        let x = d(&[0.1, 0.7, 0.2]);
        let cfg = SamplerConfig { strategy: Strategy::TopK, k: 1, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert_eq!(sample_from(&x, &[], &cfg, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn ras_redraws_on_repetition() {
        // Top-1 would always pick token 1; after three 1s in the window the
        // guard redraws from the unfiltered distribution.
        let x = d(&[0.5, 0.5 - 1e-9, 1e-9]);
        let cfg = SamplerConfig { strategy: Strategy::Ras, k: 1, p: 1.0, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_other = false;
        for _ in 0..200 {
            let t = sample_from(&x, &[0, 0, 0], &cfg, &mut rng).unwrap();
            saw_other |= t != 0;
        }
        assert!(saw_other);
        let off = SamplerConfig { ras_redraw: false, ..cfg };
        for _ in 0..200 {
            assert_eq!(sample_from(&x, &[0, 0, 0], &off, &mut rng).unwrap(), 0);
        }
    }

    proptest! {
        #[test]
        fn filters_yield_valid_nested_supports(xs in prop::collection::vec(-3.0f64..3.0, 2..10), k in 1usize..10, p in 0.05f64..1.0) {
            let dist = crate::dist::normalize_logs(&xs).unwrap();
            let tk = filter_top_k(&dist, k);
            let tp = filter_top_p(&dist, p);
            let both = filter_top_k(&tp, k);
            for f in [&tk, &tp, &both] {
                prop_assert!((f.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(f.probs().iter().all(|&q| q >= 0.0));
            }
            let s_both = both.support();
            prop_assert!(s_both.iter().all(|i| tk.support().contains(i) && tp.support().contains(i)));
        }

        #[test]
        fn lower_decode_temperature_lowers_entropy(xs in prop::collection::vec(-3.0f64..3.0, 2..8), t in 0.05f64..2.0, dt in 0.0f64..1.0) {
            let dist = crate::dist::normalize_logs(&xs).unwrap();
            let hi = entropy(&apply_decode_temperature(&dist, t + dt).unwrap());
            let lo = entropy(&apply_decode_temperature(&dist, t).unwrap());
            prop_assert!(lo <= hi + 1e-9);
        }
    }
}
