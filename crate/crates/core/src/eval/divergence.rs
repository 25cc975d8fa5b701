use crate::dist::Distribution;
use crate::error::{validation, Result};

fn same_support(d1: &Distribution, d2: &Distribution) -> Result<()> {
    if d1.len() != d2.len() {
        return Err(validation(format!("support sizes differ: {} vs {}", d1.len(), d2.len())));
    }
    Ok(())
}

/// `½ Σ |p - q|`.
pub fn total_variation(d1: &Distribution, d2: &Distribution) -> Result<f64> {
    same_support(d1, d2)?;
    let tv = 0.5 * d1.probs().iter().zip(d2.probs()).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}

/// `Σ p ln(p / q)`; requires `q > 0` wherever `p > 0`.
pub fn kl_divergence(d1: &Distribution, d2: &Distribution) -> Result<f64> {
    same_support(d1, d2)?;
    let mut kl = 0.0;
    for (i, (&p, &q)) in d1.probs().iter().zip(d2.probs()).enumerate() {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(validation(format!("KL undefined: second distribution has zero mass at {i}")));
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(kl.max(0.0))
}
