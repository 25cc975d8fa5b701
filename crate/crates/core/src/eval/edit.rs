use crate::error::{validation, Result};
use crate::seq::TokenSequence;

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// Edit distance between the ordinary tokens of two sequences.
pub fn edit_distance(a: &TokenSequence, b: &TokenSequence) -> usize {
    levenshtein(a.tokens(), b.tokens())
}

/// `edit_distance(hyp, reference) / |reference|`.
pub fn error_rate(hyp: &TokenSequence, reference: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(validation("error rate against an empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}
