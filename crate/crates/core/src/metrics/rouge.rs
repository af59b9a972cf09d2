use super::{check_pairs, Sentence};
use crate::error::Result;

pub const ROUGE_BETA: f64 = 1.2;

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn pair_f(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean ROUGE-L F-measure over pairs.
pub fn rouge_l(cands: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    check_pairs(cands, refs)?;
    let total: f64 = cands.iter().zip(refs).map(|(c, r)| pair_f(c, r)).sum();
    Ok(total / cands.len() as f64)
}
