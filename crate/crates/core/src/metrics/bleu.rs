use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{check_pairs, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuOptions {
    /// Add one to matches and totals of any order with zero matches.
    pub smoothing: bool,
    /// Mean of per-sentence scores instead of one corpus-level score.
    pub sentence_average: bool,
}

/// Counts of every `n`-gram in `tokens`.
pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 {
        for g in tokens.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for one pair.
fn clipped(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn combine(stats: &[(usize, usize)], cand_len: usize, ref_len: usize, smoothing: bool) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for &(m, t) in stats {
        let p = match (m, smoothing) {
            (0, true) => 1.0 / (t as f64 + 1.0),
            _ if t == 0 => 0.0,
            _ => m as f64 / t as f64,
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / stats.len() as f64).exp()
}

/// BLEU with uniform weights over orders `1..=n` and one reference per
/// candidate.
pub fn bleu(cands: &[Sentence], refs: &[Sentence], n: usize, opts: BleuOptions) -> Result<f64> {
    check_pairs(cands, refs)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Metric(format!("BLEU order {n} outside 1..=4")));
    }
    if opts.sentence_average {
        let total: f64 = cands
            .iter()
            .zip(refs)
            .map(|(c, r)| {
                let stats: Vec<_> = (1..=n).map(|k| clipped(c, r, k)).collect();
                combine(&stats, c.len(), r.len(), opts.smoothing)
            })
            .sum();
        return Ok(total / cands.len() as f64);
    }
    let mut stats = vec![(0, 0); n];
    for (c, r) in cands.iter().zip(refs) {
        for (k, s) in stats.iter_mut().enumerate() {
            let (m, t) = clipped(c, r, k + 1);
            s.0 += m;
            s.1 += t;
        }
    }
    let cand_len = cands.iter().map(Vec::len).sum();
    let ref_len = refs.iter().map(Vec::len).sum();
    Ok(combine(&stats, cand_len, ref_len, opts.smoothing))
}
