//! Captioning metrics over tokenized sentences: corpus BLEU@1–4, ROUGE-L
//! and CIDEr.

mod bleu;
mod cider;
mod report;
mod rouge;

pub use bleu::{bleu, ngram_counts, BleuOptions};
pub use cider::{cider, CiderOptions};
pub use report::{evaluate, MetricOptions, MetricReport};
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

fn check_pairs(cands: &[Sentence], refs: &[Sentence]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Metric("metric undefined on an empty corpus".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} candidates but {} references",
            cands.len(),
            refs.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) fn sent(s: &str) -> Sentence {
    s.split_whitespace().map(str::to_owned).collect()
}
