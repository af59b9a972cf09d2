use serde::{Deserialize, Serialize};

use super::{bleu, cider, rouge_l, BleuOptions, CiderOptions, Sentence};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub bleu: BleuOptions,
    pub cider: CiderOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// All six scores for one corpus. CIDEr is reported as 0 on single-pair
/// corpora, where document frequencies are undefined.
pub fn evaluate(
    cands: &[Sentence],
    refs: &[Sentence],
    opts: MetricOptions,
) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(cands, refs, 1, opts.bleu)?,
        bleu2: bleu(cands, refs, 2, opts.bleu)?,
        bleu3: bleu(cands, refs, 3, opts.bleu)?,
        bleu4: bleu(cands, refs, 4, opts.bleu)?,
        rouge_l: rouge_l(cands, refs)?,
        cider: if cands.len() < 2 {
            0.0
        } else {
            cider(cands, refs, opts.cider)?
        },
    })
}

impl MetricReport {
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("cider", self.cider),
        ]
    }

    /// One `key=value` line per metric.
    pub fn to_key_value(&self) -> String {
        self.fields()
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}\n"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}
