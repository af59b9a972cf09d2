//! Keyword encoder: embedding lookup followed by dot-product self-attention
//! over the keyword sequence.
//!
//! Scores are the bilinear form `(e·w_ke)·eᵀ`. `w_ke` starts as the
//! identity, where the scores reduce to plain pairwise dot products.

use rand::Rng;

use crate::attention::MASK_SCORE;
use crate::error::{Error, Result};
use crate::param_group;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

param_group! {
    pub struct KeywordParams {
        /// Embedding table, `V×d_emb`.
        table,
        /// Bilinear attention form, `d_emb×d_emb`.
        w_ke,
    }
}

pub fn init_keywords<R: Rng + ?Sized>(
    store: &mut ParamStore,
    vocab_size: usize,
    d_emb: usize,
    rng: &mut R,
) -> KeywordParams {
    let bound = (3.0 / d_emb as f64).sqrt();
    KeywordParams {
        table: store.add(
            "keyword.table",
            Tensor::uniform([vocab_size, d_emb], bound, rng),
        ),
        w_ke: store.add("keyword.w_ke", Tensor::eye(d_emb)),
    }
}

/// Looks up one row per id. Ids past the table raise an index error.
pub fn embed_keywords(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Contract("keyword sequence is empty".into()));
    }
    g.embedding(table, ids)
}

/// Pairwise dot products `e·eᵀ`.
pub fn align_scores(g: &mut Graph, e: Var) -> Result<Var> {
    let et = g.transpose(e)?;
    g.matmul(e, et)
}

/// Returns `(KE_att, A)`: `A = softmax((e·w_ke)·eᵀ)` row-wise with padded
/// columns suppressed, and `KE_att = A·e`.
pub fn keyword_attention(
    g: &mut Graph,
    e: Var,
    w_ke: Var,
    padding: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let n = g.shape(e)[0];
    let projected = g.matmul(e, w_ke)?;
    let et = g.transpose(e)?;
    let mut scores = g.matmul(projected, et)?;
    if let Some(pad) = padding {
        if pad.len() != n {
            return Err(Error::shape("keyword_attention", &[pad.len()], &[n]));
        }
        if pad.iter().any(|&p| p) {
            let mask: Vec<bool> = (0..n).flat_map(|_| pad.iter().copied()).collect();
            scores = g.masked_fill(scores, &mask, MASK_SCORE)?;
        }
    }
    let a = g.softmax(scores, 1)?;
    let out = g.matmul(a, e)?;
    Ok((out, a))
}
