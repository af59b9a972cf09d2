//! Multi-head scaled dot-product attention shared by the fusion encoder and
//! the decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param_group;
use crate::tensor::{Graph, ParamId, ParamStore, ParamTree, Tensor, Var};

/// Score written into masked positions before the softmax.
pub const MASK_SCORE: f64 = -1e9;

param_group! {
    /// Query, key and value projections of one head.
    pub struct HeadParams {
        w_q,
        w_k,
        w_v,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams<P = ParamId> {
    pub heads: Vec<HeadParams<P>>,
    /// Merge of the concatenated heads, `(heads·d_k)×d_model`.
    pub w_o: P,
}

impl<P> ParamTree<P> for MultiHeadParams<P> {
    type Out<Q> = MultiHeadParams<Q>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> MultiHeadParams<Q> {
        MultiHeadParams {
            heads: self.heads.map_tree(f),
            w_o: f(&self.w_o),
        }
    }

    fn leaves(&self) -> Vec<&P> {
        let mut out = self.heads.leaves();
        out.push(&self.w_o);
        out
    }
}

/// Adds projections for queries of width `d_q` attending over keys of width
/// `d_kv`, with `heads` heads of width `d_model / heads`.
pub fn init_multi_head<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_q: usize,
    d_kv: usize,
    d_model: usize,
    heads: usize,
    rng: &mut R,
) -> Result<MultiHeadParams> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by {heads} heads"
        )));
    }
    let d_k = d_model / heads;
    let u = |shape: [usize; 2], rng: &mut R| {
        Tensor::uniform(shape, (1.0 / shape[0] as f64).sqrt(), rng)
    };
    let heads = (0..heads)
        .map(|h| HeadParams {
            w_q: store.add(format!("{prefix}.head{h}.w_q"), u([d_q, d_k], rng)),
            w_k: store.add(format!("{prefix}.head{h}.w_k"), u([d_kv, d_k], rng)),
            w_v: store.add(format!("{prefix}.head{h}.w_v"), u([d_kv, d_k], rng)),
        })
        .collect();
    let w_o = store.add(format!("{prefix}.w_o"), u([d_model, d_model], rng));
    Ok(MultiHeadParams { heads, w_o })
}

/// Which query/key pairs may not attend.
#[derive(Clone, Copy, Debug, Default)]
pub enum AttentionMask<'a> {
    #[default]
    None,
    /// `true` marks a padded key; every query ignores it.
    KeyPadding(&'a [bool]),
    /// Query `i` sees keys `j ≤ i` only.
    Causal,
}

impl AttentionMask<'_> {
    /// Row-major `Lq×Lk` mask, `true` where the score is suppressed.
    fn expand(&self, lq: usize, lk: usize) -> Result<Option<Vec<bool>>> {
        match *self {
            AttentionMask::None => Ok(None),
            AttentionMask::KeyPadding(pad) => {
                if pad.len() != lk {
                    return Err(Error::shape("attention mask", &[pad.len()], &[lk]));
                }
                if !pad.iter().any(|&p| p) {
                    return Ok(None);
                }
                if pad.iter().all(|&p| p) {
                    return Err(Error::Contract("every key is padding".into()));
                }
                Ok(Some((0..lq).flat_map(|_| pad.iter().copied()).collect()))
            }
            AttentionMask::Causal => Ok(Some(
                (0..lq).flat_map(|i| (0..lk).map(move |j| j > i)).collect(),
            )),
        }
    }
}

/// Attention output plus each head's `Lq×Lk` weight matrix.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `concat_h(softmax(Q_h K_hᵀ/√d_k) V_h)·w_o` with `Q_h = queries·w_q`,
/// `K_h = keys·w_k`, `V_h = keys·w_v`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    p: &MultiHeadParams<Var>,
    mask: AttentionMask<'_>,
) -> Result<AttentionOutput> {
    let (lq, lk) = (g.shape(queries)[0], g.shape(keys)[0]);
    if g.shape(queries).len() != 2 || g.shape(keys).len() != 2 {
        return Err(Error::shape(
            "multi_head_attention",
            g.shape(queries),
            g.shape(keys),
        ));
    }
    let mask = mask.expand(lq, lk)?;
    let mut heads = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let q = g.matmul(queries, h.w_q)?;
        let k = g.matmul(keys, h.w_k)?;
        let v = g.matmul(keys, h.w_v)?;
        let d_k = g.shape(q)[1];
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
        if let Some(m) = &mask {
            scores = g.masked_fill(scores, m, MASK_SCORE)?;
        }
        let a = g.softmax(scores, 1)?;
        heads.push(g.matmul(a, v)?);
        weights.push(a);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    let output = g.matmul(merged, p.w_o)?;
    Ok(AttentionOutput { output, weights })
}
