//! Autoregressive description decoder and the greedy and beam decoding
//! strategies.

use rand::Rng;

use crate::attention::{init_multi_head, multi_head_attention, AttentionMask, MultiHeadParams};
use crate::error::{Error, Result};
use crate::fusion::{
    apply_layer_norm, feed_forward, init_ffn, init_layer_norm, FfnParams, LayerNormParams,
};
use crate::tensor::{Graph, ParamId, ParamStore, ParamTree, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;

/// Length-normalization exponent used by beam search.
pub const LENGTH_PENALTY: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<P = ParamId> {
    /// Token embeddings, `V×d_model`.
    pub tok_emb: P,
    pub self_attn: MultiHeadParams<P>,
    pub cross_attn: MultiHeadParams<P>,
    pub ffn: FfnParams<P>,
    pub ln1: LayerNormParams<P>,
    pub ln2: LayerNormParams<P>,
    pub ln3: LayerNormParams<P>,
    /// Vocabulary projection, `d_model×V` plus bias.
    pub w_out: P,
    pub b_out: P,
}

impl<P> ParamTree<P> for DecoderParams<P> {
    type Out<Q> = DecoderParams<Q>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> DecoderParams<Q> {
        DecoderParams {
            tok_emb: f(&self.tok_emb),
            self_attn: self.self_attn.map_tree(f),
            cross_attn: self.cross_attn.map_tree(f),
            ffn: self.ffn.map_tree(f),
            ln1: self.ln1.map_tree(f),
            ln2: self.ln2.map_tree(f),
            ln3: self.ln3.map_tree(f),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }

    fn leaves(&self) -> Vec<&P> {
        let mut out = vec![&self.tok_emb];
        out.extend(self.self_attn.leaves());
        out.extend(self.cross_attn.leaves());
        out.extend(self.ffn.leaves());
        out.extend(self.ln1.leaves());
        out.extend(self.ln2.leaves());
        out.extend(self.ln3.leaves());
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderDims {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

pub fn init_decoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    dims: DecoderDims,
    rng: &mut R,
) -> Result<DecoderParams> {
    let DecoderDims {
        vocab,
        d_model,
        heads,
        d_ff,
    } = dims;
    Ok(DecoderParams {
        tok_emb: store.add(
            "decoder.tok_emb",
            Tensor::uniform([vocab, d_model], (3.0 / d_model as f64).sqrt(), rng),
        ),
        self_attn: init_multi_head(
            store,
            "decoder.self_attn",
            d_model,
            d_model,
            d_model,
            heads,
            rng,
        )?,
        cross_attn: init_multi_head(
            store,
            "decoder.cross_attn",
            d_model,
            d_model,
            d_model,
            heads,
            rng,
        )?,
        ffn: init_ffn(store, "decoder.ffn", d_model, d_ff, rng),
        ln1: init_layer_norm(store, "decoder.ln1", d_model),
        ln2: init_layer_norm(store, "decoder.ln2", d_model),
        ln3: init_layer_norm(store, "decoder.ln3", d_model),
        w_out: store.add(
            "decoder.w_out",
            Tensor::uniform([d_model, vocab], (1.0 / d_model as f64).sqrt(), rng),
        ),
        b_out: store.add("decoder.b_out", Tensor::zeros([vocab])),
    })
}

/// Fixed sinusoidal table: `sin(t/10000^(2i/d))` on even columns and the
/// matching cosine on odd ones.
pub fn positional_table(t_max: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros([t_max, d_model]);
    for pos in 0..t_max {
        for i in 0..d_model {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 / freq;
            t.data_mut()[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t.round_to_f32();
    t
}

/// `CE[t] = E_c[ids[t]] + PE[t]`.
pub fn embed_positions(g: &mut Graph, ids: &[usize], tok_emb: Var, pe: &Tensor) -> Result<Var> {
    let t = ids.len();
    if t == 0 {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if t > pe.shape()[0] {
        return Err(Error::Contract(format!(
            "sequence of {t} tokens exceeds the positional table ({})",
            pe.shape()[0]
        )));
    }
    let d = pe.shape()[1];
    let rows = Tensor::new([t, d], pe.data()[..t * d].to_vec())?;
    let e = g.embedding(tok_emb, ids)?;
    let pos = g.constant(rows);
    g.add(e, pos)
}

/// Teacher-forced decoder pass returning `T×V` logits.
pub fn decoder_forward(
    g: &mut Graph,
    ids: &[usize],
    f_prime: Var,
    p: &DecoderParams<Var>,
    pe: &Tensor,
    dropout: f64,
    eps: f64,
) -> Result<Var> {
    let ce = embed_positions(g, ids, p.tok_emb, pe)?;
    let z = multi_head_attention(g, ce, ce, &p.self_attn, AttentionMask::Causal)?.output;
    let z = g.dropout(z, dropout)?;
    let z = g.add(ce, z)?;
    let z1 = apply_layer_norm(g, z, &p.ln1, eps)?;
    let z = multi_head_attention(g, z1, f_prime, &p.cross_attn, AttentionMask::None)?.output;
    let z = g.dropout(z, dropout)?;
    let z = g.add(z, z1)?;
    let z2 = apply_layer_norm(g, z, &p.ln2, eps)?;
    let h = feed_forward(g, z2, &p.ffn)?;
    let h = g.dropout(h, dropout)?;
    let h = g.add(h, z2)?;
    let r = apply_layer_norm(g, h, &p.ln3, eps)?;
    let logits = g.matmul(r, p.w_out)?;
    g.add_row(logits, p.b_out)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. `next_logits` maps a prefix (starting with BOS) to the
/// logits of the next token. The returned ids exclude BOS and EOS.
pub fn greedy_decode<F>(mut next_logits: F, max_len: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut ids = vec![BOS];
    for _ in 0..max_len {
        let tok = argmax(&log_softmax(&next_logits(&ids)?));
        if tok == EOS {
            break;
        }
        ids.push(tok);
    }
    ids.remove(0);
    Ok(ids)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    ids: Vec<usize>,
    log_prob: f64,
}

impl Hypothesis {
    /// Generated length including a closing EOS, at least 1.
    fn normalized(&self, closed: bool) -> f64 {
        let len = (self.ids.len() - 1 + usize::from(closed)).max(1);
        self.log_prob / (len as f64).powf(LENGTH_PENALTY)
    }
}

/// Beam search ranking expansions by cumulative log-probability and picking
/// the final hypothesis by length-normalized score. With `beam = 1` this is
/// exactly [`greedy_decode`].
pub fn beam_decode<F>(mut next_logits: F, beam: usize, max_len: usize) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        log_prob: 0.0,
    }];
    let mut finished: Vec<(Hypothesis, bool)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = log_softmax(&next_logits(&hyp.ids)?);
            cands.extend(
                lp.iter()
                    .enumerate()
                    .map(|(tok, &l)| (hyp.log_prob + l, h, tok)),
            );
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (score, h, tok) in cands.into_iter().take(beam) {
            let mut ids = live[h].ids.clone();
            if tok == EOS {
                finished.push((
                    Hypothesis {
                        ids,
                        log_prob: score,
                    },
                    true,
                ));
            } else {
                ids.push(tok);
                next.push(Hypothesis {
                    ids,
                    log_prob: score,
                });
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }
    finished.extend(live.into_iter().map(|h| (h, false)));
    let mut best = 0;
    for (i, (h, closed)) in finished.iter().enumerate() {
        let (b, bc) = &finished[best];
        if h.normalized(*closed) > b.normalized(*bc) {
            best = i;
        }
    }
    let mut ids = finished.swap_remove(best).0.ids;
    ids.remove(0);
    Ok(ids)
}
