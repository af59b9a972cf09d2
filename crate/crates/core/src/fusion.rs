//! TransFusion encoder: image tokens query the keyword context through
//! multi-head cross-attention, followed by residual layer norms and a
//! position-wise feed-forward layer.

use rand::Rng;

use crate::attention::{init_multi_head, multi_head_attention, AttentionMask, MultiHeadParams};
use crate::error::{Error, Result};
use crate::param_group;
use crate::tensor::{Graph, ParamId, ParamStore, ParamTree, Tensor, Var};

param_group! {
    pub struct LayerNormParams {
        gamma,
        beta,
    }
}

param_group! {
    /// Two-layer relu feed-forward map without biases.
    pub struct FfnParams {
        w1,
        w2,
    }
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([width])),
        beta: store.add(format!("{prefix}.beta"), Tensor::zeros([width])),
    }
}

pub fn init_ffn<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    d_ff: usize,
    rng: &mut R,
) -> FfnParams {
    FfnParams {
        w1: store.add(
            format!("{prefix}.w1"),
            Tensor::uniform([d_model, d_ff], (1.0 / d_model as f64).sqrt(), rng),
        ),
        w2: store.add(
            format!("{prefix}.w2"),
            Tensor::uniform([d_ff, d_model], (1.0 / d_ff as f64).sqrt(), rng),
        ),
    }
}

pub fn feed_forward(g: &mut Graph, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.relu(h);
    g.matmul(h, p.w2)
}

pub fn apply_layer_norm(g: &mut Graph, x: Var, p: &LayerNormParams<Var>, eps: f64) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransFusionParams<P = ParamId> {
    /// Projection of visual channels to the model width, `C×d_model`.
    pub w_in: P,
    pub attn: MultiHeadParams<P>,
    pub ffn: FfnParams<P>,
    pub ln1: LayerNormParams<P>,
    pub ln2: LayerNormParams<P>,
}

impl<P> ParamTree<P> for TransFusionParams<P> {
    type Out<Q> = TransFusionParams<Q>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> TransFusionParams<Q> {
        TransFusionParams {
            w_in: f(&self.w_in),
            attn: self.attn.map_tree(f),
            ffn: self.ffn.map_tree(f),
            ln1: self.ln1.map_tree(f),
            ln2: self.ln2.map_tree(f),
        }
    }

    fn leaves(&self) -> Vec<&P> {
        let mut out = vec![&self.w_in];
        out.extend(self.attn.leaves());
        out.extend(self.ffn.leaves());
        out.extend(self.ln1.leaves());
        out.extend(self.ln2.leaves());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionDims {
    pub channels: usize,
    pub d_emb: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

pub fn init_transfusion<R: Rng + ?Sized>(
    store: &mut ParamStore,
    dims: FusionDims,
    rng: &mut R,
) -> Result<TransFusionParams> {
    let FusionDims {
        channels,
        d_emb,
        d_model,
        heads,
        d_ff,
    } = dims;
    Ok(TransFusionParams {
        w_in: store.add(
            "fusion.w_in",
            Tensor::uniform([channels, d_model], (1.0 / channels as f64).sqrt(), rng),
        ),
        attn: init_multi_head(store, "fusion.attn", d_model, d_emb, d_model, heads, rng)?,
        ffn: init_ffn(store, "fusion.ffn", d_model, d_ff, rng),
        ln1: init_layer_norm(store, "fusion.ln1", d_model),
        ln2: init_layer_norm(store, "fusion.ln2", d_model),
    })
}

/// Row-major flatten of an `H×W×C` map followed by `w_in`, giving `L×d_model`.
pub fn image_tokens(g: &mut Graph, f_att: Var, w_in: Var) -> Result<Var> {
    let &[h, w, c] = g.shape(f_att) else {
        return Err(Error::shape("image_tokens", g.shape(f_att), g.shape(w_in)));
    };
    if g.shape(w_in)[0] != c {
        return Err(Error::shape("image_tokens", g.shape(f_att), g.shape(w_in)));
    }
    let flat = g.reshape(f_att, &[h * w, c])?;
    g.matmul(flat, w_in)
}

/// Fused features and the per-head `L×n` keyword attention.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub f_prime: Var,
    pub attention: Vec<Var>,
}

/// `Z_norm = LN(tokens + MHA(tokens, KE))`, `F' = LN(FFN(Z_norm) + Z_norm)`.
/// Dropout follows the attention merge and the feed-forward layer.
pub fn encoder_block(
    g: &mut Graph,
    tokens: Var,
    ke_att: Var,
    keyword_padding: Option<&[bool]>,
    p: &TransFusionParams<Var>,
    dropout: f64,
    eps: f64,
) -> Result<FusionOutput> {
    let mask = keyword_padding.map_or(AttentionMask::None, AttentionMask::KeyPadding);
    let attn = multi_head_attention(g, tokens, ke_att, &p.attn, mask)?;
    let z = g.dropout(attn.output, dropout)?;
    let z = g.add(tokens, z)?;
    let z_norm = apply_layer_norm(g, z, &p.ln1, eps)?;
    let h = feed_forward(g, z_norm, &p.ffn)?;
    let h = g.dropout(h, dropout)?;
    let h = g.add(h, z_norm)?;
    let f_prime = apply_layer_norm(g, h, &p.ln2, eps)?;
    Ok(FusionOutput {
        f_prime,
        attention: attn.weights,
    })
}
