//! Symbolic shape propagation: walks a config through every stage using
//! only dimension arithmetic, so full-size models can be checked without
//! allocating their weights.

use std::fmt;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::conv_out_hw;
use crate::visual::BackboneMode;

/// One named tensor shape along the forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeStep {
    pub stage: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub steps: Vec<ShapeStep>,
    /// Parameter count of the whole model with `vocab` entries.
    pub parameters: usize,
}

impl ShapeTrace {
    pub fn get(&self, stage: &str) -> Option<&[usize]> {
        self.steps
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.shape.as_slice())
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            let dims: Vec<String> = s.shape.iter().map(usize::to_string).collect();
            writeln!(f, "{:<24}{}", s.stage, dims.join("x"))?;
        }
        write!(f, "{:<24}{}", "parameters", self.parameters)
    }
}

fn mha_params(d_q: usize, d_kv: usize, d_model: usize) -> usize {
    // per-head projections total d_model columns, then the output merge
    d_q * d_model + 2 * d_kv * d_model + d_model * d_model
}

/// Traces `cfg` with a vocabulary of `vocab` tokens, `keywords` keyword
/// tokens and `t` decoder positions.
pub fn trace_shapes(
    cfg: &ModelConfig,
    vocab: usize,
    keywords: usize,
    t: usize,
) -> Result<ShapeTrace> {
    cfg.validate()?;
    if vocab == 0 || keywords == 0 || t == 0 {
        return Err(Error::Contract(
            "vocabulary, keyword and sequence sizes must be positive".into(),
        ));
    }
    if t > cfg.t_max() {
        return Err(Error::Contract(format!(
            "{t} decoder positions exceed the positional table ({})",
            cfg.t_max()
        )));
    }
    let m = &cfg.model;
    let b = &cfg.backbone;
    let mut steps = Vec::new();
    let mut push = |stage: String, shape: Vec<usize>| steps.push(ShapeStep { stage, shape });
    let mut params = 0usize;

    let [fh, fw, fc] = b.feature_shape;
    if b.mode == BackboneMode::Trainable {
        let (mut h, mut w, mut c) = (b.input_size, b.input_size, 3);
        push("image".into(), vec![h, w, c]);
        for (i, (&cout, &s)) in b.stage_channels.iter().zip(&b.stage_strides).enumerate() {
            (h, w) = conv_out_hw(h, w, b.kernel, s);
            let mid = cout / b.se_ratio;
            params += b.kernel * b.kernel * c * cout + cout + cout * mid + mid + mid * cout + cout;
            c = cout;
            push(format!("backbone.{i}"), vec![h, w, c]);
        }
        if [h, w, c] != b.feature_shape {
            return Err(Error::shape("trace_shapes", &[h, w, c], &b.feature_shape));
        }
    } else {
        push("image".into(), vec![b.input_size, b.input_size, 3]);
    }
    push("feature_map".into(), vec![fh, fw, fc]);

    let l = fh * fw;
    let mid = (fc / m.gate_ratio).max(1);
    let inner = (fc / 2).max(1);
    params += fc + fc * mid + mid * fc + 2 * mid + 2 * fc * inner + inner + inner + 1;
    push("gate_alpha".into(), vec![fh, fw]);
    push("gated_features".into(), vec![fh, fw, fc]);

    params += vocab * m.d_emb + m.d_emb * m.d_emb;
    let kw_rows = if cfg.ablation.keywords { keywords } else { 1 };
    push("keyword_context".into(), vec![kw_rows, m.d_emb]);

    params += fc * m.d_model
        + mha_params(m.d_model, m.d_emb, m.d_model)
        + 2 * m.d_model * m.encoder_ffn
        + 4 * m.d_model;
    push("image_tokens".into(), vec![l, m.d_model]);
    push("fused_tokens".into(), vec![l, m.d_model]);
    for h in 0..m.heads {
        push(format!("fusion_attention.{h}"), vec![l, kw_rows]);
    }

    params += vocab * m.d_model
        + 2 * mha_params(m.d_model, m.d_model, m.d_model)
        + 2 * m.d_model * m.decoder_ffn
        + 6 * m.d_model
        + m.d_model * vocab
        + vocab;
    push("decoder_embedding".into(), vec![t, m.d_model]);
    push("logits".into(), vec![t, vocab]);
    Ok(ShapeTrace {
        steps,
        parameters: params,
    })
}
