//! The assembled captioning model: visual encoder, keyword encoder, fusion
//! block and decoder over one parameter store, plus the Adam training step
//! and decoding entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, ModelConfig};
use crate::data::{Batch, Example, VisualInput, Vocabulary};
use crate::decoder::{
    beam_decode, decoder_forward, init_decoder, positional_table, DecoderDims, DecoderParams, PAD,
};
use crate::error::{Error, Result};
use crate::fusion::{encoder_block, image_tokens, init_transfusion, FusionDims, TransFusionParams};
use crate::keyword::{embed_keywords, init_keywords, keyword_attention, KeywordParams};
use crate::tensor::{bind_tree, AdamState, Graph, ParamId, ParamStore, ParamTree, Tensor, Var};
use crate::visual::{
    backbone_forward, init_backbone, init_lesion_gate, lesion_contextual_gate, BackboneMode,
    BackboneStage, LesionGateParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = ParamId> {
    /// Empty when features are precomputed.
    pub backbone: Vec<BackboneStage<P>>,
    pub lcg: LesionGateParams<P>,
    pub keywords: KeywordParams<P>,
    pub fusion: TransFusionParams<P>,
    pub decoder: DecoderParams<P>,
}

impl<P> ParamTree<P> for ModelParams<P> {
    type Out<Q> = ModelParams<Q>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            backbone: self.backbone.map_tree(f),
            lcg: self.lcg.map_tree(f),
            keywords: self.keywords.map_tree(f),
            fusion: self.fusion.map_tree(f),
            decoder: self.decoder.map_tree(f),
        }
    }

    fn leaves(&self) -> Vec<&P> {
        let mut out = self.backbone.leaves();
        out.extend(self.lcg.leaves());
        out.extend(self.keywords.leaves());
        out.extend(self.fusion.leaves());
        out.extend(self.decoder.leaves());
        out
    }
}

/// Encoder outputs for one record.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `L×d_model` fused image tokens.
    pub f_prime: Var,
    /// `H×W` gate coefficients when visual attention is on.
    pub alpha: Option<Var>,
}

/// Decoded ids with the gate map that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub alpha: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct M3tModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pe: Tensor,
}

impl M3tModel {
    /// Fresh parameters drawn from a stream seeded by `config.train.seed`.
    /// Parameters of switched-off branches are still created, so every
    /// ablation has the same parameter count, but they are frozen.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let bb = config.backbone_config();
        let backbone = match bb.mode {
            BackboneMode::Trainable => init_backbone(&mut store, &bb, &mut rng),
            BackboneMode::Precomputed => Vec::new(),
        };
        let channels = config.backbone.feature_shape[2];
        let lcg = init_lesion_gate(&mut store, channels, m.gate_ratio, &mut rng);
        let keywords = init_keywords(&mut store, vocab.len(), m.d_emb, &mut rng);
        let fusion = init_transfusion(
            &mut store,
            FusionDims {
                channels,
                d_emb: m.d_emb,
                d_model: m.d_model,
                heads: m.heads,
                d_ff: m.encoder_ffn,
            },
            &mut rng,
        )?;
        let decoder = init_decoder(
            &mut store,
            DecoderDims {
                vocab: vocab.len(),
                d_model: m.d_model,
                heads: m.heads,
                d_ff: m.decoder_ffn,
            },
            &mut rng,
        )?;
        let params = ModelParams {
            backbone,
            lcg,
            keywords,
            fusion,
            decoder,
        };
        freeze_ablated(&mut store, &params, config.ablation);
        let adam = AdamState::new(&store, config.adam(), config.train.precision);
        let pe = positional_table(config.t_max(), m.d_model);
        Ok(M3tModel {
            config,
            vocab,
            store,
            params,
            adam,
            step: 0,
            pe,
        })
    }

    /// Reassembles a model from stored parts; used when loading checkpoints.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        store: ParamStore,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        let mut fresh = M3tModel::new(config, vocab)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, the config needs {}",
                store.len(),
                fresh.store.len()
            )));
        }
        let ids: Vec<ParamId> = fresh.store.ids().collect();
        for id in ids {
            if fresh.store.name(id) != store.name(id)
                || fresh.store.get(id).shape() != store.get(id).shape()
            {
                return Err(Error::Format(format!(
                    "parameter {} does not match the config",
                    store.name(id)
                )));
            }
            fresh.store.assign(id, store.get(id).clone())?;
        }
        fresh.adam = adam;
        fresh.step = step;
        Ok(fresh)
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    /// Runs the encoder side for one record on `g`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &ModelParams<Var>,
        visual: &VisualInput,
        keywords: &[usize],
    ) -> Result<Encoded> {
        let cfg = &self.config;
        let eps = cfg.model.layer_norm_eps;
        let dropout = if g.is_training() {
            cfg.train.dropout
        } else {
            0.0
        };
        let f_r = match visual {
            VisualInput::Image(img) => {
                if p.backbone.is_empty() {
                    return Err(Error::Contract(
                        "backbone is precomputed; records must supply feature maps".into(),
                    ));
                }
                let x = g.constant(img.clone());
                backbone_forward(g, x, &p.backbone, &cfg.backbone_config())?
            }
            VisualInput::Features(f) => g.constant(f.tensor().clone()),
        };
        if g.shape(f_r) != cfg.backbone.feature_shape {
            return Err(Error::shape(
                "encode",
                g.shape(f_r),
                &cfg.backbone.feature_shape,
            ));
        }
        let ab = cfg.ablation;
        let (f_att, alpha) = if ab.visual_attention {
            let out = lesion_contextual_gate(g, f_r, &p.lcg, eps)?;
            (out.f_att, Some(out.alpha))
        } else {
            (f_r, None)
        };
        let ke = if !ab.keywords {
            g.constant(Tensor::zeros([1, cfg.model.d_emb]))
        } else {
            let e = embed_keywords(g, p.keywords.table, keywords)?;
            if ab.keyword_attention {
                keyword_attention(g, e, p.keywords.w_ke, None)?.0
            } else {
                e
            }
        };
        let tokens = image_tokens(g, f_att, p.fusion.w_in)?;
        let fused = encoder_block(g, tokens, ke, None, &p.fusion, dropout, eps)?;
        Ok(Encoded {
            f_prime: fused.f_prime,
            alpha,
        })
    }

    /// Teacher-forced logits (`(T+1)×V`) for one example.
    pub fn example_logits(&self, g: &mut Graph, p: &ModelParams<Var>, ex: &Example) -> Result<Var> {
        let enc = self.encode(g, p, &ex.visual, &ex.keywords)?;
        let mut input = vec![crate::decoder::BOS];
        input.extend(&ex.description);
        let dropout = if g.is_training() {
            self.config.train.dropout
        } else {
            0.0
        };
        decoder_forward(
            g,
            &input,
            enc.f_prime,
            &p.decoder,
            &self.pe,
            dropout,
            self.config.model.layer_norm_eps,
        )
    }

    /// Builds the batch loss on `g`: logits of every example are stacked
    /// into one matrix and scored with a single pad-aware cross-entropy.
    fn batch_loss(
        &self,
        g: &mut Graph,
        p: &ModelParams<Var>,
        examples: &[Example],
        indices: &[usize],
    ) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut logits = Vec::with_capacity(indices.len());
        let mut targets = Vec::new();
        for &i in indices {
            let ex = &examples[i];
            logits.push(self.example_logits(g, p, ex)?);
            targets.extend(&ex.description);
            targets.push(crate::decoder::EOS);
        }
        let all = if logits.len() == 1 {
            logits[0]
        } else {
            g.concat(&logits, 0)?
        };
        g.cross_entropy(all, &targets, Some(PAD), self.config.train.loss_reduction)
    }

    /// One optimizer step on `batch`. Returns the training loss.
    pub fn train_step(&mut self, examples: &[Example], batch: &Batch) -> Result<f64> {
        let cfg = &self.config.train;
        let mut g = Graph::training(cfg.precision, cfg.seed, self.step);
        let p = bind_tree(&self.params, &mut g, &self.store);
        let loss = self.batch_loss(&mut g, &p, examples, &batch.indices)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric { op: "train_step" });
        }
        g.backward(loss)?;
        self.store.zero_grads();
        g.write_grads(&mut self.store);
        self.adam.step(&mut self.store)?;
        self.step += 1;
        Ok(value)
    }

    /// Mean token cross-entropy over `indices` in inference mode.
    pub fn evaluate_loss(&self, examples: &[Example], indices: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for chunk in indices.chunks(self.config.train.batch_size.max(1)) {
            let mut g = Graph::new(self.config.train.precision);
            let p = bind_tree(&self.params, &mut g, &self.store);
            let mut logits = Vec::new();
            let mut targets = Vec::new();
            for &i in chunk {
                let ex = &examples[i];
                logits.push(self.example_logits(&mut g, &p, ex)?);
                targets.extend(&ex.description);
                targets.push(crate::decoder::EOS);
            }
            let all = if logits.len() == 1 {
                logits[0]
            } else {
                g.concat(&logits, 0)?
            };
            let loss =
                g.cross_entropy(all, &targets, Some(PAD), crate::tensor::LossReduction::Sum)?;
            total += g.scalar(loss);
            tokens += targets.len();
        }
        if tokens == 0 {
            return Err(Error::Contract("no tokens to score".into()));
        }
        Ok(total / tokens as f64)
    }

    /// Decodes a description. `beam = 1` is greedy.
    pub fn generate(
        &self,
        visual: &VisualInput,
        keywords: &[usize],
        beam: usize,
        max_len: usize,
    ) -> Result<Generation> {
        let prec = self.config.train.precision;
        let eps = self.config.model.layer_norm_eps;
        let mut g = Graph::new(prec);
        let p = bind_tree(&self.params, &mut g, &self.store);
        let enc = self.encode(&mut g, &p, visual, keywords)?;
        let f_prime = g.tensor(enc.f_prime);
        let alpha = enc.alpha.map(|a| g.tensor(a));
        let max_len = max_len.min(self.pe.shape()[0]);
        let ids = beam_decode(
            |prefix| {
                let mut g = Graph::new(prec);
                let dp = bind_tree(&self.params.decoder, &mut g, &self.store);
                let f = g.constant(f_prime.clone());
                let logits = decoder_forward(&mut g, prefix, f, &dp, &self.pe, 0.0, eps)?;
                let v = self.vocab.len();
                let vals = g.value(logits);
                Ok(vals[vals.len() - v..].to_vec())
            },
            beam,
            max_len,
        )?;
        Ok(Generation { ids, alpha })
    }

    /// Logits for a probe example, used to compare models bit for bit.
    pub fn probe(&self, ex: &Example) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.config.train.precision);
        let p = bind_tree(&self.params, &mut g, &self.store);
        let l = self.example_logits(&mut g, &p, ex)?;
        Ok(g.value(l).to_vec())
    }
}

fn freeze_ablated(store: &mut ParamStore, p: &ModelParams, ab: Ablation) {
    let mut frozen: Vec<ParamId> = Vec::new();
    if !ab.visual_attention {
        frozen.extend(p.lcg.leaves());
    }
    if !ab.keywords {
        frozen.extend(p.keywords.leaves());
    } else if !ab.keyword_attention {
        frozen.push(p.keywords.w_ke);
    }
    for id in frozen {
        store.set_trainable(id, false);
    }
}
