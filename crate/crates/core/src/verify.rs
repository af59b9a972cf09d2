//! Gradient-check harness: every primitive op and the four composite blocks
//! against central differences in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{
    decoder_forward, init_decoder, positional_table, DecoderDims, DecoderParams, PAD,
};
use crate::error::Result;
use crate::fusion::{encoder_block, image_tokens, init_transfusion, FusionDims, TransFusionParams};
use crate::keyword::keyword_attention;
use crate::tensor::{
    finite_diff_check_with, CheckOptions, GradCheckReport, Graph, LossReduction, ParamId,
    ParamStore, ParamTree, Tensor, Var,
};
use crate::visual::{init_lesion_gate, lesion_contextual_gate, LesionGateParams};

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Result for one op or block under one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.report.passes(tolerance)
    }

    pub fn line(&self, tolerance: f64) -> String {
        let r = &self.report;
        format!(
            "{:<5} {:<22} seed={} max_rel={:.3e} checked={} kinks={}",
            if self.passes(tolerance) {
                "PASS"
            } else {
                "FAIL"
            },
            self.name,
            self.seed,
            r.max_rel_error,
            r.checked,
            r.skipped_kinks
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub step: f64,
    /// Elements perturbed per input tensor of a composite block.
    pub samples_per_input: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            step: GRADCHECK_STEP,
            samples_per_input: 64,
        }
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Scalar readout `Σ out ⊙ r` with a fixed random `r`, so no gradient is
/// symmetric by accident.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant(Tensor::uniform(
        shape,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
    vec![
        (
            "matmul",
            vec![rand_t(&[3, 4], rng), rand_t(&[4, 2], rng)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "add",
            vec![rand_t(&[3, 4], rng), rand_t(&[3, 4], rng)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "add_row",
            vec![rand_t(&[3, 4], rng), rand_t(&[4], rng)],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "mul",
            vec![rand_t(&[3, 4], rng), rand_t(&[3, 4], rng)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "mul_row",
            vec![rand_t(&[2, 2, 3], rng), rand_t(&[1, 3], rng)],
            Box::new(|g, v| g.mul_row(v[0], v[1])),
        ),
        (
            "mul_col",
            vec![rand_t(&[4, 3], rng), rand_t(&[4, 1], rng)],
            Box::new(|g, v| g.mul_col(v[0], v[1])),
        ),
        (
            "scale",
            vec![rand_t(&[3, 3], rng)],
            Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "relu",
            vec![rand_t(&[4, 4], rng)],
            Box::new(|g, v| Ok(g.relu(v[0]))),
        ),
        (
            "sigmoid",
            vec![rand_t(&[4, 4], rng)],
            Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        ),
        (
            "softmax_rows",
            vec![rand_t(&[3, 5], rng)],
            Box::new(|g, v| g.softmax(v[0], 1)),
        ),
        (
            "softmax_cols",
            vec![rand_t(&[5, 3], rng)],
            Box::new(|g, v| g.softmax(v[0], 0)),
        ),
        (
            "layer_norm",
            vec![rand_t(&[3, 6], rng), rand_t(&[6], rng), rand_t(&[6], rng)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "transpose",
            vec![rand_t(&[3, 4], rng)],
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "reshape",
            vec![rand_t(&[2, 3, 2], rng)],
            Box::new(|g, v| g.reshape(v[0], &[3, 4])),
        ),
        (
            "concat_rows",
            vec![rand_t(&[2, 3], rng), rand_t(&[1, 3], rng)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 0)),
        ),
        (
            "concat_cols",
            vec![rand_t(&[2, 3], rng), rand_t(&[2, 2], rng)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "embedding",
            vec![rand_t(&[5, 3], rng)],
            Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        ),
        (
            "masked_fill",
            vec![rand_t(&[3, 4], rng)],
            Box::new(move |g, v| g.masked_fill(v[0], &mask, -3.0)),
        ),
        (
            "dropout",
            vec![rand_t(&[4, 5], rng)],
            Box::new(|g, v| g.dropout(v[0], 0.3)),
        ),
        (
            "cross_entropy",
            vec![rand_t(&[4, 6], rng)],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 0, 5, 3], Some(0), LossReduction::Mean)),
        ),
        (
            "sum",
            vec![rand_t(&[3, 4], rng)],
            Box::new(|g, v| Ok(g.sum(v[0]))),
        ),
        (
            "mean_rows",
            vec![rand_t(&[4, 3], rng)],
            Box::new(|g, v| g.mean_rows(v[0])),
        ),
        (
            "conv2d",
            vec![
                rand_t(&[5, 5, 2], rng),
                rand_t(&[3, 3, 2, 3], rng),
                rand_t(&[3], rng),
            ],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2)),
        ),
    ]
}

/// Checks every primitive op on small random inputs. Every element is
/// perturbed; evaluations run on a training tape so dropout is exercised.
pub fn check_ops(seed: u64, step: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases(&mut rng) {
        let read_seed = seed.wrapping_mul(31).wrapping_add(name.len() as u64);
        let opts = CheckOptions {
            step,
            sample: None,
            dropout_seed: Some(seed),
        };
        let report = finite_diff_check_with(
            |g, v| {
                let y = f(g, v)?;
                readout(g, y, read_seed)
            },
            &inputs,
            opts,
        )?;
        out.push(CheckResult {
            name: format!("op.{name}"),
            seed,
            report,
        });
    }
    Ok(out)
}

/// Appends the tensors of `p` to `extra`; the count says where they start.
fn tree_inputs<T: ParamTree<ParamId>>(
    p: &T,
    store: &ParamStore,
    extra: Vec<Tensor>,
) -> (Vec<Tensor>, usize) {
    let offset = extra.len();
    let mut inputs = extra;
    inputs.extend(p.leaves().into_iter().map(|id| store.get(*id).clone()));
    (inputs, offset)
}

fn rebind<T: ParamTree<ParamId>>(p: &T, vars: &[Var], offset: usize) -> T::Out<Var> {
    let mut k = offset;
    p.map_tree(&mut |_| {
        let v = vars[k];
        k += 1;
        v
    })
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    // moves layer-norm gains and zero biases off their special initial values
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
}

fn sampled(opts: VerifyOptions, seed: u64) -> CheckOptions {
    CheckOptions {
        step: opts.step,
        sample: Some((opts.samples_per_input, seed)),
        dropout_seed: None,
    }
}

/// Checks the lesion gate, keyword attention, fusion block and decoder
/// block at the dimensions of `cfg`.
pub fn check_blocks(cfg: &ModelConfig, seed: u64, opts: VerifyOptions) -> Result<Vec<CheckResult>> {
    let m = &cfg.model;
    let [h, w, c] = cfg.backbone.feature_shape;
    let eps = m.layer_norm_eps;
    let n_kw = 5;
    let vocab = 24;
    let t = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(CheckResult {
            name: name.into(),
            seed,
            report,
        })
    };

    let mut store = ParamStore::new();
    let lcg: LesionGateParams = init_lesion_gate(&mut store, c, m.gate_ratio, &mut rng);
    randomize(&mut store, &mut rng);
    let (inputs, off) = tree_inputs(&lcg, &store, vec![rand_t(&[h, w, c], &mut rng)]);
    let r = finite_diff_check_with(
        |g, v| {
            let p = rebind(&lcg, v, off);
            let o = lesion_contextual_gate(g, v[0], &p, eps)?;
            readout(g, o.f_att, seed ^ 1)
        },
        &inputs,
        sampled(opts, seed),
    )?;
    push("lesion_gate", r);

    let inputs = vec![rand_t(&[n_kw, m.d_emb], &mut rng), {
        let mut w = Tensor::eye(m.d_emb);
        for x in w.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
        w
    }];
    let r = finite_diff_check_with(
        |g, v| {
            let (ke, _) = keyword_attention(g, v[0], v[1], None)?;
            readout(g, ke, seed ^ 2)
        },
        &inputs,
        sampled(opts, seed),
    )?;
    push("keyword_attention", r);

    let mut store = ParamStore::new();
    let dims = FusionDims {
        channels: c,
        d_emb: m.d_emb,
        d_model: m.d_model,
        heads: m.heads,
        d_ff: m.encoder_ffn,
    };
    let fusion: TransFusionParams = init_transfusion(&mut store, dims, &mut rng)?;
    randomize(&mut store, &mut rng);
    let (inputs, off) = tree_inputs(
        &fusion,
        &store,
        vec![
            rand_t(&[h, w, c], &mut rng),
            rand_t(&[n_kw, m.d_emb], &mut rng),
        ],
    );
    let r = finite_diff_check_with(
        |g, v| {
            let p = rebind(&fusion, v, off);
            let tokens = image_tokens(g, v[0], p.w_in)?;
            let o = encoder_block(g, tokens, v[1], None, &p, 0.0, eps)?;
            readout(g, o.f_prime, seed ^ 3)
        },
        &inputs,
        sampled(opts, seed),
    )?;
    push("transfusion_block", r);

    let mut store = ParamStore::new();
    let ddims = DecoderDims {
        vocab,
        d_model: m.d_model,
        heads: m.heads,
        d_ff: m.decoder_ffn,
    };
    let dec: DecoderParams = init_decoder(&mut store, ddims, &mut rng)?;
    randomize(&mut store, &mut rng);
    let pe = positional_table(t, m.d_model);
    let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(1..vocab)).collect();
    let mut targets: Vec<usize> = (0..t).map(|_| rng.gen_range(1..vocab)).collect();
    targets[t - 1] = PAD;
    let (inputs, off) = tree_inputs(&dec, &store, vec![rand_t(&[h * w, m.d_model], &mut rng)]);
    let r = finite_diff_check_with(
        |g, v| {
            let p = rebind(&dec, v, off);
            let logits = decoder_forward(g, &ids, v[0], &p, &pe, 0.0, eps)?;
            g.cross_entropy(logits, &targets, Some(PAD), LossReduction::Mean)
        },
        &inputs,
        sampled(opts, seed),
    )?;
    push("decoder_block", r);
    Ok(out)
}

/// Ops and blocks for every seed.
pub fn run_gradcheck(
    cfg: &ModelConfig,
    seeds: &[u64],
    opts: VerifyOptions,
) -> Result<Vec<CheckResult>> {
    let mut all = Vec::new();
    for &seed in seeds {
        all.extend(check_ops(seed, opts.step)?);
        all.extend(check_blocks(cfg, seed, opts)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in check_ops(11, GRADCHECK_STEP).unwrap() {
            assert!(
                r.passes(GRADCHECK_TOLERANCE),
                "{}",
                r.line(GRADCHECK_TOLERANCE)
            );
        }
    }

    #[test]
    fn harness_flags_a_broken_gradient() {
        // a function whose tape gradient is wrong: the constant hides x from
        // autograd while the value still depends on it
        let x = Tensor::new([2], vec![0.3, -0.4]).unwrap();
        let r = finite_diff_check_with(
            |g, v| {
                let leaked = g.constant(g.tensor(v[0]));
                let sq = g.mul(v[0], leaked)?;
                Ok(g.sum(sq))
            },
            &[x],
            CheckOptions {
                step: GRADCHECK_STEP,
                sample: None,
                dropout_seed: None,
            },
        )
        .unwrap();
        assert!(!r.passes(GRADCHECK_TOLERANCE));
    }
}
