//! Visual encoder: a small strided SE-conv backbone (or precomputed
//! features) followed by the Lesion Contextual Gate.
//!
//! The gate has three stages, each exposed on its own:
//!
//! 1. [`global_attention_pool`]: a point-wise conv scores every spatial
//!    position, a softmax over all positions turns the scores into weights,
//!    and the weighted sum of feature vectors gives the pooled context.
//! 2. [`channel_context`]: the pooled vector goes through a channel
//!    bottleneck (`w1`, relu, layer norm, `w2`) and is broadcast-added to
//!    every position.
//! 3. [`lesion_gate`]: a per-position sigmoid gate computed from the raw
//!    and context-enriched features scales the raw features.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_group;
use crate::tensor::{conv_out_hw, Graph, ParamId, ParamStore, Tensor, Var};

/// Spatial `H×W×C` block of visual features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Contract(format!(
                "feature map must be H×W×C, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMap { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// Raw images through the trainable SE-conv stack.
    #[default]
    Trainable,
    /// Features loaded from M3TF files; no backbone parameters.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    /// Square input resolution after resizing.
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub se_ratio: usize,
    pub kernel: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(
                "backbone needs one stride per stage and at least one stage".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) || self.se_ratio == 0 || self.input_size == 0 {
            return Err(Error::Config(
                "backbone kernel must be odd, se_ratio and input_size positive".into(),
            ));
        }
        if self.stage_strides.contains(&0) {
            return Err(Error::Config("backbone strides must be positive".into()));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c < self.se_ratio) {
            return Err(Error::Config(format!(
                "stage width {c} is narrower than the SE ratio {}",
                self.se_ratio
            )));
        }
        Ok(())
    }

    /// Output `[H, W, C]` of the stack, traced without running it.
    pub fn output_shape(&self) -> [usize; 3] {
        let mut hw = self.input_size;
        for &s in &self.stage_strides {
            hw = conv_out_hw(hw, hw, self.kernel, s).0;
        }
        [hw, hw, *self.stage_channels.last().unwrap_or(&3)]
    }
}

param_group! {
    /// One strided conv stage with its squeeze-and-excitation block.
    pub struct BackboneStage {
        conv_w,
        conv_b,
        se_w1,
        se_b1,
        se_w2,
        se_b2,
    }
}

param_group! {
    /// Parameters of the Lesion Contextual Gate.
    pub struct LesionGateParams {
        /// Point-wise conv scoring each position for attention pooling, `C×1`.
        w_context,
        /// Channel bottleneck, `C×C/r` then `C/r×C`.
        w1,
        w2,
        ln_gamma,
        ln_beta,
        /// Gating head: `C×C_int` projections of raw and enriched features.
        w_x,
        w_g,
        b_xg,
        w_psi,
        b_psi,
    }
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape.to_vec(), (1.0 / fan_in as f64).sqrt(), rng)
}

pub fn init_backbone<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Vec<BackboneStage> {
    let k = cfg.kernel;
    let mut cin = 3;
    let mut stages = Vec::with_capacity(cfg.stage_channels.len());
    for (i, &cout) in cfg.stage_channels.iter().enumerate() {
        let mid = cout / cfg.se_ratio;
        let name = |s: &str| format!("backbone.{i}.{s}");
        stages.push(BackboneStage {
            conv_w: store.add(
                name("conv_w"),
                fan_in_uniform(&[k, k, cin, cout], k * k * cin, rng),
            ),
            conv_b: store.add(name("conv_b"), Tensor::zeros([cout])),
            se_w1: store.add(name("se_w1"), fan_in_uniform(&[cout, mid], cout, rng)),
            se_b1: store.add(name("se_b1"), Tensor::zeros([mid])),
            se_w2: store.add(name("se_w2"), fan_in_uniform(&[mid, cout], mid, rng)),
            se_b2: store.add(name("se_b2"), Tensor::zeros([cout])),
        });
        cin = cout;
    }
    stages
}

/// Initializes gate parameters for `channels` input channels, bottleneck
/// ratio `ratio` and gating width `channels / 2`. `b_psi` starts at 0 so
/// every gate opens at 0.5.
pub fn init_lesion_gate<R: Rng + ?Sized>(
    store: &mut ParamStore,
    channels: usize,
    ratio: usize,
    rng: &mut R,
) -> LesionGateParams {
    let c = channels;
    let mid = (c / ratio).max(1);
    let inner = (c / 2).max(1);
    LesionGateParams {
        w_context: store.add("lcg.w_context", fan_in_uniform(&[c, 1], c, rng)),
        w1: store.add("lcg.w1", fan_in_uniform(&[c, mid], c, rng)),
        w2: store.add("lcg.w2", fan_in_uniform(&[mid, c], mid, rng)),
        ln_gamma: store.add("lcg.ln_gamma", Tensor::ones([mid])),
        ln_beta: store.add("lcg.ln_beta", Tensor::zeros([mid])),
        w_x: store.add("lcg.w_x", fan_in_uniform(&[c, inner], c, rng)),
        w_g: store.add("lcg.w_g", fan_in_uniform(&[c, inner], c, rng)),
        b_xg: store.add("lcg.b_xg", Tensor::zeros([inner])),
        w_psi: store.add("lcg.w_psi", fan_in_uniform(&[inner, 1], inner, rng)),
        b_psi: store.add("lcg.b_psi", Tensor::zeros([1])),
    }
}

/// Squeeze-and-excitation: global average pool, bottleneck, sigmoid
/// channel scale.
pub fn squeeze_excite(g: &mut Graph, x: Var, stage: &BackboneStage<Var>) -> Result<Var> {
    let &[h, w, c] = g.shape(x) else {
        return Err(Error::shape("squeeze_excite", g.shape(x), &[]));
    };
    let flat = g.reshape(x, &[h * w, c])?;
    let pooled = g.mean_rows(flat)?;
    let z = g.matmul(pooled, stage.se_w1)?;
    let z = g.add_row(z, stage.se_b1)?;
    let z = g.relu(z);
    let s = g.matmul(z, stage.se_w2)?;
    let s = g.add_row(s, stage.se_b2)?;
    let s = g.sigmoid(s);
    g.mul_row(x, s)
}

/// Runs an `Hin×Win×3` image through the strided SE-conv stages.
pub fn backbone_forward(
    g: &mut Graph,
    image: Var,
    stages: &[BackboneStage<Var>],
    cfg: &BackboneConfig,
) -> Result<Var> {
    let expected = [cfg.input_size, cfg.input_size, 3];
    if g.shape(image) != expected {
        return Err(Error::shape("backbone_forward", g.shape(image), &expected));
    }
    if stages.len() != cfg.stage_strides.len() {
        return Err(Error::Contract(
            "backbone stage count differs from config".into(),
        ));
    }
    let mut x = image;
    for (stage, &stride) in stages.iter().zip(&cfg.stage_strides) {
        x = g.conv2d(x, stage.conv_w, stage.conv_b, stride)?;
        x = g.relu(x);
        x = squeeze_excite(g, x, stage)?;
    }
    Ok(x)
}

fn as_positions(g: &mut Graph, f: Var, op: &'static str) -> Result<(Var, usize, usize, usize)> {
    let &[h, w, c] = g.shape(f) else {
        return Err(Error::shape(op, g.shape(f), &[]));
    };
    Ok((g.reshape(f, &[h * w, c])?, h, w, c))
}

/// Pooled context `F_gap` (`1×C`) and the spatial attention (`L×1`).
pub fn global_attention_pool(
    g: &mut Graph,
    f: Var,
    p: &LesionGateParams<Var>,
) -> Result<(Var, Var)> {
    let (flat, _, _, c) = as_positions(g, f, "global_attention_pool")?;
    if g.shape(p.w_context) != [c, 1] {
        return Err(Error::shape(
            "global_attention_pool",
            g.shape(f),
            g.shape(p.w_context),
        ));
    }
    let scores = g.matmul(flat, p.w_context)?;
    let attn = g.softmax(scores, 0)?;
    let attn_t = g.transpose(attn)?;
    let pooled = g.matmul(attn_t, flat)?;
    Ok((pooled, attn))
}

/// `F_c = f ⊕ w2·LN(relu(w1·F_gap))`, broadcast over every position.
pub fn channel_context(
    g: &mut Graph,
    f: Var,
    f_gap: Var,
    p: &LesionGateParams<Var>,
    eps: f64,
) -> Result<Var> {
    let c = *g.shape(f).last().unwrap();
    if g.value(f_gap).len() != c {
        return Err(Error::shape("channel_context", g.shape(f), g.shape(f_gap)));
    }
    let pooled = g.reshape(f_gap, &[1, c])?;
    let t = g.matmul(pooled, p.w1)?;
    let t = g.relu(t);
    let t = g.layer_norm(t, p.ln_gamma, p.ln_beta, eps)?;
    let t = g.matmul(t, p.w2)?;
    g.add_row(f, t)
}

/// Per-position gate `α = σ(w_psi·relu(w_x f + w_g f_c + b_xg) + b_psi)`
/// applied to the raw features. Returns the gated map and `α` as `H×W`.
pub fn lesion_gate(
    g: &mut Graph,
    f: Var,
    f_c: Var,
    p: &LesionGateParams<Var>,
) -> Result<(Var, Var)> {
    if g.shape(f) != g.shape(f_c) {
        return Err(Error::shape("lesion_gate", g.shape(f), g.shape(f_c)));
    }
    let (flat, h, w, c) = as_positions(g, f, "lesion_gate")?;
    let (flat_c, ..) = as_positions(g, f_c, "lesion_gate")?;
    let a = g.matmul(flat, p.w_x)?;
    let b = g.matmul(flat_c, p.w_g)?;
    let s = g.add(a, b)?;
    let s = g.add_row(s, p.b_xg)?;
    let s = g.relu(s);
    let logit = g.matmul(s, p.w_psi)?;
    let logit = g.add_row(logit, p.b_psi)?;
    let alpha = g.sigmoid(logit);
    let gated = g.mul_col(flat, alpha)?;
    let gated = g.reshape(gated, &[h, w, c])?;
    let alpha_map = g.reshape(alpha, &[h, w])?;
    Ok((gated, alpha_map))
}

/// Everything the gate produces for one feature map.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub f_att: Var,
    /// `H×W` gate coefficients, kept for heatmap export.
    pub alpha: Var,
    /// `L×1` pooling attention.
    pub pool_attention: Var,
}

/// The full gate: pooling, channel context, spatial gating.
pub fn lesion_contextual_gate(
    g: &mut Graph,
    f: Var,
    p: &LesionGateParams<Var>,
    eps: f64,
) -> Result<GateOutput> {
    let (f_gap, pool_attention) = global_attention_pool(g, f, p)?;
    let f_c = channel_context(g, f, f_gap, p, eps)?;
    let (f_att, alpha) = lesion_gate(g, f, f_c, p)?;
    Ok(GateOutput {
        f_att,
        alpha,
        pool_attention,
    })
}

// ---- M3TF feature files ---------------------------------------------------

const M3TF_MAGIC: &[u8; 4] = b"M3TF";
const M3TF_VERSION: u16 = 1;

/// Encodes a tensor as M3TF: magic, version, rank, u32 extents, f32 payload,
/// all little-endian.
pub fn encode_m3tf(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u16::try_from(t.rank()).map_err(|_| Error::Format("rank too large".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(M3TF_MAGIC);
    out.extend_from_slice(&M3TF_VERSION.to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_m3tf(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != M3TF_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != M3TF_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "truncated extents: rank {rank} needs {header} header bytes, file has {}",
            bytes.len()
        )));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(Error::Format(format!(
            "payload length {} does not match shape {shape:?} ({} bytes expected)",
            payload.len(),
            numel * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_features(path: &Path, f: &FeatureMap) -> Result<()> {
    fs::write(path, encode_m3tf(f.tensor())?).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = decode_m3tf(&bytes)?;
    FeatureMap::new(t).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

// ---- heatmaps -------------------------------------------------------------

/// Min-max normalizes `alpha` to 8 bits. A constant map encodes as zeros.
pub fn heatmap_bytes(alpha: &Tensor) -> Vec<u8> {
    let data = alpha.data();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    data.iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Writes `alpha` (`H×W`) as a binary 8-bit PGM plus a `.txt` sidecar with
/// the raw values, one row per line.
pub fn export_gate_heatmap(alpha: &Tensor, out: &Path) -> Result<()> {
    let &[h, w] = alpha.shape() else {
        return Err(Error::shape("export_gate_heatmap", alpha.shape(), &[]));
    };
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(heatmap_bytes(alpha));
    fs::write(out, pgm).map_err(|e| Error::io(out, e))?;

    let sidecar = out.with_extension("txt");
    let mut text = Vec::new();
    writeln!(text, "{h} {w}").unwrap();
    for r in 0..h {
        let row: Vec<String> = alpha.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(text, "{}", row.join(" ")).unwrap();
    }
    fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

/// Handles for one module's parameters; used to freeze ablated branches.
pub fn backbone_ids(stages: &[BackboneStage]) -> Vec<ParamId> {
    stages
        .iter()
        .flat_map(|s| s.handles().into_iter().copied())
        .collect()
}
