//! Model, training and decoding configuration, stored as sectioned TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LengthLimits, SplitSpec};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, LossReduction, Precision};
use crate::visual::{BackboneConfig, BackboneMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub profile: Profile,
    pub d_model: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub encoder_ffn: usize,
    pub decoder_ffn: usize,
    /// Channel reduction of the gate bottleneck.
    pub gate_ratio: usize,
    pub layer_norm_eps: f64,
    pub vocab_cap: usize,
    pub min_freq: u64,
    pub min_description: usize,
    pub max_description: usize,
    pub max_keywords: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub mode: BackboneMode,
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub se_ratio: usize,
    pub kernel: usize,
    /// `[H, W, C]` of the feature map the gate receives.
    pub feature_shape: [usize; 3],
}

/// The four supported branch combinations, from bare image features up to
/// the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub visual_attention: bool,
    pub keywords: bool,
    pub keyword_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub precision: Precision,
    pub loss_reduction: LossReduction,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelSection,
    pub backbone: BackboneSection,
    pub ablation: Ablation,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub paths: PathsSection,
}

impl Ablation {
    pub const PLAIN: Ablation = Ablation {
        visual_attention: false,
        keywords: false,
        keyword_attention: false,
    };
    pub const VISUAL: Ablation = Ablation {
        visual_attention: true,
        keywords: false,
        keyword_attention: false,
    };
    pub const KEYWORDS: Ablation = Ablation {
        visual_attention: true,
        keywords: true,
        keyword_attention: false,
    };
    pub const FULL: Ablation = Ablation {
        visual_attention: true,
        keywords: true,
        keyword_attention: true,
    };
    pub const ROWS: [Ablation; 4] = [Self::PLAIN, Self::VISUAL, Self::KEYWORDS, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if Self::ROWS.contains(self) {
            return Ok(());
        }
        let why = if self.keyword_attention && !self.keywords {
            "keyword_attention requires keywords"
        } else {
            "keywords require visual_attention"
        };
        Err(Error::Config(format!(
            "unsupported ablation {self:?}: {why}; valid rows are image only, +visual_attention, +keywords, +keyword_attention"
        )))
    }
}

impl ModelConfig {
    /// Reported full-scale settings.
    pub fn full() -> Self {
        ModelConfig {
            model: ModelSection {
                profile: Profile::Full,
                d_model: 512,
                d_emb: 300,
                heads: 8,
                encoder_ffn: 512,
                decoder_ffn: 256,
                gate_ratio: 4,
                layer_norm_eps: 1e-5,
                vocab_cap: 5000,
                min_freq: 2,
                min_description: 5,
                max_description: 50,
                max_keywords: 50,
            },
            backbone: BackboneSection {
                mode: BackboneMode::Precomputed,
                input_size: 356,
                stage_channels: vec![32, 64, 128, 256, 1280],
                stage_strides: vec![2; 5],
                se_ratio: 4,
                kernel: 3,
                feature_shape: [12, 12, 1280],
            },
            ablation: Ablation::FULL,
            train: TrainSection {
                seed: 0,
                lr: 0.004,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                batch_size: 64,
                dropout: 0.2,
                epochs: 50,
                max_steps: 0,
                patience: 5,
                precision: Precision::F32,
                loss_reduction: LossReduction::Mean,
                train_fraction: 0.6,
                val_fraction: 0.2,
                test_fraction: 0.2,
            },
            decode: DecodeSection {
                beam: 1,
                max_len: 50,
            },
            paths: PathsSection {
                corpus: PathBuf::from("corpus.tsv"),
                out_dir: PathBuf::from("runs"),
            },
        }
    }

    /// Laptop-scale settings for the synthetic corpus.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.model = ModelSection {
            profile: Profile::Desk,
            d_model: 64,
            d_emb: 32,
            heads: 2,
            encoder_ffn: 32,
            decoder_ffn: 16,
            vocab_cap: 200,
            min_freq: 1,
            max_description: 30,
            max_keywords: 30,
            ..c.model
        };
        c.backbone = BackboneSection {
            mode: BackboneMode::Trainable,
            input_size: 64,
            stage_channels: vec![8, 16, 32, 64],
            stage_strides: vec![2; 4],
            se_ratio: 4,
            kernel: 3,
            feature_shape: [4, 4, 64],
        };
        c.train.batch_size = 32;
        c.train.epochs = 30;
        c.decode.max_len = 30;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Full => Self::full(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            mode: b.mode,
            input_size: b.input_size,
            stage_channels: b.stage_channels.clone(),
            stage_strides: b.stage_strides.clone(),
            se_ratio: b.se_ratio,
            kernel: b.kernel,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train.train_fraction,
            val: self.train.val_fraction,
            test: self.train.test_fraction,
            seed: self.train.seed,
        }
    }

    pub fn length_limits(&self) -> LengthLimits {
        LengthLimits {
            min_description: self.model.min_description,
            max_description: self.model.max_description,
            max_keywords: self.model.max_keywords,
        }
    }

    /// Longest decoder sequence: BOS plus the description cap.
    pub fn t_max(&self) -> usize {
        self.model.max_description.max(self.decode.max_len) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        self.ablation.validate()?;
        if m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                m.d_model, m.heads
            )));
        }
        if [
            m.d_model,
            m.d_emb,
            m.encoder_ffn,
            m.decoder_ffn,
            m.gate_ratio,
        ]
        .contains(&0)
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if m.min_description > m.max_description || m.max_description == 0 {
            return Err(Error::Config("description length range is empty".into()));
        }
        let bb = self.backbone_config();
        bb.validate()?;
        let fs = self.backbone.feature_shape;
        if bb.mode == BackboneMode::Trainable && bb.output_shape() != fs {
            return Err(Error::Config(format!(
                "backbone produces {:?} but feature_shape is {fs:?}",
                bb.output_shape()
            )));
        }
        if fs.contains(&0) || fs[2] < m.gate_ratio || fs[2] < 2 {
            return Err(Error::Config(format!("feature_shape {fs:?} is too small")));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(0.0..1.0).contains(&t.dropout) || t.lr <= 0.0 {
            return Err(Error::Config(
                "batch_size > 0, 0 <= dropout < 1 and lr > 0 required".into(),
            ));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        self.split_spec().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML. Keys left out fall back to the defaults of the profile
    /// named in `model.profile` (full when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let profile = match user.get("model").and_then(|m| m.get("profile")) {
            Some(v) => Profile::deserialize(v.clone())
                .map_err(|e| Error::Config(format!("model.profile: {e}")))?,
            None => Profile::Full,
        };
        let mut base =
            toml::Table::try_from(Self::for_profile(profile)).expect("config serializes");
        merge(&mut base, user);
        let cfg: ModelConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `section.key=value`; the value is read as TOML and falls back
    /// to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {assignment:?} is not section.key=value"))
        })?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {key:?} needs a section")))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        let sec = table
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section {section:?}")))?;
        if !sec.contains_key(field) {
            return Err(Error::Config(format!(
                "unknown config key {section}.{field}"
            )));
        }
        sec.insert(field.to_owned(), value);
        let cfg: ModelConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
