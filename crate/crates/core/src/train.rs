//! Dataset assembly, the epoch loop with validation and early stopping, and
//! split evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{save_checkpoint, TrainState};
use crate::config::ModelConfig;
use crate::data::{
    batch_iterator, build_vocab, load_image, prepare_records, split_dataset, CorpusRecord, Example,
    PreparedRecord, SkipReport, VisualInput, Vocabulary,
};
use crate::decoder::PAD;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricOptions, MetricReport, Sentence};
use crate::model::M3tModel;
use crate::visual::{load_features, BackboneMode};

/// Encoded splits plus the vocabulary built from the training split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub report: SkipReport,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; use train, val or test"
            ))),
        }
    }
}

/// Loads one record's visual input: `.m3tf` files as feature maps, anything
/// else as an image resized to the backbone input.
pub fn load_visual(path: &Path, cfg: &ModelConfig) -> Result<VisualInput> {
    if path.extension().is_some_and(|e| e == "m3tf") {
        return Ok(VisualInput::Features(load_features(path)?));
    }
    if cfg.backbone.mode == BackboneMode::Precomputed {
        return Err(Error::Data(format!(
            "{}: precomputed backbone expects .m3tf feature files",
            path.display()
        )));
    }
    Ok(VisualInput::Image(load_image(
        path,
        cfg.backbone.input_size,
    )?))
}

fn encode_example(r: &PreparedRecord, visual: VisualInput, vocab: &Vocabulary) -> Example {
    Example {
        visual,
        keywords: vocab.encode(&r.keywords),
        description: vocab.encode(&r.description),
    }
}

/// Tokenizes and filters `records`, splits them, builds the vocabulary on the
/// training split and encodes everything. `load` supplies the visual input
/// of record `i`; it is only called for records that survive filtering.
pub fn build_dataset<F>(cfg: &ModelConfig, records: &[CorpusRecord], mut load: F) -> Result<Dataset>
where
    F: FnMut(usize, &CorpusRecord) -> Result<VisualInput>,
{
    let (prepared, report) = prepare_records(records, cfg.length_limits());
    if prepared.is_empty() {
        return Err(Error::Data("no usable records after filtering".into()));
    }
    let dropped: Vec<usize> = report.dropped.iter().map(|(i, _)| *i).collect();
    let kept: Vec<usize> = (0..records.len())
        .filter(|i| !dropped.contains(i))
        .collect();
    let indexed: Vec<(usize, PreparedRecord)> = kept.into_iter().zip(prepared).collect();
    let splits = split_dataset(&indexed, &cfg.split_spec())?;
    let vocab = build_vocab(
        splits
            .train
            .iter()
            .flat_map(|(_, r)| [r.keywords.as_slice(), r.description.as_slice()]),
        cfg.model.vocab_cap,
        cfg.model.min_freq,
    )?;
    let mut encode = |part: &[(usize, PreparedRecord)]| -> Result<Vec<Example>> {
        part.iter()
            .map(|(i, r)| Ok(encode_example(r, load(*i, &records[*i])?, &vocab)))
            .collect()
    };
    let train = encode(&splits.train)?;
    let val = encode(&splits.val)?;
    let test = encode(&splits.test)?;
    Ok(Dataset {
        vocab,
        train,
        val,
        test,
        report,
    })
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: u64,
    pub steps: u64,
    pub last_train_loss: f64,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    /// TSV rows `step, split, loss, metrics` in the order they were logged.
    pub log: Vec<String>,
}

/// Where [`train`] writes its artifacts. Without a directory nothing touches
/// the disk.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    fn append(&self, row: &str) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join("train.tsv");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&path, e))
    }

    fn checkpoint(&self, name: &str, model: &M3tModel, state: &TrainState) -> Result<()> {
        match &self.dir {
            Some(dir) => save_checkpoint(&dir.join(name), model, state),
            None => Ok(()),
        }
    }
}

/// Runs epochs from `state.epoch` until the epoch budget, the step budget or
/// the patience runs out. Each epoch ends with a validation pass when the
/// validation split is non-empty.
pub fn train(
    model: &mut M3tModel,
    data: &Dataset,
    state: &mut TrainState,
    out: &TrainOutputs,
    mut progress: impl FnMut(&str),
) -> Result<TrainSummary> {
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cfg = model.config.train.clone();
    let mut log = Vec::new();
    let record = |row: String, log: &mut Vec<String>| -> Result<()> {
        out.append(&row)?;
        log.push(row);
        Ok(())
    };
    if state.epoch == 0 && model.step == 0 {
        record("step\tsplit\tloss\tmetrics".into(), &mut log)?;
    }
    let mut last = f64::NAN;
    let mut stopped_early = false;
    let budget_hit = |m: &M3tModel| cfg.max_steps > 0 && m.step >= cfg.max_steps;
    while (state.epoch as usize) < cfg.epochs && !budget_hit(model) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for batch in batch_iterator(&data.train, cfg.batch_size, PAD, cfg.seed, state.epoch) {
            last = model.train_step(&data.train, &batch)?;
            sum += last;
            n += 1;
            record(format!("{}\ttrain\t{last}\t-", model.step), &mut log)?;
            if budget_hit(model) {
                break;
            }
        }
        state.epoch += 1;
        let mut line = format!(
            "epoch {} step {} train {:.4}",
            state.epoch,
            model.step,
            sum / n as f64
        );
        if !data.val.is_empty() {
            let idx: Vec<usize> = (0..data.val.len()).collect();
            let val = model.evaluate_loss(&data.val, &idx)?;
            record(format!("{}\tval\t{val}\t-", model.step), &mut log)?;
            line.push_str(&format!(" val {val:.4}"));
            if state.best_val_loss.is_none_or(|b| val < b) {
                state.best_val_loss = Some(val);
                state.stale_epochs = 0;
                out.checkpoint("best.m3tc", model, state)?;
            } else {
                state.stale_epochs += 1;
            }
        }
        out.checkpoint("last.m3tc", model, state)?;
        progress(&line);
        if cfg.patience > 0 && state.stale_epochs >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainSummary {
        epochs: state.epoch,
        steps: model.step,
        last_train_loss: last,
        best_val_loss: state.best_val_loss,
        stopped_early,
        log,
    })
}

/// Decodes every example with the configured beam and length.
pub fn decode_examples(model: &M3tModel, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    let d = &model.config.decode;
    examples
        .iter()
        .map(|ex| {
            Ok(model
                .generate(&ex.visual, &ex.keywords, d.beam, d.max_len)?
                .ids)
        })
        .collect()
}

/// Candidate and reference token lists for a split. With `oracle` the
/// references stand in for the decoder output.
pub fn candidate_pairs(
    model: &M3tModel,
    examples: &[Example],
    oracle: bool,
) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    let refs: Vec<Sentence> = examples
        .iter()
        .map(|e| model.vocab.decode(&e.description))
        .collect();
    let cands = if oracle {
        refs.clone()
    } else {
        decode_examples(model, examples)?
            .iter()
            .map(|ids| model.vocab.decode(ids))
            .collect()
    };
    Ok((cands, refs))
}

pub fn evaluate_examples(
    model: &M3tModel,
    examples: &[Example],
    opts: MetricOptions,
    oracle: bool,
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let (cands, refs) = candidate_pairs(model, examples, oracle)?;
    evaluate(&cands, &refs, opts)
}
