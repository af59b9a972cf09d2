//! `m3t` command-line tool: config scaffolding, synthetic corpora, training,
//! evaluation, generation and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use m3t_core::checkpoint::{load_checkpoint, TrainState};
use m3t_core::config::{ModelConfig, Profile};
use m3t_core::data::{
    generate_synthetic_corpus, keywords_to_sequence, normalize_text, read_corpus,
    write_synthetic_corpus,
};
use m3t_core::metrics::{BleuOptions, CiderOptions, MetricOptions};
use m3t_core::model::M3tModel;
use m3t_core::train::{
    build_dataset, evaluate_examples, load_visual, train, Dataset, TrainOutputs,
};
use m3t_core::verify::{run_gradcheck, VerifyOptions, GRADCHECK_TOLERANCE};
use m3t_core::visual::export_gate_heatmap;
use thiserror::Error;

const SEED_ENV: &str = "M3T_SEED";

#[derive(Debug, Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<m3t_core::Error> for Failure {
    fn from(e: m3t_core::Error) -> Self {
        use m3t_core::Error as E;
        match e {
            E::Config(_) | E::Contract(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "m3t", version, about = "Multi-modal medical description model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete config for a profile.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a procedural corpus of images and descriptions.
    Synth {
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Side length of the generated images.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train on a corpus, writing checkpoints and a TSV log to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint. Its config is used; `--set` may still change
        /// train, decode and paths settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode a split and report BLEU@1-4, ROUGE-L and CIDEr.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Corpus to rebuild the split from; defaults to the one used in training.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Score the references against themselves instead of decoding.
        #[arg(long)]
        oracle_decode: bool,
        /// Use CIDEr-D instead of plain CIDEr.
        #[arg(long)]
        cider_d: bool,
        #[arg(long)]
        no_smoothing: bool,
        #[arg(long)]
        json: bool,
    },
    /// Describe one image given its keywords.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated keywords.
        #[arg(long)]
        keywords: String,
        /// Export the lesion-gate map as PGM plus a text sidecar.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Finite-difference check of every op and composite block.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "seed", default_values_t = [0u64])]
        seeds: Vec<u64>,
        /// Elements perturbed per block input.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Full,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Full => Profile::Full,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// Override a config value, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Bypass the lesion gate and feed raw features.
    #[arg(long)]
    no_visual_attention: bool,
    /// Replace the keyword context with zeros.
    #[arg(long)]
    no_keywords: bool,
    /// Use raw keyword embeddings without self-attention.
    #[arg(long)]
    no_keyword_attention: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; missing keys come from the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    #[command(flatten)]
    overrides: Overrides,
}

impl Overrides {
    fn apply(&self, cfg: &mut ModelConfig) -> CliResult {
        for s in &self.set {
            cfg.set(s)?;
        }
        let a = &mut cfg.ablation;
        a.visual_attention &= !self.no_visual_attention;
        a.keywords &= !self.no_keywords;
        a.keyword_attention &= !self.no_keyword_attention;
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.train.seed = raw.trim().parse().map_err(|_| {
                Failure::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?;
        }
        cfg.validate()?;
        Ok(())
    }
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::for_profile(self.profile.into()),
        };
        self.overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn load_dataset(cfg: &ModelConfig, corpus: &Path) -> CliResult<Dataset> {
    let records = read_corpus(corpus)?;
    Ok(build_dataset(cfg, &records, |_, r| {
        load_visual(&r.image, cfg)
    })?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cmd_init_config(profile: ProfileArg, out: Option<PathBuf>, overrides: Overrides) -> CliResult {
    let mut cfg = ModelConfig::for_profile(profile.into());
    overrides.apply(&mut cfg)?;
    let text = cfg.to_toml();
    match out {
        Some(p) => write_text(&p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path, image_size: usize) -> CliResult {
    let samples = generate_synthetic_corpus(n, seed, image_size)?;
    let corpus = write_synthetic_corpus(out, &samples)?;
    let desc: Vec<Vec<String>> = samples
        .iter()
        .map(|s| normalize_text(&s.description))
        .collect();
    let kw: Vec<Vec<String>> = samples
        .iter()
        .map(|s| keywords_to_sequence(&s.keywords))
        .collect();
    let mut distinct: Vec<&String> = desc.iter().chain(&kw).flatten().collect();
    distinct.sort();
    distinct.dedup();
    let mean =
        |v: &[Vec<String>]| v.iter().map(Vec::len).sum::<usize>() as f64 / v.len().max(1) as f64;
    println!("corpus\t{}", corpus.display());
    println!("records\t{n}");
    println!("image_size\t{image_size}");
    println!("mean_description_tokens\t{:.2}", mean(&desc));
    println!("mean_keyword_tokens\t{:.2}", mean(&kw));
    println!("distinct_tokens\t{}", distinct.len());
    Ok(())
}

fn cmd_train(
    config: ConfigArgs,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> CliResult {
    let (mut model, mut state, data) = match resume {
        Some(ckpt) => {
            let (mut model, state) = load_checkpoint(&ckpt)?;
            let mut cfg = model.config.clone();
            config.overrides.apply(&mut cfg)?;
            if (&cfg.model, &cfg.backbone, &cfg.ablation)
                != (
                    &model.config.model,
                    &model.config.backbone,
                    &model.config.ablation,
                )
            {
                return Err(Failure::Usage(
                    "only train, decode and paths settings can change on resume".into(),
                ));
            }
            model.config = cfg;
            let corpus = corpus.unwrap_or_else(|| model.config.paths.corpus.clone());
            let data = load_dataset(&model.config, &corpus)?;
            if data.vocab != model.vocab {
                return Err(Failure::Data(format!(
                    "{}: vocabulary differs from the checkpoint's; the corpus has changed",
                    corpus.display()
                )));
            }
            (model, state, data)
        }
        None => {
            let mut cfg = config.resolve()?;
            if let Some(c) = corpus {
                cfg.paths.corpus = c;
            }
            let data = load_dataset(&cfg, &cfg.paths.corpus)?;
            let model = M3tModel::new(cfg, data.vocab.clone())?;
            (model, TrainState::default(), data)
        }
    };
    if let Some(o) = out {
        model.config.paths.out_dir = o;
    }
    let dir = model.config.paths.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    write_text(&dir.join("config.toml"), &model.config.to_toml())?;
    write_text(&dir.join("skipped.tsv"), &data.report.to_text())?;
    eprintln!(
        "records train {} val {} test {} dropped {}; vocabulary {} ({:.1}% coverage); parameters {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.report.dropped.len(),
        data.vocab.len(),
        100.0 * data.vocab.coverage(),
        model.store.total_elements()
    );
    let outputs = TrainOutputs {
        dir: Some(dir.clone()),
    };
    let summary = train(&mut model, &data, &mut state, &outputs, |line| {
        eprintln!("{line}")
    })?;
    println!("epochs\t{}", summary.epochs);
    println!("steps\t{}", summary.steps);
    println!("last_train_loss\t{}", summary.last_train_loss);
    if let Some(v) = summary.best_val_loss {
        println!("best_val_loss\t{v}");
    }
    println!("stopped_early\t{}", summary.stopped_early);
    println!("checkpoint\t{}", dir.join("last.m3tc").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    split: &str,
    corpus: Option<PathBuf>,
    oracle: bool,
    cider_d: bool,
    no_smoothing: bool,
    json: bool,
) -> CliResult {
    let (model, _) = load_checkpoint(checkpoint)?;
    let corpus = corpus.unwrap_or_else(|| model.config.paths.corpus.clone());
    let data = load_dataset(&model.config, &corpus)?;
    if data.vocab != model.vocab {
        return Err(Failure::Data(format!(
            "{}: vocabulary differs from the checkpoint's; not the training corpus",
            corpus.display()
        )));
    }
    let opts = MetricOptions {
        bleu: BleuOptions {
            smoothing: !no_smoothing,
            ..BleuOptions::default()
        },
        cider: CiderOptions { cider_d },
    };
    let report = evaluate_examples(&model, data.split(split)?, opts, oracle)?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_key_value());
    }
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    image: &Path,
    keywords: &str,
    heatmap: Option<PathBuf>,
    beam: Option<usize>,
    max_len: Option<usize>,
) -> CliResult {
    let (model, _) = load_checkpoint(checkpoint)?;
    let visual = load_visual(image, &model.config)?;
    let mut tokens = keywords_to_sequence(keywords);
    if tokens.is_empty() {
        return Err(Failure::Usage(
            "--keywords must contain at least one keyword".into(),
        ));
    }
    tokens.truncate(model.config.model.max_keywords);
    let ids = model.vocab.encode(&tokens);
    let d = &model.config.decode;
    let out = model.generate(
        &visual,
        &ids,
        beam.unwrap_or(d.beam),
        max_len.unwrap_or(d.max_len),
    )?;
    println!("{}", model.vocab.decode(&out.ids).join(" "));
    if let Some(path) = heatmap {
        let alpha = out.alpha.ok_or_else(|| {
            Failure::Usage("this model runs without the lesion gate; no heatmap to export".into())
        })?;
        export_gate_heatmap(&alpha, &path)?;
        eprintln!("heatmap written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(config: ConfigArgs, seeds: &[u64], samples: usize) -> CliResult {
    let cfg = config.resolve()?;
    let opts = VerifyOptions {
        samples_per_input: samples,
        ..VerifyOptions::default()
    };
    let results = run_gradcheck(&cfg, seeds, opts)?;
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line(GRADCHECK_TOLERANCE));
        failed += usize::from(!r.passes(GRADCHECK_TOLERANCE));
    }
    println!(
        "{} checks, {failed} failed (tolerance {GRADCHECK_TOLERANCE:e})",
        results.len()
    );
    if failed > 0 {
        return Err(Failure::Verification(format!(
            "{failed} gradient checks failed"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::InitConfig {
            profile,
            out,
            overrides,
        } => cmd_init_config(profile, out, overrides),
        Command::Synth {
            n,
            seed,
            out,
            image_size,
        } => cmd_synth(n, seed, &out, image_size),
        Command::Train {
            config,
            corpus,
            out,
            resume,
        } => cmd_train(config, corpus, out, resume),
        Command::Eval {
            checkpoint,
            split,
            corpus,
            oracle_decode,
            cider_d,
            no_smoothing,
            json,
        } => cmd_eval(
            &checkpoint,
            &split,
            corpus,
            oracle_decode,
            cider_d,
            no_smoothing,
            json,
        ),
        Command::Generate {
            checkpoint,
            image,
            keywords,
            heatmap,
            beam,
            max_len,
        } => cmd_generate(&checkpoint, &image, &keywords, heatmap, beam, max_len),
        Command::Gradcheck {
            config,
            seeds,
            samples,
        } => cmd_gradcheck(config, &seeds, samples),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
