use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_m3t");

fn m3t(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("M3T_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("corpus");
    ok(&m3t(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]));
    out.join("corpus.tsv")
}

const QUICK: [&str; 4] = ["--set", "train.epochs=2", "--set", "train.batch_size=8"];

fn train(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(QUICK);
    args.extend(extra);
    m3t(&args)
}

#[test]
fn training_twice_writes_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 30);
    // same output path both times: the config snapshot records it
    let run = tmp.path().join("run");
    ok(&train(&corpus, &run, &[]));
    let first = (
        fs::read(run.join("last.m3tc")).unwrap(),
        fs::read(run.join("train.tsv")).unwrap(),
    );
    fs::remove_dir_all(&run).unwrap();
    ok(&train(&corpus, &run, &[]));
    assert!(
        first.0 == fs::read(run.join("last.m3tc")).unwrap(),
        "checkpoints differ"
    );
    assert_eq!(first.1, fs::read(run.join("train.tsv")).unwrap());
    let log = fs::read_to_string(run.join("train.tsv")).unwrap();
    assert!(log.starts_with("step\tsplit\tloss\tmetrics\n"));
    assert!(log.lines().any(|l| l.split('\t').nth(1) == Some("val")));
}

#[test]
fn seed_env_var_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 30);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&train(&corpus, &a, &[]));
    let mut args = vec![
        "train".to_owned(),
        "--corpus".into(),
        corpus.to_str().unwrap().into(),
        "--out".into(),
        b.to_str().unwrap().into(),
    ];
    args.extend(QUICK.iter().map(|s| s.to_string()));
    let out = Command::new(BIN)
        .args(&args)
        .env("M3T_SEED", "77")
        .output()
        .unwrap();
    ok(&out);
    assert_ne!(
        fs::read(a.join("last.m3tc")).unwrap(),
        fs::read(b.join("last.m3tc")).unwrap()
    );
    let cfg = fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 77"), "{cfg}");
}

#[test]
fn oracle_decode_scores_one_and_eval_reports_all_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 30);
    let run = tmp.path().join("run");
    ok(&train(&corpus, &run, &[]));
    let ckpt = run.join("last.m3tc");
    let text = ok(&m3t(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--oracle-decode",
    ]));
    for k in ["bleu1", "bleu2", "bleu3", "bleu4"] {
        assert!(text.contains(&format!("{k}=1.000000")), "{text}");
    }
    let json = ok(&m3t(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "val",
        "--json",
    ]));
    for k in ["bleu1", "bleu4", "rouge_l", "cider"] {
        assert!(json.contains(&format!("\"{k}\"")), "{json}");
    }
}

#[test]
fn generate_prints_text_and_exports_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 30);
    let run = tmp.path().join("run");
    ok(&train(&corpus, &run, &[]));
    let image = tmp.path().join("corpus/images/00000.ppm");
    let heat = tmp.path().join("alpha.pgm");
    let text = ok(&m3t(&[
        "generate",
        "--checkpoint",
        run.join("last.m3tc").to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--keywords",
        "color fundus, drusen, left",
        "--heatmap",
        heat.to_str().unwrap(),
    ]));
    assert!(!text.trim().is_empty());
    let pgm = fs::read(&heat).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
    assert!(heat.with_extension("txt").exists());
}

#[test]
fn heatmap_is_refused_without_the_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 30);
    let run = tmp.path().join("run");
    ok(&train(
        &corpus,
        &run,
        &[
            "--no-visual-attention",
            "--no-keywords",
            "--no-keyword-attention",
        ],
    ));
    let out = m3t(&[
        "generate",
        "--checkpoint",
        run.join("last.m3tc").to_str().unwrap(),
        "--image",
        tmp.path().join("corpus/images/00000.ppm").to_str().unwrap(),
        "--keywords",
        "drusen",
        "--heatmap",
        tmp.path().join("a.pgm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resume_continues_training() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 30);
    let run = tmp.path().join("run");
    ok(&train(&corpus, &run, &[]));
    let ckpt = run.join("last.m3tc");
    let more = tmp.path().join("more");
    let resume = |extra: &[&str]| {
        let mut args = vec![
            "train",
            "--resume",
            ckpt.to_str().unwrap(),
            "--out",
            more.to_str().unwrap(),
        ];
        args.extend(extra);
        m3t(&args)
    };
    // the checkpoint's own budget of two epochs is already spent
    assert!(ok(&resume(&[])).contains("epochs\t2"));
    let text = ok(&resume(&["--set", "train.epochs=3"]));
    assert!(text.contains("epochs\t3"), "{text}");
    let log = fs::read_to_string(more.join("train.tsv")).unwrap();
    assert!(
        !log.starts_with("step\t"),
        "resumed log should not repeat the header"
    );
    assert_eq!(
        resume(&["--set", "model.d_model=16"]).status.code(),
        Some(1)
    );
}

#[test]
fn gradcheck_passes_on_a_fresh_seed() {
    let text = ok(&m3t(&["gradcheck", "--seed", "913"]));
    assert!(text.contains(", 0 failed"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn init_config_emits_profile_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    ok(&m3t(&[
        "init-config",
        "--profile",
        "full",
        "--out",
        cfg.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("d_model = 512"));
    assert!(text.contains("lr = 0.004"));
    assert!(text.contains("batch_size = 64"));
    let desk = ok(&m3t(&[
        "init-config",
        "--set",
        "model.d_model=32",
        "--set",
        "model.heads=4",
    ]));
    assert!(desk.contains("d_model = 32"));
}

#[test]
fn exit_codes_follow_the_failure_class() {
    // usage: bad subcommand, bad override, ablation outside the four rows
    assert_eq!(m3t(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        m3t(&["init-config", "--set", "model.nope=1"]).status.code(),
        Some(1)
    );
    let out = m3t(&["init-config", "--no-keywords"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("keyword_attention requires keywords"));
    let bad_seed = Command::new(BIN)
        .args(["init-config"])
        .env("M3T_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(bad_seed.status.code(), Some(1));
    // data: missing files, malformed corpus
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        m3t(&["eval", "--checkpoint", "/nonexistent.m3tc"])
            .status
            .code(),
        Some(2)
    );
    let corpus = tmp.path().join("bad.tsv");
    fs::write(&corpus, "only one field\n").unwrap();
    assert_eq!(
        train(&corpus, &tmp.path().join("o"), &[]).status.code(),
        Some(2)
    );
    assert_eq!(m3t(&["--help"]).status.code(), Some(0));
}
