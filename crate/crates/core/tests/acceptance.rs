//! Acceptance suite. Runs every criterion in sequence (timings are wall
//! clock on one thread), prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use m3t_core::attention::{init_multi_head, multi_head_attention, AttentionMask};
use m3t_core::checkpoint::{decode_checkpoint, encode_checkpoint, TrainState};
use m3t_core::config::{Ablation, ModelConfig};
use m3t_core::data::{generate_synthetic_corpus, Batch, CorpusRecord, VisualInput};
use m3t_core::decoder::{decoder_forward, init_decoder, positional_table, DecoderDims, PAD};
use m3t_core::fusion::{encoder_block, image_tokens, init_transfusion, FusionDims};
use m3t_core::keyword::{embed_keywords, init_keywords, keyword_attention};
use m3t_core::metrics::{bleu, cider, rouge_l, BleuOptions, CiderOptions, MetricOptions, Sentence};
use m3t_core::model::M3tModel;
use m3t_core::shape::trace_shapes;
use m3t_core::tensor::{bind_tree, Graph, ParamStore, Precision, Tensor, Var};
use m3t_core::train::{
    build_dataset, decode_examples, evaluate_examples, train, Dataset, TrainOutputs,
};
use m3t_core::verify::{run_gradcheck, VerifyOptions, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use m3t_core::visual::{init_lesion_gate, lesion_contextual_gate, BackboneMode};

// ---- pinned thresholds ------------------------------------------------------

const C1_SEEDS: u64 = 5;
const C1_BUDGET: Duration = Duration::from_secs(120);

const C2_RECORDS: usize = 32;
const C2_STEPS: usize = 500;
const C2_MAX_LOSS: f64 = 0.05;
const C2_MIN_EXACT: usize = 30;
const C2_BUDGET: Duration = Duration::from_secs(300);

const C3_SEEDS: u64 = 5;
const C3_RECORDS: usize = 400;
const C3_EPOCHS: usize = 25;
const C3_MIN_WINS: usize = 4;
const C3_BUDGET: Duration = Duration::from_secs(1800);

const C4_CORPORA: usize = 20;
const C4_TOL: f64 = 1e-9;
const TOY_CIDER: f64 = 4.414_198_595_690_27;

const C5_CASES: usize = 100;
const C5_ROW_TOL: f64 = 1e-6;
const C5_PERM_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn synthetic_dataset(cfg: &ModelConfig, n: usize, seed: u64) -> Dataset {
    let samples = generate_synthetic_corpus(n, seed, cfg.backbone.input_size).unwrap();
    let records: Vec<CorpusRecord> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| CorpusRecord {
            image: PathBuf::from(format!("{i:05}.ppm")),
            keywords: s.keywords.clone(),
            description: s.description.clone(),
        })
        .collect();
    build_dataset(cfg, &records, |i, _| {
        Ok(VisualInput::Image(samples[i].image()))
    })
    .unwrap()
}

// ---- 1: gradient correctness ------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..C1_SEEDS).map(|s| 1000 + s).collect();
    let results = run_gradcheck(&ModelConfig::desk(), &seeds, VerifyOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let failures: Vec<String> = results
        .iter()
        .filter(|r| !r.passes(GRADCHECK_TOLERANCE))
        .map(|r| r.line(GRADCHECK_TOLERANCE))
        .collect();
    for f in &failures {
        println!("    {f}");
    }
    let worst = results
        .iter()
        .map(|r| r.report.max_rel_error)
        .fold(0.0, f64::max);
    let checked: usize = results.iter().map(|r| r.report.checked).sum();
    outcome(
        failures.is_empty() && elapsed < C1_BUDGET,
        format!(
            "{} op/block checks over {C1_SEEDS} seeds, {checked} elements, step {GRADCHECK_STEP:e}, worst rel err {worst:.2e} (tol {GRADCHECK_TOLERANCE:e}), {} failing, {:.1}s (budget {}s)",
            results.len(),
            failures.len(),
            elapsed.as_secs_f64(),
            C1_BUDGET.as_secs()
        ),
    )
}

// ---- 2: overfit -------------------------------------------------------------

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig::desk();
    cfg.train.train_fraction = 1.0;
    cfg.train.val_fraction = 0.0;
    cfg.train.test_fraction = 0.0;
    let data = synthetic_dataset(&cfg, C2_RECORDS, 7);
    assert_eq!(data.train.len(), C2_RECORDS);
    let vocab_ok = data.vocab.len() <= 200;
    let dims_ok = (cfg.model.d_model, cfg.model.d_emb, cfg.model.heads) == (64, 32, 2);
    let mut model = M3tModel::new(cfg, data.vocab.clone()).unwrap();
    let all: Vec<usize> = (0..C2_RECORDS).collect();
    let batch = Batch::from_indices(&data.train, &all, PAD);
    for _ in 0..C2_STEPS {
        model.train_step(&data.train, &batch).unwrap();
    }
    let loss = model.evaluate_loss(&data.train, &all).unwrap();
    let decoded = decode_examples(&model, &data.train).unwrap();
    let exact = decoded
        .iter()
        .zip(&data.train)
        .filter(|(d, ex)| **d == ex.description)
        .count();
    let elapsed = start.elapsed();
    outcome(
        vocab_ok && dims_ok && loss <= C2_MAX_LOSS && exact >= C2_MIN_EXACT && elapsed < C2_BUDGET,
        format!(
            "{C2_STEPS} Adam steps, vocab {}, train loss {loss:.4} (max {C2_MAX_LOSS}), exact decodes {exact}/{C2_RECORDS} (min {C2_MIN_EXACT}), {:.1}s (budget {}s)",
            data.vocab.len(),
            elapsed.as_secs_f64(),
            C2_BUDGET.as_secs()
        ),
    )
}

// ---- 3: ablation direction --------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    // image only = visual attention without keywords
    let variants = [
        ("image-only", Ablation::VISUAL),
        ("keywords-no-attention", Ablation::KEYWORDS),
        ("full", Ablation::FULL),
    ];
    let mut scores = vec![Vec::new(); 3];
    let mut budgets = Vec::new();
    for seed in 0..C3_SEEDS {
        let mut base = ModelConfig::desk();
        base.train.seed = seed;
        base.train.epochs = C3_EPOCHS;
        let data = synthetic_dataset(&base, C3_RECORDS, 100 + seed);
        let mut row = Vec::new();
        for (k, (_, ab)) in variants.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.ablation = *ab;
            let mut model = M3tModel::new(cfg, data.vocab.clone()).unwrap();
            budgets.push(model.store.total_elements());
            train(
                &mut model,
                &data,
                &mut TrainState::default(),
                &TrainOutputs::default(),
                |_| {},
            )
            .unwrap();
            let r = evaluate_examples(&model, &data.test, MetricOptions::default(), false).unwrap();
            scores[k].push(r.bleu4);
            row.push(format!("{:.4}", r.bleu4));
        }
        println!(
            "    seed {seed}: BLEU@4 image-only {} keywords-no-attention {} full {}",
            row[0], row[1], row[2]
        );
    }
    let elapsed = start.elapsed();
    let wins = scores[2]
        .iter()
        .zip(&scores[0])
        .filter(|(f, i)| f > i)
        .count();
    let (m_img, m_kw, m_full) = (
        median(scores[0].clone()),
        median(scores[1].clone()),
        median(scores[2].clone()),
    );
    let between = m_img <= m_kw && m_kw <= m_full;
    let same_budget = budgets.windows(2).all(|w| w[0] == w[1]);
    outcome(
        wins >= C3_MIN_WINS && between && same_budget && elapsed < C3_BUDGET,
        format!(
            "full beats image-only in {wins}/{C3_SEEDS} seeds (min {C3_MIN_WINS}); median BLEU@4 image-only {m_img:.4}, keywords-no-attention {m_kw:.4}, full {m_full:.4} (between: {between}); equal parameter budget: {same_budget}; {:.1}s (budget {}s)",
            elapsed.as_secs_f64(),
            C3_BUDGET.as_secs()
        ),
    )
}

// ---- 4: metric oracles ------------------------------------------------------

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn oracle_bleu(c: &[Sentence], r: &[Sentence], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut hit, mut total) = (0usize, 0usize);
        for (x, y) in c.iter().zip(r) {
            let mut pool = grams(y, k);
            for g in grams(x, k) {
                total += 1;
                if let Some(pos) = pool.iter().position(|h| *h == g) {
                    pool.remove(pos);
                    hit += 1;
                }
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / total as f64).ln() / n as f64;
    }
    let cl: usize = c.iter().map(Vec::len).sum();
    let rl: usize = r.iter().map(Vec::len).sum();
    let bp = if cl < rl {
        (1.0 - rl as f64 / cl as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

/// Longest common subsequence by trying every subset of the shorter side.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let (s, t) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << s.len()) {
        let pick: Vec<&String> = (0..s.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| &s[i])
            .collect();
        if pick.len() <= best {
            continue;
        }
        let mut it = t.iter();
        if pick.iter().all(|w| it.any(|x| x == *w)) {
            best = pick.len();
        }
    }
    best
}

fn oracle_rouge(c: &[Sentence], r: &[Sentence]) -> f64 {
    let mut sum = 0.0;
    for (x, y) in c.iter().zip(r) {
        let l = brute_lcs(x, y) as f64;
        if l > 0.0 {
            let (p, rec) = (l / x.len() as f64, l / y.len() as f64);
            sum += (1.0 + 1.44) * p * rec / (rec + 1.44 * p);
        }
    }
    sum / c.len() as f64
}

fn oracle_cider(c: &[Sentence], r: &[Sentence]) -> f64 {
    let docs = r.len() as f64;
    let mut score = 0.0;
    for n in 1..=4 {
        let weights = |s: &Sentence| -> Vec<(Vec<String>, f64)> {
            let mut out: Vec<(Vec<String>, f64)> = Vec::new();
            for g in grams(s, n) {
                match out.iter_mut().find(|(h, _)| *h == g) {
                    Some((_, w)) => *w += 1.0,
                    None => out.push((g, 1.0)),
                }
            }
            for (g, w) in &mut out {
                let df = r.iter().filter(|d| grams(d, n).contains(g)).count().max(1) as f64;
                *w *= docs.ln() - df.ln();
            }
            out
        };
        for (x, y) in c.iter().zip(r) {
            let (wx, wy) = (weights(x), weights(y));
            let nx = wx.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let ny = wy.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                continue;
            }
            let dot: f64 = wx
                .iter()
                .map(|(g, w)| wy.iter().find(|(h, _)| h == g).map_or(0.0, |(_, u)| w * u))
                .sum();
            score += dot / (nx * ny);
        }
    }
    10.0 * score / (4.0 * c.len() as f64)
}

fn words(s: &str) -> Sentence {
    s.split_whitespace().map(str::to_owned).collect()
}

fn criterion_4() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4444);
    let vocab = ["the", "a", "lesion", "eye", "left", "right", "spot"];
    let bo = BleuOptions::default();
    for _ in 0..C4_CORPORA {
        let pairs = rng.gen_range(2..7);
        let sent = |rng: &mut ChaCha8Rng| -> Sentence {
            let n = rng.gen_range(1..9);
            (0..n)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_owned())
                .collect()
        };
        let c: Vec<Sentence> = (0..pairs).map(|_| sent(&mut rng)).collect();
        let r: Vec<Sentence> = (0..pairs).map(|_| sent(&mut rng)).collect();
        for n in 1..=4 {
            worst = worst.max((bleu(&c, &r, n, bo).unwrap() - oracle_bleu(&c, &r, n)).abs());
        }
        worst = worst.max((rouge_l(&c, &r).unwrap() - oracle_rouge(&c, &r)).abs());
        worst = worst
            .max((cider(&c, &r, CiderOptions::default()).unwrap() - oracle_cider(&c, &r)).abs());
    }
    let oracle_ok = worst <= C4_TOL;

    let mut golden = true;
    let c = vec![words("the cat sat")];
    let r = vec![words("the cat sat on the mat")];
    for n in 1..=3 {
        let v = bleu(&c, &r, n, bo).unwrap();
        golden &=
            (v - (-1.0f64).exp()).abs() <= C4_TOL && (v - oracle_bleu(&c, &r, n)).abs() <= C4_TOL;
    }
    golden &= bleu(&c, &r, 4, bo).unwrap() == 0.0;
    golden &= (rouge_l(&[words("a b c d")], &[words("a c d b")]).unwrap() - 0.75).abs() <= C4_TOL;
    let refs = vec![
        words("the cat sat on the mat"),
        words("a dog ran in the park"),
        words("the bird sang"),
    ];
    let cands = vec![
        words("the cat sat on a mat"),
        words("a dog in the park"),
        words("a bird sang loudly"),
    ];
    let toy = cider(&cands, &refs, CiderOptions::default()).unwrap();
    golden &=
        (toy - TOY_CIDER).abs() <= C4_TOL && (toy - oracle_cider(&cands, &refs)).abs() <= C4_TOL;

    let same = vec![
        words("one red spot in the left eye"),
        words("no lesion seen"),
    ];
    let identical = (1..=4).all(|n| bleu(&same, &same, n, bo).unwrap() == 1.0);
    outcome(
        oracle_ok && golden && identical,
        format!(
            "max |metric - oracle| {worst:.1e} over {C4_CORPORA} corpora (tol {C4_TOL:e}); golden cases {}; identical-corpus BLEU@1-4 = 1.0: {identical}",
            if golden { "match" } else { "MISMATCH" }
        ),
    )
}

// ---- 5: structural invariants -----------------------------------------------

fn max_row_error(g: &Graph, a: Var, by_columns: bool) -> f64 {
    let shape = g.shape(a);
    let (rows, cols) = (shape[0], shape[1]);
    let v = g.value(a);
    let sums: Vec<f64> = if by_columns {
        (0..cols)
            .map(|j| (0..rows).map(|i| v[i * cols + j]).sum())
            .collect()
    } else {
        (0..rows)
            .map(|i| v[i * cols..(i + 1) * cols].iter().sum())
            .collect()
    };
    sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

fn rows_sum_to_one(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..C5_CASES {
        let heads = rng.gen_range(1..4);
        let d_model = heads * rng.gen_range(1..4);
        let (lq, lk, d_kv) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..5),
        );
        let mut store = ParamStore::new();
        let p = init_multi_head(&mut store, "mha", d_model, d_kv, d_model, heads, rng).unwrap();
        let mut g = Graph::new(Precision::F32);
        let bound = bind_tree(&p, &mut g, &store);
        let q = g.constant(Tensor::uniform([lq, d_model], 2.0, rng));
        let k = g.constant(Tensor::uniform([lk, d_kv], 2.0, rng));
        let pad: Vec<bool> = (0..lk).map(|j| j > 0 && rng.gen_bool(0.3)).collect();
        let mask = if case % 2 == 1 {
            AttentionMask::KeyPadding(&pad)
        } else {
            AttentionMask::None
        };
        let out = multi_head_attention(&mut g, q, k, &bound, mask).unwrap();
        for w in &out.weights {
            worst = worst.max(max_row_error(&g, *w, false));
        }
        let p2 =
            init_multi_head(&mut store, "self", d_model, d_model, d_model, heads, rng).unwrap();
        let b2 = bind_tree(&p2, &mut g, &store);
        let self_out = multi_head_attention(&mut g, q, q, &b2, AttentionMask::Causal).unwrap();
        for w in &self_out.weights {
            worst = worst.max(max_row_error(&g, *w, false));
        }

        let n = rng.gen_range(1..6);
        let d_emb = rng.gen_range(2..6);
        let kp = init_keywords(&mut store, 12, d_emb, rng);
        let kb = kp.bind(&mut g, &store);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..12)).collect();
        let e = embed_keywords(&mut g, kb.table, &ids).unwrap();
        let (_, a) = keyword_attention(&mut g, e, kb.w_ke, None).unwrap();
        worst = worst.max(max_row_error(&g, a, false));

        let c = rng.gen_range(2..6);
        let lp = init_lesion_gate(&mut store, c, 2, rng);
        let lb = lp.bind(&mut g, &store);
        let f = g.constant(Tensor::uniform(
            [rng.gen_range(1..4), rng.gen_range(1..4), c],
            2.0,
            rng,
        ));
        let gate = lesion_contextual_gate(&mut g, f, &lb, 1e-5).unwrap();
        worst = worst.max(max_row_error(&g, gate.pool_attention, true));
    }
    worst
}

/// Counts cases where changing tokens at positions ≥ k moved any logit row
/// before k by even one bit.
fn causality_violations(rng: &mut ChaCha8Rng) -> usize {
    let mut bad = 0;
    for _ in 0..C5_CASES {
        let heads = rng.gen_range(1..3);
        let d_model = 2 * heads * rng.gen_range(1..3);
        let vocab = rng.gen_range(6..12);
        let t = rng.gen_range(2..8);
        let mut store = ParamStore::new();
        let dims = DecoderDims {
            vocab,
            d_model,
            heads,
            d_ff: rng.gen_range(2..6),
        };
        let p = init_decoder(&mut store, dims, rng).unwrap();
        let pe = positional_table(t, d_model);
        let mem = Tensor::uniform([rng.gen_range(1..5), d_model], 1.0, rng);
        let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
        let k = rng.gen_range(1..t);
        let mut changed = ids.clone();
        for id in &mut changed[k..] {
            *id = (*id + rng.gen_range(1..vocab)) % vocab;
        }
        let run = |ids: &[usize]| -> Vec<f64> {
            let mut g = Graph::new(Precision::F32);
            let b = bind_tree(&p, &mut g, &store);
            let m = g.constant(mem.clone());
            let l = decoder_forward(&mut g, ids, m, &b, &pe, 0.0, 1e-5).unwrap();
            g.value(l)[..k * vocab].to_vec()
        };
        let (a, b) = (run(&ids), run(&changed));
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            bad += 1;
        }
    }
    bad
}

/// Largest deviation from permutation invariance of `F'` and from
/// equivariance of the keyword attention matrix.
fn permutation_error(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..C5_CASES {
        let heads = rng.gen_range(1..3);
        let dims = FusionDims {
            channels: rng.gen_range(2..5),
            d_emb: rng.gen_range(2..6),
            d_model: heads * rng.gen_range(1..4),
            heads,
            d_ff: rng.gen_range(2..6),
        };
        let mut store = ParamStore::new();
        let kp = init_keywords(&mut store, 15, dims.d_emb, rng);
        let fp = init_transfusion(&mut store, dims, rng).unwrap();
        let fmap = Tensor::uniform([2, rng.gen_range(1..4), dims.channels], 1.0, rng);
        let n = rng.gen_range(2..7);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..15)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let run = |ids: &[usize]| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new(Precision::F64);
            let kb = kp.bind(&mut g, &store);
            let fb = bind_tree(&fp, &mut g, &store);
            let e = embed_keywords(&mut g, kb.table, ids).unwrap();
            let (ke, a) = keyword_attention(&mut g, e, kb.w_ke, None).unwrap();
            let f = g.constant(fmap.clone());
            let tokens = image_tokens(&mut g, f, fb.w_in).unwrap();
            let out = encoder_block(&mut g, tokens, ke, None, &fb, 0.0, 1e-5).unwrap();
            (g.value(out.f_prime).to_vec(), g.value(a).to_vec())
        };
        let (f0, a0) = run(&ids);
        let permuted: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let (f1, a1) = run(&permuted);
        for (x, y) in f0.iter().zip(&f1) {
            worst = worst.max((x - y).abs());
        }
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((a1[i * n + j] - a0[perm[i] * n + perm[j]]).abs());
            }
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5555);
    let rows = rows_sum_to_one(&mut rng);
    let causal = causality_violations(&mut rng);
    let perm = permutation_error(&mut rng);
    outcome(
        rows <= C5_ROW_TOL && causal == 0 && perm <= C5_PERM_TOL,
        format!(
            "softmax row-sum error {rows:.1e} (tol {C5_ROW_TOL:e}); causality violations {causal}/{C5_CASES}; keyword permutation error {perm:.1e} (tol {C5_PERM_TOL:e})"
        ),
    )
}

// ---- 6: shape contract ------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut cfg = ModelConfig::full();
    cfg.backbone.mode = BackboneMode::Trainable;
    let t = cfg.model.max_description + 1;
    let tr = trace_shapes(&cfg, cfg.model.vocab_cap, 10, t).unwrap();
    let ok = tr.get("image") == Some(&[356, 356, 3][..])
        && tr.get("feature_map") == Some(&[12, 12, 1280][..])
        && tr.get("fused_tokens") == Some(&[144, 512][..])
        && tr.get("logits") == Some(&[t, 5000][..]);
    let fmt = |s: &str| format!("{:?}", tr.get(s).unwrap_or(&[]));
    outcome(
        ok,
        format!(
            "image {} -> features {} -> fused {} -> logits {} ({} parameters, none allocated)",
            fmt("image"),
            fmt("feature_map"),
            fmt("fused_tokens"),
            fmt("logits"),
            tr.parameters
        ),
    )
}

// ---- 7: determinism and persistence -----------------------------------------

fn criterion_7() -> Outcome {
    let mut cfg = ModelConfig::desk();
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    let data = synthetic_dataset(&cfg, 40, 77);
    let run = || {
        let mut m = M3tModel::new(cfg.clone(), data.vocab.clone()).unwrap();
        let mut st = TrainState::default();
        let s = train(&mut m, &data, &mut st, &TrainOutputs::default(), |_| {}).unwrap();
        (s.log, encode_checkpoint(&m, &st).unwrap(), m, st)
    };
    let (log_a, ck_a, model, state) = run();
    let (log_b, ck_b, _, _) = run();
    let logs_equal = log_a == log_b;
    let ckpt_equal = ck_a == ck_b;
    let (restored, st) = decode_checkpoint(&ck_a).unwrap();
    let mut bitwise = st == state;
    for ex in data.val.iter().take(4) {
        let a = model.probe(ex).unwrap();
        let b = restored.probe(ex).unwrap();
        bitwise &= a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    outcome(
        logs_equal && ckpt_equal && bitwise,
        format!(
            "{} log rows identical across runs: {logs_equal}; checkpoint bytes identical: {ckpt_equal}; save/load probe outputs bitwise equal: {bitwise}",
            log_a.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a filter argument selects criteria
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, &str, fn() -> Outcome); 7] = [
        ("1", "gradient correctness", criterion_1),
        ("2", "overfit / memorization", criterion_2),
        ("3", "ablation direction", criterion_3),
        ("4", "metric oracle equivalence", criterion_4),
        ("5", "structural invariants", criterion_5),
        ("6", "shape contract", criterion_6),
        ("7", "determinism and persistence", criterion_7),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let o = run();
        println!(
            "criterion {id} ({name}): {} | {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
