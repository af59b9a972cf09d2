use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::bleu::ngram_counts;
use super::{check_pairs, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiderOptions {
    /// CIDEr-D: clip candidate weights by the reference and apply a
    /// Gaussian length penalty (sigma 6).
    pub cider_d: bool,
}

const SIGMA: f64 = 6.0;

type Vector<'a> = HashMap<&'a [String], f64>;

fn tfidf<'a>(
    s: &'a [String],
    n: usize,
    df: &HashMap<&[String], usize>,
    log_n: f64,
) -> (Vector<'a>, f64) {
    let v: Vector = ngram_counts(s, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// CIDEr: per order `n = 1..4`, cosine similarity between TF-IDF vectors of
/// candidate and reference (document frequencies over the references),
/// averaged over orders and pairs, times 10.
pub fn cider(cands: &[Sentence], refs: &[Sentence], opts: CiderOptions) -> Result<f64> {
    check_pairs(cands, refs)?;
    if cands.len() < 2 {
        return Err(Error::Metric(
            "CIDEr needs at least 2 pairs for document frequencies".into(),
        ));
    }
    let log_n = (refs.len() as f64).ln();
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for r in refs {
            let uniq: HashSet<&[String]> = r.windows(n).collect();
            for g in uniq {
                *df.entry(g).or_default() += 1;
            }
        }
        for (c, r) in cands.iter().zip(refs) {
            let (vc, nc) = tfidf(c, n, &df, log_n);
            let (vr, nr) = tfidf(r, n, &df, log_n);
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, &x)| {
                    let y = *vr.get(g)?;
                    Some(if opts.cider_d { x.min(y) * y } else { x * y })
                })
                .sum();
            let mut sim = dot / (nc * nr);
            if opts.cider_d {
                let delta = c.len() as f64 - r.len() as f64;
                sim *= (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            }
            total += sim;
        }
    }
    Ok(10.0 * total / (4.0 * cands.len() as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::bleu::tests::random_corpus;
    use crate::metrics::sent;

    /// Re-implementation with sorted n-gram lists and explicit loops.
    fn oracle_cider(c: &[Sentence], r: &[Sentence]) -> f64 {
        let grams = |s: &Sentence, n: usize| -> Vec<Vec<String>> {
            if s.len() < n {
                return vec![];
            }
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        };
        let n_docs = r.len() as f64;
        let mut score = 0.0;
        for n in 1..=4 {
            let vector = |s: &Sentence| -> Vec<(Vec<String>, f64)> {
                let mut gs = grams(s, n);
                gs.sort();
                let mut out: Vec<(Vec<String>, f64)> = Vec::new();
                for g in gs {
                    match out.last_mut() {
                        Some((last, c)) if *last == g => *c += 1.0,
                        _ => out.push((g, 1.0)),
                    }
                }
                for (g, w) in &mut out {
                    let df = r
                        .iter()
                        .filter(|doc| grams(doc, n).contains(g))
                        .count()
                        .max(1) as f64;
                    *w *= (n_docs / df).ln();
                }
                out
            };
            for (x, y) in c.iter().zip(r) {
                let (vx, vy) = (vector(x), vector(y));
                let norm =
                    |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                let (a, b) = (norm(&vx), norm(&vy));
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                let dot: f64 = vx
                    .iter()
                    .map(|(g, w)| vy.iter().find(|(h, _)| h == g).map_or(0.0, |(_, u)| w * u))
                    .sum();
                score += dot / (a * b);
            }
        }
        10.0 * score / (4.0 * c.len() as f64)
    }

    #[test]
    fn identical_distinct_corpus_scores_highest() {
        let refs = vec![
            sent("a red lesion in the upper left"),
            sent("two pale spots near the disc"),
            sent("no abnormal finding at all"),
        ];
        let best = cider(&refs, &refs, CiderOptions::default()).unwrap();
        assert!(best > 0.0);
        assert!((best - 10.0).abs() < 1e-12);
        let mut worse = refs.clone();
        worse[0] = sent("a red lesion");
        assert!(cider(&worse, &refs, CiderOptions::default()).unwrap() < best);
    }

    #[test]
    fn disjoint_pair_contributes_nothing() {
        let refs = vec![sent("a b c d"), sent("e f g h")];
        let cands = vec![sent("x y z w"), sent("e f g h")];
        let half = cider(&cands, &refs, CiderOptions::default()).unwrap();
        assert!((half - 5.0).abs() < 1e-12);
        assert!(cider(&cands[..1], &refs[..1], CiderOptions::default()).is_err());
    }

    #[test]
    fn toy_corpus_pinned() {
        let refs = vec![
            sent("the cat sat on the mat"),
            sent("a dog ran in the park"),
            sent("the bird sang"),
        ];
        let cands = vec![
            sent("the cat sat on a mat"),
            sent("a dog in the park"),
            sent("a bird sang loudly"),
        ];
        let oracle = oracle_cider(&cands, &refs);
        let v = cider(&cands, &refs, CiderOptions::default()).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - TOY_CIDER).abs() < 1e-12, "{v:.17}");
    }

    const TOY_CIDER: f64 = 4.414_198_595_690_27;

    #[test]
    fn cider_d_penalizes_length() {
        let refs = vec![sent("a b c d"), sent("e f g h")];
        let cands = vec![sent("a b c d"), sent("e f g h i j k l m n o p")];
        let plain = cider(&cands, &refs, CiderOptions::default()).unwrap();
        let d = cider(&cands, &refs, CiderOptions { cider_d: true }).unwrap();
        assert!(d < plain);
    }

    #[test]
    fn matches_oracle_on_random_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for i in 0..20 {
            let (c, r) = random_corpus(&mut rng, 2 + i % 4);
            let v = cider(&c, &r, CiderOptions::default()).unwrap();
            assert!((v - oracle_cider(&c, &r)).abs() <= 1e-9);
            assert!(v >= 0.0);
        }
    }
}
