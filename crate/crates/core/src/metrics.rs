//! Caption metrics: corpus BLEU, CIDEr-D and a tuple-matching SPICE.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::scenegraph::{SceneGraph, Tuple};

/// One hypothesis with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem<T> {
    pub hypothesis: Vec<T>,
    pub references: Vec<Vec<T>>,
}

impl<T> EvalItem<T> {
    pub fn new(hypothesis: Vec<T>, references: Vec<Vec<T>>) -> Self {
        Self { hypothesis, references }
    }
}

fn check_corpus<T>(corpus: &[EvalItem<T>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("no hypotheses to score".into()));
    }
    if corpus.iter().any(|i| i.references.is_empty()) {
        return Err(Error::EmptyInput("item without references".into()));
    }
    Ok(())
}

/// n-gram counts in order of first occurrence, so sums over them are
/// reproducible run to run.
fn ngram_counts<T: Clone + Eq + Hash>(tokens: &[T], n: usize) -> Vec<(&[T], usize)> {
    let mut index: HashMap<&[T], usize> = HashMap::new();
    let mut out: Vec<(&[T], usize)> = Vec::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            match index.get(w) {
                Some(&i) => out[i].1 += 1,
                None => {
                    index.insert(w, out.len());
                    out.push((w, 1));
                }
            }
        }
    }
    out
}

/// Clipped n-gram matches and total hypothesis n-grams over the corpus.
pub fn modified_precision<T: Clone + Eq + Hash>(corpus: &[EvalItem<T>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for item in corpus {
        let hyp = ngram_counts(&item.hypothesis, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in &item.references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in hyp {
            total += c;
            matched += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
    }
    (matched, total)
}

/// Corpus BLEU-n: geometric mean of clipped precisions for orders `1..=n`
/// times the brevity penalty, with the closest reference length per item
/// (shorter one on ties).
pub fn bleu<T: Clone + Eq + Hash>(corpus: &[EvalItem<T>], n: usize) -> Result<f64> {
    check_corpus(corpus)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must be 1..4, got {n}")));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = modified_precision(corpus, k);
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = corpus.iter().map(|i| i.hypothesis.len()).sum();
    let r: usize = corpus
        .iter()
        .map(|i| {
            let h = i.hypothesis.len() as i64;
            i.references
                .iter()
                .map(|r| r.len())
                .min_by_key(|&l| ((l as i64 - h).abs(), l))
                .unwrap_or(0)
        })
        .sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of reference n-grams, fixed once and reused for
/// scoring (as the reward during self-critical training).
#[derive(Clone, Debug)]
pub struct CiderD<T: Clone + Eq + Hash> {
    df: HashMap<Vec<T>, usize>,
    log_docs: f64,
    docs: usize,
}

struct TfIdf<'a, T> {
    vec: [Vec<(&'a [T], f64)>; CIDER_N],
    lookup: [HashMap<&'a [T], f64>; CIDER_N],
    norm: [f64; CIDER_N],
    len: usize,
}

impl<T: Clone + Eq + Hash> CiderD<T> {
    /// One entry per item, each a set of references.
    pub fn new(references: &[Vec<Vec<T>>]) -> Self {
        let mut df: HashMap<Vec<T>, usize> = HashMap::new();
        for refs in references {
            let mut seen: std::collections::HashSet<&[T]> = std::collections::HashSet::new();
            for r in refs {
                for n in 1..=CIDER_N {
                    if r.len() >= n {
                        seen.extend(r.windows(n));
                    }
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        Self {
            df,
            log_docs: (references.len().max(1) as f64).ln(),
            docs: references.len(),
        }
    }

    /// True when idf is identically zero, so every score is 0.
    pub fn is_degenerate(&self) -> bool {
        self.docs < 2
    }

    fn tfidf<'a>(&self, tokens: &'a [T]) -> TfIdf<'a, T> {
        let mut vec: [Vec<(&'a [T], f64)>; CIDER_N] = Default::default();
        let mut lookup: [HashMap<&'a [T], f64>; CIDER_N] = Default::default();
        let mut norm = [0.0; CIDER_N];
        for n in 1..=CIDER_N {
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (self.log_docs - df.ln());
                norm[n - 1] += w * w;
                vec[n - 1].push((g, w));
                lookup[n - 1].insert(g, w);
            }
        }
        TfIdf {
            vec,
            lookup,
            norm: norm.map(f64::sqrt),
            len: tokens.len(),
        }
    }

    fn similarity(hyp: &TfIdf<T>, r: &TfIdf<T>) -> f64 {
        let delta = hyp.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..CIDER_N {
            let mut val = 0.0;
            for &(g, w) in &hyp.vec[n] {
                if let Some(&rw) = r.lookup[n].get(g) {
                    val += w.min(rw) * rw;
                }
            }
            if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
                val /= hyp.norm[n] * r.norm[n];
            }
            total += val * penalty;
        }
        total / CIDER_N as f64
    }

    /// CIDEr-D of one hypothesis against its references, in `[0, 10]`.
    pub fn score(&self, hypothesis: &[T], references: &[Vec<T>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let h = self.tfidf(hypothesis);
        let sum: f64 = references
            .iter()
            .map(|r| Self::similarity(&h, &self.tfidf(r)))
            .sum();
        10.0 * sum / references.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub mean: f64,
    pub per_item: Vec<f64>,
    pub warnings: Vec<String>,
}

/// CIDEr-D with document frequencies taken from the corpus references.
pub fn cider_d<T: Clone + Eq + Hash>(corpus: &[EvalItem<T>]) -> Result<CiderScores> {
    check_corpus(corpus)?;
    let refs: Vec<Vec<Vec<T>>> = corpus.iter().map(|i| i.references.clone()).collect();
    let scorer = CiderD::new(&refs);
    let mut warnings = Vec::new();
    if scorer.is_degenerate() {
        warnings.push("CIDEr-D over a single item: every idf is zero and all scores are 0".to_string());
    }
    let per_item: Vec<f64> = corpus
        .iter()
        .map(|i| scorer.score(&i.hypothesis, &i.references))
        .collect();
    let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(CiderScores {
        mean,
        per_item,
        warnings,
    })
}

/// F1 between tuple sets.
pub fn tuple_f1(hyp: &BTreeSet<Tuple>, reference: &BTreeSet<Tuple>) -> f64 {
    let matched = hyp.intersection(reference).count() as f64;
    if matched == 0.0 {
        return 0.0;
    }
    let p = matched / hyp.len() as f64;
    let r = matched / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Exact-match tuple F1 between two graphs.
pub fn spice_lite(hyp: &SceneGraph, reference: &SceneGraph) -> Result<f64> {
    Ok(tuple_f1(&hyp.to_tuples()?, &reference.to_tuples()?))
}
