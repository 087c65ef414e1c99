//! Naive metric implementations written straight from the definitions,
//! plus hand-scored tuple-F1 cases.

use rand::Rng;
use sgalign_core::metrics::EvalItem;
use sgalign_core::scenegraph::{Modality, SceneGraph};

pub type Corpus = Vec<EvalItem<String>>;

pub fn grams(s: &[String], n: usize) -> Vec<String> {
    if s.len() < n {
        return vec![];
    }
    (0..=s.len() - n).map(|i| s[i..i + n].join(" ")).collect()
}

fn count(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| x.as_str() == g).count()
}

fn distinct(list: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn oracle_bleu(corpus: &Corpus, n: usize) -> f64 {
    let mut logs = 0.0;
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for it in corpus {
            let h = grams(&it.hypothesis, k);
            den += h.len();
            for g in distinct(&h) {
                let best = it.references.iter().map(|r| count(&grams(r, k), &g)).max().unwrap();
                num += count(&h, &g).min(best);
            }
        }
        if num == 0 {
            return 0.0;
        }
        logs += (num as f64 / den as f64).ln() / n as f64;
    }
    let c: f64 = corpus.iter().map(|i| i.hypothesis.len() as f64).sum();
    let mut r = 0.0;
    for it in corpus {
        let h = it.hypothesis.len() as f64;
        let mut best = f64::INFINITY;
        for x in &it.references {
            let l = x.len() as f64;
            if (l - h).abs() < (best - h).abs() || ((l - h).abs() == (best - h).abs() && l < best) {
                best = l;
            }
        }
        r += best;
    }
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * logs.exp()
}

/// Per-item CIDEr-D built from explicit tf-idf vectors over string n-grams.
pub fn oracle_cider(corpus: &Corpus) -> Vec<f64> {
    let docs = corpus.len() as f64;
    let df = |g: &str, n: usize| -> f64 {
        corpus
            .iter()
            .filter(|it| it.references.iter().any(|r| grams(r, n).iter().any(|x| x == g)))
            .count() as f64
    };
    let vector = |s: &[String], n: usize| -> Vec<(String, f64)> {
        let all = grams(s, n);
        distinct(&all)
            .into_iter()
            .map(|g| {
                let w = count(&all, &g) as f64 * (docs.ln() - df(&g, n).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    corpus
        .iter()
        .map(|it| {
            let mut total = 0.0;
            for r in &it.references {
                let delta = it.hypothesis.len() as f64 - r.len() as f64;
                let pen = (-delta * delta / 72.0).exp();
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let vh = vector(&it.hypothesis, n);
                    let vr = vector(r, n);
                    let nh = vh.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                    let nr = vr.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                    let mut dot = 0.0;
                    for (g, wh) in &vh {
                        for (g2, wr) in &vr {
                            if g == g2 {
                                dot += wh.min(*wr) * wr;
                            }
                        }
                    }
                    if nh > 0.0 && nr > 0.0 {
                        dot /= nh * nr;
                    }
                    per_n += dot * pen / 4.0;
                }
                total += per_n;
            }
            10.0 * total / it.references.len() as f64
        })
        .collect()
}

/// A random corpus of 2 to 5 items over a six-word alphabet, each with one
/// to three references of up to 7 words.
pub fn random_corpus(r: &mut impl Rng) -> Corpus {
    let words = ["a", "b", "c", "d", "e", "f"];
    let sentence = |r: &mut dyn rand::RngCore| -> Vec<String> {
        let len = r.random_range(0..8);
        (0..len).map(|_| words[r.random_range(0..words.len())].to_string()).collect()
    };
    let items = r.random_range(2..=5);
    (0..items)
        .map(|_| {
            let h = sentence(r);
            let refs = (0..r.random_range(1..4)).map(|_| sentence(r)).collect();
            EvalItem::new(h, refs)
        })
        .collect()
}

fn graph(objects: &[&str], attrs: &[(usize, &str)], rels: &[(usize, &str, usize)]) -> SceneGraph {
    let mut g = SceneGraph::new(Modality::Sentence);
    for o in objects {
        g.add_object(*o);
    }
    for (o, a) in attrs {
        g.add_attribute(*o, *a);
    }
    for (s, p, o) in rels {
        g.add_relation(*s, *p, *o);
    }
    g
}

/// (hypothesis, reference, F1 worked out by hand from the tuple sets).
pub fn spice_cases() -> Vec<(&'static str, SceneGraph, SceneGraph, f64)> {
    let car_on_street = graph(&["car", "street"], &[(0, "red")], &[(0, "on", 1)]);
    vec![
        ("identical graphs", car_on_street.clone(), car_on_street.clone(), 1.0),
        // 2 of 2 hypothesis tuples match, 2 of 4 reference tuples
        ("hypothesis subset", graph(&["car"], &[(0, "red")], &[]), car_on_street.clone(), 2.0 / 3.0),
        ("disjoint objects", graph(&["dog"], &[], &[]), graph(&["car"], &[], &[]), 0.0),
        // p = 2/4, r = 2/3
        (
            "different predicate",
            car_on_street.clone(),
            graph(&["car", "street"], &[], &[(0, "near", 1)]),
            4.0 / 7.0,
        ),
        ("attribute mismatch", graph(&["car"], &[(0, "blue")], &[]), graph(&["car"], &[(0, "red")], &[]), 0.5),
        (
            "reversed relation",
            graph(&["car", "street"], &[], &[(0, "on", 1)]),
            graph(&["car", "street"], &[], &[(1, "on", 0)]),
            2.0 / 3.0,
        ),
        ("repeated object symbol", graph(&["dog", "dog"], &[], &[]), graph(&["dog"], &[], &[]), 1.0),
        // p = 3/4, r = 3/5
        (
            "partial relation overlap",
            graph(&["man", "horse"], &[(1, "brown")], &[(0, "rides", 1)]),
            graph(&["man", "horse", "beach"], &[], &[(0, "rides", 1), (1, "on", 2)]),
            2.0 / 3.0,
        ),
        // p = 1/3, r = 1
        ("extra objects", graph(&["car", "street", "tree"], &[], &[]), graph(&["car"], &[], &[]), 0.5),
        (
            "one shared attribute",
            graph(&["car"], &[(0, "red"), (0, "shiny")], &[]),
            graph(&["car"], &[(0, "red"), (0, "old")], &[]),
            2.0 / 3.0,
        ),
    ]
}
