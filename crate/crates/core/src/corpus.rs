//! Synthetic paired data, splits, unpairing and ingestion of image-side
//! graph files.
//!
//! Each item starts from a latent chain graph over fine-grained symbols.
//! The sentence is its realization; the image-side graph is the same graph
//! with every symbol mapped to its coarse class and at most three
//! attributes per object. Fine symbols are drawn with weight `1/(k+1)` for
//! the `k`-th member of their class, so the coarse class name (listed last)
//! is the least frequent sentence-side word.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{derived_rng, rng};
use crate::parser::{Grammar, Tag};
use crate::scenegraph::{deserialize_at, split_records, GraphRecord, Modality, SceneGraph};
use crate::vocab::MAX_CAPTION_LEN;

pub const BUILTIN_COARSENING: &str = include_str!("../data/coarsen.txt");

/// Most attributes an image-side object keeps.
pub const IMAGE_ATTRIBUTE_CAP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SymbolKind {
    Object,
    Attribute,
    Relation,
}

/// A coarse symbol and its fine members, most frequent first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolClass {
    pub kind: SymbolKind,
    pub coarse: String,
    pub members: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DualGrammar {
    pub grammar: Grammar,
    pub classes: Vec<SymbolClass>,
    coarse_of: BTreeMap<String, String>,
}

impl DualGrammar {
    /// Reads `<fine> <coarse>` lines. Symbol kinds come from the lexicon.
    pub fn new(grammar: Grammar, coarsening: &str) -> Result<Self> {
        let mut coarse_of = BTreeMap::new();
        let mut classes: Vec<SymbolClass> = Vec::new();
        for (i, line) in coarsening.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [fine, coarse] = fields[..] else {
                return Err(Error::parse(i + 1, "coarsening", "expected `<fine> <coarse>`"));
            };
            let kind = |s: &str| match grammar.lexicon.tag(s) {
                Tag::Noun => Some(SymbolKind::Object),
                Tag::Adj => Some(SymbolKind::Attribute),
                _ => grammar.relation_tags(s).map(|_| SymbolKind::Relation),
            };
            let k = kind(fine).ok_or_else(|| Error::parse(i + 1, fine, "not in the lexicon"))?;
            if kind(coarse) != Some(k) {
                return Err(Error::parse(i + 1, coarse, "coarse symbol must be a lexicon entry of the same kind"));
            }
            if coarse_of.insert(fine.to_string(), coarse.to_string()).is_some() {
                return Err(Error::parse(i + 1, fine, "fine symbol mapped twice"));
            }
            match classes.iter_mut().find(|c| c.coarse == coarse && c.kind == k) {
                Some(c) => c.members.push(fine.to_string()),
                None => classes.push(SymbolClass {
                    kind: k,
                    coarse: coarse.to_string(),
                    members: vec![fine.to_string()],
                }),
            }
        }
        for c in &classes {
            if coarse_of.get(&c.coarse) != Some(&c.coarse) {
                return Err(Error::Config(format!("coarse symbol `{}` must map to itself", c.coarse)));
            }
        }
        Ok(Self {
            grammar,
            classes,
            coarse_of,
        })
    }

    pub fn builtin() -> Self {
        Self::new(Grammar::builtin(), BUILTIN_COARSENING).expect("built-in coarsening map")
    }

    pub fn coarsen(&self, fine: &str) -> Option<&str> {
        self.coarse_of.get(fine).map(String::as_str)
    }

    pub fn classes_of(&self, kind: SymbolKind) -> impl Iterator<Item = &SymbolClass> {
        self.classes.iter().filter(move |c| c.kind == kind)
    }

    /// `(fine, coarse)` symbol counts for one kind.
    pub fn vocabulary_sizes(&self, kind: SymbolKind) -> (usize, usize) {
        let classes: Vec<_> = self.classes_of(kind).collect();
        (classes.iter().map(|c| c.members.len()).sum(), classes.len())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# <fine> <coarse>\n");
        for c in &self.classes {
            for m in &c.members {
                out.push_str(&format!("{m} {}\n", c.coarse));
            }
        }
        out
    }

    /// Image-side view of a fine graph.
    pub fn image_view(&self, latent: &SceneGraph) -> Result<SceneGraph> {
        let map = |s: &str| {
            self.coarsen(s)
                .map(str::to_string)
                .ok_or_else(|| Error::UnknownSymbol {
                    kind: "fine",
                    symbol: s.to_string(),
                })
        };
        let mut g = SceneGraph::new(Modality::Image);
        for o in &latent.objects {
            g.add_object(map(o)?);
        }
        for i in 0..latent.objects.len() {
            let mut kept: Vec<String> = Vec::new();
            for a in latent.attributes_of(i) {
                let c = map(a)?;
                if !kept.contains(&c) && kept.len() < IMAGE_ATTRIBUTE_CAP {
                    kept.push(c);
                }
            }
            for a in kept {
                g.add_attribute(i, a);
            }
        }
        for r in &latent.relations {
            g.add_relation(r.subject, map(&r.predicate)?, r.object);
        }
        Ok(g)
    }

    fn pick<'a>(&'a self, class: &'a SymbolClass, rng: &mut impl Rng) -> &'a str {
        let weights: Vec<f64> = (0..class.members.len()).map(|k| 1.0 / (k + 1) as f64).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (m, w) in class.members.iter().zip(&weights) {
            if u < *w {
                return m;
            }
            u -= w;
        }
        class.members.last().expect("non-empty class")
    }

    fn sample_graph(&self, rng: &mut impl Rng) -> SceneGraph {
        let objects: Vec<&SymbolClass> = self.classes_of(SymbolKind::Object).collect();
        let attributes: Vec<&SymbolClass> = self.classes_of(SymbolKind::Attribute).collect();
        let relations: Vec<&SymbolClass> = self.classes_of(SymbolKind::Relation).collect();
        let counts: Vec<usize> = self.grammar.relation_counts.iter().copied().collect();
        let n_rel = counts[rng.random_range(0..counts.len())];
        let mut g = SceneGraph::new(Modality::Sentence);
        for _ in 0..=n_rel {
            let class = objects[rng.random_range(0..objects.len())];
            let o = g.add_object(self.pick(class, rng));
            let n_attr = match rng.random_range(0..5) {
                0 | 1 => 0,
                2 | 3 => 1,
                _ => 2,
            }
            .min(self.grammar.max_attributes)
            .min(attributes.len());
            let mut chosen: Vec<usize> = (0..attributes.len()).collect();
            chosen.shuffle(rng);
            chosen.truncate(n_attr);
            chosen.sort_unstable();
            for c in chosen {
                let a = self.pick(attributes[c], rng).to_string();
                g.add_attribute(o, a);
            }
        }
        for i in 0..n_rel {
            let class = relations[rng.random_range(0..relations.len())];
            g.add_relation(i, self.pick(class, rng), i + 1);
        }
        g
    }
}

/// One generated item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub latent: SceneGraph,
    pub sentence: Vec<String>,
    pub image: SceneGraph,
}

/// Generates `n` items; item `i` depends only on `(seed, i)`. Sentences are
/// at most 16 tokens; longer draws are redrawn.
pub fn generate(grammar: &DualGrammar, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::EmptyInput("asked for zero samples".into()));
    }
    (0..n)
        .map(|i| {
            let mut r = derived_rng(seed, i as u64);
            loop {
                let latent = grammar.sample_graph(&mut r);
                let sentence = grammar.grammar.realize(&latent)?;
                if sentence.len() <= MAX_CAPTION_LEN {
                    let image = grammar.image_view(&latent)?;
                    return Ok(Sample { latent, sentence, image });
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded 80/10/10 split.
pub fn split<T: Clone>(items: &[T], seed: u64) -> Splits<T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng(seed));
    let n_train = items.len() * 8 / 10;
    let n_val = items.len() / 10;
    let take = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Splits {
        train: take(&idx[..n_train]),
        val: take(&idx[n_train..n_train + n_val]),
        test: take(&idx[n_train + n_val..]),
    }
}

/// Shuffles image graphs and sentences independently. Position `i` of the
/// two outputs never holds the two halves of one pair.
pub fn make_unpaired(pairs: &[Sample], seed: u64) -> Result<(Vec<SceneGraph>, Vec<Vec<String>>)> {
    if pairs.len() < 2 {
        return Err(Error::EmptyInput("need at least two pairs to unpair".into()));
    }
    let mut r = rng(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut r);
    // Sattolo's algorithm: a uniformly random single cycle, hence no fixed point
    let mut cycle: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..cycle.len()).rev() {
        let j = r.random_range(0..i);
        cycle.swap(i, j);
    }
    let images = order.iter().map(|&i| pairs[i].image.clone()).collect();
    let sentences = (0..pairs.len()).map(|k| pairs[order[cycle[k]]].sentence.clone()).collect();
    Ok((images, sentences))
}

/// A record that failed to load.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejected {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<GraphRecord>,
    pub rejected: Vec<Rejected>,
    pub warnings: Vec<String>,
}

/// Loads image-side graphs in the interchange format, keeping valid
/// records and reporting the rest.
pub fn ingest_image_graphs(path: &Path) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest_image_text(&text))
}

pub fn ingest_image_text(text: &str) -> Ingested {
    let mut out = Ingested::default();
    for (line, chunk) in split_records(text) {
        let reject = |reason: String| Rejected { line, reason };
        match deserialize_at(&chunk, line) {
            Err(e) => out.rejected.push(reject(e.to_string())),
            Ok(rec) if rec.graph.modality != Modality::Image => {
                out.rejected.push(reject(format!("record `{}` is not an image graph", rec.id)))
            }
            Ok(rec) => {
                let report = rec.graph.validate(None);
                if report.is_ok() {
                    out.records.push(rec);
                } else {
                    out.rejected.push(reject(format!("record `{}`: {report}", rec.id)));
                }
            }
        }
    }
    if out.records.is_empty() && out.rejected.is_empty() {
        out.warnings.push("no graph records found".into());
    }
    out
}

/// Sentences, one per line, tokens separated by spaces.
pub fn sentences_to_text(sentences: &[Vec<String>]) -> String {
    sentences.iter().map(|s| s.join(" ") + "\n").collect()
}

pub fn sentences_from_text(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tuple_f1;
    use crate::parser::parse;
    use crate::scenegraph::serialize_all;

    #[test]
    fn builtin_map_is_consistent() {
        let d = DualGrammar::builtin();
        assert_eq!(d.vocabulary_sizes(SymbolKind::Object), (60, 20));
        assert_eq!(d.vocabulary_sizes(SymbolKind::Attribute), (24, 8));
        assert_eq!(d.vocabulary_sizes(SymbolKind::Relation), (24, 8));
        for c in &d.classes {
            assert_eq!(c.members.last(), Some(&c.coarse));
            for m in &c.members {
                assert_eq!(d.coarsen(m), Some(c.coarse.as_str()));
            }
        }
        let again = DualGrammar::new(Grammar::builtin(), &d.to_text()).unwrap();
        assert_eq!(again.classes, d.classes);
    }

    #[test]
    fn coarsening_examples() {
        let d = DualGrammar::builtin();
        assert_eq!(d.coarsen("sedan"), Some("car"));
        assert_eq!(d.coarsen("crimson"), Some("red"));
        assert_eq!(d.coarsen("sitting_on"), Some("on"));
        assert_eq!(d.coarsen("spaceship"), None);
    }

    #[test]
    fn bad_maps_are_rejected() {
        let g = Grammar::builtin;
        assert!(DualGrammar::new(g(), "sedan\n").is_err());
        assert!(DualGrammar::new(g(), "sedan red\n").is_err());
        assert!(DualGrammar::new(g(), "sedan car\nsedan truck\ncar car\ntruck truck\n").is_err());
        assert!(DualGrammar::new(g(), "sedan car\n").is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let d = DualGrammar::builtin();
        assert_eq!(generate(&d, 10, 7).unwrap(), generate(&d, 10, 7).unwrap());
        assert_ne!(generate(&d, 10, 7).unwrap(), generate(&d, 10, 8).unwrap());
        assert!(generate(&d, 0, 7).is_err());
    }

    #[test]
    fn generated_items_are_consistent() {
        let d = DualGrammar::builtin();
        for s in generate(&d, 300, 1).unwrap() {
            assert!(s.sentence.len() <= MAX_CAPTION_LEN);
            let parsed = parse(&s.sentence, &d.grammar.lexicon).unwrap();
            let f1 = tuple_f1(&parsed.to_tuples().unwrap(), &s.latent.to_tuples().unwrap());
            assert_eq!(f1, 1.0, "{:?}", s.sentence);
            assert_eq!(s.image.modality, Modality::Image);
            assert_eq!(s.image.objects.len(), s.latent.objects.len());
            for (i, o) in s.latent.objects.iter().enumerate() {
                assert_eq!(d.coarsen(o), Some(s.image.objects[i].as_str()));
                assert!(s.image.attributes_of(i).len() <= IMAGE_ATTRIBUTE_CAP);
            }
        }
    }

    #[test]
    fn generic_word_is_least_frequent() {
        let d = DualGrammar::builtin();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in generate(&d, 2000, 3).unwrap() {
            for o in &s.latent.objects {
                *counts.entry(o.clone()).or_default() += 1;
            }
        }
        let c = |w: &str| counts.get(w).copied().unwrap_or(0);
        assert!(c("sedan") > c("taxi") && c("taxi") > c("car"));
        assert!(c("car") > 0);
    }

    #[test]
    fn image_view_dedups_and_caps_attributes() {
        let d = DualGrammar::builtin();
        let mut g = SceneGraph::new(Modality::Sentence);
        let o = g.add_object("sedan");
        for a in ["crimson", "scarlet", "huge", "tiny", "rusty"] {
            g.add_attribute(o, a);
        }
        let img = d.image_view(&g).unwrap();
        assert_eq!(img.objects, vec!["car"]);
        assert_eq!(img.attributes_of(0), ["red", "large", "small"]);
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..2000).collect();
        let s = split(&items, 4);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1600, 200, 200));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(split(&items, 4), s);
    }

    #[test]
    fn unpairing_is_a_seeded_derangement() {
        let d = DualGrammar::builtin();
        let pairs = generate(&d, 5, 11).unwrap();
        let (images, sentences) = make_unpaired(&pairs, 2).unwrap();
        assert_eq!((images.len(), sentences.len()), (5, 5));
        for (img, sent) in images.iter().zip(&sentences) {
            let partner = pairs.iter().position(|p| &p.image == img).unwrap();
            assert_ne!(&pairs[partner].sentence, sent);
        }
        assert_eq!(make_unpaired(&pairs, 2).unwrap(), (images, sentences));
        assert!(make_unpaired(&pairs[..1], 2).is_err());
    }

    #[test]
    fn ingestion_keeps_valid_and_reports_invalid() {
        let d = DualGrammar::builtin();
        let records: Vec<GraphRecord> = generate(&d, 3, 5)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| GraphRecord::new(format!("img-{i}"), s.image))
            .collect();
        let text = serialize_all(&records);
        let got = ingest_image_text(&text);
        assert_eq!(got.records, records);
        assert!(got.rejected.is_empty());

        let bad = text.clone() + "\ngraph bad image\nobj 0 car\nrel 0 on 5\nend\n";
        let got = ingest_image_text(&bad);
        assert_eq!(got.records.len(), 3);
        assert_eq!(got.rejected.len(), 1);

        let empty = ingest_image_text("");
        assert!(empty.records.is_empty());
        assert_eq!(empty.warnings.len(), 1);
    }

    #[test]
    fn sentence_file_round_trip() {
        let s = vec![vec!["a".to_string(), "car".to_string()], vec!["the".to_string()]];
        assert_eq!(sentences_from_text(&sentences_to_text(&s)), s);
    }
}
