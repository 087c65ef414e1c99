//! Glue between corpus, parser, model and metrics.

use crate::align::{median_bandwidth, mmd};
use crate::corpus::{generate, split, DualGrammar, Sample, Splits};
use crate::encoder::IndexedGraph;
use crate::error::{Error, Result};
use crate::metrics::{bleu, cider_d, spice_lite, EvalItem};
use crate::model::{AttendedFeatures, CaptionModel};
use crate::parser::{parse, Lexicon};
use crate::scenegraph::{GraphVocabulary, SceneGraph};
use crate::training::{TextExample, TrainConfig};
use crate::vocab::WordVocabulary;

/// Text-phase schedule for the desk-scale corpus: 30 XE epochs at batch 10.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 10,
        xe_epochs: 30,
        rl_epochs: 0,
        seed,
        ..TrainConfig::default()
    }
}

/// A generated corpus, its splits, and the text data parsed from the
/// training and test sentences.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub splits: Splits<Sample>,
    pub text: TextData,
}

impl Experiment {
    pub fn generate(grammar: &DualGrammar, n: usize, seed: u64, word_min_count: usize, graph_min_count: usize) -> Result<Self> {
        let samples = generate(grammar, n, seed)?;
        let splits = split(&samples, seed);
        let text = TextData::prepare(
            &grammar.grammar.lexicon,
            &sentences(&splits.train),
            &sentences(&splits.test),
            word_min_count,
            graph_min_count,
        )?;
        Ok(Self { splits, text })
    }

    /// One reference set per test sample, in test order.
    pub fn test_references(&self) -> Vec<Vec<Vec<String>>> {
        self.splits.test.iter().map(|s| vec![s.sentence.clone()]).collect()
    }

    pub fn image_graphs(items: &[Sample]) -> Vec<SceneGraph> {
        items.iter().map(|s| s.image.clone()).collect()
    }
}

pub fn sentences(items: &[Sample]) -> Vec<Vec<String>> {
    items.iter().map(|s| s.sentence.clone()).collect()
}

/// Parsed training and held-out sentences with their vocabularies.
#[derive(Clone, Debug)]
pub struct TextData {
    pub graph_vocab: GraphVocabulary,
    pub word_vocab: WordVocabulary,
    pub train: Vec<TextExample>,
    pub heldout: Vec<TextExample>,
    /// Held-out sentences dropped because they failed to parse or used
    /// symbols unseen in training.
    pub skipped: usize,
}

impl TextData {
    pub fn prepare(
        lexicon: &Lexicon,
        train: &[Vec<String>],
        heldout: &[Vec<String>],
        word_min_count: usize,
        graph_min_count: usize,
    ) -> Result<Self> {
        let parsed: Vec<(SceneGraph, &Vec<String>)> = train
            .iter()
            .filter_map(|s| parse(s, lexicon).ok().map(|g| (g, s)))
            .collect();
        if parsed.is_empty() {
            return Err(Error::EmptyInput("no training sentence parsed".into()));
        }
        let graph_vocab = GraphVocabulary::from_graphs(parsed.iter().map(|(g, _)| g), graph_min_count);
        let word_vocab = WordVocabulary::build(train, word_min_count)?;
        let mut skipped = 0;
        let mut examples = |items: Vec<(SceneGraph, &Vec<String>)>| {
            let mut out = Vec::new();
            for (g, s) in items {
                match IndexedGraph::new(&g, &graph_vocab) {
                    Ok(graph) => out.push(TextExample {
                        graph,
                        target: word_vocab.encode(s),
                    }),
                    Err(_) => skipped += 1,
                }
            }
            out
        };
        let train_examples = examples(parsed);
        let held: Vec<(SceneGraph, &Vec<String>)> = heldout
            .iter()
            .filter_map(|s| parse(s, lexicon).ok().map(|g| (g, s)))
            .collect();
        let parse_failures = heldout.len() - held.len();
        let heldout_examples = examples(held);
        Ok(Self {
            graph_vocab,
            word_vocab,
            train: train_examples,
            heldout: heldout_examples,
            skipped: skipped + parse_failures,
        })
    }
}

/// Scores of one captioning run.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub bleu: [f64; 4],
    pub cider_d: f64,
    pub spice_lite: f64,
}

impl Scores {
    pub const HEADER: &'static str = "BLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tCIDEr-D\tSPICE-lite";

    pub fn row(&self) -> String {
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.bleu[0], self.bleu[1], self.bleu[2], self.bleu[3], self.cider_d, self.spice_lite
        )
    }

    /// `(metric, value)` pairs in table order.
    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("BLEU-1", self.bleu[0]),
            ("BLEU-2", self.bleu[1]),
            ("BLEU-3", self.bleu[2]),
            ("BLEU-4", self.bleu[3]),
            ("CIDEr-D", self.cider_d),
            ("SPICE-lite", self.spice_lite),
        ]
    }
}

/// Scores word-level hypotheses against references. SPICE-lite parses the
/// hypothesis and compares it with the parse of the first reference; a
/// hypothesis that does not parse scores 0.
pub fn score(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], lexicon: &Lexicon) -> Result<Scores> {
    if hyps.len() != refs.len() {
        return Err(Error::Dimension(format!("{} hypotheses for {} reference sets", hyps.len(), refs.len())));
    }
    let corpus: Vec<EvalItem<String>> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| EvalItem::new(h.clone(), r.clone()))
        .collect();
    let mut b = [0.0; 4];
    for (n, slot) in b.iter_mut().enumerate() {
        *slot = bleu(&corpus, n + 1)?;
    }
    let cider = if corpus.len() >= 2 { cider_d(&corpus)?.mean } else { 0.0 };
    let mut spice = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        let (Ok(hg), Some(Ok(rg))) = (parse(h, lexicon), r.first().map(|r| parse(r, lexicon))) else {
            continue;
        };
        spice += spice_lite(&hg, &rg)?;
    }
    Ok(Scores {
        bleu: b,
        cider_d: cider,
        spice_lite: spice / hyps.len() as f64,
    })
}

/// Resolves image-side graphs against the text vocabulary.
pub fn index_graphs(model: &CaptionModel, graphs: &[SceneGraph]) -> Result<Vec<IndexedGraph>> {
    graphs.iter().map(|g| model.index(g)).collect()
}

/// Captions from attended features, as words.
pub fn caption_words(model: &CaptionModel, features: &AttendedFeatures, beam: usize) -> Result<Vec<Vec<String>>> {
    caption_words_with(model, features, beam, false)
}

pub fn caption_words_with(model: &CaptionModel, features: &AttendedFeatures, beam: usize, length_normalize: bool) -> Result<Vec<Vec<String>>> {
    model
        .caption_features_with(features, beam, length_normalize)?
        .iter()
        .map(|ids| model.words(ids))
        .collect()
}

/// Attended features of raw graphs under the model's vocabulary.
pub fn graph_features(model: &CaptionModel, graphs: &[SceneGraph]) -> Result<AttendedFeatures> {
    model.attended_all(&index_graphs(model, graphs)?)
}

pub fn example_features(model: &CaptionModel, examples: &[TextExample]) -> Result<AttendedFeatures> {
    let graphs: Vec<IndexedGraph> = examples.iter().map(|e| e.graph.clone()).collect();
    model.attended_all(&graphs)
}

/// Per-kind MMD to the sentence features before and after mapping. The
/// kernel bandwidth of each kind is the median pairwise distance among the
/// sentence features.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdReport {
    pub raw: [f64; 3],
    pub mapped: [f64; 3],
}

impl MmdReport {
    pub fn measure(image: &AttendedFeatures, sentence: &AttendedFeatures, mapped: &AttendedFeatures) -> Result<Self> {
        let mut raw = [0.0; 3];
        let mut after = [0.0; 3];
        for k in 0..3 {
            let s = sentence.kinds()[k];
            let bw = median_bandwidth(s)?;
            raw[k] = mmd(image.kinds()[k], s, bw)?;
            after[k] = mmd(mapped.kinds()[k], s, bw)?;
        }
        Ok(Self { raw, mapped: after })
    }

    pub fn ratios(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.mapped[k] / self.raw[k])
    }
}

/// Drops symbols absent from `vocab`. Unknown attributes and relations are
/// removed; an unknown object takes its attributes and relations with it.
/// Returns the pruned graph and the number of symbols removed.
pub fn restrict_to_vocab(graph: &SceneGraph, vocab: &GraphVocabulary) -> (SceneGraph, usize) {
    let mut out = SceneGraph::new(graph.modality);
    let mut removed = 0;
    let mut remap = vec![None; graph.objects.len()];
    for (i, o) in graph.objects.iter().enumerate() {
        if vocab.objects.id(o).is_some() {
            remap[i] = Some(out.add_object(o.clone()));
        } else {
            removed += 1 + graph.attributes_of(i).len();
        }
    }
    for (i, attrs) in &graph.attributes {
        let Some(j) = remap[*i] else { continue };
        for a in attrs {
            if vocab.attributes.id(a).is_some() {
                out.add_attribute(j, a.clone());
            } else {
                removed += 1;
            }
        }
    }
    for r in &graph.relations {
        match (remap[r.subject], remap[r.object], vocab.relations.id(&r.predicate)) {
            (Some(s), Some(o), Some(_)) => out.add_relation(s, r.predicate.clone(), o),
            _ => removed += 1,
        }
    }
    (out, removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::Modality;

    #[test]
    fn restriction_drops_unknown_symbols_and_their_edges() {
        let mut known = SceneGraph::new(Modality::Sentence);
        let a = known.add_object("car");
        let b = known.add_object("street");
        known.add_attribute(a, "red");
        known.add_relation(a, "on", b);
        let vocab = GraphVocabulary::from_graphs([&known], 1);

        let mut g = SceneGraph::new(Modality::Image);
        let car = g.add_object("car");
        let dog = g.add_object("dog");
        let street = g.add_object("street");
        g.add_attribute(car, "red");
        g.add_attribute(car, "shiny");
        g.add_attribute(dog, "brown");
        g.add_relation(car, "on", street);
        g.add_relation(dog, "on", street);
        g.add_relation(car, "near", street);
        let (r, removed) = restrict_to_vocab(&g, &vocab);
        assert_eq!(removed, 5);
        assert_eq!(r.objects, vec!["car", "street"]);
        assert_eq!(r.attributes_of(0), ["red".to_string()]);
        assert_eq!(r.relations.len(), 1);
        assert_eq!((r.relations[0].subject, r.relations[0].object), (0, 1));
        assert!(r.validate(Some(&vocab)).is_ok());

        let (same, none) = restrict_to_vocab(&known, &vocab);
        assert_eq!((same, none), (known, 0));
    }
}
