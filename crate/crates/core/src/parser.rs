//! Rule-based sentence → scene-graph parsing over a closed template grammar,
//! and the inverse templater that realizes a graph as a sentence.
//!
//! Tagging is a lexicon lookup. Parsing then applies, left to right:
//!
//! * **NP**: `DET? ADJ* NOUN` creates an object whose attributes are the
//!   adjectives.
//! * **REL**: `object (VERB | VERB PREP | PREP) object` emits a relation
//!   triplet; the relation words are joined with `_`.
//! * **CONJ**: `and` right after a noun reuses the most recent relation head
//!   for the next noun phrase.
//!
//! Out-of-lexicon tokens are skipped by every rule.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scenegraph::{Modality, SceneGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Conj,
    Unk,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Det => "DET",
            Tag::Adj => "ADJ",
            Tag::Noun => "NOUN",
            Tag::Verb => "VERB",
            Tag::Prep => "PREP",
            Tag::Conj => "CONJ",
            Tag::Unk => "UNK",
        })
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "DET" => Tag::Det,
            "ADJ" => Tag::Adj,
            "NOUN" => Tag::Noun,
            "VERB" => Tag::Verb,
            "PREP" => Tag::Prep,
            "CONJ" => Tag::Conj,
            other => return Err(format!("unknown tag `{other}`")),
        })
    }
}

/// Closed word list; each word has exactly one tag.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    words: Vec<String>,
    tags: HashMap<String, Tag>,
}

impl Lexicon {
    pub fn insert(&mut self, word: &str, tag: Tag) -> Result<()> {
        if tag == Tag::Unk {
            return Err(Error::Config(format!("`{word}` cannot be tagged UNK")));
        }
        match self.tags.get(word) {
            Some(&t) if t != tag => Err(Error::Config(format!("`{word}` tagged both {t} and {tag}"))),
            Some(_) => Ok(()),
            None => {
                self.words.push(word.to_string());
                self.tags.insert(word.to_string(), tag);
                Ok(())
            }
        }
    }

    /// Parses `<word> <TAG>` lines; `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::parse(i + 1, "lexicon", "expected `<word> <TAG>`"));
            }
            let tag = fields[1].parse().map_err(|e: String| Error::parse(i + 1, "tag", e))?;
            lex.insert(fields[0], tag)
                .map_err(|e| Error::parse(i + 1, "word", e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w} {}\n", self.tags[w])).collect()
    }

    pub fn tag(&self, word: &str) -> Tag {
        self.tags.get(word).copied().unwrap_or(Tag::Unk)
    }

    pub fn words_with(&self, tag: Tag) -> impl Iterator<Item = &str> + '_ {
        self.words
            .iter()
            .filter(move |w| self.tags[*w] == tag)
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// One tag per token; unknown words become [`Tag::Unk`].
pub fn tag<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Vec<Tag> {
    tokens.iter().map(|t| lexicon.tag(t.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    NounPhrase,
    Relation,
    Conjunction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Element {
    Object(usize),
    Attribute(usize, String),
    Relation(usize, String, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub rule: Rule,
    pub span: Range<usize>,
    pub emitted: Vec<Element>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseTrace {
    pub entries: Vec<TraceEntry>,
}

pub fn parse<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Result<SceneGraph> {
    parse_with_trace(tokens, lexicon).map(|(g, _)| g)
}

pub fn parse_with_trace<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Result<(SceneGraph, ParseTrace)> {
    let tags = tag(tokens, lexicon);
    let mut graph = SceneGraph::new(Modality::Sentence);
    let mut trace = ParseTrace::default();

    let mut np_start: Option<usize> = None;
    let mut adjectives: Vec<String> = Vec::new();
    let mut rel_words: Vec<&str> = Vec::new();
    let mut rel_head: Option<usize> = None;
    let mut rel_start = 0;
    let mut last_object: Option<usize> = None;
    let mut last_relation: Option<(usize, String)> = None;
    let mut last_tag: Option<Tag> = None;
    let mut conj_pending = false;

    for (i, (token, &t)) in tokens.iter().zip(&tags).enumerate() {
        let token = token.as_ref();
        match t {
            Tag::Unk => continue,
            Tag::Det => {
                np_start.get_or_insert(i);
            }
            Tag::Adj => {
                np_start.get_or_insert(i);
                if !adjectives.iter().any(|a| a == token) {
                    adjectives.push(token.to_string());
                }
            }
            Tag::Noun => {
                let object = graph.add_object(token);
                let mut emitted = vec![Element::Object(object)];
                for a in adjectives.drain(..) {
                    emitted.push(Element::Attribute(object, a.clone()));
                    graph.add_attribute(object, a);
                }
                let start = np_start.take().unwrap_or(i);
                trace.entries.push(TraceEntry {
                    rule: Rule::NounPhrase,
                    span: start..i + 1,
                    emitted,
                });
                let link = match (rel_words.is_empty(), rel_head) {
                    (false, Some(head)) => {
                        let predicate = rel_words.join("_");
                        last_relation = Some((head, predicate.clone()));
                        Some((Rule::Relation, rel_start, head, predicate))
                    }
                    _ if conj_pending => last_relation
                        .clone()
                        .map(|(head, p)| (Rule::Conjunction, start, head, p)),
                    _ => None,
                };
                if let Some((rule, span_start, head, predicate)) = link {
                    let exists = graph
                        .relations
                        .iter()
                        .any(|r| r.subject == head && r.object == object && r.predicate == predicate);
                    let mut emitted = Vec::new();
                    if !exists {
                        graph.add_relation(head, predicate.clone(), object);
                        emitted.push(Element::Relation(head, predicate, object));
                    }
                    trace.entries.push(TraceEntry {
                        rule,
                        span: span_start..i + 1,
                        emitted,
                    });
                }
                rel_words.clear();
                rel_head = None;
                conj_pending = false;
                last_object = Some(object);
            }
            Tag::Verb | Tag::Prep => {
                if rel_words.is_empty() {
                    rel_head = last_object;
                    rel_start = i;
                }
                rel_words.push(token);
                adjectives.clear();
                np_start = None;
                conj_pending = false;
            }
            Tag::Conj => {
                conj_pending = last_tag == Some(Tag::Noun);
                adjectives.clear();
                np_start = None;
            }
        }
        last_tag = Some(t);
    }
    if graph.objects.is_empty() {
        return Err(Error::NoObjects);
    }
    Ok((graph, trace))
}

/// Sentence shapes and determiner rules of the template grammar.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub lexicon: Lexicon,
    /// Allowed numbers of relations in a sentence (chain length − 1).
    pub relation_counts: BTreeSet<usize>,
    pub max_attributes: usize,
    pub relation_patterns: Vec<Vec<Tag>>,
    pub det_first: String,
    pub det_after_prep: String,
    pub det_after_verb: String,
}

impl Grammar {
    /// Reads the production file documented in `data/grammar.txt`.
    pub fn from_text(text: &str, lexicon: Lexicon) -> Result<Self> {
        let mut relation_counts = BTreeSet::new();
        let mut max_attributes = None;
        let mut relation_patterns = Vec::new();
        let mut dets: HashMap<String, String> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| Error::parse(i + 1, "production", "expected `<lhs> -> <rhs>`"))?;
            let lhs = lhs.trim();
            let rhs: Vec<&str> = rhs.split_whitespace().collect();
            match lhs {
                "S" => {
                    let mut expect_np = true;
                    for sym in &rhs {
                        let ok = if expect_np { *sym == "NP" } else { *sym == "REL" };
                        if !ok {
                            return Err(Error::parse(i + 1, "S", "S must alternate NP and REL"));
                        }
                        expect_np = !expect_np;
                    }
                    if expect_np {
                        return Err(Error::parse(i + 1, "S", "S must end with NP"));
                    }
                    relation_counts.insert(rhs.len() / 2);
                }
                "NP" => {
                    let adj = rhs
                        .iter()
                        .find_map(|s| s.strip_prefix("ADJ{0,").and_then(|r| r.strip_suffix('}')))
                        .ok_or_else(|| Error::parse(i + 1, "NP", "missing ADJ{0,k}"))?;
                    max_attributes =
                        Some(adj.parse().map_err(|_| Error::parse(i + 1, "NP", "bad ADJ bound"))?);
                }
                "REL" => {
                    let pattern = rhs
                        .iter()
                        .map(|s| s.parse::<Tag>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::parse(i + 1, "REL", e))?;
                    if pattern.is_empty() || pattern.iter().any(|t| !matches!(t, Tag::Verb | Tag::Prep)) {
                        return Err(Error::parse(i + 1, "REL", "relations are VERB/PREP sequences"));
                    }
                    relation_patterns.push(pattern);
                }
                det if det.starts_with("DET.") => {
                    if rhs.len() != 1 {
                        return Err(Error::parse(i + 1, det, "expected one determiner"));
                    }
                    dets.insert(det.to_string(), rhs[0].to_string());
                }
                other => return Err(Error::parse(i + 1, other, "unknown production")),
            }
        }
        let det = |key: &str| {
            dets.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("grammar is missing `{key}`")))
        };
        if relation_counts.is_empty() {
            return Err(Error::Config("grammar has no S production".into()));
        }
        Ok(Self {
            relation_counts,
            max_attributes: max_attributes.ok_or_else(|| Error::Config("grammar has no NP production".into()))?,
            relation_patterns,
            det_first: det("DET.first")?,
            det_after_prep: det("DET.after-PREP")?,
            det_after_verb: det("DET.after-VERB")?,
            lexicon,
        })
    }

    pub fn builtin() -> Self {
        let lexicon = Lexicon::from_text(BUILTIN_LEXICON).expect("built-in lexicon");
        Self::from_text(BUILTIN_GRAMMAR, lexicon).expect("built-in grammar")
    }

    pub fn max_relations(&self) -> usize {
        self.relation_counts.iter().max().copied().unwrap_or(0)
    }

    /// Tags of a `_`-joined relation symbol if it matches a REL production.
    pub fn relation_tags(&self, predicate: &str) -> Option<Vec<Tag>> {
        let tags: Vec<Tag> = predicate.split('_').map(|w| self.lexicon.tag(w)).collect();
        self.relation_patterns.contains(&tags).then_some(tags)
    }

    /// Emits the tokens of a chain-shaped graph; `parse` recovers its tuples.
    pub fn realize(&self, graph: &SceneGraph) -> Result<Vec<String>> {
        let report = graph.validate(None);
        if !report.is_ok() {
            return Err(Error::MalformedGraph(report.to_string()));
        }
        let n = graph.objects.len();
        let k = graph.relations.len();
        if !self.relation_counts.contains(&k) {
            return Err(Error::Inexpressible(format!("no sentence template with {k} relations")));
        }
        if k != n - 1 {
            return Err(Error::Inexpressible(format!("{n} objects cannot form a chain of {k} relations")));
        }
        let mut next: Vec<Option<usize>> = vec![None; n];
        let mut has_parent = vec![false; n];
        for (ri, r) in graph.relations.iter().enumerate() {
            if next[r.subject].is_some() || has_parent[r.object] || r.subject == r.object {
                return Err(Error::Inexpressible("relations do not form a chain".into()));
            }
            next[r.subject] = Some(ri);
            has_parent[r.object] = true;
        }
        let root = (0..n)
            .find(|&i| !has_parent[i])
            .ok_or_else(|| Error::Inexpressible("relations form a cycle".into()))?;

        let mut tokens = Vec::new();
        let mut det = self.det_first.clone();
        let mut current = root;
        let mut visited = 0;
        loop {
            visited += 1;
            let attrs = graph.attributes_of(current);
            if attrs.len() > self.max_attributes {
                return Err(Error::Inexpressible(format!(
                    "object {current} has {} attributes, at most {} allowed",
                    attrs.len(),
                    self.max_attributes
                )));
            }
            tokens.push(det.clone());
            for a in attrs {
                if self.lexicon.tag(a) != Tag::Adj {
                    return Err(Error::Inexpressible(format!("`{a}` is not an adjective")));
                }
                tokens.push(a.clone());
            }
            let noun = &graph.objects[current];
            if self.lexicon.tag(noun) != Tag::Noun {
                return Err(Error::Inexpressible(format!("`{noun}` is not a noun")));
            }
            tokens.push(noun.clone());
            let Some(ri) = next[current] else { break };
            let r = &graph.relations[ri];
            let tags = self
                .relation_tags(&r.predicate)
                .ok_or_else(|| Error::Inexpressible(format!("relation `{}` has no template", r.predicate)))?;
            tokens.extend(r.predicate.split('_').map(str::to_string));
            det = match tags.last() {
                Some(Tag::Prep) => self.det_after_prep.clone(),
                _ => self.det_after_verb.clone(),
            };
            current = r.object;
        }
        if visited != n {
            return Err(Error::Inexpressible("graph is not connected".into()));
        }
        Ok(tokens)
    }
}

pub const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.txt");
pub const BUILTIN_GRAMMAR: &str = include_str!("../data/grammar.txt");
