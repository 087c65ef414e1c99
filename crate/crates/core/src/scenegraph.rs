//! Scene-graph data model, validation, tuple extraction and the line-oriented
//! interchange format.
//!
//! A graph record on disk looks like
//!
//! ```text
//! graph 17 image
//! obj 0 car
//! obj 1 street
//! attr 0 red
//! rel 0 on 1
//! end
//! ```
//!
//! Fields are separated by single spaces and symbols never contain
//! whitespace. Records in a file are separated by a blank line.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reserved relation used for the self-loop of an otherwise isolated object.
pub const SELF_RELATION: &str = "<self>";
/// Reserved attribute used for objects without attributes.
pub const NONE_ATTRIBUTE: &str = "<none>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Sentence,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Sentence => "sentence",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(Modality::Image),
            "sentence" => Ok(Modality::Sentence),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Relation {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
}

/// Objects are addressed by index so repeated categories ("two dogs") are
/// distinct nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGraph {
    pub modality: Modality,
    pub objects: Vec<String>,
    pub attributes: BTreeMap<usize, Vec<String>>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            objects: Vec::new(),
            attributes: BTreeMap::new(),
            relations: Vec::new(),
        }
    }

    pub fn add_object(&mut self, symbol: impl Into<String>) -> usize {
        self.objects.push(symbol.into());
        self.objects.len() - 1
    }

    pub fn add_attribute(&mut self, object: usize, symbol: impl Into<String>) {
        self.attributes.entry(object).or_default().push(symbol.into());
    }

    pub fn add_relation(&mut self, subject: usize, predicate: impl Into<String>, object: usize) {
        self.relations.push(Relation {
            subject,
            predicate: predicate.into(),
            object,
        });
    }

    pub fn attributes_of(&self, object: usize) -> &[String] {
        self.attributes.get(&object).map_or(&[], Vec::as_slice)
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.values().map(Vec::len).sum()
    }

    /// Reports every violated invariant, and with a vocabulary every
    /// symbol it does not know. Never fails.
    pub fn validate(&self, vocab: Option<&GraphVocabulary>) -> ValidationReport {
        let mut issues = Vec::new();
        let n = self.objects.len();
        if n == 0 {
            issues.push(Issue::EmptyGraph);
        }
        let check_symbol = |symbol: &str, issues: &mut Vec<Issue>| {
            if symbol.is_empty() || symbol.chars().any(char::is_whitespace) {
                issues.push(Issue::InvalidSymbol(symbol.to_string()));
            }
        };
        for symbol in &self.objects {
            check_symbol(symbol, &mut issues);
        }
        for (&object, attrs) in &self.attributes {
            if object >= n {
                issues.push(Issue::DanglingObject(object));
            }
            let mut seen = HashSet::new();
            for a in attrs {
                check_symbol(a, &mut issues);
                if !seen.insert(a.as_str()) {
                    issues.push(Issue::DuplicateAttribute {
                        object,
                        symbol: a.clone(),
                    });
                }
            }
        }
        let mut seen = HashSet::new();
        for r in &self.relations {
            for id in [r.subject, r.object] {
                if id >= n {
                    issues.push(Issue::DanglingObject(id));
                }
            }
            check_symbol(&r.predicate, &mut issues);
            if !seen.insert(r) {
                issues.push(Issue::DuplicateRelation {
                    subject: r.subject,
                    predicate: r.predicate.clone(),
                    object: r.object,
                });
            }
        }
        if let Some(vocab) = vocab {
            let mut unknown = |kind: &'static str, table: &SymbolTable, symbol: &str| {
                if table.id(symbol).is_none() {
                    issues.push(Issue::UnknownSymbol {
                        kind,
                        symbol: symbol.to_string(),
                    });
                }
            };
            for o in &self.objects {
                unknown("object", &vocab.objects, o);
            }
            for a in self.attributes.values().flatten() {
                unknown("attribute", &vocab.attributes, a);
            }
            for r in &self.relations {
                unknown("relation", &vocab.relations, &r.predicate);
            }
        }
        ValidationReport { issues }
    }

    /// Object, (object, attribute) and (subject, relation, object) tuples
    /// over symbols.
    pub fn to_tuples(&self) -> Result<BTreeSet<Tuple>> {
        let structural = self.validate(None);
        if let Some(issue) = structural.issues.first() {
            return Err(Error::MalformedGraph(issue.to_string()));
        }
        let mut out = BTreeSet::new();
        for o in &self.objects {
            out.insert(Tuple::Object(o.clone()));
        }
        for (&object, attrs) in &self.attributes {
            for a in attrs {
                out.insert(Tuple::Attribute(self.objects[object].clone(), a.clone()));
            }
        }
        for r in &self.relations {
            out.insert(Tuple::Relation(
                self.objects[r.subject].clone(),
                r.predicate.clone(),
                self.objects[r.object].clone(),
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tuple {
    Object(String),
    Attribute(String, String),
    Relation(String, String, String),
}

impl fmt::Display for Tuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tuple::Object(o) => write!(f, "({o})"),
            Tuple::Attribute(o, a) => write!(f, "({o},{a})"),
            Tuple::Relation(s, r, o) => write!(f, "({s},{r},{o})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Issue {
    EmptyGraph,
    DanglingObject(usize),
    DuplicateRelation {
        subject: usize,
        predicate: String,
        object: usize,
    },
    DuplicateAttribute {
        object: usize,
        symbol: String,
    },
    InvalidSymbol(String),
    UnknownSymbol {
        kind: &'static str,
        symbol: String,
    },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::EmptyGraph => write!(f, "empty graph"),
            Issue::DanglingObject(id) => write!(f, "dangling object id {id}"),
            Issue::DuplicateRelation {
                subject,
                predicate,
                object,
            } => write!(f, "duplicate relation ({subject}, {predicate}, {object})"),
            Issue::DuplicateAttribute { object, symbol } => {
                write!(f, "duplicate attribute {symbol} on object {object}")
            }
            Issue::InvalidSymbol(s) => write!(f, "invalid symbol {s:?}"),
            Issue::UnknownSymbol { kind, symbol } => write!(f, "unknown {kind} symbol {symbol}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Dense symbol ↔ id table. Ids follow insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, symbol: &str) -> usize {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), self.symbols.len() - 1);
        self.symbols.len() - 1
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Object, attribute and relation lexicons for the encoder's embedding
/// tables. `<none>` and `<self>` always sit at id 0 of their tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphVocabulary {
    pub objects: SymbolTable,
    pub attributes: SymbolTable,
    pub relations: SymbolTable,
}

impl Default for GraphVocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphVocabulary {
    pub fn new() -> Self {
        let mut attributes = SymbolTable::new();
        attributes.insert(NONE_ATTRIBUTE);
        let mut relations = SymbolTable::new();
        relations.insert(SELF_RELATION);
        Self {
            objects: SymbolTable::new(),
            attributes,
            relations,
        }
    }

    /// Builds the vocabulary from graphs, keeping symbols seen at least
    /// `min_count` times. Kept symbols are inserted in lexicographic order.
    pub fn from_graphs<'g>(graphs: impl IntoIterator<Item = &'g SceneGraph>, min_count: usize) -> Self {
        let mut objects: BTreeMap<&str, usize> = BTreeMap::new();
        let mut attributes: BTreeMap<&str, usize> = BTreeMap::new();
        let mut relations: BTreeMap<&str, usize> = BTreeMap::new();
        for g in graphs {
            for o in &g.objects {
                *objects.entry(o).or_default() += 1;
            }
            for a in g.attributes.values().flatten() {
                *attributes.entry(a).or_default() += 1;
            }
            for r in &g.relations {
                *relations.entry(&r.predicate).or_default() += 1;
            }
        }
        let mut vocab = Self::new();
        let keep = |m: &BTreeMap<&str, usize>, table: &mut SymbolTable| {
            for (s, &c) in m {
                if c >= min_count {
                    table.insert(s);
                }
            }
        };
        keep(&objects, &mut vocab.objects);
        keep(&attributes, &mut vocab.attributes);
        keep(&relations, &mut vocab.relations);
        vocab
    }

    /// One `<kind> <symbol>` line per entry, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (kind, table) in [
            ("object", &self.objects),
            ("attribute", &self.attributes),
            ("relation", &self.relations),
        ] {
            for s in table.symbols() {
                out.push_str(kind);
                out.push(' ');
                out.push_str(s);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let kind = parts.next().unwrap_or_default();
            let symbol = parts
                .next()
                .ok_or_else(|| Error::parse(i + 1, kind, "missing symbol"))?;
            if parts.next().is_some() {
                return Err(Error::parse(i + 1, kind, "trailing fields"));
            }
            match kind {
                "object" => vocab.objects.insert(symbol),
                "attribute" => vocab.attributes.insert(symbol),
                "relation" => vocab.relations.insert(symbol),
                other => return Err(Error::parse(i + 1, other, "unknown vocabulary kind")),
            };
        }
        Ok(vocab)
    }
}

/// A graph with the identifier it carries in a graph file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphRecord {
    pub id: String,
    pub graph: SceneGraph,
}

impl GraphRecord {
    pub fn new(id: impl Into<String>, graph: SceneGraph) -> Self {
        Self { id: id.into(), graph }
    }
}

/// Writes one record, terminated by `end\n`.
pub fn serialize(record: &GraphRecord) -> String {
    let g = &record.graph;
    let mut out = format!("graph {} {}\n", record.id, g.modality);
    for (i, o) in g.objects.iter().enumerate() {
        out.push_str(&format!("obj {i} {o}\n"));
    }
    for (object, attrs) in &g.attributes {
        for a in attrs {
            out.push_str(&format!("attr {object} {a}\n"));
        }
    }
    for r in &g.relations {
        out.push_str(&format!("rel {} {} {}\n", r.subject, r.predicate, r.object));
    }
    out.push_str("end\n");
    out
}

/// Writes records separated by blank lines.
pub fn serialize_all(records: &[GraphRecord]) -> String {
    records.iter().map(serialize).collect::<Vec<_>>().join("\n")
}

/// Parses exactly one record. `first_line` offsets reported line numbers.
pub fn deserialize_at(text: &str, first_line: usize) -> Result<GraphRecord> {
    let mut record: Option<GraphRecord> = None;
    let mut ended = false;
    for (offset, raw) in text.lines().enumerate() {
        let line_no = first_line + offset;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if ended {
            return Err(Error::parse(line_no, "end", "content after end of record"));
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let keyword = fields[0];
        let expect = |n: usize| {
            if fields.len() == n {
                Ok(())
            } else {
                Err(Error::parse(
                    line_no,
                    keyword,
                    format!("expected {} fields, found {}", n, fields.len()),
                ))
            }
        };
        let index = |s: &str, field: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(line_no, field, format!("`{s}` is not an index")))
        };
        let Some(rec) = record.as_mut() else {
            if keyword != "graph" {
                return Err(Error::parse(line_no, keyword, "record must start with `graph`"));
            }
            expect(3)?;
            let modality = fields[2]
                .parse::<Modality>()
                .map_err(|e| Error::parse(line_no, "modality", e))?;
            record = Some(GraphRecord::new(fields[1], SceneGraph::new(modality)));
            continue;
        };
        match keyword {
            "obj" => {
                expect(3)?;
                let idx = index(fields[1], "obj.idx")?;
                if idx != rec.graph.objects.len() {
                    return Err(Error::parse(
                        line_no,
                        "obj.idx",
                        format!("expected index {}, found {idx}", rec.graph.objects.len()),
                    ));
                }
                rec.graph.add_object(fields[2]);
            }
            "attr" => {
                expect(3)?;
                let idx = index(fields[1], "attr.obj-idx")?;
                rec.graph.add_attribute(idx, fields[2]);
            }
            "rel" => {
                expect(4)?;
                let s = index(fields[1], "rel.subj-idx")?;
                let o = index(fields[3], "rel.obj-idx")?;
                rec.graph.add_relation(s, fields[2], o);
            }
            "end" => {
                expect(1)?;
                ended = true;
            }
            "graph" => return Err(Error::parse(line_no, "graph", "nested record header")),
            other => return Err(Error::parse(line_no, other, "unknown field")),
        }
    }
    match record {
        None => Err(Error::parse(first_line, "graph", "no record found")),
        Some(_) if !ended => Err(Error::parse(first_line, "end", "record is not terminated")),
        Some(r) => Ok(r),
    }
}

pub fn deserialize(text: &str) -> Result<GraphRecord> {
    deserialize_at(text, 1)
}

/// Splits a graph file into `(first line number, record text)` chunks on
/// blank lines.
pub fn split_records(text: &str) -> Vec<(usize, String)> {
    let mut chunks = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                chunks.push((start, std::mem::take(&mut current)));
            }
            continue;
        }
        if current.is_empty() {
            start = i + 1;
        }
        current.push_str(line);
        current.push('\n');
    }
    if !current.is_empty() {
        chunks.push((start, current));
    }
    chunks
}

/// Parses a whole graph file; the first malformed record aborts.
pub fn deserialize_all(text: &str) -> Result<Vec<GraphRecord>> {
    split_records(text)
        .into_iter()
        .map(|(line, chunk)| deserialize_at(&chunk, line))
        .collect()
}
