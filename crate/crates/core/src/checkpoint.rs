//! Plain-text checkpoint container.
//!
//! ```text
//! sgalign-checkpoint 1
//! kind caption
//! config 3f2a…
//! meta variant att
//! section graph-vocab 7
//! object car
//! …
//! tensor encoder.object_embedding 12 64
//! 0.0123 -0.5 …
//! end
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so writing a loaded
//! checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use sgalign_autodiff::Mat;
use sha2::{Digest, Sha256};

use crate::align::{AlignConfig, AlignmentParams, GanKind, MappingMode};
use crate::decoder::AttentionVariant;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelDims};
use crate::nn::Parameters;
use crate::scenegraph::GraphVocabulary;
use crate::vocab::WordVocabulary;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "sgalign-checkpoint";

/// Lower-case hex SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub meta: BTreeMap<String, String>,
    /// Verbatim multi-line blocks such as vocabularies.
    pub sections: BTreeMap<String, String>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            meta: BTreeMap::new(),
            sections: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\nconfig {}\n", self.kind, self.config_hash);
        for (k, v) in &self.meta {
            out += &format!("meta {k} {v}\n");
        }
        for (name, body) in &self.sections {
            let lines: Vec<&str> = body.lines().collect();
            out += &format!("section {name} {}\n", lines.len());
            for l in lines {
                out += l;
                out.push('\n');
            }
        }
        for (name, m) in &self.tensors {
            out += &format!("tensor {name} {} {}\n", m.nrows(), m.ncols());
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out += &cells.join(" ");
                out.push('\n');
            }
        }
        out += "end\n";
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |i: usize, field: &str, msg: &str| Error::parse(i + 1, field, msg);
        let mut header = lines.first().copied().unwrap_or_default().split(' ');
        if header.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version: u32 = header
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(0, "version", "missing format version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let field = |i: usize, key: &str| -> Result<String> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(i, key, "missing"))
        };
        let mut ck = Checkpoint::new(&field(1, "kind")?, &field(2, "config")?);
        let mut i = 3;
        loop {
            let line = *lines.get(i).ok_or_else(|| bad(i, "end", "file ends without `end`"))?;
            let mut parts = line.split(' ');
            match parts.next().unwrap_or_default() {
                "end" => break,
                "meta" => {
                    let key = parts.next().ok_or_else(|| bad(i, "meta", "missing key"))?;
                    let value: Vec<&str> = parts.collect();
                    ck.meta.insert(key.to_string(), value.join(" "));
                    i += 1;
                }
                "section" => {
                    let name = parts.next().ok_or_else(|| bad(i, "section", "missing name"))?;
                    let n: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(i, "section", "missing line count"))?;
                    let body = lines
                        .get(i + 1..i + 1 + n)
                        .ok_or_else(|| bad(i, "section", "truncated section"))?;
                    let mut text = body.join("\n");
                    if n > 0 {
                        text.push('\n');
                    }
                    ck.sections.insert(name.to_string(), text);
                    i += 1 + n;
                }
                "tensor" => {
                    let name = parts.next().ok_or_else(|| bad(i, "tensor", "missing name"))?;
                    let mut dim = || parts.next().and_then(|v| v.parse::<usize>().ok());
                    let (rows, cols) = match (dim(), dim()) {
                        (Some(r), Some(c)) => (r, c),
                        _ => return Err(bad(i, "tensor", "missing shape")),
                    };
                    let mut values = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let at = i + 1 + r;
                        let line = lines.get(at).ok_or_else(|| bad(at, name, "truncated tensor"))?;
                        let before = values.len();
                        for cell in line.split(' ').filter(|c| !c.is_empty()) {
                            values.push(cell.parse::<f64>().map_err(|_| bad(at, name, "not a number"))?);
                        }
                        if values.len() - before != cols {
                            return Err(bad(at, name, "wrong number of columns"));
                        }
                    }
                    let m = Mat::from_shape_vec((rows, cols), values).expect("shape checked");
                    ck.tensors.push((name.to_string(), m));
                    i += 1 + rows;
                }
                other => return Err(bad(i, other, "unknown record")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Errors unless the checkpoint was written under `expected`.
    pub fn require_config(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::CheckpointMismatch {
                expected: expected.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid meta `{key}`")))
    }

    fn section(&self, name: &str) -> Result<&str> {
        self.sections
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    /// Copies stored tensors into `target`, which must have exactly the same
    /// names and shapes in the same order.
    fn fill(&self, target: &mut impl Parameters) -> Result<()> {
        let names: Vec<(String, (usize, usize))> =
            target.named_params().into_iter().map(|(n, m)| (n, m.dim())).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, dim), (stored, m)) in names.iter().zip(&self.tensors) {
            if name != stored || *dim != m.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{stored}` {:?} does not match `{name}` {dim:?}",
                    m.dim()
                )));
            }
        }
        for (dst, (_, src)) in target.params_mut().into_iter().zip(&self.tensors) {
            dst.assign(src);
        }
        Ok(())
    }

    fn store(&mut self, source: &impl Parameters) {
        self.tensors = source.named_params().into_iter().map(|(n, m)| (n, m.clone())).collect();
    }
}

pub const CAPTION_KIND: &str = "caption";
pub const ALIGNMENT_KIND: &str = "alignment";

pub fn caption_checkpoint(model: &CaptionModel, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(CAPTION_KIND, config_hash);
    let dims = model.dims();
    ck.meta.insert("variant".into(), model.variant().to_string());
    ck.meta.insert("d_e".into(), dims.d_e.to_string());
    ck.meta.insert("d_x".into(), dims.d_x.to_string());
    ck.meta.insert("d_h".into(), dims.d_h.to_string());
    ck.sections.insert("graph-vocab".into(), model.graph_vocab.to_text());
    ck.sections.insert("word-vocab".into(), model.word_vocab.to_text());
    ck.store(model);
    ck
}

pub fn load_caption(ck: &Checkpoint) -> Result<CaptionModel> {
    ck.require_kind(CAPTION_KIND)?;
    let variant: AttentionVariant = ck.meta("variant")?;
    let dims = ModelDims {
        d_e: ck.meta("d_e")?,
        d_x: ck.meta("d_x")?,
        d_h: ck.meta("d_h")?,
    };
    let gv = GraphVocabulary::from_text(ck.section("graph-vocab")?)?;
    let wv = WordVocabulary::from_text(ck.section("word-vocab")?)?;
    let mut model = CaptionModel::new(gv, wv, dims, variant, 0);
    ck.fill(&mut model)?;
    model.check()?;
    Ok(model)
}

pub fn alignment_checkpoint(params: &AlignmentParams, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(ALIGNMENT_KIND, config_hash);
    ck.meta.insert("mode".into(), params.mode.to_string());
    ck.meta.insert("gan".into(), params.kind.to_string());
    ck.meta.insert("out_dim".into(), params.out_dim.to_string());
    ck.meta.insert("lambda".into(), params.lambda.to_string());
    ck.meta.insert("gp_weight".into(), params.gp_weight.to_string());
    ck.meta.insert("d_f".into(), params.dim.to_string());
    ck.meta.insert("trained".into(), params.trained.to_string());
    ck.store(params);
    ck
}

pub fn load_alignment(ck: &Checkpoint) -> Result<AlignmentParams> {
    ck.require_kind(ALIGNMENT_KIND)?;
    let mode: MappingMode = ck.meta("mode")?;
    let kind: GanKind = ck.meta("gan")?;
    let d_f: usize = ck.meta("d_f")?;
    let config = AlignConfig {
        mode,
        kind,
        out_dim: ck.meta("out_dim")?,
        lambda: ck.meta("lambda")?,
        gp_weight: ck.meta("gp_weight")?,
        ..AlignConfig::default()
    };
    let mut params = AlignmentParams::new(d_f, &config)?;
    ck.fill(&mut params)?;
    params.trained = ck.meta("trained")?;
    Ok(params)
}
