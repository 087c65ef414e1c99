//! Encoder and decoder bundled with their vocabularies.

use sgalign_autodiff::{Mat, Tape, Var};

use crate::decoder::{self, attend_batch, fuse_on_tape, AttentionVariant, DecoderParams, DecoderVars};
use crate::encoder::{encode_batch, EncoderParams, EncoderVars, IndexedGraph};
use crate::error::{Error, Result};
use crate::nn::{rng, Parameters};
use crate::scenegraph::{GraphVocabulary, SceneGraph};
use crate::vocab::WordVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub d_e: usize,
    /// Node feature width; also the width of attended and fused features.
    pub d_x: usize,
    pub d_h: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { d_e: 64, d_x: 64, d_h: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub graph_vocab: GraphVocabulary,
    pub word_vocab: WordVocabulary,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Attended feature vectors, one row per graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendedFeatures {
    pub objects: Mat,
    pub relations: Mat,
    pub attributes: Mat,
}

impl AttendedFeatures {
    pub fn kinds(&self) -> [&Mat; 3] {
        [&self.objects, &self.relations, &self.attributes]
    }

    pub fn from_kinds([objects, relations, attributes]: [Mat; 3]) -> Self {
        Self {
            objects,
            relations,
            attributes,
        }
    }

    pub fn len(&self) -> usize {
        self.objects.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        out.extend(self.decoder.vars());
        out
    }
}

impl CaptionModel {
    pub fn new(
        graph_vocab: GraphVocabulary,
        word_vocab: WordVocabulary,
        dims: ModelDims,
        variant: AttentionVariant,
        seed: u64,
    ) -> Self {
        let mut r = rng(seed);
        let encoder = EncoderParams::new(&graph_vocab, dims.d_e, dims.d_x, &mut r);
        let decoder = DecoderParams::new(variant, dims.d_x, dims.d_h, word_vocab.len(), &mut r);
        Self {
            graph_vocab,
            word_vocab,
            encoder,
            decoder,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_e: self.encoder.d_e(),
            d_x: self.encoder.d_x(),
            d_h: self.decoder.d_h(),
        }
    }

    pub fn variant(&self) -> AttentionVariant {
        self.decoder.variant
    }

    pub fn check(&self) -> Result<()> {
        self.decoder.check()?;
        if self.encoder.d_x() != self.decoder.d_f() {
            return Err(Error::Dimension("encoder output width differs from decoder feature width".into()));
        }
        if self.decoder.vocab_size() != self.word_vocab.len() {
            return Err(Error::Dimension("decoder vocabulary size differs from word vocabulary".into()));
        }
        Ok(())
    }

    pub fn index(&self, graph: &SceneGraph) -> Result<IndexedGraph> {
        IndexedGraph::new(graph, &self.graph_vocab)
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind_frozen(tape),
            decoder: self.decoder.bind_frozen(tape),
        }
    }

    /// Encodes and attends a batch of graphs.
    pub fn attended(&self, graphs: &[&IndexedGraph]) -> Result<AttendedFeatures> {
        if graphs.is_empty() {
            return Err(Error::EmptyInput("no graphs to encode".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let batch = encode_batch(&mut tape, &vars.encoder, graphs);
        let [o, r, a] = attend_batch(&mut tape, &vars.decoder, &batch);
        Ok(AttendedFeatures {
            objects: tape.value(o).clone(),
            relations: tape.value(r).clone(),
            attributes: tape.value(a).clone(),
        })
    }

    /// Attended features in chunks, to bound memory on large sets.
    pub fn attended_all(&self, graphs: &[IndexedGraph]) -> Result<AttendedFeatures> {
        let mut parts = Vec::new();
        for chunk in graphs.chunks(256) {
            let refs: Vec<&IndexedGraph> = chunk.iter().collect();
            parts.push(self.attended(&refs)?);
        }
        let cat = |f: fn(&AttendedFeatures) -> &Mat| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("same width")
        };
        Ok(AttendedFeatures {
            objects: cat(|p| &p.objects),
            relations: cat(|p| &p.relations),
            attributes: cat(|p| &p.attributes),
        })
    }

    pub fn fuse(&self, features: &AttendedFeatures) -> Result<Mat> {
        decoder::fuse(&features.objects, &features.relations, &features.attributes, &self.decoder)
    }

    /// Token ids for each feature row (greedy when `beam` is 1).
    pub fn caption_features(&self, features: &AttendedFeatures, beam: usize) -> Result<Vec<Vec<usize>>> {
        self.caption_features_with(features, beam, false)
    }

    /// As [`Self::caption_features`], optionally ranking beam hypotheses by
    /// mean log-probability per token.
    pub fn caption_features_with(&self, features: &AttendedFeatures, beam: usize, length_normalize: bool) -> Result<Vec<Vec<usize>>> {
        let f_ora = self.fuse(features)?;
        decoder::decode_batch_with(&f_ora, &self.decoder, beam, length_normalize)
    }

    pub fn caption_graphs(&self, graphs: &[IndexedGraph], beam: usize) -> Result<Vec<Vec<usize>>> {
        self.caption_features(&self.attended_all(graphs)?, beam)
    }

    pub fn words(&self, ids: &[usize]) -> Result<Vec<String>> {
        self.word_vocab.decode(ids)
    }

    /// `f_ora` for a batch on a trainable tape.
    pub fn f_ora_on_tape(&self, tape: &mut Tape, vars: &ModelVars, graphs: &[&IndexedGraph]) -> Var {
        let batch = encode_batch(tape, &vars.encoder, graphs);
        let attended = attend_batch(tape, &vars.decoder, &batch);
        fuse_on_tape(tape, &vars.decoder, attended)
    }
}

impl Parameters for CaptionModel {
    fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = self.encoder.named_params();
        out.extend(self.decoder.named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}
