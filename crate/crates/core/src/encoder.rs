//! Graph-convolutional scene-graph encoder.
//!
//! Each object, relation and attribute symbol has a `d_e` embedding. Four
//! fully-connected ReLU layers turn neighbourhoods into `d_x` features:
//!
//! * object `i`: the mean of `g_s(e_i, e_j, e_ij)` over triplets where it is
//!   the subject plus `g_o(e_k, e_i, e_ki)` over triplets where it is the
//!   object, divided by the total number of roles it plays;
//! * attributes of object `i`: the mean of `g_a(e_i, e_a)` over its attributes;
//! * relation `(i, j)`: `g_r(e_i, e_j, e_ij)`.
//!
//! Objects that take part in no relation get a `<self>` self-loop and
//! attribute-less objects get `<none>`, so every mean has a non-zero
//! denominator. A self-loop counts the object twice, once per role.

use rand::Rng;
use sgalign_autodiff::{Mat, Tape, Var};

use crate::error::{Error, Result};
use crate::nn::{uniform, Linear, LinearVars, Parameters};
use crate::scenegraph::{GraphVocabulary, SceneGraph, NONE_ATTRIBUTE, SELF_RELATION};

/// A graph resolved against a [`GraphVocabulary`] and augmented with
/// self-loops and `<none>` attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedGraph {
    /// Object symbol id per object index.
    pub objects: Vec<usize>,
    /// `(subject index, relation id, object index)`, declared relations
    /// first, then self-loops in object order.
    pub triplets: Vec<(usize, usize, usize)>,
    /// `(object index, attribute id)`, grouped by object.
    pub attributes: Vec<(usize, usize)>,
}

impl IndexedGraph {
    pub fn new(graph: &SceneGraph, vocab: &GraphVocabulary) -> Result<Self> {
        if graph.objects.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let report = graph.validate(None);
        if !report.is_ok() {
            return Err(Error::MalformedGraph(report.to_string()));
        }
        let lookup = |kind: &'static str, table: &crate::scenegraph::SymbolTable, s: &str| {
            table.id(s).ok_or_else(|| Error::UnknownSymbol {
                kind,
                symbol: s.to_string(),
            })
        };
        let objects = graph
            .objects
            .iter()
            .map(|o| lookup("object", &vocab.objects, o))
            .collect::<Result<Vec<_>>>()?;
        let mut connected = vec![false; objects.len()];
        let mut triplets = Vec::with_capacity(graph.relations.len());
        for r in &graph.relations {
            triplets.push((r.subject, lookup("relation", &vocab.relations, &r.predicate)?, r.object));
            connected[r.subject] = true;
            connected[r.object] = true;
        }
        let self_id = lookup("relation", &vocab.relations, SELF_RELATION)?;
        for (i, _) in connected.iter().enumerate().filter(|(_, c)| !**c) {
            triplets.push((i, self_id, i));
        }
        let none_id = lookup("attribute", &vocab.attributes, NONE_ATTRIBUTE)?;
        let mut attributes = Vec::new();
        for i in 0..objects.len() {
            let attrs = graph.attributes_of(i);
            if attrs.is_empty() {
                attributes.push((i, none_id));
            }
            for a in attrs {
                attributes.push((i, lookup("attribute", &vocab.attributes, a)?));
            }
        }
        Ok(Self {
            objects,
            triplets,
            attributes,
        })
    }
}

/// Half-width of the uniform embedding initialization.
pub const EMB_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub object_embedding: Mat,
    pub attribute_embedding: Mat,
    pub relation_embedding: Mat,
    pub g_s: Linear,
    pub g_o: Linear,
    pub g_r: Linear,
    pub g_a: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub object_embedding: Var,
    pub attribute_embedding: Var,
    pub relation_embedding: Var,
    pub g_s: LinearVars,
    pub g_o: LinearVars,
    pub g_r: LinearVars,
    pub g_a: LinearVars,
}

impl EncoderVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.object_embedding, self.attribute_embedding, self.relation_embedding];
        for l in [&self.g_s, &self.g_o, &self.g_r, &self.g_a] {
            out.extend(l.vars());
        }
        out
    }
}

impl EncoderParams {
    /// Embeddings start uniform in `(-EMB_INIT, EMB_INIT)`; layers use fan-in
    /// scaling.
    pub fn new(vocab: &GraphVocabulary, d_e: usize, d_x: usize, rng: &mut impl Rng) -> Self {
        Self {
            object_embedding: uniform(vocab.objects.len(), d_e, EMB_INIT, rng),
            attribute_embedding: uniform(vocab.attributes.len(), d_e, EMB_INIT, rng),
            relation_embedding: uniform(vocab.relations.len(), d_e, EMB_INIT, rng),
            g_s: Linear::new(3 * d_e, d_x, rng),
            g_o: Linear::new(3 * d_e, d_x, rng),
            g_r: Linear::new(3 * d_e, d_x, rng),
            g_a: Linear::new(2 * d_e, d_x, rng),
        }
    }

    pub fn d_e(&self) -> usize {
        self.object_embedding.ncols()
    }

    pub fn d_x(&self) -> usize {
        self.g_s.output_dim()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> EncoderVars {
        EncoderVars {
            object_embedding: tape.param(&self.object_embedding),
            attribute_embedding: tape.param(&self.attribute_embedding),
            relation_embedding: tape.param(&self.relation_embedding),
            g_s: self.g_s.bind(tape),
            g_o: self.g_o.bind(tape),
            g_r: self.g_r.bind(tape),
            g_a: self.g_a.bind(tape),
        }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> EncoderVars {
        EncoderVars {
            object_embedding: tape.constant_ref(&self.object_embedding),
            attribute_embedding: tape.constant_ref(&self.attribute_embedding),
            relation_embedding: tape.constant_ref(&self.relation_embedding),
            g_s: self.g_s.bind_frozen(tape),
            g_o: self.g_o.bind_frozen(tape),
            g_r: self.g_r.bind_frozen(tape),
            g_a: self.g_a.bind_frozen(tape),
        }
    }

    fn check_dims(&self) -> Result<()> {
        let d_e = self.d_e();
        let ok = self.attribute_embedding.ncols() == d_e
            && self.relation_embedding.ncols() == d_e
            && [&self.g_s, &self.g_o, &self.g_r].iter().all(|l| l.input_dim() == 3 * d_e)
            && self.g_a.input_dim() == 2 * d_e
            && [&self.g_o, &self.g_r, &self.g_a].iter().all(|l| l.output_dim() == self.d_x());
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("encoder layer shapes disagree with d_e/d_x".into()))
        }
    }

    fn check_ids(&self, g: &IndexedGraph) -> Result<()> {
        let out_of_range = |kind: &'static str, id: usize, table: &Mat| {
            (id >= table.nrows()).then(|| Error::UnknownSymbol {
                kind,
                symbol: format!("#{id}"),
            })
        };
        for &o in &g.objects {
            if let Some(e) = out_of_range("object", o, &self.object_embedding) {
                return Err(e);
            }
        }
        for &(_, r, _) in &g.triplets {
            if let Some(e) = out_of_range("relation", r, &self.relation_embedding) {
                return Err(e);
            }
        }
        for &(_, a) in &g.attributes {
            if let Some(e) = out_of_range("attribute", a, &self.attribute_embedding) {
                return Err(e);
            }
        }
        Ok(())
    }

    /// Object features `X_o`, one row per object.
    pub fn encode_objects(&self, graph: &IndexedGraph) -> Result<Mat> {
        Ok(self.encode_indexed(graph)?.objects)
    }

    /// Attribute features `X_a`, one row per object.
    pub fn encode_attributes(&self, graph: &IndexedGraph) -> Result<Mat> {
        Ok(self.encode_indexed(graph)?.attributes)
    }

    /// Relation features `X_r`, one row per (augmented) triplet.
    pub fn encode_relations(&self, graph: &IndexedGraph) -> Result<Mat> {
        Ok(self.encode_indexed(graph)?.relations)
    }

    pub fn encode_indexed(&self, graph: &IndexedGraph) -> Result<GraphFeatures> {
        self.check_dims()?;
        self.check_ids(graph)?;
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let batch = encode_batch(&mut tape, &vars, &[graph]);
        Ok(GraphFeatures {
            objects: tape.value(batch.objects).clone(),
            relations: tape.value(batch.relations).clone(),
            attributes: tape.value(batch.attributes).clone(),
        })
    }
}

impl Parameters for EncoderParams {
    fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("encoder.object_embedding".to_string(), &self.object_embedding),
            ("encoder.attribute_embedding".to_string(), &self.attribute_embedding),
            ("encoder.relation_embedding".to_string(), &self.relation_embedding),
        ];
        out.extend(self.g_s.named_params("encoder.g_s"));
        out.extend(self.g_o.named_params("encoder.g_o"));
        out.extend(self.g_r.named_params("encoder.g_r"));
        out.extend(self.g_a.named_params("encoder.g_a"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![
            &mut self.object_embedding,
            &mut self.attribute_embedding,
            &mut self.relation_embedding,
        ];
        out.extend(self.g_s.params_mut());
        out.extend(self.g_o.params_mut());
        out.extend(self.g_r.params_mut());
        out.extend(self.g_a.params_mut());
        out
    }
}

/// The three feature sets of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    pub objects: Mat,
    pub relations: Mat,
    pub attributes: Mat,
}

impl GraphFeatures {
    /// `(N_o, N_r, N_a)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.objects.nrows(), self.relations.nrows(), self.attributes.nrows())
    }
}

/// Resolves, augments and encodes one graph.
pub fn encode(graph: &SceneGraph, vocab: &GraphVocabulary, params: &EncoderParams) -> Result<GraphFeatures> {
    params.encode_indexed(&IndexedGraph::new(graph, vocab)?)
}

/// Feature sets of a batch of graphs stacked row-wise, with the graph each
/// row belongs to.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub objects: Var,
    pub relations: Var,
    pub attributes: Var,
    pub object_graph: Vec<usize>,
    pub relation_graph: Vec<usize>,
    pub graphs: usize,
}

fn inverse_counts(counts: &[usize]) -> Mat {
    Mat::from_shape_fn((counts.len(), 1), |(i, _)| 1.0 / counts[i] as f64)
}

pub fn encode_batch(tape: &mut Tape, vars: &EncoderVars, graphs: &[&IndexedGraph]) -> EncodedBatch {
    let mut object_syms: Vec<usize> = Vec::new();
    let mut object_graph = Vec::new();
    let (mut subj_sym, mut obj_sym, mut rel_ids) = (Vec::new(), Vec::new(), Vec::new());
    let (mut subj_at, mut obj_at, mut relation_graph) = (Vec::new(), Vec::new(), Vec::new());
    let (mut attr_owner_sym, mut attr_ids, mut attr_owner) = (Vec::new(), Vec::new(), Vec::new());
    for (gi, g) in graphs.iter().enumerate() {
        let base = object_syms.len();
        object_syms.extend(&g.objects);
        object_graph.extend(std::iter::repeat_n(gi, g.objects.len()));
        for &(s, r, o) in &g.triplets {
            subj_sym.push(g.objects[s]);
            obj_sym.push(g.objects[o]);
            rel_ids.push(r);
            subj_at.push(base + s);
            obj_at.push(base + o);
            relation_graph.push(gi);
        }
        for &(o, a) in &g.attributes {
            attr_owner_sym.push(g.objects[o]);
            attr_ids.push(a);
            attr_owner.push(base + o);
        }
    }
    let n_objects = object_syms.len();

    let e_subj = tape.gather_rows(vars.object_embedding, &subj_sym);
    let e_obj = tape.gather_rows(vars.object_embedding, &obj_sym);
    let e_rel = tape.gather_rows(vars.relation_embedding, &rel_ids);
    let triplet_in = tape.concat_cols(&[e_subj, e_obj, e_rel]);

    let as_subject = vars.g_s.forward(tape, triplet_in);
    let as_subject = tape.relu(as_subject);
    let as_object = vars.g_o.forward(tape, triplet_in);
    let as_object = tape.relu(as_object);
    let relations = vars.g_r.forward(tape, triplet_in);
    let relations = tape.relu(relations);

    let mut roles = vec![0usize; n_objects];
    for &i in subj_at.iter().chain(&obj_at) {
        roles[i] += 1;
    }
    let sum_s = tape.segment_sum(as_subject, &subj_at, n_objects);
    let sum_o = tape.segment_sum(as_object, &obj_at, n_objects);
    let total = tape.add(sum_s, sum_o);
    let inv_roles = tape.constant(inverse_counts(&roles));
    let objects = tape.mul(total, inv_roles);

    let e_owner = tape.gather_rows(vars.object_embedding, &attr_owner_sym);
    let e_attr = tape.gather_rows(vars.attribute_embedding, &attr_ids);
    let attr_in = tape.concat_cols(&[e_owner, e_attr]);
    let per_attr = vars.g_a.forward(tape, attr_in);
    let per_attr = tape.relu(per_attr);
    let mut attr_counts = vec![0usize; n_objects];
    for &i in &attr_owner {
        attr_counts[i] += 1;
    }
    let attr_sum = tape.segment_sum(per_attr, &attr_owner, n_objects);
    let inv_attr = tape.constant(inverse_counts(&attr_counts));
    let attributes = tape.mul(attr_sum, inv_attr);

    EncodedBatch {
        objects,
        relations,
        attributes,
        object_graph,
        relation_graph,
        graphs: graphs.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng;
    use crate::scenegraph::Modality;
    use ndarray::{concatenate, s, Axis};

    fn vocab() -> GraphVocabulary {
        let mut v = GraphVocabulary::new();
        for o in ["car", "street", "dog"] {
            v.objects.insert(o);
        }
        for a in ["red", "small"] {
            v.attributes.insert(a);
        }
        for r in ["on", "near"] {
            v.relations.insert(r);
        }
        v
    }

    /// d_e = d_x = 2; every g sums its argument embeddings (identity blocks),
    /// zero bias.
    fn summing_params(vocab: &GraphVocabulary) -> EncoderParams {
        let eye = Mat::eye(2);
        let stack = |k: usize| {
            let views: Vec<_> = (0..k).map(|_| eye.view()).collect();
            Linear {
                weight: concatenate(Axis(0), &views).unwrap(),
                bias: Mat::zeros((1, 2)),
            }
        };
        let table = |n: usize, offset: f64| Mat::from_shape_fn((n, 2), |(i, j)| offset + i as f64 + 0.1 * j as f64);
        EncoderParams {
            object_embedding: table(vocab.objects.len(), 1.0),
            attribute_embedding: table(vocab.attributes.len(), 10.0),
            relation_embedding: table(vocab.relations.len(), 100.0),
            g_s: stack(3),
            g_o: stack(3),
            g_r: stack(3),
            g_a: stack(2),
        }
    }

    fn graph(objects: &[&str], rels: &[(usize, &str, usize)], attrs: &[(usize, &str)]) -> SceneGraph {
        let mut g = SceneGraph::new(Modality::Sentence);
        for o in objects {
            g.add_object(*o);
        }
        for &(s, p, o) in rels {
            g.add_relation(s, p, o);
        }
        for &(o, a) in attrs {
            g.add_attribute(o, a);
        }
        g
    }

    fn row(m: &Mat, i: usize) -> Mat {
        m.slice(s![i..i + 1, ..]).to_owned()
    }

    #[test]
    fn single_triplet_sums_embeddings() {
        let v = vocab();
        let p = summing_params(&v);
        let g = graph(&["car", "street"], &[(0, "on", 1)], &[]);
        let x = encode(&g, &v, &p).unwrap();
        let e = |t: &Mat, i: usize| row(t, i);
        let expected = e(&p.object_embedding, 0) + e(&p.object_embedding, 1) + e(&p.relation_embedding, 1);
        assert_eq!(row(&x.objects, 0), expected);
        assert_eq!(row(&x.relations, 0), expected);
    }

    #[test]
    fn isolated_object_gets_self_loop() {
        let v = vocab();
        let p = summing_params(&v);
        let g = graph(&["dog"], &[], &[]);
        let x = encode(&g, &v, &p).unwrap();
        let dog = row(&p.object_embedding, 2);
        let self_rel = row(&p.relation_embedding, 0);
        // ½ (g_s + g_o)(e_dog, e_dog, e_self), both layers identical sums
        let expected = &dog + &dog + &self_rel;
        assert_eq!(row(&x.objects, 0), expected);
        assert_eq!(x.counts(), (1, 1, 1));
    }

    #[test]
    fn two_triplets_are_averaged() {
        let v = vocab();
        let p = summing_params(&v);
        let g = graph(&["car", "street", "dog"], &[(0, "on", 1), (2, "near", 0)], &[]);
        let x = encode(&g, &v, &p).unwrap();
        let e = |i| row(&p.object_embedding, i);
        let r = |i| row(&p.relation_embedding, i);
        let as_subject = e(0) + e(1) + r(1);
        let as_object = e(2) + e(0) + r(2);
        assert_eq!(row(&x.objects, 0), (as_subject + as_object) / 2.0);
    }

    #[test]
    fn attributes_are_averaged_and_none_fills_gaps() {
        let v = vocab();
        let p = summing_params(&v);
        let g = graph(&["car", "dog"], &[(0, "near", 1)], &[(0, "red"), (0, "small")]);
        let x = encode(&g, &v, &p).unwrap();
        let car = row(&p.object_embedding, 0);
        let red = row(&p.attribute_embedding, 1);
        let small = row(&p.attribute_embedding, 2);
        assert_eq!(row(&x.attributes, 0), ((&car + &red) + (&car + &small)) / 2.0);
        let dog = row(&p.object_embedding, 2);
        assert_eq!(row(&x.attributes, 1), dog + row(&p.attribute_embedding, 0));
    }

    #[test]
    fn single_attribute_is_not_rescaled() {
        let v = vocab();
        let p = summing_params(&v);
        let g = graph(&["car"], &[], &[(0, "red")]);
        let x = encode(&g, &v, &p).unwrap();
        assert_eq!(
            row(&x.attributes, 0),
            row(&p.object_embedding, 0) + row(&p.attribute_embedding, 1)
        );
    }

    #[test]
    fn relation_features_follow_relation_order() {
        let v = vocab();
        let p = summing_params(&v);
        let g = graph(&["car", "street", "dog"], &[(0, "on", 1), (2, "near", 1)], &[]);
        let x = encode(&g, &v, &p).unwrap();
        let e = |i| row(&p.object_embedding, i);
        let r = |i| row(&p.relation_embedding, i);
        assert_eq!(row(&x.relations, 0), e(0) + e(1) + r(1));
        assert_eq!(row(&x.relations, 1), e(2) + e(1) + r(2));
    }

    #[test]
    fn self_loops_only_for_isolated_objects() {
        let v = vocab();
        let p = EncoderParams::new(&v, 4, 4, &mut rng(1));
        let g = graph(&["car", "street"], &[], &[]);
        assert_eq!(encode(&g, &v, &p).unwrap().counts(), (2, 2, 2));
        let g = graph(&["car", "street"], &[(0, "on", 1)], &[]);
        assert_eq!(encode(&g, &v, &p).unwrap().counts(), (2, 1, 2));
    }

    #[test]
    fn errors_on_empty_graph_and_unknown_symbol() {
        let v = vocab();
        let p = EncoderParams::new(&v, 4, 4, &mut rng(1));
        assert!(matches!(encode(&graph(&[], &[], &[]), &v, &p), Err(Error::EmptyGraph)));
        assert!(matches!(
            encode(&graph(&["zebra"], &[], &[]), &v, &p),
            Err(Error::UnknownSymbol { kind: "object", .. })
        ));
        assert!(matches!(
            encode(&graph(&["car", "dog"], &[(0, "under", 1)], &[]), &v, &p),
            Err(Error::UnknownSymbol { kind: "relation", .. })
        ));
    }

    #[test]
    fn encoding_is_deterministic_and_non_negative() {
        let v = vocab();
        let p = EncoderParams::new(&v, 8, 6, &mut rng(3));
        let g = graph(&["car", "street", "dog"], &[(0, "on", 1), (2, "near", 0)], &[(0, "red")]);
        let a = encode(&g, &v, &p).unwrap();
        let b = encode(&g, &v, &p).unwrap();
        assert_eq!(a, b);
        for m in [&a.objects, &a.relations, &a.attributes] {
            assert!(m.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn relation_permutation_permutes_relation_features_only() {
        let v = vocab();
        let p = EncoderParams::new(&v, 8, 6, &mut rng(5));
        let g1 = graph(&["car", "street", "dog"], &[(0, "on", 1), (2, "near", 0)], &[(1, "small")]);
        let g2 = graph(&["car", "street", "dog"], &[(2, "near", 0), (0, "on", 1)], &[(1, "small")]);
        let a = encode(&g1, &v, &p).unwrap();
        let b = encode(&g2, &v, &p).unwrap();
        assert!((&a.objects - &b.objects).iter().all(|d| d.abs() < 1e-12));
        assert_eq!(a.attributes, b.attributes);
        assert_eq!(row(&a.relations, 0), row(&b.relations, 1));
        assert_eq!(row(&a.relations, 1), row(&b.relations, 0));
    }

    #[test]
    fn batch_encoding_matches_per_graph_encoding() {
        let v = vocab();
        let p = EncoderParams::new(&v, 5, 5, &mut rng(9));
        let g1 = IndexedGraph::new(&graph(&["car", "street"], &[(0, "on", 1)], &[(0, "red")]), &v).unwrap();
        let g2 = IndexedGraph::new(&graph(&["dog"], &[], &[]), &v).unwrap();
        let mut t = Tape::new();
        let vars = p.bind(&mut t);
        let batch = encode_batch(&mut t, &vars, &[&g1, &g2]);
        assert_eq!(batch.object_graph, vec![0, 0, 1]);
        assert_eq!(batch.relation_graph, vec![0, 1]);
        let single = p.encode_indexed(&g2).unwrap();
        assert_eq!(row(t.value(batch.objects), 2), single.objects);
        assert_eq!(row(t.value(batch.relations), 1), single.relations);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let v = vocab();
        let mut p = EncoderParams::new(&v, 4, 4, &mut rng(1));
        p.g_a = Linear::zeros(3, 4);
        let g = graph(&["car"], &[], &[]);
        assert!(matches!(encode(&g, &v, &p), Err(Error::Dimension(_))));
    }
}
