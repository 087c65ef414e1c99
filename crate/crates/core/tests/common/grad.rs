//! Central finite-difference checks. Each check returns the relative error
//! of every parameter block, labelled.

use ndarray::Array2;
use rand::Rng;
use sgalign_core::align::{discriminator_step, mapper_step, AlignGroup, GanKind, LossSettings};
use sgalign_core::decoder::AttentionVariant;
use sgalign_core::model::{CaptionModel, ModelDims};
use sgalign_core::nn::{rng, Parameters};
use sgalign_core::scenegraph::{GraphVocabulary, Modality, SceneGraph};
use sgalign_core::training::{policy_loss, xe_loss, TextExample};
use sgalign_core::vocab::WordVocabulary;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

pub type Report = Vec<(String, f64)>;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) < 1e-10 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

pub fn worst(report: &Report) -> (String, f64) {
    report
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

pub fn text_setup(variant: AttentionVariant) -> (CaptionModel, TextExample) {
    let mut g = SceneGraph::new(Modality::Sentence);
    let man = g.add_object("man");
    let horse = g.add_object("horse");
    let beach = g.add_object("beach");
    g.add_relation(man, "rides", horse);
    g.add_relation(horse, "on", beach);
    g.add_attribute(horse, "brown");
    g.add_attribute(horse, "tall");
    let gv = GraphVocabulary::from_graphs([&g], 1);
    let sentence = vec!["man", "rides", "brown", "horse"];
    let wv = WordVocabulary::build(&[sentence.clone()], 1).unwrap();
    let target = wv.encode(&sentence);
    let dims = ModelDims { d_e: 4, d_x: 5, d_h: 6 };
    let model = CaptionModel::new(gv, wv, dims, variant, 42);
    let graph = model.index(&g).unwrap();
    (model, TextExample { graph, target })
}

fn check_model(model: &CaptionModel, loss: impl Fn(&CaptionModel) -> f64, analytic: &[Array2<f64>], label: &str) -> Report {
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for idx in 0..grad.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.params_mut()[k].as_slice_mut().unwrap()[idx] += H;
            minus.params_mut()[k].as_slice_mut().unwrap()[idx] -= H;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * H));
        }
        out.push((format!("{label} {}", names[k]), rel_err(grad.as_slice().unwrap(), &numeric)));
    }
    out
}

/// XE through encoder, attention, fusion and decoder, for every variant.
pub fn xe_report() -> Report {
    let mut out = Vec::new();
    for variant in AttentionVariant::ALL {
        let (model, ex) = text_setup(variant);
        let analytic = xe_loss(&model, &[&ex]).unwrap().grads;
        out.extend(check_model(&model, |m| xe_loss(m, &[&ex]).unwrap().loss, &analytic, &format!("xe {variant}")));
    }
    out
}

/// The self-critical surrogate with a fixed sample and advantage.
pub fn policy_report() -> Report {
    let (model, ex) = text_setup(AttentionVariant::Separate);
    let sample = vec![vec![ex.target[1], ex.target[0], 3]];
    let analytic = policy_loss(&model, &[&ex.graph], &sample, &[0.3]).unwrap().grads;
    check_model(&model, |m| policy_loss(m, &[&ex.graph], &sample, &[0.3]).unwrap().loss, &analytic, "policy")
}

pub const D: usize = 3;

pub fn group_setup(kind: GanKind, out_dim: usize) -> (AlignGroup, Array2<f64>, Array2<f64>, LossSettings) {
    let mut r = rng(7);
    let mut group = AlignGroup::new(D, out_dim, &mut r);
    // move the mappers off the identity so every leaky-ReLU branch is used
    for m in group.mappers_mut() {
        m.mapv_inplace(|v| v + r.random_range(-0.3..0.3));
    }
    let real_i = Array2::from_shape_fn((4, D), |_| r.random_range(0.0..2.0));
    let real_s = Array2::from_shape_fn((4, D), |_| r.random_range(0.0..2.0));
    let settings = LossSettings {
        kind,
        lambda: 10.0,
        gp_weight: 10.0,
    };
    (group, real_i, real_s, settings)
}

pub fn check_group(
    group: &AlignGroup,
    params: fn(&mut AlignGroup) -> Vec<&mut Array2<f64>>,
    loss: impl Fn(&AlignGroup) -> f64,
    analytic: &[Array2<f64>],
    label: &str,
) -> Report {
    let mut out = Vec::new();
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for idx in 0..grad.len() {
            let mut plus = group.clone();
            let mut minus = group.clone();
            params(&mut plus)[k].as_slice_mut().unwrap()[idx] += H;
            params(&mut minus)[k].as_slice_mut().unwrap()[idx] -= H;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * H));
        }
        out.push((format!("{label} parameter {k}"), rel_err(grad.as_slice().unwrap(), &numeric)));
    }
    out
}

const EPS_IS: [f64; 4] = [0.1, 0.4, 0.6, 0.95];
const EPS_SI: [f64; 4] = [0.8, 0.3, 0.5, 0.2];

/// Discriminator objectives of every GAN kind and output width.
pub fn discriminator_report() -> Report {
    let mut out = Vec::new();
    for kind in GanKind::ALL {
        for out_dim in [1, D, 64] {
            let (group, ri, rs, s) = group_setup(kind, out_dim);
            let analytic = discriminator_step(&group, &ri, &rs, s, &EPS_IS, &EPS_SI).unwrap().grads;
            let loss = |g: &AlignGroup| discriminator_step(g, &ri, &rs, s, &EPS_IS, &EPS_SI).unwrap().loss;
            out.extend(check_group(&group, AlignGroup::discriminators_mut, loss, &analytic, &format!("{kind} out {out_dim} disc")));
        }
    }
    out
}

/// Mapper objectives: both adversarial terms plus the weighted cycle loss.
pub fn mapper_report() -> Report {
    let mut out = Vec::new();
    for kind in GanKind::ALL {
        for out_dim in [1, D, 64] {
            let (group, ri, rs, s) = group_setup(kind, out_dim);
            let analytic = mapper_step(&group, &ri, &rs, s).unwrap().1.grads;
            let loss = |g: &AlignGroup| mapper_step(g, &ri, &rs, s).unwrap().1.loss;
            out.extend(check_group(&group, AlignGroup::mappers_mut, loss, &analytic, &format!("{kind} out {out_dim} mapper")));
        }
    }
    out
}

/// With the discriminators zeroed under the MSE kind, the mapper objective
/// is the constant 2 plus the cycle loss, so this isolates the cycle term.
pub fn cycle_setup() -> (AlignGroup, Array2<f64>, Array2<f64>, LossSettings) {
    let (mut group, ri, rs, _) = group_setup(GanKind::Mse, 1);
    for m in group.discriminators_mut() {
        m.fill(0.0);
    }
    let s = LossSettings {
        kind: GanKind::Mse,
        lambda: 1.0,
        gp_weight: 0.0,
    };
    (group, ri, rs, s)
}

pub fn cycle_report() -> Report {
    let (group, ri, rs, s) = cycle_setup();
    let analytic = mapper_step(&group, &ri, &rs, s).unwrap().1.grads;
    let loss = |g: &AlignGroup| mapper_step(g, &ri, &rs, s).unwrap().1.loss;
    check_group(&group, AlignGroup::mappers_mut, loss, &analytic, "cycle")
}
