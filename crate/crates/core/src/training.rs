//! Text-modality training: cross-entropy, then self-critical fine-tuning
//! with a CIDEr-D reward.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use sgalign_autodiff::{Mat, Tape};

use crate::decoder::{greedy_decode_batch, log_softmax, sample_batch, teacher_forced_nll};
use crate::encoder::IndexedGraph;
use crate::error::{Error, Result};
use crate::metrics::{cider_d, CiderD, EvalItem};
use crate::model::CaptionModel;
use crate::nn::{clip_global_norm, collect_grads, derived_rng, rng, Adam, AdamConfig, Parameters};
use crate::vocab::MAX_CAPTION_LEN;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub xe_epochs: usize,
    pub rl_epochs: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            decay: 0.8,
            decay_every: 5,
            batch_size: 50,
            xe_epochs: 20,
            rl_epochs: 10,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.decay > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate, decay and clip norm must be positive".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch size and decay interval must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`, counted across both phases.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch.max(1) - 1) / self.decay_every;
        self.learning_rate * self.decay.powi(k as i32)
    }
}

/// A parsed training sentence: its graph and target word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TextExample {
    pub graph: IndexedGraph,
    pub target: Vec<usize>,
}

/// Cross-entropy of a logits sequence (one row per step) against `targets`.
pub fn sequence_xe(logits: &Mat, targets: &[usize]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Dimension(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    if let Some(&id) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::TokenOutOfRange { id, size: logits.ncols() });
    }
    let lp = log_softmax(logits);
    Ok(-targets.iter().enumerate().map(|(t, &w)| lp[[t, w]]).sum::<f64>())
}

fn check_targets(model: &CaptionModel, batch: &[&TextExample]) -> Result<()> {
    let size = model.word_vocab.len();
    for ex in batch {
        if ex.target.len() > MAX_CAPTION_LEN {
            return Err(Error::Config(format!("target longer than {MAX_CAPTION_LEN} tokens")));
        }
        if let Some(&id) = ex.target.iter().find(|&&t| t >= size) {
            return Err(Error::TokenOutOfRange { id, size });
        }
    }
    Ok(())
}

/// Loss value and one gradient per model parameter (in `params_mut` order).
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Mat>,
}

/// Mean over the batch of the summed per-sentence negative log-likelihood.
pub fn xe_loss(model: &CaptionModel, batch: &[&TextExample]) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    check_targets(model, batch)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let graphs: Vec<&IndexedGraph> = batch.iter().map(|e| &e.graph).collect();
    let f_ora = model.f_ora_on_tape(&mut tape, &vars, &graphs);
    let targets: Vec<Vec<usize>> = batch.iter().map(|e| e.target.clone()).collect();
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    let loss = teacher_forced_nll(&mut tape, &vars.decoder, f_ora, &targets, &w, MAX_CAPTION_LEN);
    let mut g = tape.backward(loss);
    Ok(LossAndGrads {
        loss: tape.scalar(loss),
        grads: collect_grads(&mut g, &tape, &vars.vars()),
    })
}

/// Surrogate `Σ_b adv_b · (−log p(S̃_b))` for fixed sampled sequences and
/// advantages, whose gradient is the self-critical policy gradient.
pub fn policy_loss(model: &CaptionModel, graphs: &[&IndexedGraph], samples: &[Vec<usize>], advantages: &[f64]) -> Result<LossAndGrads> {
    if graphs.is_empty() || graphs.len() != samples.len() || samples.len() != advantages.len() {
        return Err(Error::Dimension("graphs, samples and advantages must align".into()));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let f_ora = model.f_ora_on_tape(&mut tape, &vars, graphs);
    let loss = teacher_forced_nll(&mut tape, &vars.decoder, f_ora, samples, advantages, MAX_CAPTION_LEN);
    let mut g = tape.backward(loss);
    Ok(LossAndGrads {
        loss: tape.scalar(loss),
        grads: collect_grads(&mut g, &tape, &vars.vars()),
    })
}

pub struct ScstStep {
    pub loss: LossAndGrads,
    pub sample_reward: f64,
    pub greedy_reward: f64,
}

/// Samples one caption per graph, scores it and the greedy caption with
/// `reward`, and returns the policy-gradient surrogate with advantage
/// `r(sample) − r(greedy)` averaged over the batch.
pub fn scst_loss(
    model: &CaptionModel,
    batch: &[&TextExample],
    reward: &dyn Fn(&[usize], &TextExample) -> Result<f64>,
    rng: &mut impl Rng,
) -> Result<ScstStep> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    check_targets(model, batch)?;
    let graphs: Vec<&IndexedGraph> = batch.iter().map(|e| &e.graph).collect();
    let f_ora = model.fuse(&model.attended(&graphs)?)?;
    let greedy = greedy_decode_batch(&f_ora, &model.decoder, MAX_CAPTION_LEN)?;
    let samples = sample_batch(&f_ora, &model.decoder, MAX_CAPTION_LEN, rng)?;
    let n = batch.len() as f64;
    let mut adv = Vec::with_capacity(batch.len());
    let (mut rs, mut rg) = (0.0, 0.0);
    for ((s, g), ex) in samples.iter().zip(&greedy).zip(batch) {
        let a = reward(s, ex)?;
        let b = reward(g, ex)?;
        rs += a;
        rg += b;
        adv.push((a - b) / n);
    }
    Ok(ScstStep {
        loss: policy_loss(model, &graphs, &samples, &adv)?,
        sample_reward: rs / n,
        greedy_reward: rg / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Xe,
    Rl,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Xe => "xe",
            Phase::Rl => "rl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    /// Mean batch XE loss, or mean sample reward during RL.
    pub loss: f64,
    pub heldout_cider: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tphase\tlr\tloss\theldout_cider_d";

    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{:e}\t{:.6}\t{:.6}",
            self.epoch, self.phase, self.lr, self.loss, self.heldout_cider
        )
    }
}

/// Held-out CIDEr-D of greedy reconstructions, and the exact-match rate.
pub fn reconstruction_scores(model: &CaptionModel, heldout: &[TextExample], beam: usize) -> Result<(f64, f64)> {
    if heldout.is_empty() {
        return Ok((0.0, 0.0));
    }
    let graphs: Vec<IndexedGraph> = heldout.iter().map(|e| e.graph.clone()).collect();
    let hyps = model.caption_graphs(&graphs, beam)?;
    let exact = hyps.iter().zip(heldout).filter(|(h, e)| **h == e.target).count() as f64 / heldout.len() as f64;
    if heldout.len() < 2 {
        return Ok((0.0, exact));
    }
    let corpus: Vec<EvalItem<usize>> = hyps
        .into_iter()
        .zip(heldout)
        .map(|(h, e)| EvalItem::new(h, vec![e.target.clone()]))
        .collect();
    Ok((cider_d(&corpus)?.mean, exact))
}

fn apply(model: &mut CaptionModel, opt: &mut Adam, mut grads: Vec<Mat>, lr: f64, clip: f64) -> Result<()> {
    clip_global_norm(&mut grads, clip);
    opt.step(model.params_mut(), &grads, lr);
    if !model.all_finite() {
        return Err(Error::NonFinite("model parameters after update".into()));
    }
    Ok(())
}

/// Runs the XE epochs then the RL epochs. `on_epoch` sees every log record
/// with the model as of the end of that epoch.
pub fn train_text(
    model: &mut CaptionModel,
    train: &[TextExample],
    heldout: &[TextExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &CaptionModel) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    model.check()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("empty training corpus".into()));
    }
    let mut shuffle_rng = rng(config.seed);
    let mut opt = Adam::new(config.adam);
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let refs: Vec<Vec<Vec<usize>>> = train.iter().map(|e| vec![e.target.clone()]).collect();
    let scorer = CiderD::new(&refs);
    let reward = |h: &[usize], ex: &TextExample| -> Result<f64> { Ok(scorer.score(h, std::slice::from_ref(&ex.target))) };

    for epoch in 1..=config.xe_epochs + config.rl_epochs {
        let phase = if epoch <= config.xe_epochs { Phase::Xe } else { Phase::Rl };
        let lr = config.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sample_rng = derived_rng(config.seed, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TextExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (value, grads) = match phase {
                Phase::Xe => {
                    let r = xe_loss(model, &batch)?;
                    (r.loss, r.grads)
                }
                Phase::Rl => {
                    let r = scst_loss(model, &batch, &reward, &mut sample_rng)?;
                    (r.sample_reward, r.loss.grads)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{phase} loss in epoch {epoch}")));
            }
            apply(model, &mut opt, grads, lr, config.clip_norm)?;
            total += value;
            batches += 1;
        }
        let (heldout_cider, _) = reconstruction_scores(model, heldout, 1)?;
        let log = EpochLog {
            epoch,
            phase,
            lr,
            loss: total / batches as f64,
            heldout_cider,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::AttentionVariant;
    use crate::model::ModelDims;
    use crate::scenegraph::{GraphVocabulary, Modality, SceneGraph};
    use crate::vocab::WordVocabulary;

    fn tiny_model(seed: u64) -> (CaptionModel, TextExample) {
        tiny_model_with(seed, ModelDims { d_e: 8, d_x: 8, d_h: 16 })
    }

    fn tiny_model_with(seed: u64, dims: ModelDims) -> (CaptionModel, TextExample) {
        let mut g = SceneGraph::new(Modality::Sentence);
        let car = g.add_object("car");
        let street = g.add_object("street");
        g.add_relation(car, "on", street);
        g.add_attribute(car, "red");
        let gv = GraphVocabulary::from_graphs([&g], 1);
        let words: Vec<Vec<&str>> = vec![vec!["a", "red", "car", "on", "the", "street"]];
        let wv = WordVocabulary::build(&words, 1).unwrap();
        let target = wv.encode(&words[0]);
        let model = CaptionModel::new(gv, wv, dims, AttentionVariant::Separate, seed);
        let ex = TextExample {
            graph: model.index(&g).unwrap(),
            target,
        };
        (model, ex)
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 4e-4);
        assert_eq!(c.lr_at(5), 4e-4);
        assert!((c.lr_at(6) - 3.2e-4).abs() < 1e-18);
        assert!((c.lr_at(11) - 2.56e-4).abs() < 1e-18);
    }

    #[test]
    fn uniform_logits_cost_length_times_log_v() {
        let logits = Mat::zeros((5, 100));
        let xe = sequence_xe(&logits, &[4, 5, 6, 7, 2]).unwrap();
        assert!((xe - 5.0 * 100f64.ln()).abs() < 1e-9);
        assert!((xe - 23.026).abs() < 1e-3);
        assert!(sequence_xe(&logits, &[100, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let mut logits = Mat::from_elem((3, 10), -1e4);
        for (t, w) in [4, 5, 2].into_iter().enumerate() {
            logits[[t, w]] = 0.0;
        }
        assert!(sequence_xe(&logits, &[4, 5, 2]).unwrap() < 1e-12);
    }

    #[test]
    fn memorizes_single_sentence() {
        let (mut model, ex) = tiny_model_with(1, ModelDims { d_e: 16, d_x: 16, d_h: 64 });
        let config = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            xe_epochs: 400,
            rl_epochs: 0,
            decay_every: 1000,
            ..TrainConfig::default()
        };
        let logs = train_text(&mut model, std::slice::from_ref(&ex), &[], &config, |_, _| Ok(())).unwrap();
        assert!(logs.windows(2).take(4).all(|w| w[1].loss <= w[0].loss));
        assert!(logs.last().unwrap().loss < 0.01, "{:?}", logs.last());
        let out = model.caption_graphs(std::slice::from_ref(&ex.graph), 1).unwrap();
        assert_eq!(out[0], ex.target);
    }

    #[test]
    fn epoch_one_loss_is_reproducible() {
        let run = || {
            let (mut model, ex) = tiny_model(3);
            let config = TrainConfig {
                xe_epochs: 1,
                rl_epochs: 0,
                ..TrainConfig::default()
            };
            train_text(&mut model, &[ex.clone(), ex], &[], &config, |_, _| Ok(())).unwrap()[0].loss
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let (model, ex) = tiny_model(5);
        let step = scst_loss(&model, &[&ex], &|_, _| Ok(0.7), &mut rng(1)).unwrap();
        assert!(step.loss.grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn advantage_scales_log_prob_gradient() {
        let (model, ex) = tiny_model(6);
        let sample = vec![ex.target.clone()];
        let scaled = policy_loss(&model, &[&ex.graph], &sample, &[0.3]).unwrap();
        let xe = xe_loss(&model, &[&ex]).unwrap();
        for (a, b) in scaled.grads.iter().zip(&xe.grads) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - 0.3 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let (model, ex) = tiny_model(7);
        let f = model.fuse(&model.attended(&[&ex.graph]).unwrap()).unwrap();
        let a = sample_batch(&f, &model.decoder, 16, &mut rng(9)).unwrap();
        let b = sample_batch(&f, &model.decoder, 16, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rl_keeps_shapes() {
        let (mut model, ex) = tiny_model(8);
        let before: Vec<_> = model.named_params().iter().map(|(n, m)| (n.clone(), m.dim())).collect();
        let config = TrainConfig {
            xe_epochs: 2,
            rl_epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let logs = train_text(&mut model, &[ex.clone(), ex], &[], &config, |_, _| Ok(())).unwrap();
        assert_eq!(logs[3].phase, Phase::Rl);
        let after: Vec<_> = model.named_params().iter().map(|(n, m)| (n.clone(), m.dim())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn rejects_bad_input() {
        let (mut model, _) = tiny_model(9);
        assert!(train_text(&mut model, &[], &[], &TrainConfig::default(), |_, _| Ok(())).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
