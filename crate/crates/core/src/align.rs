//! Cycle-consistent adversarial mapping of image-side attended features into
//! the sentence feature space.
//!
//! Each feature kind (objects, relations, attributes) gets its own pair of
//! mappers and its own pair of discriminators in the default
//! [`MappingMode::Separate`] layout. Encoder and decoder never appear here:
//! training consumes precomputed features, so the captioning model cannot
//! change while the mappers learn.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sgalign_autodiff::{Mat, Tape, Var};

use crate::decoder::FeatureKind;
use crate::error::{Error, Result};
use crate::model::AttendedFeatures;
use crate::nn::{collect_grads, rng, Adam, AdamConfig, Linear, LinearVars, Parameters};
use crate::training::LossAndGrads;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Discriminator hidden width as a multiple of its input width.
pub const DISC_WIDTH_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GanKind {
    Bce,
    Mse,
    Gp,
}

impl GanKind {
    pub const ALL: [GanKind; 3] = [GanKind::Bce, GanKind::Mse, GanKind::Gp];

    pub fn label(self) -> &'static str {
        match self {
            GanKind::Bce => "BCE",
            GanKind::Mse => "MSE",
            GanKind::Gp => "GP",
        }
    }
}

impl fmt::Display for GanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GanKind::Bce => "bce",
            GanKind::Mse => "mse",
            GanKind::Gp => "gp",
        })
    }
}

impl FromStr for GanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(GanKind::Bce),
            "mse" => Ok(GanKind::Mse),
            "gp" => Ok(GanKind::Gp),
            other => Err(Error::Config(format!("unknown GAN loss `{other}` (expected bce, mse or gp)"))),
        }
    }
}

/// How mappers and discriminators are shared across feature kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MappingMode {
    /// One group per kind.
    Separate,
    /// One group applied to all three kinds.
    Shared,
    /// One group over the concatenated `[f_o, f_r, f_a]`.
    Single,
}

impl MappingMode {
    pub const ALL: [MappingMode; 3] = [MappingMode::Separate, MappingMode::Shared, MappingMode::Single];

    pub fn label(self) -> &'static str {
        match self {
            MappingMode::Separate => "Separate GAN",
            MappingMode::Shared => "Shared GAN",
            MappingMode::Single => "Single GAN",
        }
    }

    fn group_names(self) -> &'static [&'static str] {
        match self {
            MappingMode::Separate => &["o", "r", "a"],
            MappingMode::Shared => &["shared"],
            MappingMode::Single => &["single"],
        }
    }
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingMode::Separate => "separate",
            MappingMode::Shared => "shared",
            MappingMode::Single => "single",
        })
    }
}

impl FromStr for MappingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "separate" => Ok(MappingMode::Separate),
            "shared" => Ok(MappingMode::Shared),
            "single" => Ok(MappingMode::Single),
            other => Err(Error::Config(format!("unknown mapping mode `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Layers.

/// `d x d` mapper with identity weight and zero bias. On non-negative
/// features (all attended features are) it is the identity map.
pub fn identity_mapper(dim: usize) -> Linear {
    Linear {
        weight: Mat::eye(dim),
        bias: Mat::zeros((1, dim)),
    }
}

fn leaky(x: Mat) -> Mat {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

fn affine(layer: &Linear, x: &Mat) -> Mat {
    x.dot(&layer.weight) + &layer.bias
}

/// `leaky_relu(x W + b)`.
pub fn apply_mapper(mapper: &Linear, x: &Mat) -> Mat {
    leaky(affine(mapper, x))
}

fn mapper_on_tape(tape: &mut Tape, m: &LinearVars, x: Var) -> Var {
    let z = m.forward(tape, x);
    tape.leaky_relu(z, LEAKY_SLOPE)
}

/// Two-layer perceptron `d -> 4d -> out_dim` with a leaky-ReLU hidden
/// layer. Outputs are logits for BCE and raw scores for MSE and GP.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl Discriminator {
    pub fn new(dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(dim, DISC_WIDTH_FACTOR * dim, rng),
            output: Linear::new(DISC_WIDTH_FACTOR * dim, out_dim, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        affine(&self.output, &leaky(affine(&self.hidden, x)))
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> DiscriminatorVars {
        DiscriminatorVars {
            hidden: self.hidden.bind(tape),
            output: self.output.bind(tape),
        }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> DiscriminatorVars {
        DiscriminatorVars {
            hidden: self.hidden.bind_frozen(tape),
            output: self.output.bind_frozen(tape),
        }
    }
}

impl DiscriminatorVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.output.forward(tape, h)
    }

    /// Gradient of the critic score `mean_k D_k(x)` with respect to each row
    /// of `x`, built from tape ops so it can itself be differentiated. The
    /// leaky-ReLU slopes are taken at `x` and held constant.
    fn input_gradient(&self, tape: &mut Tape, x: &Mat) -> Var {
        let xv = tape.constant(x.clone());
        let z = self.hidden.forward(tape, xv);
        let slopes = tape.value(z).mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE });
        let out_dim = tape.shape(self.output.weight).1;
        let avg = tape.constant(Mat::from_elem((out_dim, 1), 1.0 / out_dim as f64));
        let w_bar = tape.matmul(self.output.weight, avg);
        let w_row = tape.transpose(w_bar);
        let slopes = tape.constant(slopes);
        let per_hidden = tape.mul(slopes, w_row);
        let w1_t = tape.transpose(self.hidden.weight);
        tape.matmul(per_hidden, w1_t)
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.hidden.weight, self.hidden.bias, self.output.weight, self.output.bias]
    }
}

/// Mappers and discriminators for one feature group.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignGroup {
    pub i2s: Linear,
    pub s2i: Linear,
    /// Judges sentence-side features: real sentence vs mapped image.
    pub disc_s: Discriminator,
    /// Judges image-side features: real image vs mapped sentence.
    pub disc_i: Discriminator,
}

impl AlignGroup {
    pub fn new(dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            i2s: identity_mapper(dim),
            s2i: identity_mapper(dim),
            disc_s: Discriminator::new(dim, out_dim, rng),
            disc_i: Discriminator::new(dim, out_dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.i2s.input_dim()
    }

    pub fn mappers_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.i2s.params_mut();
        out.extend(self.s2i.params_mut());
        out
    }

    pub fn discriminators_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for d in [&mut self.disc_s, &mut self.disc_i] {
            out.extend(d.hidden.params_mut());
            out.extend(d.output.params_mut());
        }
        out
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Mat)> {
        let mut out = self.i2s.named_params(&format!("{prefix}.i2s"));
        out.extend(self.s2i.named_params(&format!("{prefix}.s2i")));
        for (name, d) in [("disc_s", &self.disc_s), ("disc_i", &self.disc_i)] {
            out.extend(d.hidden.named_params(&format!("{prefix}.{name}.hidden")));
            out.extend(d.output.named_params(&format!("{prefix}.{name}.output")));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Losses.

fn bce_real(tape: &mut Tape, logits: Var) -> Var {
    let neg = tape.neg(logits);
    let sp = tape.softplus(neg);
    tape.mean(sp)
}

fn bce_fake(tape: &mut Tape, logits: Var) -> Var {
    let sp = tape.softplus(logits);
    tape.mean(sp)
}

fn squared_to(tape: &mut Tape, x: Var, target: f64) -> Var {
    let shifted = tape.affine(x, 1.0, -target);
    let sq = tape.square(shifted);
    tape.mean(sq)
}

/// Discriminator objective without the gradient penalty.
fn disc_objective(tape: &mut Tape, kind: GanKind, d_real: Var, d_fake: Var) -> Var {
    match kind {
        GanKind::Bce => {
            let r = bce_real(tape, d_real);
            let f = bce_fake(tape, d_fake);
            tape.add(r, f)
        }
        GanKind::Mse => {
            let r = squared_to(tape, d_real, 1.0);
            let f = squared_to(tape, d_fake, 0.0);
            tape.add(r, f)
        }
        GanKind::Gp => {
            let r = tape.mean(d_real);
            let f = tape.mean(d_fake);
            tape.sub(f, r)
        }
    }
}

/// Mapper objective: BCE minimises `mean log(1 - D(fake))`, MSE pulls
/// `D(fake)` to 1, GP maximises the critic score of fakes.
fn gen_objective(tape: &mut Tape, kind: GanKind, d_fake: Var) -> Var {
    match kind {
        GanKind::Bce => {
            let f = bce_fake(tape, d_fake);
            tape.neg(f)
        }
        GanKind::Mse => squared_to(tape, d_fake, 1.0),
        GanKind::Gp => {
            let f = tape.mean(d_fake);
            tape.neg(f)
        }
    }
}

/// `mean_b (||∇_x D(x̂_b)|| − 1)²` at `x̂ = ε real + (1 − ε) fake`.
fn gradient_penalty(tape: &mut Tape, d: &DiscriminatorVars, real: &Mat, fake: &Mat, eps: &[f64]) -> Result<Var> {
    if real.dim() != fake.dim() || eps.len() != real.nrows() {
        return Err(Error::Dimension(format!(
            "gradient penalty needs equal batches and one ε per row: real {:?}, fake {:?}, {} ε",
            real.dim(),
            fake.dim(),
            eps.len()
        )));
    }
    let mut x_hat = fake.clone();
    for ((mut row, r), &e) in x_hat.rows_mut().into_iter().zip(real.rows()).zip(eps) {
        row.zip_mut_with(&r, |f, &r| *f = e * r + (1.0 - e) * *f);
    }
    let g = d.input_gradient(tape, &x_hat);
    let sq = tape.square(g);
    let norms = tape.sum_axis(sq, 1);
    let norms = tape.sqrt(norms);
    let dev = tape.affine(norms, 1.0, -1.0);
    let dev = tape.square(dev);
    Ok(tape.mean(dev))
}

fn check_batch(name: &str, x: &Mat, dim: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput(format!("{name} batch is empty")));
    }
    if x.ncols() != dim {
        return Err(Error::Dimension(format!("{name} features have width {}, mappers expect {dim}", x.ncols())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} features")));
    }
    Ok(())
}

/// Loss settings shared by the discriminator and mapper updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub kind: GanKind,
    pub lambda: f64,
    pub gp_weight: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            kind: GanKind::Gp,
            lambda: 10.0,
            gp_weight: 10.0,
        }
    }
}

/// Discriminator and mapper values of one adversarial direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub disc: f64,
    pub gen: f64,
}

#[derive(Clone, Copy, Debug)]
enum Direction {
    ImageToSentence,
    SentenceToImage,
}

fn direction_losses(
    group: &AlignGroup,
    real_i: &Mat,
    real_s: &Mat,
    settings: LossSettings,
    eps: &[f64],
    dir: Direction,
) -> Result<GanLosses> {
    check_batch("image", real_i, group.dim())?;
    check_batch("sentence", real_s, group.dim())?;
    let (mapper, disc, source, target) = match dir {
        Direction::ImageToSentence => (&group.i2s, &group.disc_s, real_i, real_s),
        Direction::SentenceToImage => (&group.s2i, &group.disc_i, real_s, real_i),
    };
    let fake = apply_mapper(mapper, source);
    let mut tape = Tape::new();
    let d = disc.bind_frozen(&mut tape);
    let t = tape.constant(target.clone());
    let f = tape.constant(fake.clone());
    let d_real = d.forward(&mut tape, t);
    let d_fake = d.forward(&mut tape, f);
    let mut disc_loss = disc_objective(&mut tape, settings.kind, d_real, d_fake);
    if settings.kind == GanKind::Gp {
        let gp = gradient_penalty(&mut tape, &d, target, &fake, eps)?;
        let gp = tape.scale(gp, settings.gp_weight);
        disc_loss = tape.add(disc_loss, gp);
    }
    let gen = gen_objective(&mut tape, settings.kind, d_fake);
    Ok(GanLosses {
        disc: tape.scalar(disc_loss),
        gen: tape.scalar(gen),
    })
}

/// Image-to-sentence direction: `D_S` separates real sentence features from
/// `F_{I→S}(image)`. `eps` holds one interpolation weight per row and is
/// only read for [`GanKind::Gp`].
pub fn gan_loss_is(group: &AlignGroup, real_i: &Mat, real_s: &Mat, settings: LossSettings, eps: &[f64]) -> Result<GanLosses> {
    direction_losses(group, real_i, real_s, settings, eps, Direction::ImageToSentence)
}

/// Sentence-to-image direction: `D_I` separates real image features from
/// `F_{S→I}(sentence)`.
pub fn gan_loss_si(group: &AlignGroup, real_i: &Mat, real_s: &Mat, settings: LossSettings, eps: &[f64]) -> Result<GanLosses> {
    direction_losses(group, real_i, real_s, settings, eps, Direction::SentenceToImage)
}

fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

fn cycle_on_tape(tape: &mut Tape, i2s: &LinearVars, s2i: &LinearVars, real_i: Var, real_s: Var) -> Var {
    let to_s = mapper_on_tape(tape, i2s, real_i);
    let back_i = mapper_on_tape(tape, s2i, to_s);
    let to_i = mapper_on_tape(tape, s2i, real_s);
    let back_s = mapper_on_tape(tape, i2s, to_i);
    let li = mean_abs_diff(tape, back_i, real_i);
    let ls = mean_abs_diff(tape, back_s, real_s);
    tape.add(li, ls)
}

/// Mean absolute reconstruction error of both round trips, averaged over
/// batch rows and feature entries.
pub fn cycle_loss(group: &AlignGroup, real_i: &Mat, real_s: &Mat) -> Result<f64> {
    check_batch("image", real_i, group.dim())?;
    check_batch("sentence", real_s, group.dim())?;
    let mut tape = Tape::new();
    let i2s = group.i2s.bind_frozen(&mut tape);
    let s2i = group.s2i.bind_frozen(&mut tape);
    let ri = tape.constant(real_i.clone());
    let rs = tape.constant(real_s.clone());
    let c = cycle_on_tape(&mut tape, &i2s, &s2i, ri, rs);
    Ok(tape.scalar(c))
}

/// Summed discriminator objective of both directions with gradients for
/// `[disc_s…, disc_i…]` in [`AlignGroup::discriminators_mut`] order.
pub fn discriminator_step(
    group: &AlignGroup,
    real_i: &Mat,
    real_s: &Mat,
    settings: LossSettings,
    eps_is: &[f64],
    eps_si: &[f64],
) -> Result<LossAndGrads> {
    check_batch("image", real_i, group.dim())?;
    check_batch("sentence", real_s, group.dim())?;
    let fake_s = apply_mapper(&group.i2s, real_i);
    let fake_i = apply_mapper(&group.s2i, real_s);
    let mut tape = Tape::new();
    let ds = group.disc_s.bind(&mut tape);
    let di = group.disc_i.bind(&mut tape);
    let mut total = None;
    for (d, real, fake, eps) in [(&ds, real_s, &fake_s, eps_is), (&di, real_i, &fake_i, eps_si)] {
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let d_real = d.forward(&mut tape, r);
        let d_fake = d.forward(&mut tape, f);
        let mut loss = disc_objective(&mut tape, settings.kind, d_real, d_fake);
        if settings.kind == GanKind::Gp {
            let gp = gradient_penalty(&mut tape, d, real, fake, eps)?;
            let gp = tape.scale(gp, settings.gp_weight);
            loss = tape.add(loss, gp);
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss),
        });
    }
    let loss = total.expect("two directions");
    let mut g = tape.backward(loss);
    let mut vars = ds.vars().to_vec();
    vars.extend(di.vars());
    Ok(LossAndGrads {
        loss: tape.scalar(loss),
        grads: collect_grads(&mut g, &tape, &vars),
    })
}

/// Mapper-side terms of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapperLosses {
    pub gan_is: f64,
    pub gan_si: f64,
    pub cycle: f64,
}

impl MapperLosses {
    pub fn total(&self, lambda: f64) -> f64 {
        self.gan_is + self.gan_si + lambda * self.cycle
    }
}

/// Mapper objective `gen_IS + gen_SI + λ·cycle` with gradients for
/// `[i2s.weight, i2s.bias, s2i.weight, s2i.bias]`.
pub fn mapper_step(group: &AlignGroup, real_i: &Mat, real_s: &Mat, settings: LossSettings) -> Result<(MapperLosses, LossAndGrads)> {
    check_batch("image", real_i, group.dim())?;
    check_batch("sentence", real_s, group.dim())?;
    let mut tape = Tape::new();
    let i2s = group.i2s.bind(&mut tape);
    let s2i = group.s2i.bind(&mut tape);
    let ds = group.disc_s.bind_frozen(&mut tape);
    let di = group.disc_i.bind_frozen(&mut tape);
    let ri = tape.constant(real_i.clone());
    let rs = tape.constant(real_s.clone());
    let fake_s = mapper_on_tape(&mut tape, &i2s, ri);
    let fake_i = mapper_on_tape(&mut tape, &s2i, rs);
    let score_s = ds.forward(&mut tape, fake_s);
    let score_i = di.forward(&mut tape, fake_i);
    let gan_is = gen_objective(&mut tape, settings.kind, score_s);
    let gan_si = gen_objective(&mut tape, settings.kind, score_i);
    let cycle = cycle_on_tape(&mut tape, &i2s, &s2i, ri, rs);
    let weighted = tape.scale(cycle, settings.lambda);
    let adv = tape.add(gan_is, gan_si);
    let loss = tape.add(adv, weighted);
    let mut g = tape.backward(loss);
    let vars = [i2s.weight, i2s.bias, s2i.weight, s2i.bias];
    let losses = MapperLosses {
        gan_is: tape.scalar(gan_is),
        gan_si: tape.scalar(gan_si),
        cycle: tape.scalar(cycle),
    };
    Ok((
        losses,
        LossAndGrads {
            loss: tape.scalar(loss),
            grads: collect_grads(&mut g, &tape, &vars),
        },
    ))
}

// ---------------------------------------------------------------------------
// Full parameter set and training.

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub mode: MappingMode,
    pub kind: GanKind,
    pub out_dim: usize,
    pub lambda: f64,
    pub gp_weight: f64,
    /// Discriminator updates per mapper update.
    pub disc_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            mode: MappingMode::Separate,
            kind: GanKind::Gp,
            out_dim: 64,
            lambda: 10.0,
            gp_weight: 10.0,
            disc_steps: 1,
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-3,
            adam: AdamConfig {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn settings(&self) -> LossSettings {
        LossSettings {
            kind: self.kind,
            lambda: self.lambda,
            gp_weight: self.gp_weight,
        }
    }

    /// `d_f` is the attended feature width the mappers will see.
    pub fn validate(&self, d_f: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if ![1, 64, d_f].contains(&self.out_dim) {
            return bad(format!("discriminator output size {} is not 1, 64 or d_f = {d_f}", self.out_dim));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("cycle weight {} must be finite and non-negative", self.lambda));
        }
        if !(self.gp_weight.is_finite() && self.gp_weight >= 0.0) {
            return bad(format!("gradient-penalty weight {} must be finite and non-negative", self.gp_weight));
        }
        if self.disc_steps == 0 || self.steps == 0 || self.batch_size == 0 {
            return bad("disc_steps, steps and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    pub mode: MappingMode,
    pub kind: GanKind,
    pub out_dim: usize,
    pub lambda: f64,
    pub gp_weight: f64,
    /// Attended feature width `d_f`.
    pub dim: usize,
    pub groups: Vec<AlignGroup>,
    /// Set by [`align_train`] and by checkpoint loading.
    pub trained: bool,
}

impl AlignmentParams {
    pub fn new(d_f: usize, config: &AlignConfig) -> Result<Self> {
        config.validate(d_f)?;
        let mut r = rng(config.seed);
        let (count, width) = match config.mode {
            MappingMode::Separate => (3, d_f),
            MappingMode::Shared => (1, d_f),
            MappingMode::Single => (1, 3 * d_f),
        };
        Ok(Self {
            mode: config.mode,
            kind: config.kind,
            out_dim: config.out_dim,
            lambda: config.lambda,
            gp_weight: config.gp_weight,
            dim: d_f,
            groups: (0..count).map(|_| AlignGroup::new(width, config.out_dim, &mut r)).collect(),
            trained: false,
        })
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings {
            kind: self.kind,
            lambda: self.lambda,
            gp_weight: self.gp_weight,
        }
    }

    fn check_features(&self, f: &AttendedFeatures) -> Result<()> {
        for m in f.kinds() {
            if m.ncols() != self.dim {
                return Err(Error::Dimension(format!(
                    "features have width {}, alignment expects {}",
                    m.ncols(),
                    self.dim
                )));
            }
        }
        if f.relations.nrows() != f.len() || f.attributes.nrows() != f.len() {
            return Err(Error::Dimension("feature kinds have different row counts".into()));
        }
        Ok(())
    }

    /// Training inputs of each group for the selected rows.
    pub fn group_inputs(&self, f: &AttendedFeatures, rows: &[usize]) -> Vec<Mat> {
        let pick = |m: &Mat| m.select(ndarray::Axis(0), rows);
        let [o, r, a] = f.kinds().map(pick);
        match self.mode {
            MappingMode::Separate => vec![o, r, a],
            MappingMode::Shared => {
                vec![ndarray::concatenate(ndarray::Axis(0), &[o.view(), r.view(), a.view()]).expect("same width")]
            }
            MappingMode::Single => {
                vec![ndarray::concatenate(ndarray::Axis(1), &[o.view(), r.view(), a.view()]).expect("same rows")]
            }
        }
    }

    fn apply(&self, f: &AttendedFeatures, pick: fn(&AlignGroup) -> &Linear) -> Result<AttendedFeatures> {
        self.check_features(f)?;
        let d = self.dim;
        Ok(match self.mode {
            MappingMode::Separate => AttendedFeatures::from_kinds(
                FeatureKind::ALL.map(|k| apply_mapper(pick(&self.groups[k.index()]), f.kinds()[k.index()])),
            ),
            MappingMode::Shared => {
                let m = pick(&self.groups[0]);
                AttendedFeatures::from_kinds(f.kinds().map(|x| apply_mapper(m, x)))
            }
            MappingMode::Single => {
                let joint = ndarray::concatenate(
                    ndarray::Axis(1),
                    &[f.objects.view(), f.relations.view(), f.attributes.view()],
                )
                .expect("same rows");
                let out = apply_mapper(pick(&self.groups[0]), &joint);
                AttendedFeatures::from_kinds(
                    [0, 1, 2].map(|k| out.slice(ndarray::s![.., k * d..(k + 1) * d]).to_owned()),
                )
            }
        })
    }

    /// `F_{I→S}` applied regardless of the trained flag.
    pub fn apply_i2s(&self, f: &AttendedFeatures) -> Result<AttendedFeatures> {
        self.apply(f, |g| &g.i2s)
    }

    pub fn apply_s2i(&self, f: &AttendedFeatures) -> Result<AttendedFeatures> {
        self.apply(f, |g| &g.s2i)
    }

    /// Maps image-side features into the sentence space for captioning.
    pub fn map_to_sentence_space(&self, f: &AttendedFeatures) -> Result<AttendedFeatures> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        self.apply_i2s(f)
    }
}

impl Parameters for AlignmentParams {
    fn named_params(&self) -> Vec<(String, &Mat)> {
        self.groups
            .iter()
            .zip(self.mode.group_names())
            .flat_map(|(g, name)| g.named(&format!("align.{name}")))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            out.extend(g.i2s.params_mut());
            out.extend(g.s2i.params_mut());
            for d in [&mut g.disc_s, &mut g.disc_i] {
                out.extend(d.hidden.params_mut());
                out.extend(d.output.params_mut());
            }
        }
        out
    }
}

/// One logged mapper update, summed over groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignLog {
    pub step: usize,
    pub gan_is: f64,
    pub gan_si: f64,
    pub cycle: f64,
    pub total: f64,
    pub disc: f64,
    /// Per-group terms in group order.
    pub parts: Vec<MapperLosses>,
}

impl AlignLog {
    pub const HEADER: &'static str = "step\tgan_is\tgan_si\tcycle\ttotal\tdisc";

    pub fn to_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.gan_is, self.gan_si, self.cycle, self.total, self.disc
        )
    }
}

fn sample_rows(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Trains mappers and discriminators on unpaired image and sentence
/// features. Each step draws an independent batch from each side, then
/// runs `disc_steps` discriminator updates and one mapper update per group.
pub fn align_train(image: &AttendedFeatures, sentence: &AttendedFeatures, config: &AlignConfig) -> Result<(AlignmentParams, Vec<AlignLog>)> {
    let d_f = image.objects.ncols();
    let mut params = AlignmentParams::new(d_f, config)?;
    params.check_features(image)?;
    params.check_features(sentence)?;
    if image.is_empty() || sentence.is_empty() {
        return Err(Error::EmptyInput("alignment needs image and sentence features".into()));
    }
    let settings = config.settings();
    let mut r = rng(config.seed.wrapping_add(1));
    let groups = params.groups.len();
    let mut disc_opt: Vec<Adam> = (0..groups).map(|_| Adam::new(config.adam)).collect();
    let mut map_opt: Vec<Adam> = (0..groups).map(|_| Adam::new(config.adam)).collect();
    let mut logs = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let rows_i = sample_rows(image.len(), config.batch_size, &mut r);
        let rows_s = sample_rows(sentence.len(), config.batch_size, &mut r);
        let inputs_i = params.group_inputs(image, &rows_i);
        let inputs_s = params.group_inputs(sentence, &rows_s);
        let mut parts = Vec::with_capacity(groups);
        let mut disc = 0.0;
        for (g, (bi, bs)) in inputs_i.iter().zip(&inputs_s).enumerate() {
            let rows = bi.nrows();
            for _ in 0..config.disc_steps {
                let eps_is: Vec<f64> = (0..rows).map(|_| r.random::<f64>()).collect();
                let eps_si: Vec<f64> = (0..rows).map(|_| r.random::<f64>()).collect();
                let step = discriminator_step(&params.groups[g], bi, bs, settings, &eps_is, &eps_si)?;
                disc_opt[g].step(params.groups[g].discriminators_mut(), &step.grads, config.learning_rate);
                disc = step.loss;
            }
            let (losses, step) = mapper_step(&params.groups[g], bi, bs, settings)?;
            map_opt[g].step(params.groups[g].mappers_mut(), &step.grads, config.learning_rate);
            parts.push(losses);
        }
        let gan_is = parts.iter().map(|p| p.gan_is).sum();
        let gan_si = parts.iter().map(|p| p.gan_si).sum();
        let cycle = parts.iter().map(|p| p.cycle).sum();
        let total = parts.iter().map(|p| p.total(config.lambda)).sum();
        logs.push(AlignLog {
            step,
            gan_is,
            gan_si,
            cycle,
            total,
            disc,
            parts,
        });
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("alignment parameters after training".into()));
    }
    params.trained = true;
    Ok((params, logs))
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy.

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise Euclidean distance between distinct rows of `x`.
pub fn median_bandwidth(x: &Mat) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::EmptyInput("bandwidth needs at least two rows".into()));
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Square root of the biased MMD² estimate under the RBF kernel
/// `exp(−||a − b||² / (2σ²))`.
pub fn mmd(x: &Mat, y: &Mat, sigma: f64) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::EmptyInput("MMD of an empty sample".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!("samples have widths {} and {}", x.ncols(), y.ncols())));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth {sigma} must be positive")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |a: &Mat, b: &Mat| {
        let mut s = 0.0;
        for ra in a.rows() {
            for rb in b.rows() {
                s += (-gamma * sq_dist(ra, rb)).exp();
            }
        }
        s / (a.nrows() * b.nrows()) as f64
    };
    let m2 = mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y);
    Ok(m2.max(0.0).sqrt())
}
