//! Attention over the three feature sets, triplet fusion and the two-layer
//! LSTM sentence decoder.
//!
//! Layer 1 reads `[word(prev), f_ora, h2, h1]`; layer 2 reads
//! `[f_ora, h1_t, h2]`, so the fused triplet embedding is seen at every step.
//! Logits are `h2_t W_o + b_o`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Axis};
use rand::Rng;
use sgalign_autodiff::{Mat, Tape, Var};

use crate::error::{Error, Result};
use crate::nn::{lstm_step, uniform, Linear, LinearVars, LstmCell, Parameters};
use crate::vocab::{BOS, EOS, MAX_CAPTION_LEN, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionVariant {
    /// Unweighted mean of each feature set.
    Avg,
    /// One attention vector shared by objects, relations and attributes.
    Shared,
    /// A separate attention vector per feature kind.
    Separate,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [Self::Avg, Self::Shared, Self::Separate];

    fn vectors(self) -> usize {
        match self {
            Self::Avg => 0,
            Self::Shared => 1,
            Self::Separate => 3,
        }
    }

    /// Name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Avg => "Avg",
            Self::Shared => "Att*",
            Self::Separate => "Att",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Avg => "avg",
            Self::Shared => "att-shared",
            Self::Separate => "att",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Self::Avg),
            "att-shared" | "att*" => Ok(Self::Shared),
            "att" => Ok(Self::Separate),
            _ => Err(Error::Config(format!("unknown decoder variant `{s}`"))),
        }
    }
}

/// The three feature kinds, in the order used for fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Object,
    Relation,
    Attribute,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [Self::Object, Self::Relation, Self::Attribute];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::Object => "o",
            Self::Relation => "r",
            Self::Attribute => "a",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub variant: AttentionVariant,
    /// `d_f x 1` columns: none for Avg, one for Shared, o/r/a for Separate.
    pub attention: Vec<Mat>,
    pub fuse: Linear,
    pub word_embedding: Mat,
    pub lstm1: LstmCell,
    pub lstm2: LstmCell,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub attention: Vec<Var>,
    pub fuse: LinearVars,
    pub word_embedding: Var,
    pub lstm1: LinearVars,
    pub lstm2: LinearVars,
    pub output: LinearVars,
    pub hidden: usize,
}

impl DecoderVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.attention.clone();
        out.extend(self.fuse.vars());
        out.push(self.word_embedding);
        for l in [&self.lstm1, &self.lstm2, &self.output] {
            out.extend(l.vars());
        }
        out
    }

    fn attention_for(&self, kind: FeatureKind) -> Option<Var> {
        match self.attention.len() {
            0 => None,
            1 => Some(self.attention[0]),
            _ => Some(self.attention[kind.index()]),
        }
    }
}

impl DecoderParams {
    /// Word embeddings have width `d_h`.
    pub fn new(variant: AttentionVariant, d_f: usize, d_h: usize, vocab_size: usize, rng: &mut impl Rng) -> Self {
        Self {
            variant,
            attention: (0..variant.vectors()).map(|_| uniform(d_f, 1, 0.1, rng)).collect(),
            fuse: Linear::new(3 * d_f, d_f, rng),
            word_embedding: uniform(vocab_size, d_h, 0.1, rng),
            lstm1: LstmCell::new(2 * d_h + d_f, d_h, rng),
            lstm2: LstmCell::new(d_f + d_h, d_h, rng),
            output: Linear::new(d_h, vocab_size, rng),
        }
    }

    pub fn d_f(&self) -> usize {
        self.fuse.output_dim()
    }

    pub fn d_h(&self) -> usize {
        self.lstm1.hidden()
    }

    pub fn vocab_size(&self) -> usize {
        self.output.output_dim()
    }

    pub fn attention_vector(&self, kind: FeatureKind) -> Option<&Mat> {
        match self.attention.len() {
            0 => None,
            1 => Some(&self.attention[0]),
            _ => Some(&self.attention[kind.index()]),
        }
    }

    pub fn check(&self) -> Result<()> {
        let (d_f, d_h, v) = (self.d_f(), self.d_h(), self.vocab_size());
        let ok = self.attention.len() == self.variant.vectors()
            && self.attention.iter().all(|w| w.dim() == (d_f, 1))
            && self.fuse.input_dim() == 3 * d_f
            && self.word_embedding.dim() == (v, d_h)
            && self.lstm1.input_dim() == 2 * d_h + d_f
            && self.lstm2.hidden() == d_h
            && self.lstm2.input_dim() == d_f + d_h
            && self.output.input_dim() == d_h;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("decoder parameter shapes are inconsistent".into()))
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> DecoderVars {
        DecoderVars {
            attention: self.attention.iter().map(|w| tape.param(w)).collect(),
            fuse: self.fuse.bind(tape),
            word_embedding: tape.param(&self.word_embedding),
            lstm1: self.lstm1.gates.bind(tape),
            lstm2: self.lstm2.gates.bind(tape),
            output: self.output.bind(tape),
            hidden: self.d_h(),
        }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> DecoderVars {
        DecoderVars {
            attention: self.attention.iter().map(|w| tape.constant_ref(w)).collect(),
            fuse: self.fuse.bind_frozen(tape),
            word_embedding: tape.constant_ref(&self.word_embedding),
            lstm1: self.lstm1.gates.bind_frozen(tape),
            lstm2: self.lstm2.gates.bind_frozen(tape),
            output: self.output.bind_frozen(tape),
            hidden: self.d_h(),
        }
    }
}

impl Parameters for DecoderParams {
    fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = self
            .attention
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("decoder.attention.{i}"), w))
            .collect();
        out.extend(self.fuse.named_params("decoder.fuse"));
        out.push(("decoder.word_embedding".into(), &self.word_embedding));
        out.extend(self.lstm1.gates.named_params("decoder.lstm1"));
        out.extend(self.lstm2.gates.named_params("decoder.lstm2"));
        out.extend(self.output.named_params("decoder.output"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = self.attention.iter_mut().collect();
        out.extend(self.fuse.params_mut());
        out.push(&mut self.word_embedding);
        out.extend(self.lstm1.gates.params_mut());
        out.extend(self.lstm2.gates.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

// ---------------------------------------------------------------------------
// Tape operations used for training.

/// Attends over stacked feature rows grouped into `n` sets by `segments`.
/// Returns `n x d` pooled features.
pub fn attend_on_tape(tape: &mut Tape, x: Var, w: Option<Var>, segments: &[usize], n: usize) -> Var {
    let alpha = match w {
        Some(w) => {
            let scores = tape.matmul(x, w);
            tape.segment_softmax(scores, segments, n)
        }
        None => {
            let mut counts = vec![0usize; n];
            for &s in segments {
                counts[s] += 1;
            }
            tape.constant(Mat::from_shape_fn((segments.len(), 1), |(i, _)| {
                1.0 / counts[segments[i]] as f64
            }))
        }
    };
    let weighted = tape.mul(x, alpha);
    tape.segment_sum(weighted, segments, n)
}

/// Attended `[f_o, f_r, f_a]` for an encoded batch.
pub fn attend_batch(tape: &mut Tape, vars: &DecoderVars, batch: &crate::encoder::EncodedBatch) -> [Var; 3] {
    let n = batch.graphs;
    let f_o = attend_on_tape(tape, batch.objects, vars.attention_for(FeatureKind::Object), &batch.object_graph, n);
    let f_r = attend_on_tape(
        tape,
        batch.relations,
        vars.attention_for(FeatureKind::Relation),
        &batch.relation_graph,
        n,
    );
    let f_a = attend_on_tape(
        tape,
        batch.attributes,
        vars.attention_for(FeatureKind::Attribute),
        &batch.object_graph,
        n,
    );
    [f_o, f_r, f_a]
}

pub fn fuse_on_tape(tape: &mut Tape, vars: &DecoderVars, features: [Var; 3]) -> Var {
    let cat = tape.concat_cols(&features);
    let z = vars.fuse.forward(tape, cat);
    tape.relu(z)
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

impl StateVars {
    pub fn zeros(tape: &mut Tape, rows: usize, hidden: usize) -> Self {
        let mut z = || tape.constant(Mat::zeros((rows, hidden)));
        Self {
            h1: z(),
            c1: z(),
            h2: z(),
            c2: z(),
        }
    }
}

/// One decoder step for every row; returns logits and the next state.
pub fn step_on_tape(tape: &mut Tape, vars: &DecoderVars, f_ora: Var, state: StateVars, prev: &[usize]) -> (Var, StateVars) {
    let words = tape.gather_rows(vars.word_embedding, prev);
    let in1 = tape.concat_cols(&[words, f_ora, state.h2, state.h1]);
    let (h1, c1) = lstm_step(tape, &vars.lstm1, vars.hidden, in1, state.c1);
    let in2 = tape.concat_cols(&[f_ora, h1, state.h2]);
    let (h2, c2) = lstm_step(tape, &vars.lstm2, vars.hidden, in2, state.c2);
    let logits = vars.output.forward(tape, h2);
    (logits, StateVars { h1, c1, h2, c2 })
}

/// `Σ_b weights[b] · Σ_t −log p(target_t | target_<t)` under teacher
/// forcing. Each target sequence excludes BOS and EOS; EOS is appended as
/// the final target unless the sequence already has `max_len` tokens.
pub fn teacher_forced_nll(
    tape: &mut Tape,
    vars: &DecoderVars,
    f_ora: Var,
    targets: &[Vec<usize>],
    weights: &[f64],
    max_len: usize,
) -> Var {
    let rows = targets.len();
    let steps = targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let mut state = StateVars::zeros(tape, rows, vars.hidden);
    let mut outputs = Vec::with_capacity(steps);
    let mut picks = Vec::with_capacity(steps * rows);
    let mut pick_weights = Vec::with_capacity(steps * rows);
    for t in 0..steps {
        let prev: Vec<usize> = targets
            .iter()
            .map(|s| if t == 0 { BOS } else { s.get(t - 1).copied().unwrap_or(PAD) })
            .collect();
        let (_, next) = step_on_tape(tape, vars, f_ora, state, &prev);
        state = next;
        outputs.push(state.h2);
        for (s, &w) in targets.iter().zip(weights) {
            match t.cmp(&s.len()) {
                std::cmp::Ordering::Less => {
                    picks.push(s[t]);
                    pick_weights.push(-w);
                }
                std::cmp::Ordering::Equal if s.len() < max_len => {
                    picks.push(EOS);
                    pick_weights.push(-w);
                }
                _ => {
                    picks.push(PAD);
                    pick_weights.push(0.0);
                }
            }
        }
    }
    let hidden = tape.concat_rows(&outputs);
    let logits = vars.output.forward(tape, hidden);
    let logp = tape.log_softmax_rows(logits);
    tape.pick_sum(logp, &picks, &pick_weights)
}

// ---------------------------------------------------------------------------
// Plain evaluation for inference.

/// Attends over one feature set. Returns the pooled `1 x d` feature and the
/// attention weights.
pub fn attend(x: &Mat, w: Option<&Mat>) -> Result<(Mat, Vec<f64>)> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("attention over an empty feature set".into()));
    }
    let alpha: Vec<f64> = match w {
        None => vec![1.0 / x.nrows() as f64; x.nrows()],
        Some(w) => {
            if w.nrows() != x.ncols() {
                return Err(Error::Dimension(format!(
                    "attention vector has {} entries, features have {}",
                    w.nrows(),
                    x.ncols()
                )));
            }
            let scores = x.dot(w).column(0).to_vec();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            exp.into_iter().map(|e| e / z).collect()
        }
    };
    let mut f = Mat::zeros((1, x.ncols()));
    for (row, a) in x.outer_iter().zip(&alpha) {
        f.row_mut(0).scaled_add(*a, &row);
    }
    Ok((f, alpha))
}

/// `f_ora = ReLU([f_o, f_r, f_a] W + b)`, row-wise.
pub fn fuse(f_o: &Mat, f_r: &Mat, f_a: &Mat, params: &DecoderParams) -> Result<Mat> {
    let d_f = params.d_f();
    for f in [f_o, f_r, f_a] {
        if f.ncols() != d_f || f.nrows() != f_o.nrows() {
            return Err(Error::Dimension(format!(
                "fusion expects rows of width {d_f}, got {}x{}",
                f.nrows(),
                f.ncols()
            )));
        }
    }
    let cat = ndarray::concatenate(Axis(1), &[f_o.view(), f_r.view(), f_a.view()]).expect("equal rows");
    Ok((cat.dot(&params.fuse.weight) + &params.fuse.bias).mapv(|v| v.max(0.0)))
}

/// Hidden and cell states of both layers, one row per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub h1: Mat,
    pub c1: Mat,
    pub h2: Mat,
    pub c2: Mat,
}

impl DecodeState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        let z = Mat::zeros((rows, hidden));
        Self {
            h1: z.clone(),
            c1: z.clone(),
            h2: z.clone(),
            c2: z,
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            h1: self.h1.select(Axis(0), rows),
            c1: self.c1.select(Axis(0), rows),
            h2: self.h2.select(Axis(0), rows),
            c2: self.c2.select(Axis(0), rows),
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.h1, &self.c1, &self.h2, &self.c2]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn lstm_forward(cell: &LstmCell, input: &Mat, c_prev: &Mat) -> (Mat, Mat) {
    let h = cell.hidden();
    let z = input.dot(&cell.gates.weight) + &cell.gates.bias;
    let i = z.slice(s![.., 0..h]).mapv(sigmoid);
    let f = z.slice(s![.., h..2 * h]).mapv(sigmoid);
    let g = z.slice(s![.., 2 * h..3 * h]).mapv(f64::tanh);
    let o = z.slice(s![.., 3 * h..4 * h]).mapv(sigmoid);
    let c = f * c_prev + i * g;
    let hidden = o * c.mapv(f64::tanh);
    (hidden, c)
}

fn check_tokens(tokens: &[usize], size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, size }),
        None => Ok(()),
    }
}

fn check_f_ora(f_ora: &Mat, params: &DecoderParams) -> Result<()> {
    if f_ora.ncols() != params.d_f() {
        return Err(Error::Dimension(format!(
            "f_ora has width {}, decoder expects {}",
            f_ora.ncols(),
            params.d_f()
        )));
    }
    Ok(())
}

/// Advances every row by one token. `f_ora` may be a single row shared by
/// all sequences or one row per sequence.
pub fn step_batch(f_ora: &Mat, state: &DecodeState, prev: &[usize], params: &DecoderParams) -> Result<(Mat, DecodeState)> {
    check_f_ora(f_ora, params)?;
    check_tokens(prev, params.vocab_size())?;
    let rows = prev.len();
    if state.h1.nrows() != rows || (f_ora.nrows() != rows && f_ora.nrows() != 1) {
        return Err(Error::Dimension("state, f_ora and token rows disagree".into()));
    }
    let words = params.word_embedding.select(Axis(0), prev);
    let f = if f_ora.nrows() == rows {
        f_ora.clone()
    } else {
        f_ora.broadcast((rows, f_ora.ncols())).expect("single row").to_owned()
    };
    let in1 = ndarray::concatenate(Axis(1), &[words.view(), f.view(), state.h2.view(), state.h1.view()]).expect("rows agree");
    let (h1, c1) = lstm_forward(&params.lstm1, &in1, &state.c1);
    let in2 = ndarray::concatenate(Axis(1), &[f.view(), h1.view(), state.h2.view()]).expect("rows agree");
    let (h2, c2) = lstm_forward(&params.lstm2, &in2, &state.c2);
    let logits = h2.dot(&params.output.weight) + &params.output.bias;
    Ok((logits, DecodeState { h1, c1, h2, c2 }))
}

/// Single-sequence step.
pub fn step(f_ora: &Mat, state: &DecodeState, prev_token: usize, params: &DecoderParams) -> Result<(Mat, DecodeState)> {
    step_batch(f_ora, state, &[prev_token], params)
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding for each row of `f_ora`. Returned sequences exclude BOS
/// and EOS.
pub fn greedy_decode_batch(f_ora: &Mat, params: &DecoderParams, max_len: usize) -> Result<Vec<Vec<usize>>> {
    check_f_ora(f_ora, params)?;
    let n = f_ora.nrows();
    let mut out = vec![Vec::new(); n];
    let mut live: Vec<usize> = (0..n).collect();
    let mut state = DecodeState::zeros(n, params.d_h());
    let mut prev = vec![BOS; n];
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let f = f_ora.select(Axis(0), &live);
        let (logits, next) = step_batch(&f, &state, &prev, params)?;
        let mut keep = Vec::new();
        let mut next_prev = Vec::new();
        for (r, &item) in live.iter().enumerate() {
            let tok = argmax(logits.row(r));
            if tok != EOS {
                out[item].push(tok);
                keep.push(r);
                next_prev.push(tok);
            }
        }
        state = next.select(&keep);
        live = keep.iter().map(|&r| live[r]).collect();
        prev = next_prev;
    }
    Ok(out)
}

pub fn greedy_decode(f_ora: &Mat, params: &DecoderParams, max_len: usize) -> Result<Vec<usize>> {
    single_row(f_ora)?;
    Ok(greedy_decode_batch(f_ora, params, max_len)?.remove(0))
}

fn single_row(f_ora: &Mat) -> Result<()> {
    if f_ora.nrows() != 1 {
        return Err(Error::Dimension(format!("expected one f_ora row, got {}", f_ora.nrows())));
    }
    Ok(())
}

/// Samples one sequence per row from the model distribution.
pub fn sample_batch(f_ora: &Mat, params: &DecoderParams, max_len: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    check_f_ora(f_ora, params)?;
    let n = f_ora.nrows();
    let mut out = vec![Vec::new(); n];
    let mut live: Vec<usize> = (0..n).collect();
    let mut state = DecodeState::zeros(n, params.d_h());
    let mut prev = vec![BOS; n];
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let f = f_ora.select(Axis(0), &live);
        let (logits, next) = step_batch(&f, &state, &prev, params)?;
        let logp = log_softmax(&logits);
        let mut keep = Vec::new();
        let mut next_prev = Vec::new();
        for (r, &item) in live.iter().enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = logp.ncols() - 1;
            for (i, lp) in logp.row(r).iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    tok = i;
                    break;
                }
            }
            if tok != EOS {
                out[item].push(tok);
                keep.push(r);
                next_prev.push(tok);
            }
        }
        state = next.select(&keep);
        live = keep.iter().map(|&r| live[r]).collect();
        prev = next_prev;
    }
    Ok(out)
}

/// Log-probability of emitting `tokens` (then EOS, unless the sequence is
/// already `max_len` long).
pub fn sequence_log_prob(f_ora: &Mat, tokens: &[usize], params: &DecoderParams, max_len: usize) -> Result<f64> {
    single_row(f_ora)?;
    check_tokens(tokens, params.vocab_size())?;
    let mut state = DecodeState::zeros(1, params.d_h());
    let mut prev = BOS;
    let mut total = 0.0;
    let mut targets = tokens.to_vec();
    if tokens.len() < max_len {
        targets.push(EOS);
    }
    for &t in &targets {
        let (logits, next) = step(f_ora, &state, prev, params)?;
        total += log_softmax(&logits)[[0, t]];
        state = next;
        prev = t;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Beam search over summed log-probabilities without length normalization.
/// Each step keeps the `beam` best extensions of the live hypotheses; an
/// extension by EOS finishes a hypothesis and still takes up one of the
/// slots. Ties are broken by lower token id.
pub fn beam_decode(f_ora: &Mat, params: &DecoderParams, beam: usize, max_len: usize) -> Result<Hypothesis> {
    beam_search(f_ora, params, beam, max_len, false)
}

/// Emitted length of a hypothesis, counting the EOS that ended it.
fn emitted_len(h: &Hypothesis, max_len: usize) -> f64 {
    (h.tokens.len() + usize::from(h.tokens.len() < max_len)).max(1) as f64
}

/// [`beam_decode`], optionally choosing the final hypothesis by mean
/// log-probability per emitted token. With normalization the search runs
/// until every hypothesis has finished or hit `max_len`. The returned
/// `log_prob` is always the unnormalized sum.
pub fn beam_search(f_ora: &Mat, params: &DecoderParams, beam: usize, max_len: usize, length_normalize: bool) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    single_row(f_ora)?;
    check_f_ora(f_ora, params)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut state = DecodeState::zeros(1, params.d_h());
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (logits, next) = step_batch(f_ora, &state, &prev, params)?;
        let logp = log_softmax(&logits);
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * logp.ncols());
        for (r, h) in live.iter().enumerate() {
            for (tok, lp) in logp.row(r).iter().enumerate() {
                candidates.push((h.log_prob + lp, r, tok));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let mut next_live = Vec::new();
        let mut rows = Vec::new();
        for &(score, r, tok) in candidates.iter().take(beam) {
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: live[r].tokens.clone(),
                    log_prob: score,
                });
            } else {
                let mut tokens = live[r].tokens.clone();
                tokens.push(tok);
                next_live.push(Hypothesis { tokens, log_prob: score });
                rows.push(r);
            }
        }
        state = next.select(&rows);
        live = next_live;
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!length_normalize && best_finished >= best_live) {
            break;
        }
    }
    finished.extend(live);
    let rank = |h: &Hypothesis| {
        if length_normalize {
            h.log_prob / emitted_len(h, max_len)
        } else {
            h.log_prob
        }
    };
    let best = finished
        .into_iter()
        .reduce(|a, b| if rank(&b) > rank(&a) { b } else { a })
        .expect("at least one hypothesis");
    Ok(best)
}

/// Decodes every row of `f_ora`, with greedy search when `beam` is 1.
pub fn decode_batch(f_ora: &Mat, params: &DecoderParams, beam: usize) -> Result<Vec<Vec<usize>>> {
    decode_batch_with(f_ora, params, beam, false)
}

pub fn decode_batch_with(f_ora: &Mat, params: &DecoderParams, beam: usize, length_normalize: bool) -> Result<Vec<Vec<usize>>> {
    if beam <= 1 {
        return greedy_decode_batch(f_ora, params, MAX_CAPTION_LEN);
    }
    f_ora
        .outer_iter()
        .map(|row| {
            let row = row.insert_axis(Axis(0)).to_owned();
            beam_search(&row, params, beam, MAX_CAPTION_LEN, length_normalize).map(|h| h.tokens)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng;
    use ndarray::array;

    fn zero_params(variant: AttentionVariant, d_f: usize, d_h: usize, v: usize) -> DecoderParams {
        let mut p = DecoderParams::new(variant, d_f, d_h, v, &mut rng(0));
        for m in p.params_mut() {
            m.fill(0.0);
        }
        p
    }

    #[test]
    fn attend_singleton_and_symmetry() {
        let x = array![[1.0, 2.0]];
        let w = array![[0.3], [-0.7]];
        let (f, a) = attend(&x, Some(&w)).unwrap();
        assert_eq!(f, x);
        assert_eq!(a, vec![1.0]);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let (_, a) = attend(&x, Some(&array![[2.0], [2.0]])).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }

    #[test]
    fn attend_hand_softmax() {
        // scores [0, ln 3] through w = e_1
        let x = array![[0.0, 4.0], [3f64.ln(), 8.0]];
        let (f, a) = attend(&x, Some(&array![[1.0], [0.0]])).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-12 && (a[1] - 0.75).abs() < 1e-12);
        assert!((f[[0, 1]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn attend_avg_and_errors() {
        let x = array![[1.0, 3.0], [3.0, 5.0]];
        assert_eq!(attend(&x, None).unwrap().0, array![[2.0, 4.0]]);
        assert!(matches!(attend(&Mat::zeros((0, 2)), None), Err(Error::EmptyInput(_))));
        assert!(matches!(attend(&x, Some(&array![[1.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_is_shift_invariant() {
        // adding c·u with w·u = 1 to every row shifts every score by c
        let x = array![[0.2, 1.0], [0.5, -1.0], [1.5, 0.3]];
        let w = array![[1.0], [0.0]];
        let shifted = &x + &array![[5.0, 0.0]];
        let (_, a) = attend(&x, Some(&w)).unwrap();
        let (_, b) = attend(&shifted, Some(&w)).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_cases() {
        let mut p = zero_params(AttentionVariant::Separate, 2, 3, 5);
        let z = Mat::zeros((1, 2));
        assert_eq!(fuse(&z, &z, &z, &p).unwrap(), z);
        // W stacks three identities scaled by 1/3: output is the mean
        let third = Mat::eye(2) / 3.0;
        p.fuse.weight = ndarray::concatenate(Axis(0), &[third.view(), third.view(), third.view()]).unwrap();
        let f = fuse(&array![[3.0, 6.0]], &array![[0.0, 3.0]], &array![[6.0, -12.0]], &p).unwrap();
        assert!((f[[0, 0]] - 3.0).abs() < 1e-12);
        assert_eq!(f[[0, 1]], 0.0);
        assert!(matches!(fuse(&z, &z, &Mat::zeros((1, 3)), &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let p = zero_params(AttentionVariant::Avg, 3, 4, 7);
        let (logits, state) = step(&Mat::ones((1, 3)), &DecodeState::zeros(1, 4), BOS, &p).unwrap();
        let probs = log_softmax(&logits).mapv(f64::exp);
        assert!(probs.iter().all(|&q| (q - 1.0 / 7.0).abs() < 1e-12));
        assert!(state.is_finite());
        assert!(matches!(
            step(&Mat::ones((1, 3)), &DecodeState::zeros(1, 4), 7, &p),
            Err(Error::TokenOutOfRange { id: 7, size: 7 })
        ));
    }

    #[test]
    fn softmax_sums_to_one_for_random_params() {
        for seed in 0..5 {
            let p = DecoderParams::new(AttentionVariant::Separate, 4, 5, 9, &mut rng(seed));
            let f = uniform(1, 4, 1.0, &mut rng(seed + 100));
            let (logits, _) = step(&f, &DecodeState::zeros(1, 5), BOS, &p).unwrap();
            let total: f64 = log_softmax(&logits).mapv(f64::exp).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    /// Hand evaluation with d_h = 1, d_f = 1, two-word vocabulary.
    #[test]
    fn tiny_step_golden() {
        let mut p = zero_params(AttentionVariant::Avg, 1, 1, 5);
        // layer 1 candidate gate reads the word embedding; input gate bias 0
        p.word_embedding = array![[0.0], [1.0], [0.0], [0.0], [0.0]];
        p.lstm1.gates.weight[[0, 2]] = 1.0;
        // layer 2 candidate reads f_ora
        p.lstm2.gates.weight[[0, 2]] = 1.0;
        p.output.weight = array![[1.0, -1.0, 0.0, 0.0, 0.0]];
        let (logits, s) = step(&array![[2.0]], &DecodeState::zeros(1, 1), BOS, &p).unwrap();
        let c1 = 0.5 * 1f64.tanh();
        let h1 = 0.5 * c1.tanh();
        let c2 = 0.5 * 2f64.tanh();
        let h2 = 0.5 * c2.tanh();
        assert!((s.c1[[0, 0]] - c1).abs() < 1e-12);
        assert!((s.h1[[0, 0]] - h1).abs() < 1e-12);
        assert!((s.h2[[0, 0]] - h2).abs() < 1e-12);
        assert!((logits[[0, 0]] - h2).abs() < 1e-12 && (logits[[0, 1]] + h2).abs() < 1e-12);
    }

    #[test]
    fn eos_at_first_step_gives_empty_caption() {
        let mut p = zero_params(AttentionVariant::Avg, 2, 2, 6);
        p.output.bias[[0, EOS]] = 5.0;
        let f = Mat::ones((1, 2));
        assert!(greedy_decode(&f, &p, 16).unwrap().is_empty());
        assert!(beam_decode(&f, &p, 5, 16).unwrap().tokens.is_empty());
    }

    #[test]
    fn greedy_ties_pick_lowest_id_and_respect_max_len() {
        let mut p = zero_params(AttentionVariant::Avg, 2, 2, 6);
        p.output.bias[[0, 4]] = 1.0;
        p.output.bias[[0, 5]] = 1.0;
        let f = Mat::ones((1, 2));
        assert_eq!(greedy_decode(&f, &p, 3).unwrap(), vec![4, 4, 4]);
    }

    /// Hand-built model whose next-token distribution depends only on the
    /// previous token. Vocabulary: pad bos eos A B.
    fn two_step_model() -> DecoderParams {
        let mut p = zero_params(AttentionVariant::Avg, 1, 3, 5);
        let big = 30.0;
        // h1 ≈ o·tanh(i·g) with saturated gates encodes the previous word
        p.word_embedding = Mat::zeros((5, 3));
        p.word_embedding[[BOS, 0]] = 1.0;
        p.word_embedding[[3, 1]] = 1.0;
        p.word_embedding[[4, 2]] = 1.0;
        for k in 0..3 {
            p.lstm1.gates.bias[[0, k]] = big; // input gate open
            p.lstm1.gates.bias[[0, 3 + k]] = -big; // forget gate closed
            p.lstm1.gates.bias[[0, 9 + k]] = big; // output gate open
            p.lstm1.gates.weight[[k, 6 + k]] = big; // candidate = word one-hot
            // layer 2 copies h1 the same way; input is [f_ora, h1, h2]
            p.lstm2.gates.bias[[0, k]] = big;
            p.lstm2.gates.bias[[0, 3 + k]] = -big;
            p.lstm2.gates.bias[[0, 9 + k]] = big;
            p.lstm2.gates.weight[[1 + k, 6 + k]] = big;
        }
        let t = 1f64.tanh();
        // after BOS: A 0.4, B 0.35, EOS 0.25
        // after A: A/B/EOS 1/3 each; after B: EOS 0.9
        let rows = [
            (0, [0.25f64, 0.4, 0.35]),
            (1, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
            (2, [0.9, 0.05, 0.05]),
        ];
        for (h, probs) in rows {
            for (j, tok) in [EOS, 3, 4].into_iter().enumerate() {
                p.output.weight[[h, tok]] = probs[j].ln() / t;
            }
            p.output.weight[[h, 0]] = -1e3;
            p.output.weight[[h, BOS]] = -1e3;
        }
        p
    }

    #[test]
    fn beam_finds_sequence_greedy_misses() {
        let p = two_step_model();
        let f = Mat::zeros((1, 1));
        // enumerate all sequences of length ≤ 2 over {A, B}
        let mut best = (f64::NEG_INFINITY, vec![]);
        let mut all = vec![vec![]];
        for a in [3, 4] {
            all.push(vec![a]);
            for b in [3, 4] {
                all.push(vec![a, b]);
            }
        }
        for s in &all {
            let lp = sequence_log_prob(&f, s, &p, 2).unwrap();
            if lp > best.0 {
                best = (lp, s.clone());
            }
        }
        assert_eq!(best.1, vec![4]);
        let greedy = greedy_decode(&f, &p, 2).unwrap();
        assert_eq!(greedy[0], 3);
        let greedy_lp = sequence_log_prob(&f, &greedy, &p, 2).unwrap();
        let beam = beam_decode(&f, &p, 3, 2).unwrap();
        assert_eq!(beam.tokens, vec![4]);
        assert!((beam.log_prob - best.0).abs() < 1e-9);
        assert!(beam.log_prob > greedy_lp);
        assert!((best.0 - (0.35f64 * 0.9).ln()).abs() < 1e-6);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..100 {
            let p = DecoderParams::new(AttentionVariant::Separate, 3, 4, 8, &mut rng(seed));
            let f = uniform(1, 3, 2.0, &mut rng(seed + 1000));
            let g = greedy_decode(&f, &p, 16).unwrap();
            let b = beam_decode(&f, &p, 1, 16).unwrap();
            assert_eq!(g, b.tokens, "seed {seed}");
            let lp = sequence_log_prob(&f, &g, &p, 16).unwrap();
            assert!((lp - b.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn length_normalization_prefers_higher_mean_log_prob() {
        let mut normalized_differs = false;
        for seed in 0..50 {
            let p = DecoderParams::new(AttentionVariant::Separate, 3, 4, 6, &mut rng(seed));
            let f = uniform(1, 3, 2.0, &mut rng(seed + 700));
            let raw = beam_search(&f, &p, 4, 16, false).unwrap();
            let norm = beam_search(&f, &p, 4, 16, true).unwrap();
            assert_eq!(raw, beam_decode(&f, &p, 4, 16).unwrap());
            assert!(norm.log_prob <= raw.log_prob + 1e-12);
            let mean = |h: &Hypothesis| h.log_prob / emitted_len(h, 16);
            assert!(mean(&norm) >= mean(&raw) - 1e-12, "seed {seed}");
            let lp = sequence_log_prob(&f, &norm.tokens, &p, 16).unwrap();
            assert!((lp - norm.log_prob).abs() < 1e-9);
            normalized_differs |= norm.tokens != raw.tokens;
        }
        assert!(normalized_differs);
    }

    #[test]
    fn wider_beams_never_score_lower() {
        for seed in 0..50 {
            let p = DecoderParams::new(AttentionVariant::Shared, 3, 4, 6, &mut rng(seed));
            let f = uniform(1, 3, 2.0, &mut rng(seed + 500));
            let mut last = f64::NEG_INFINITY;
            for k in 1..=5 {
                let h = beam_decode(&f, &p, k, 16).unwrap();
                assert!(h.log_prob >= last - 1e-12, "seed {seed} beam {k}");
                last = h.log_prob;
            }
        }
    }

    #[test]
    fn beam_zero_is_an_error() {
        let p = zero_params(AttentionVariant::Avg, 2, 2, 5);
        assert!(beam_decode(&Mat::zeros((1, 2)), &p, 0, 16).is_err());
    }

    #[test]
    fn batch_greedy_matches_single() {
        let p = DecoderParams::new(AttentionVariant::Separate, 3, 4, 8, &mut rng(3));
        let f = uniform(4, 3, 2.0, &mut rng(4));
        let batch = greedy_decode_batch(&f, &p, 16).unwrap();
        for (i, seq) in batch.iter().enumerate() {
            let row = f.slice(s![i..i + 1, ..]).to_owned();
            assert_eq!(&greedy_decode(&row, &p, 16).unwrap(), seq);
        }
    }

    #[test]
    fn shared_equals_separate_with_tied_vectors() {
        let shared = DecoderParams::new(AttentionVariant::Shared, 3, 4, 8, &mut rng(7));
        let mut sep = shared.clone();
        sep.variant = AttentionVariant::Separate;
        sep.attention = vec![shared.attention[0].clone(); 3];
        let x = uniform(5, 3, 1.0, &mut rng(8));
        for kind in FeatureKind::ALL {
            let a = attend(&x, shared.attention_vector(kind)).unwrap();
            let b = attend(&x, sep.attention_vector(kind)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tape_step_matches_plain_step() {
        let p = DecoderParams::new(AttentionVariant::Separate, 3, 4, 8, &mut rng(11));
        let f = uniform(2, 3, 1.0, &mut rng(12));
        let mut t = Tape::new();
        let vars = p.bind_frozen(&mut t);
        let fv = t.constant(f.clone());
        let s0 = StateVars::zeros(&mut t, 2, 4);
        let (l1, s1) = step_on_tape(&mut t, &vars, fv, s0, &[BOS, BOS]);
        let (l2, _) = step_on_tape(&mut t, &vars, fv, s1, &[5, 6]);
        let (p1, st) = step_batch(&f, &DecodeState::zeros(2, 4), &[BOS, BOS], &p).unwrap();
        let (p2, _) = step_batch(&f, &st, &[5, 6], &p).unwrap();
        assert!((t.value(l1) - &p1).iter().all(|d| d.abs() < 1e-12));
        assert!((t.value(l2) - &p2).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn teacher_forced_nll_matches_sequence_log_prob() {
        let p = DecoderParams::new(AttentionVariant::Avg, 3, 4, 8, &mut rng(13));
        let f = uniform(2, 3, 1.0, &mut rng(14));
        let targets = vec![vec![5, 6, 7], vec![4]];
        let mut t = Tape::new();
        let vars = p.bind_frozen(&mut t);
        let fv = t.constant(f.clone());
        let nll = teacher_forced_nll(&mut t, &vars, fv, &targets, &[1.0, 2.0], 16);
        let row = |i: usize| f.slice(s![i..i + 1, ..]).to_owned();
        let expected = -sequence_log_prob(&row(0), &targets[0], &p, 16).unwrap()
            - 2.0 * sequence_log_prob(&row(1), &targets[1], &p, 16).unwrap();
        assert!((t.scalar(nll) - expected).abs() < 1e-9);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AttentionVariant::ALL {
            assert_eq!(v.to_string().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("lstm".parse::<AttentionVariant>().is_err());
    }
}
