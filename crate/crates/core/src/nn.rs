//! Layers, parameter bookkeeping and the Adam optimizer.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgalign_autodiff::{Gradients, Mat, Tape, Var};

/// Seeded generator used everywhere randomness enters the pipeline.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for item `index` of a seeded run.
pub fn derived_rng(seed: u64, index: u64) -> SeededRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index.wrapping_add(1));
    r
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Something that owns trainable matrices in a fixed order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Mat)>;
    fn params_mut(&mut self) -> Vec<&mut Mat>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }
}

/// Collects gradients for `vars` (zeros where a var got none), in order.
pub fn collect_grads(grads: &mut Gradients, tape: &Tape, vars: &[Var]) -> Vec<Mat> {
    vars.iter()
        .map(|&v| match grads.take(v) {
            Some(g) if g.is_standard_layout() => g,
            Some(g) => g.as_standard_layout().into_owned(),
            None => Mat::zeros(tape.shape(v)),
        })
        .collect()
}

/// Fully-connected layer `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform(input, output, bound, rng),
            bias: uniform(1, output, bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Mat::zeros((input, output)),
            bias: Mat::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> LinearVars {
        LinearVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    /// Binds as constants, for frozen layers.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> LinearVars {
        LinearVars {
            weight: tape.constant_ref(&self.weight),
            bias: tape.constant_ref(&self.bias),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Mat)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.weight);
        tape.add(xw, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Standard four-gate LSTM cell over the concatenated `[input, h_prev]`.
/// Gate column order is input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub gates: Linear,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut gates = Linear::new(input + hidden, 4 * hidden, rng);
        gates.bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        Self { gates }
    }

    pub fn hidden(&self) -> usize {
        self.gates.output_dim() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.gates.input_dim() - self.hidden()
    }
}

/// One LSTM step on the tape. `input` already includes `h_prev`.
pub fn lstm_step(tape: &mut Tape, gates: &LinearVars, hidden: usize, input: Var, c_prev: Var) -> (Var, Var) {
    let z = gates.forward(tape, input);
    let i = tape.slice_cols(z, 0, hidden);
    let f = tape.slice_cols(z, hidden, hidden);
    let g = tape.slice_cols(z, 2 * hidden, hidden);
    let o = tape.slice_cols(z, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed);
    (h, c)
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
