use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

/// Dense row-major matrix of `f64`, the only value type on a [`Tape`].
pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    PickSum(Var, Vec<usize>, Vec<f64>),
    Sum(Var),
    SumAxis(Var),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// The lifetime ties borrowed parameters to the tape, so parameters cannot
/// be mutated while a tape that reads them is alive.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    let mut out = Mat::zeros(shape);
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.push(Cow::Owned(value), op, grad)
    }

    /// Borrows a trainable parameter onto the tape.
    pub fn param(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Owned trainable leaf, e.g. an input whose gradient is wanted.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product with row/column broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        self.push_op(value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push_op(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push_op(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push_op(value, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push_op(value, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.push_op(value, Op::Ln(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        self.push_op(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        self.push_op(value, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::sqrt);
        self.push_op(value, Op::Sqrt(x), &[x])
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        self.push_op(value, Op::Softplus(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push_op(value, Op::Transpose(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push_op(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push_op(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push_op(value, Op::SliceCols(x, start), &[x])
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros((index.len(), src.ncols()));
        for (mut row, &i) in value.rows_mut().into_iter().zip(index) {
            row.assign(&src.row(i));
        }
        self.push_op(value, Op::GatherRows(x, index.to_vec()), &[x])
    }

    /// Sums the rows of `x` into `n` buckets; row `i` lands in `segment[i]`.
    pub fn segment_sum(&mut self, x: Var, segment: &[usize], n: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows(), segment.len(), "segment_sum: one segment id per row");
        let mut value = Mat::zeros((n, src.ncols()));
        for (row, &k) in src.rows().into_iter().zip(segment) {
            let mut dst = value.row_mut(k);
            dst += &row;
        }
        self.push_op(value, Op::SegmentSum(x, segment.to_vec()), &[x])
    }

    /// Softmax of a column of scores taken independently within each segment.
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize], n: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.ncols(), 1, "segment_softmax expects an N x 1 column");
        assert_eq!(src.nrows(), segment.len(), "segment_softmax: one segment id per row");
        let mut max = vec![f64::NEG_INFINITY; n];
        for (i, &k) in segment.iter().enumerate() {
            max[k] = max[k].max(src[[i, 0]]);
        }
        let mut value = Mat::zeros((segment.len(), 1));
        let mut total = vec![0.0; n];
        for (i, &k) in segment.iter().enumerate() {
            let e = (src[[i, 0]] - max[k]).exp();
            value[[i, 0]] = e;
            total[k] += e;
        }
        for (i, &k) in segment.iter().enumerate() {
            value[[i, 0]] /= total[k];
        }
        self.push_op(value, Op::SegmentSoftmax(x, segment.to_vec()), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push_op(value, Op::LogSoftmaxRows(x), &[x])
    }

    /// `sum_i weight[i] * x[i, index[i]]` as a `1 x 1` node.
    pub fn pick_sum(&mut self, x: Var, index: &[usize], weight: &[f64]) -> Var {
        assert_eq!(index.len(), weight.len());
        let src = self.value(x);
        assert_eq!(src.nrows(), index.len(), "pick_sum: one index per row");
        let total: f64 = index
            .iter()
            .zip(weight)
            .enumerate()
            .map(|(i, (&j, &w))| if w == 0.0 { 0.0 } else { w * src[[i, j]] })
            .sum();
        self.push_op(
            Mat::from_elem((1, 1), total),
            Op::PickSum(x, index.to_vec(), weight.to_vec()),
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.push_op(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push_op(value, Op::SumAxis(x), &[x])
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward() needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a>, g: &Mat, grads: &mut [Option<Mat>]) {
        let wants = |v: Var| self.nodes[v.0].grad;
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if wants(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                }
                if wants(*b) {
                    let mut gb = reduce_to(g.clone(), self.shape(*b));
                    if matches!(node.op, Op::Sub(..)) {
                        gb.mapv_inplace(|v| -v);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = binary(g, self.value(*b), |x, y| x * y);
                    accumulate(grads, *a, reduce_to(ga, self.shape(*a)));
                }
                if wants(*b) {
                    let gb = binary(g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::Affine(x, k) => accumulate(grads, *x, g * *k),
            Op::Relu(x) => {
                let gx = binary(g, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = binary(g, self.value(*x), |g, v| if v > 0.0 { g } else { slope * g });
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => accumulate(grads, *x, binary(g, y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(x) => accumulate(grads, *x, binary(g, y, |g, y| g * (1.0 - y * y))),
            Op::Exp(x) => accumulate(grads, *x, g * y),
            Op::Ln(x) => accumulate(grads, *x, binary(g, self.value(*x), |g, v| g / v)),
            Op::Abs(x) => {
                let gx = binary(g, self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, gx);
            }
            Op::Square(x) => accumulate(grads, *x, binary(g, self.value(*x), |g, v| 2.0 * g * v)),
            Op::Sqrt(x) => accumulate(grads, *x, binary(g, y, |g, y| g / (2.0 * y))),
            Op::Softplus(x) => {
                accumulate(grads, *x, binary(g, self.value(*x), |g, v| g * sigmoid(v)));
            }
            Op::Transpose(x) => accumulate(grads, *x, g.t().to_owned()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = self.shape(p).1;
                    if wants(p) {
                        accumulate(grads, p, g.slice(s![.., start..start + width]).to_owned());
                    }
                    start += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let height = self.shape(p).0;
                    if wants(p) {
                        accumulate(grads, p, g.slice(s![start..start + height, ..]).to_owned());
                    }
                    start += height;
                }
            }
            Op::SliceCols(x, start) => {
                let mut gx = Mat::zeros(self.shape(*x));
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, index) => {
                let mut gx = Mat::zeros(self.shape(*x));
                for (row, &i) in g.rows().into_iter().zip(index) {
                    let mut dst = gx.row_mut(i);
                    dst += &row;
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentSum(x, segment) => {
                let mut gx = Mat::zeros(self.shape(*x));
                for (mut row, &k) in gx.rows_mut().into_iter().zip(segment) {
                    row.assign(&g.row(k));
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentSoftmax(x, segment) => {
                let n = segment.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n];
                for (i, &k) in segment.iter().enumerate() {
                    dot[k] += g[[i, 0]] * y[[i, 0]];
                }
                let mut gx = Mat::zeros(self.shape(*x));
                for (i, &k) in segment.iter().enumerate() {
                    gx[[i, 0]] = y[[i, 0]] * (g[[i, 0]] - dot[k]);
                }
                accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = g.clone();
                for ((mut out, grow), yrow) in gx.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                    let total = grow.sum();
                    Zip::from(&mut out).and(&yrow).for_each(|o, &ly| *o -= ly.exp() * total);
                }
                accumulate(grads, *x, gx);
            }
            Op::PickSum(x, index, weight) => {
                let mut gx = Mat::zeros(self.shape(*x));
                let g0 = g[[0, 0]];
                for (i, (&j, &w)) in index.iter().zip(weight).enumerate() {
                    gx[[i, j]] += g0 * w;
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => accumulate(grads, *x, Mat::from_elem(self.shape(*x), g[[0, 0]])),
            Op::SumAxis(x) => {
                let gx = g.broadcast(self.shape(*x)).expect("sum_axis grad").to_owned();
                accumulate(grads, *x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of `d f / d leaf` for every entry of `leaf`.
    fn check(leaf: Mat, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.leaf(leaf.clone());
        let out = f(&mut t, x);
        let grads = t.backward(out);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(leaf.dim()));
        let h = 1e-6;
        for idx in 0..leaf.len() {
            let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
            let eval = |delta: f64| {
                let mut m = leaf.clone();
                m[[r, c]] += delta;
                let mut t = Tape::new();
                let x = t.leaf(m);
                let out = f(&mut t, x);
                t.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry ({r},{c}): analytic {a} numeric {numeric}");
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |t, x| {
            let a = t.sigmoid(x);
            let b = t.tanh(x);
            let c = t.mul(a, b);
            let d = t.softplus(c);
            let e = t.exp(d);
            let f = t.leaky_relu(x, 0.2);
            let g = t.square(f);
            let h = t.add(e, g);
            let k = t.abs(x);
            let l = t.affine(k, 2.0, 1.0);
            let m = t.ln(l);
            let n = t.sqrt(l);
            let o = t.sub(h, m);
            let p = t.add(o, n);
            t.sum(p)
        });
    }

    #[test]
    fn broadcasting_binary_ops() {
        let bias = array![[0.5, -0.25, 2.0]];
        check(sample(), |t, x| {
            let b = t.constant(bias.clone());
            let y = t.mul(x, b);
            let col = t.sum_axis(x, 1);
            let z = t.sub(y, col);
            let row = t.sum_axis(x, 0);
            let w = t.add(z, row);
            let sq = t.square(w);
            t.mean(sq)
        });
        check(bias.clone(), |t, b| {
            let x = t.constant(sample());
            let y = t.mul(x, b);
            let z = t.add(y, b);
            let sq = t.square(z);
            t.sum(sq)
        });
    }

    #[test]
    fn matmul_transpose_and_slicing() {
        let w = array![[0.2, -0.4], [1.0, 0.3], [-0.7, 0.9]];
        check(sample(), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let yt = t.transpose(y);
            let z = t.matmul(yt, x);
            let left = t.slice_cols(z, 0, 2);
            let right = t.slice_cols(z, 1, 2);
            let c = t.concat_cols(&[left, right]);
            let stacked = t.concat_rows(&[left, right]);
            let wide = t.concat_cols(&[stacked, stacked]);
            let tall = t.concat_rows(&[c, c]);
            let r = t.add(wide, tall);
            let sq = t.square(r);
            t.sum(sq)
        });
        check(w.clone(), |t, wv| {
            let x = t.constant(sample());
            let y = t.matmul(x, wv);
            let r = t.relu(y);
            t.sum(r)
        });
    }

    #[test]
    fn gather_and_segment_ops() {
        check(sample(), |t, x| {
            let g = t.gather_rows(x, &[1, 0, 1, 1]);
            let s = t.segment_sum(g, &[0, 2, 2, 1], 3);
            let scores = t.sum_axis(s, 1);
            let alpha = t.segment_softmax(scores, &[0, 1, 0], 2);
            let weighted = t.mul(s, alpha);
            let sq = t.square(weighted);
            t.sum(sq)
        });
    }

    #[test]
    fn log_softmax_and_pick() {
        check(sample(), |t, x| {
            let lp = t.log_softmax_rows(x);
            t.pick_sum(lp, &[2, 0], &[1.0, -0.5])
        });
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0], [2.0], [3.0], [-1.0]]);
        let y = t.segment_softmax(x, &[0, 1, 0, 1], 2);
        let v = t.value(y);
        assert!((v[[0, 0]] + v[[2, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[1, 0]] + v[[3, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let p = array![[1.0, 2.0]];
        let mut t = Tape::new();
        let c = t.constant(array![[3.0, 4.0]]);
        let w = t.param(&p);
        let y = t.mul(c, w);
        let s = t.sum(y);
        let grads = t.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap(), &array![[3.0, 4.0]]);
    }
}
