//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations as they are evaluated eagerly. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! a scalar root with respect to every recorded value. Every tensor is a 2-D
//! matrix; sequence models fold (sample, position) into the row axis.
//!
//! Nodes that do not depend on any `requires_grad` leaf are never visited in
//! the backward pass.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    MulConst(Var, Mat),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean { input: Var, segment: Vec<usize>, counts: Vec<usize> },
    ColMean(Var),
    Sum(Var),
    LogSoftmax(Var),
    StraightThrough(Var),
    NeighborAggregate(Box<AggregateCache>),
    Im2Col(Box<Im2ColSpec>),
    Resample { input: Var, batch: usize, matrix: Mat },
}

#[derive(Debug)]
struct AggregateCache {
    messages: Var,
    receivers: Vec<usize>,
    counts: Vec<usize>,
    mean: Mat,
    std_denom: Mat,
    argmax: Vec<usize>,
    argmin: Vec<usize>,
}

/// Layout of a 1-D convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dShape {
    pub batch: usize,
    pub len_in: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dShape {
    pub fn len_out(&self) -> usize {
        (self.len_in + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
struct Im2ColSpec {
    input: Var,
    shape: Conv1dShape,
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Additive constant for `std` aggregation and normalization denominators.
pub const STD_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is excluded from differentiation.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted even though it is not a parameter
    /// (saliency targets, finite-difference probes).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + b` with `b` a `1×c` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ b` with `b` a `1×c` row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(v, Op::Powf(a, p), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let v = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, mask), rg)
    }

    /// Multiply row `i` of `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.nrows(), factors.len(), "scale_rows: factor count");
        for (mut r, &f) in v.rows_mut().into_iter().zip(&factors) {
            r *= f;
        }
        let rg = self.rg(a);
        self.push(v, Op::ScaleRows(a, factors), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `|a|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((idx.len(), src.ncols()));
        for (mut r, &i) in v.rows_mut().into_iter().zip(&idx) {
            r.assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx), rg)
    }

    /// Mean of the rows of `a` grouped by `segment[i] ∈ [0, n_segments)`.
    /// Empty segments produce a zero row.
    pub fn segment_mean(&mut self, a: Var, segment: Vec<usize>, n_segments: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), segment.len(), "segment_mean: segment count");
        let mut counts = vec![0usize; n_segments];
        let mut v = Mat::zeros((n_segments, src.ncols()));
        for (r, &sg) in src.rows().into_iter().zip(&segment) {
            counts[sg] += 1;
            let mut dst = v.row_mut(sg);
            dst += &r;
        }
        for (mut r, &c) in v.rows_mut().into_iter().zip(&counts) {
            if c > 0 {
                r /= c as f64;
            }
        }
        let rg = self.rg(a);
        self.push(
            v,
            Op::SegmentMean {
                input: a,
                segment,
                counts,
            },
            rg,
        )
    }

    /// Column means as a `1×c` row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.nrows().max(1) as f64;
        let v = src.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let rg = self.rg(a);
        self.push(v, Op::ColMean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut r in v.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + r.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            r -= lse;
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    /// Forward value `replacement`, backward identity to `a`.
    pub fn straight_through(&mut self, a: Var, replacement: Mat) -> Var {
        assert_eq!(self.shape(a), replacement.dim(), "straight_through: shape");
        let rg = self.rg(a);
        self.push(replacement, Op::StraightThrough(a), rg)
    }

    /// Principal-neighbourhood aggregation of edge messages into receivers.
    ///
    /// `messages` is `E×F`; the result is `n×4F` laid out as
    /// `[mean | std | max | min]`. Nodes without incoming messages receive
    /// zeros in every block. `std` is `sqrt(var + ε) − sqrt(ε)` so that it is
    /// exactly zero for identical messages and differentiable everywhere.
    pub fn neighbor_aggregate(&mut self, messages: Var, receivers: Vec<usize>, n: usize) -> Var {
        let msg = self.value(messages);
        let (e, f) = msg.dim();
        assert_eq!(receivers.len(), e, "neighbor_aggregate: receiver count");
        let mut counts = vec![0usize; n];
        let mut mean = Mat::zeros((n, f));
        let mut maxv = Mat::from_elem((n, f), f64::NEG_INFINITY);
        let mut minv = Mat::from_elem((n, f), f64::INFINITY);
        let mut argmax = vec![usize::MAX; n * f];
        let mut argmin = vec![usize::MAX; n * f];
        for (ei, &r) in receivers.iter().enumerate() {
            counts[r] += 1;
            for j in 0..f {
                let x = msg[[ei, j]];
                mean[[r, j]] += x;
                if x > maxv[[r, j]] {
                    maxv[[r, j]] = x;
                    argmax[r * f + j] = ei;
                }
                if x < minv[[r, j]] {
                    minv[[r, j]] = x;
                    argmin[r * f + j] = ei;
                }
            }
        }
        for i in 0..n {
            let c = counts[i];
            for j in 0..f {
                if c == 0 {
                    mean[[i, j]] = 0.0;
                    maxv[[i, j]] = 0.0;
                    minv[[i, j]] = 0.0;
                } else {
                    mean[[i, j]] /= c as f64;
                }
            }
        }
        let mut var = Mat::zeros((n, f));
        for (ei, &r) in receivers.iter().enumerate() {
            for j in 0..f {
                let d = msg[[ei, j]] - mean[[r, j]];
                var[[r, j]] += d * d;
            }
        }
        let mut std_denom = Mat::zeros((n, f));
        let mut stdv = Mat::zeros((n, f));
        let base = STD_EPS.sqrt();
        for i in 0..n {
            if counts[i] == 0 {
                continue;
            }
            for j in 0..f {
                let s = (var[[i, j]] / counts[i] as f64 + STD_EPS).sqrt();
                std_denom[[i, j]] = s;
                stdv[[i, j]] = s - base;
            }
        }
        let v = concatenate(Axis(1), &[mean.view(), stdv.view(), maxv.view(), minv.view()])
            .expect("aggregate blocks share row count");
        let rg = self.rg(messages);
        self.push(
            v,
            Op::NeighborAggregate(Box::new(AggregateCache {
                messages,
                receivers,
                counts,
                mean,
                std_denom,
                argmax,
                argmin,
            })),
            rg,
        )
    }

    /// Lower a batched 1-D convolution input to patches.
    ///
    /// `a` has rows `b·len_in + t` and `channels` columns. The result has rows
    /// `b·len_out + o` and `kernel·channels` columns ordered `(tap, channel)`;
    /// positions outside the sequence read as zero.
    pub fn im2col(&mut self, a: Var, shape: Conv1dShape) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), (shape.batch * shape.len_in, shape.channels), "im2col: input shape");
        let lo = shape.len_out();
        let c = shape.channels;
        let mut v = Mat::zeros((shape.batch * lo, shape.kernel * c));
        for b in 0..shape.batch {
            for o in 0..lo {
                let row = b * lo + o;
                for tap in 0..shape.kernel {
                    let t = (o * shape.stride + tap) as isize - shape.pad as isize;
                    if t < 0 || t as usize >= shape.len_in {
                        continue;
                    }
                    let src = x.row(b * shape.len_in + t as usize);
                    v.slice_mut(s![row, tap * c..(tap + 1) * c]).assign(&src);
                }
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Im2Col(Box::new(Im2ColSpec { input: a, shape })), rg)
    }

    /// Apply a fixed linear map along the sequence axis of each sample:
    /// `out_b = matrix · a_b`, with `a` holding `batch` stacked `len_in×c` blocks.
    pub fn resample(&mut self, a: Var, batch: usize, matrix: Mat) -> Var {
        let x = self.value(a);
        let (lo, li) = matrix.dim();
        assert_eq!(x.nrows(), batch * li, "resample: input rows");
        let c = x.ncols();
        let mut v = Mat::zeros((batch * lo, c));
        for b in 0..batch {
            let blk = x.slice(s![b * li..(b + 1) * li, ..]);
            v.slice_mut(s![b * lo..(b + 1) * lo, ..]).assign(&matrix.dot(&blk));
        }
        let rg = self.rg(a);
        self.push(
            v,
            Op::Resample {
                input: a,
                batch,
                matrix,
            },
            rg,
        )
    }

    /// Gradient of the `1×1` node `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        self.backward_with(root, Mat::from_elem((1, 1), 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        assert_eq!(self.shape(root), seed.dim(), "backward: seed shape");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.rg(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Powf(a, p) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                Zip::from(&mut ga).and(x).for_each(|gi, &xi| *gi *= p * xi.powf(p - 1.0));
                self.accumulate(grads, *a, ga);
            }
            Op::MulConst(a, mask) => self.accumulate(grads, *a, g * mask),
            Op::ScaleRows(a, factors) => {
                let mut ga = g.clone();
                for (mut r, &f) in ga.rows_mut().into_iter().zip(factors) {
                    r *= f;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gi, &xi| if xi <= 0.0 { *gi = 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|gi, &y| *gi *= y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|gi, &y| *gi *= 1.0 - y * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &xi| {
                    *gi *= if xi > 0.0 {
                        1.0
                    } else if xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let mut ga = Mat::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(g);
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (r, &i) in g.rows().into_iter().zip(idx) {
                        let mut dst = ga.row_mut(i);
                        dst += &r;
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::SegmentMean {
                input,
                segment,
                counts,
            } => {
                let mut ga = Mat::zeros(self.shape(*input));
                for (mut r, &sg) in ga.rows_mut().into_iter().zip(segment) {
                    r.assign(&g.row(sg));
                    r /= counts[sg] as f64;
                }
                self.accumulate(grads, *input, ga);
            }
            Op::ColMean(a) => {
                let (n, c) = self.shape(*a);
                let mut ga = Mat::zeros((n, c));
                let inv = 1.0 / n.max(1) as f64;
                for mut r in ga.rows_mut() {
                    r.assign(&(&g.row(0) * inv));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for (mut gr, yr) in ga.rows_mut().into_iter().zip(node.value.rows()) {
                    let total: f64 = gr.sum();
                    Zip::from(&mut gr).and(&yr).for_each(|gi, &y| *gi -= y.exp() * total);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
            Op::NeighborAggregate(cache) => self.aggregate_backward(cache, g, grads),
            Op::Im2Col(spec) => {
                if !self.rg(spec.input) {
                    return;
                }
                let sh = spec.shape;
                let lo = sh.len_out();
                let c = sh.channels;
                let mut ga = Mat::zeros((sh.batch * sh.len_in, c));
                for b in 0..sh.batch {
                    for o in 0..lo {
                        let row = b * lo + o;
                        for tap in 0..sh.kernel {
                            let t = (o * sh.stride + tap) as isize - sh.pad as isize;
                            if t < 0 || t as usize >= sh.len_in {
                                continue;
                            }
                            let mut dst = ga.row_mut(b * sh.len_in + t as usize);
                            dst += &g.slice(s![row, tap * c..(tap + 1) * c]);
                        }
                    }
                }
                self.accumulate(grads, spec.input, ga);
            }
            Op::Resample {
                input,
                batch,
                matrix,
            } => {
                if !self.rg(*input) {
                    return;
                }
                let (lo, li) = matrix.dim();
                let c = g.ncols();
                let mut ga = Mat::zeros((batch * li, c));
                let mt = matrix.t();
                for b in 0..*batch {
                    let blk = g.slice(s![b * lo..(b + 1) * lo, ..]);
                    ga.slice_mut(s![b * li..(b + 1) * li, ..]).assign(&mt.dot(&blk));
                }
                self.accumulate(grads, *input, ga);
            }
        }
    }

    fn aggregate_backward(&self, cache: &AggregateCache, g: &Mat, grads: &mut [Option<Mat>]) {
        if !self.rg(cache.messages) {
            return;
        }
        let msg = self.value(cache.messages);
        let (e, f) = msg.dim();
        let mut gm = Mat::zeros((e, f));
        for (ei, &r) in cache.receivers.iter().enumerate() {
            let c = cache.counts[r] as f64;
            for j in 0..f {
                let d_mean = g[[r, j]] / c;
                let centered = msg[[ei, j]] - cache.mean[[r, j]];
                let d_std = g[[r, f + j]] * centered / (c * cache.std_denom[[r, j]]);
                let mut total = d_mean + d_std;
                if cache.argmax[r * f + j] == ei {
                    total += g[[r, 2 * f + j]];
                }
                if cache.argmin[r * f + j] == ei {
                    total += g[[r, 3 * f + j]];
                }
                gm[[ei, j]] = total;
            }
        }
        self.accumulate(grads, cache.messages, gm);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adaptive average pooling weights: `out × len` matrix whose row `i`
/// averages positions `⌊i·len/out⌋ .. ⌈(i+1)·len/out⌉`.
pub fn adaptive_pool_matrix(len: usize, out: usize) -> Mat {
    let mut m = Mat::zeros((out, len));
    for i in 0..out {
        let start = (i * len) / out;
        let end = ((i + 1) * len).div_ceil(out).max(start + 1);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[[i, j]] = w;
        }
    }
    m
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_matrix(len: usize, factor: usize) -> Mat {
    let mut m = Mat::zeros((len * factor, len));
    for i in 0..len * factor {
        m[[i, i / factor]] = 1.0;
    }
    m
}

/// Linear interpolation from `len_in` to `len_out` samples with aligned end points.
pub fn interpolate_matrix(len_in: usize, len_out: usize) -> Mat {
    let mut m = Mat::zeros((len_out, len_in));
    if len_in == 1 || len_out == 1 {
        m.column_mut(0).fill(1.0);
        return m;
    }
    let scale = (len_in - 1) as f64 / (len_out - 1) as f64;
    for i in 0..len_out {
        let pos = i as f64 * scale;
        let lo = (pos.floor() as usize).min(len_in - 1);
        let hi = (lo + 1).min(len_in - 1);
        let frac = pos - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        if hi != lo {
            m[[i, hi]] += frac;
        }
    }
    m
}
