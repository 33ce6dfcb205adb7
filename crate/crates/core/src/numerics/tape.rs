//! Reverse-mode differentiation over a linear tape of array operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints into every leaf that was registered with
//! `requires_grad`. Every op checks its output for non-finite values and
//! reports the op name on failure.
//!
//! Matrices are `[rows, cols]`; image tensors are NHWC `[batch, h, w, c]`.

use std::collections::BTreeMap;

use super::array::{matmul_into, RealArray};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named gradients returned by [`Tape::backward`].
pub type Gradients = BTreeMap<String, RealArray>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SumAll(Var),
    MeanRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    RowNormalize(Var),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    SqDist(Var, Var),
    Reshape(Var),
    Conv3x3(Var, Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: RealArray,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(a: &RealArray) -> (usize, usize) {
    (a.rows(), a.cols())
}

fn dims4(op: &'static str, a: &RealArray) -> Result<(usize, usize, usize, usize)> {
    match *a.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(Error::shape(op, format!("expected NHWC tensor, got {s:?}"))),
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn im2col(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; b * h * w * k];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut x = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ci in 0..c {
                            x[dst + ci] += cols[src + ci];
                        }
                    }
                }
            }
        }
    }
    x
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
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

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: RealArray, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a named leaf. Gradients are reported for it iff
    /// `array.requires_grad`.
    pub fn leaf(&mut self, name: &str, array: &RealArray) -> Result<Var> {
        array.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value: array.clone(),
            op: Op::Leaf,
            needs_grad: array.requires_grad,
            name: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an anonymous leaf that never receives a gradient.
    pub fn constant(&mut self, array: RealArray) -> Result<Var> {
        array.ensure_finite("constant")?;
        self.nodes.push(Node {
            value: array.with_grad(false),
            op: Op::Leaf,
            needs_grad: false,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av);
        let (k2, n) = dims2(bv);
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = RealArray::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push(op_name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn check_row(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = dims2(self.value(a));
        if self.value(r).shape() != [1, n] {
            return Err(Error::shape(
                op,
                format!("{:?} with row {:?}", self.value(a).shape(), self.value(r).shape()),
            ));
        }
        Ok((m, n))
    }

    /// `a[m,n] + r[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.check_row("add_row", a, r)?;
        let rv = self.value(r).data();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, x)| x + rv[i % n]).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, r), &[a, r])
    }

    /// `a[m,n] * r[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, n) = self.check_row("mul_row", a, r)?;
        let rv = self.value(r).data();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, x)| x * rv[i % n]).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("mul_row", value, Op::MulRow(a, r), &[a, r])
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "scale must have one element"));
        }
        let sv = self.value(s).item();
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * sv).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("scale_by", value, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x + c).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(0.0)).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| sigmoid(x)).collect();
        let value = RealArray::new(av.shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    /// Sum of all elements as a `[1,1]` array.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", RealArray::scalar(s), Op::SumAll(a), &[a])
    }

    /// Column means `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a));
        let av = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push("mean_rows", RealArray::row(&out), Op::MeanRows(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = dims2(self.value(a));
        let (m2, q) = dims2(self.value(b));
        if m != m2 {
            return Err(Error::shape("concat_cols", format!("{m} vs {m2} rows")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let value = RealArray::new(vec![m, p + q], out)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    /// Stacks 2-D vars with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?)
            .cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::shape("concat_rows", "column mismatch"));
            }
            m += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = RealArray::new(vec![m, n], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of {}", av.rows()),
            ));
        }
        let value = av.select(indices);
        self.push("select_rows", value, Op::SelectRows(a, indices.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Divides each row by its Euclidean norm. Rows with norm below 1e-12
    /// are rejected.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a));
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nr < 1e-12 {
                return Err(Error::ZeroNorm("row_normalize"));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / nr;
            }
        }
        let value = RealArray::new(vec![m, n], out)?;
        self.push("row_normalize", value, Op::RowNormalize(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a));
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let value = RealArray::new(vec![m, n], out)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(a), &[a])
    }

    /// Mean softmax cross-entropy of logit rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(logits));
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", "one label per row required"));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total += super::loss::softmax_cross_entropy(&lv[i * n..(i + 1) * n], y)?;
        }
        let value = RealArray::scalar(total / m as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy(logits, labels.to_vec()),
            &[logits],
        )
    }

    /// Pairwise squared Euclidean distances `[m,d] x [n,d] -> [m,n]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(a));
        let (n, d2) = dims2(self.value(b));
        if d != d2 {
            return Err(Error::shape("sq_dist", format!("width {d} vs {d2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = super::array::sq_dist(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
            }
        }
        let value = RealArray::new(vec![m, n], out)?;
        self.push("sq_dist", value, Op::SqDist(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?.with_grad(false);
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x` is NHWC, `w` is
    /// `[9*c_in, c_out]` with rows ordered `(ky, kx, c_in)`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, h, wd, c) = dims4("conv3x3", self.value(x))?;
        let (k, cout) = dims2(self.value(w));
        if k != 9 * c {
            return Err(Error::shape(
                "conv3x3",
                format!("kernel rows {k} for {c} input channels"),
            ));
        }
        let cols = im2col(self.value(x).data(), b, h, wd, c);
        let mut out = vec![0.0; b * h * wd * cout];
        matmul_into(&cols, self.value(w).data(), &mut out, b * h * wd, k, cout);
        let value = RealArray::new(vec![b, h, wd, cout], out)?;
        self.push("conv3x3", value, Op::Conv3x3(x, w), &[x, w])
    }

    /// 2x2 average pooling with stride 2 on NHWC input with even extents.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = dims4("avg_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let o = ((bi * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ci in 0..c {
                            out[o + ci] += 0.25 * xv[s + ci];
                        }
                    }
                }
            }
        }
        let value = RealArray::new(vec![b, ho, wo, c], out)?;
        self.push("avg_pool2", value, Op::AvgPool2(x), &[x])
    }

    /// NHWC -> `[batch, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = dims4("global_avg_pool", self.value(x))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let inv = 1.0 / (h * w) as f64;
        for bi in 0..b {
            for p in 0..h * w {
                let s = (bi * h * w + p) * c;
                for ci in 0..c {
                    out[bi * c + ci] += xv[s + ci] * inv;
                }
            }
        }
        let value = RealArray::new(vec![b, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Backpropagates from a scalar `loss` and returns the gradient of every
    /// named leaf registered with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        lv.ensure_finite("backward (loss)")?;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(name) = &node.name {
                    let arr = RealArray::new(node.value.shape().to_vec(), g)?;
                    grads
                        .entry(name.clone())
                        .and_modify(|acc| {
                            for (a, b) in acc.data_mut().iter_mut().zip(arr.data()) {
                                *a += b;
                            }
                        })
                        .or_insert(arr);
                }
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
        }
        for g in grads.values() {
            g.ensure_finite("backward")?;
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let acc = |v: Var, delta: Vec<f64>, adj: &mut [Option<Vec<f64>>]| {
            if !self.needs(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(av);
                let n = bv.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, bv.data(), &mut da, m, n, k);
                    acc(*a, da, adj);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(av.data(), g, &mut db, m, k, n);
                    acc(*b, db, adj);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec(), adj);
                acc(*b, g.to_vec(), adj);
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec(), adj);
                acc(*b, g.iter().map(|x| -x).collect(), adj);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect(), adj);
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect(), adj);
            }
            Op::AddRow(a, r) => {
                let n = self.value(*r).len();
                let mut dr = vec![0.0; n];
                for (i, x) in g.iter().enumerate() {
                    dr[i % n] += x;
                }
                acc(*a, g.to_vec(), adj);
                acc(*r, dr, adj);
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r).data();
                let av = self.value(*a).data();
                let n = rv.len();
                let mut dr = vec![0.0; n];
                let mut da = vec![0.0; g.len()];
                for (i, x) in g.iter().enumerate() {
                    dr[i % n] += x * av[i];
                    da[i] = x * rv[i % n];
                }
                acc(*a, da, adj);
                acc(*r, dr, adj);
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                let av = self.value(*a).data();
                let ds: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                acc(*a, g.iter().map(|x| x * sv).collect(), adj);
                acc(*s, vec![ds], adj);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect(), adj),
            Op::AddScalar(a) => acc(*a, g.to_vec(), adj),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(
                    *a,
                    g.iter().zip(av).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect(),
                    adj,
                );
            }
            Op::Sigmoid(a) => {
                let ov = out.data();
                acc(*a, g.iter().zip(ov).map(|(x, s)| x * s * (1.0 - s)).collect(), adj);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).len()], adj),
            Op::MeanRows(a) => {
                let (m, n) = dims2(self.value(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                acc(*a, da, adj);
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = dims2(self.value(*a));
                let q = self.value(*b).cols();
                let mut da = Vec::with_capacity(m * p);
                let mut db = Vec::with_capacity(m * q);
                for i in 0..m {
                    let row = &g[i * (p + q)..(i + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                acc(*a, da, adj);
                acc(*b, db, adj);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[off..off + len].to_vec(), adj);
                    off += len;
                }
            }
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[r * c + j];
                    }
                }
                acc(*a, da, adj);
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.value(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, da, adj);
            }
            Op::RowNormalize(a) => {
                let (m, n) = dims2(self.value(*a));
                let av = self.value(*a).data();
                let ov = out.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let row = &av[i * n..(i + 1) * n];
                    let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let u = &ov[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gu: f64 = gr.iter().zip(u).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        da[i * n + j] = (gr[j] - gu * u[j]) / nr;
                    }
                }
                acc(*a, da, adj);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = dims2(out);
                let ov = out.data();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let p = &ov[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gp: f64 = gr.iter().zip(p).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        da[i * n + j] = p[j] * (gr[j] - gp);
                    }
                }
                acc(*a, da, adj);
            }
            Op::CrossEntropy(logits, labels) => {
                let (m, n) = dims2(self.value(*logits));
                let lv = self.value(*logits).data();
                let mut da = vec![0.0; m * n];
                let scale = g[0] / m as f64;
                for (i, &y) in labels.iter().enumerate() {
                    let row = &mut da[i * n..(i + 1) * n];
                    softmax_row(&lv[i * n..(i + 1) * n], row);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, da, adj);
            }
            Op::SqDist(a, b) => {
                let (m, d) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (av[i * d + k] - bv[j * d + k]);
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                acc(*a, da, adj);
                acc(*b, db, adj);
            }
            Op::Reshape(a) => acc(*a, g.to_vec(), adj),
            Op::Conv3x3(x, w) => {
                let (b, h, wd, c) = dims4("conv3x3", self.value(*x))?;
                let (k, cout) = dims2(self.value(*w));
                let rows = b * h * wd;
                if self.needs(*w) {
                    let cols = im2col(self.value(*x).data(), b, h, wd, c);
                    let mut dw = vec![0.0; k * cout];
                    matmul_tn(&cols, g, &mut dw, rows, k, cout);
                    acc(*w, dw, adj);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * k];
                    matmul_nt(g, self.value(*w).data(), &mut dcols, rows, cout, k);
                    acc(*x, col2im(&dcols, b, h, wd, c), adj);
                }
            }
            Op::AvgPool2(x) => {
                let (b, h, w, c) = dims4("avg_pool2", self.value(*x))?;
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let o = ((bi * ho + y) * wo + xx) * c;
                            for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let s = ((bi * h + 2 * y + dy) * w + 2 * xx + dxx) * c;
                                for ci in 0..c {
                                    dx[s + ci] += 0.25 * g[o + ci];
                                }
                            }
                        }
                    }
                }
                acc(*x, dx, adj);
            }
            Op::GlobalAvgPool(x) => {
                let (b, h, w, c) = dims4("global_avg_pool", self.value(*x))?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for p in 0..h * w {
                        let s = (bi * h * w + p) * c;
                        for ci in 0..c {
                            dx[s + ci] = g[bi * c + ci] * inv;
                        }
                    }
                }
                acc(*x, dx, adj);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(shape: &[usize], rng: &mut ChaCha8Rng) -> RealArray {
        RealArray::randn(shape, 1.0, rng).with_grad(true)
    }

    /// Central-difference gradient of `f` with respect to `params[name]`.
    fn numeric_grad(
        f: &dyn Fn(&BTreeMap<String, RealArray>) -> f64,
        params: &BTreeMap<String, RealArray>,
        name: &str,
    ) -> Vec<f64> {
        let h = 1e-5;
        let n = params[name].len();
        (0..n)
            .map(|i| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += h;
                let up = f(&p);
                p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
                let down = f(&p);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn check(
        build: &dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Var,
        params: BTreeMap<String, RealArray>,
    ) {
        let eval = |p: &BTreeMap<String, RealArray>| {
            let mut tape = Tape::new();
            let vars = p.iter().map(|(k, v)| (k.clone(), tape.leaf(k, v).unwrap())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(k, v).unwrap()))
            .collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for name in params.keys() {
            let numeric = numeric_grad(&eval, &params, name);
            for (a, b) in grads[name].data().iter().zip(&numeric) {
                assert!(rel_err(*a, *b) < 1e-4, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_and_constant_derivatives() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", &RealArray::scalar(3.0).with_grad(true)).unwrap();
        let g = tape.backward(x).unwrap();
        assert_eq!(g["x"].item(), 1.0);

        let mut tape = Tape::new();
        let x = tape.leaf("x", &RealArray::scalar(3.0).with_grad(true)).unwrap();
        let _unused = tape.scale(x, 2.0).unwrap();
        let c = tape.constant(RealArray::scalar(5.0)).unwrap();
        let g = tape.backward(c).unwrap();
        assert!(g.get("x").is_none());
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf("x", &RealArray::zeros(&[2, 2]).with_grad(true)).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(RealArray::scalar(1e300)).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn two_layer_perceptron_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = BTreeMap::new();
        p.insert("w1".to_string(), param(&[4, 6], &mut rng));
        p.insert("b1".to_string(), param(&[1, 6], &mut rng));
        p.insert("w2".to_string(), param(&[6, 3], &mut rng));
        p.insert("b2".to_string(), param(&[1, 3], &mut rng));
        let x = RealArray::randn(&[5, 4], 1.0, &mut rng);
        let labels = [0, 2, 1, 1, 0];
        check(
            &|t, v| {
                let xv = t.constant(x.clone()).unwrap();
                let h = t.matmul(xv, v["w1"]).unwrap();
                let h = t.add_row(h, v["b1"]).unwrap();
                let h = t.relu(h).unwrap();
                let o = t.matmul(h, v["w2"]).unwrap();
                let o = t.add_row(o, v["b2"]).unwrap();
                t.cross_entropy(o, &labels).unwrap()
            },
            p,
        );
    }

    #[test]
    fn normalization_softmax_and_distance_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = BTreeMap::new();
        p.insert("a".to_string(), param(&[3, 4], &mut rng));
        p.insert("b".to_string(), param(&[2, 4], &mut rng));
        p.insert("r".to_string(), param(&[1, 4], &mut rng));
        p.insert("s".to_string(), param(&[1, 1], &mut rng));
        check(
            &|t, v| {
                let an = t.row_normalize(v["a"]).unwrap();
                let bn = t.row_normalize(v["b"]).unwrap();
                let bt = t.transpose(bn).unwrap();
                let cos = t.matmul(an, bt).unwrap();
                let cos = t.scale_by(cos, v["s"]).unwrap();
                let sm = t.softmax_rows(cos).unwrap();
                let ar = t.mul_row(v["a"], v["r"]).unwrap();
                let d = t.sq_dist(ar, v["b"]).unwrap();
                let sg = t.sigmoid(d).unwrap();
                let sel = t.select_rows(sg, &[2, 0, 2]).unwrap();
                let m = t.mean_rows(sel).unwrap();
                let cat = t.concat_cols(m, m).unwrap();
                let sm_sum = t.sum_all(sm).unwrap();
                let total = t.sum_all(cat).unwrap();
                let both = t.concat_rows(&[total, sm_sum]).unwrap();
                let w = t.constant(RealArray::from_rows(&[vec![1.3], vec![-0.7]]).unwrap()).unwrap();
                let wt = t.transpose(w).unwrap();
                let y = t.matmul(wt, both).unwrap();
                let ce_in = t.concat_cols(y, sm_sum).unwrap();
                let ce_in = t.add_scalar(ce_in, 0.5).unwrap();
                t.cross_entropy(ce_in, &[1]).unwrap()
            },
            p,
        );
    }

    #[test]
    fn convolution_and_pooling_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = BTreeMap::new();
        p.insert("x".to_string(), param(&[2, 4, 4, 2], &mut rng));
        p.insert("w".to_string(), param(&[18, 3], &mut rng));
        check(
            &|t, v| {
                let y = t.conv3x3(v["x"], v["w"]).unwrap();
                let y = t.avg_pool2(y).unwrap();
                let y = t.global_avg_pool(y).unwrap();
                let y = t.reshape(y, &[1, 6]).unwrap();
                let y = t.mul(y, y).unwrap();
                t.sum_all(y).unwrap()
            },
            p,
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = RealArray::randn(&[1, 3, 3, 2], 1.0, &mut rng);
        let w = RealArray::randn(&[18, 1], 1.0, &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap());
        let y = t.conv3x3(xv, wv).unwrap();
        // centre pixel sees the whole 3x3 window
        let mut expect = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..2 {
                    expect += x.data()[(ky * 3 + kx) * 2 + c] * w.data()[(ky * 3 + kx) * 2 + c];
                }
            }
        }
        assert!((t.value(y).data()[4] - expect).abs() < 1e-12);
    }
}
