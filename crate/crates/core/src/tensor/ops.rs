use rand::{Rng, RngExt};

use super::gemm::{gemm, View};
use super::{GradMap, Result, Tensor, TensorError};

/// Variance guard inside every row-wise layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    Affine(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Gelu(Tensor),
    Powf(Tensor, f64),
    ClampMin(Tensor, f64),
    Concat(Vec<Tensor>, usize),
    LayerNorm(Tensor, Vec<f64>),
    Dropout(Tensor, Vec<f64>),
    SumAxis(Tensor, usize, f64),
    Softmax(Tensor),
    Reshape(Tensor),
    GatherRows(Tensor, Vec<usize>),
    Narrow(Tensor, usize),
    Pick(Tensor, Vec<usize>),
    HeadScores {
        q: Tensor,
        k: Tensor,
        batch: usize,
        heads: usize,
        alpha: f64,
    },
    HeadContext {
        attn: Tensor,
        v: Tensor,
        batch: usize,
        heads: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Affine(..) => "affine",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Powf(..) => "powf",
            Op::ClampMin(..) => "clamp_min",
            Op::Concat(..) => "concat",
            Op::LayerNorm(..) => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::Narrow(..) => "narrow",
            Op::Pick(..) => "pick",
            Op::HeadScores { .. } => "head_scores",
            Op::HeadContext { .. } => "head_context",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![a, b],
            Op::HeadScores { q, k, .. } => vec![q, k],
            Op::HeadContext { attn, v, .. } => vec![attn, v],
            Op::Concat(xs, _) => xs.iter().collect(),
            Op::Affine(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Powf(x, _)
            | Op::ClampMin(x, _)
            | Op::LayerNorm(x, _)
            | Op::Dropout(x, _)
            | Op::SumAxis(x, _, _)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::GatherRows(x, _)
            | Op::Narrow(x, _)
            | Op::Pick(x, _) => vec![x],
        }
    }

    /// Propagates `g = d root / d out` into the buffers of this op's inputs.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], grads: &mut GradMap) {
        let y = out.data();
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let gv = View::row_major(g, 0, m, n, n);
                grads.with(a, |ga| {
                    let bt = View::row_major(b.data(), 0, k, n, n).t();
                    gemm(1.0, gv, bt, 1.0, ga, 0, k);
                });
                grads.with(b, |gb| {
                    let at = View::row_major(a.data(), 0, m, k, k).t();
                    gemm(1.0, at, gv, 1.0, gb, 0, n);
                });
            }
            Op::Add(a, b) => {
                grads.with(a, |ga| add_into(ga, g));
                grads.with(b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                grads.with(a, |ga| add_into(ga, g));
                grads.with(b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                grads.with(a, |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(b.data()) {
                        *d += gi * bi;
                    }
                });
                grads.with(b, |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(a.data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                grads.with(x, |gx| add_into(gx, g));
                let c = bias.numel();
                grads.with(bias, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(x, scale) => {
                let c = scale.numel();
                let s = scale.data();
                grads.with(x, |gx| {
                    for (grow, gi) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            grow[j] += gi[j] * s[j];
                        }
                    }
                });
                grads.with(scale, |gs| {
                    for (xrow, gi) in x.data().chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gs[j] += gi[j] * xrow[j];
                        }
                    }
                });
            }
            Op::Affine(x, a) => grads.with(x, |gx| gx.iter_mut().zip(g).for_each(|(d, gi)| *d += a * gi)),
            Op::Exp(x) => grads.with(x, |gx| {
                for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }),
            Op::Log(x) => grads.with(x, |gx| {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(x.data()) {
                    *d += gi / xi;
                }
            }),
            Op::Sigmoid(x) => grads.with(x, |gx| {
                for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }),
            Op::Tanh(x) => grads.with(x, |gx| {
                for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }),
            Op::Relu(x) => grads.with(x, |gx| {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(x.data()) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Gelu(x) => grads.with(x, |gx| {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(x.data()) {
                    *d += gi * gelu_grad(*xi);
                }
            }),
            Op::Powf(x, e) => grads.with(x, |gx| {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(x.data()) {
                    *d += gi * e * xi.powf(e - 1.0);
                }
            }),
            Op::ClampMin(x, lo) => grads.with(x, |gx| {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(x.data()) {
                    if *xi >= *lo {
                        *d += gi;
                    }
                }
            }),
            Op::Concat(xs, axis) => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut start = 0;
                for x in xs {
                    let chunk = x.shape()[*axis] * inner;
                    grads.with(x, |gx| {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + chunk];
                            add_into(&mut gx[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    start += chunk;
                }
            }
            Op::LayerNorm(x, inv_std) => {
                let (_, c) = x.rows_cols();
                let n = c as f64;
                grads.with(x, |gx| {
                    for (r, ((grow, gi), yi)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                        let sum_g: f64 = gi.iter().sum();
                        let sum_gy: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            grow[j] += inv_std[r] / n * (n * gi[j] - sum_g - yi[j] * sum_gy);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => grads.with(x, |gx| {
                for ((d, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::SumAxis(x, axis, factor) => {
                let (outer, inner) = outer_inner(x.shape(), *axis);
                let n = x.shape()[*axis];
                grads.with(x, |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                gx[(o * n + k) * inner + i] += factor * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, c) = x.rows_cols();
                grads.with(x, |gx| {
                    for ((grow, gi), yi) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            grow[j] += yi[j] * (gi[j] - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => grads.with(x, |gx| add_into(gx, g)),
            Op::GatherRows(x, idx) => {
                let (_, c) = x.rows_cols();
                grads.with(x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Narrow(x, start) => {
                let (_, c) = x.rows_cols();
                let (_, w) = out.rows_cols();
                grads.with(x, |gx| {
                    for (grow, gi) in gx.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut grow[*start..start + w], gi);
                    }
                });
            }
            Op::Pick(x, idx) => {
                let (_, c) = x.rows_cols();
                grads.with(x, |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                });
            }
            Op::HeadScores { q, k, batch, heads, alpha } => {
                let (rows, d) = q.rows_cols();
                let l = rows / batch;
                let dh = d / heads;
                for b in 0..*batch {
                    for h in 0..*heads {
                        let blk = View::row_major(g, (b * heads + h) * l * l, l, l, l);
                        let off = b * l * d + h * dh;
                        grads.with(q, |gq| {
                            let kb = View::row_major(k.data(), off, l, dh, d);
                            gemm(*alpha, blk, kb, 1.0, gq, off, d);
                        });
                        grads.with(k, |gk| {
                            let qb = View::row_major(q.data(), off, l, dh, d);
                            gemm(*alpha, blk.t(), qb, 1.0, gk, off, d);
                        });
                    }
                }
            }
            Op::HeadContext { attn, v, batch, heads } => {
                let (vrows, d) = v.rows_cols();
                let lk = vrows / batch;
                let lq = attn.numel() / (batch * heads * lk);
                let dh = d / heads;
                for b in 0..*batch {
                    for h in 0..*heads {
                        let a_off = (b * heads + h) * lq * lk;
                        let v_off = b * lk * d + h * dh;
                        let g_off = b * lq * d + h * dh;
                        let gb = View::row_major(g, g_off, lq, dh, d);
                        grads.with(attn, |ga| {
                            let vt = View::row_major(v.data(), v_off, lk, dh, d).t();
                            gemm(1.0, gb, vt, 1.0, ga, a_off, lk);
                        });
                        grads.with(v, |gv| {
                            let at = View::row_major(attn.data(), a_off, lq, lk, lk).t();
                            gemm(1.0, at, gb, 1.0, gv, v_off, d);
                        });
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// Softmax over each row's valid positions; masked positions are exactly zero.
fn softmax_row(x: &[f64], mask: Option<&[f64]>, out: &mut [f64]) -> bool {
    let valid = |j: usize| mask.map_or(true, |m| m[j] != 0.0);
    if !(0..x.len()).any(valid) {
        return false;
    }
    // NaN scores must surface as NaN outputs, not as an empty row.
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if valid(j) && (v > max || v.is_nan()) {
            max = v;
            if v.is_nan() {
                break;
            }
        }
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        *o = if valid(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for (j, o) in out.iter_mut().enumerate() {
        if valid(j) {
            *o /= sum;
        }
    }
    true
}

impl Tensor {
    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, op)
    }

    fn zip_same(&self, other: &Tensor, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape() != other.shape() {
            return Err(mismatch(name, self, other));
        }
        Ok(self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect())
    }

    /// Matrix product of `(n, k)` and `(k, m)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", self, other));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(
            1.0,
            View::row_major(self.data(), 0, m, k, k),
            View::row_major(other.data(), 0, k, n, n),
            0.0,
            &mut data,
            0,
            n,
        );
        Ok(Tensor::from_op(vec![m, n], data, Op::MatMul(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone())))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.rows_cols();
        if bias.shape() != [c] {
            return Err(mismatch("add_row", self, bias));
        }
        let b = bias.data();
        let data = self.data().chunks(c).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::AddRow(self.clone(), bias.clone())))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&self, scale: &Tensor) -> Result<Tensor> {
        let (_, c) = self.rows_cols();
        if scale.shape() != [c] {
            return Err(mismatch("mul_row", self, scale));
        }
        let s = scale.data();
        let data = self.data().chunks(c).flat_map(|row| row.iter().zip(s).map(|(x, y)| x * y)).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::MulRow(self.clone(), scale.clone())))
    }

    /// `a * x + b` elementwise.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        self.map(|v| a * v + b, Op::Affine(self.clone(), a))
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.affine(a, 0.0)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        Ok(self.map(f64::ln, Op::Log(self.clone())))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh, Op::Tanh(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0), Op::Relu(self.clone()))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        self.map(gelu, Op::Gelu(self.clone()))
    }

    pub fn powf(&self, e: f64) -> Tensor {
        self.map(|v| v.powf(e), Op::Powf(self.clone(), e))
    }

    /// `max(x, lo)`; gradient is cut where the clamp engages.
    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.map(|v| v.max(lo), Op::ClampMin(self.clone(), lo))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for x in &xs[1..] {
            let ok = x.shape().len() == rank
                && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", first, x));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(shape, data, Op::Concat(xs.to_vec(), axis)))
    }

    /// Normalizes every row (last axis) to zero mean, unit variance; no affine part.
    pub fn layer_norm(&self) -> Tensor {
        let (rows, c) = self.rows_cols();
        let mut data = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        Tensor::from_op(self.shape().to_vec(), data, Op::LayerNorm(self.clone(), inv_std))
    }

    /// Looks up rows of an embedding table `(vocab, dim)` by integer id.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(invalid("embedding", format!("table must be 2-D, got {:?}", self.shape())));
        }
        self.gather_rows(ids)
    }

    /// Inverted dropout: keeps each element with probability `keep`, scaling kept ones by `1/keep`.
    pub fn dropout<R: Rng + ?Sized>(&self, keep: f64, rng: &mut R) -> Result<Tensor> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(invalid("dropout", format!("kept probability {keep} not in (0, 1]")));
        }
        if keep == 1.0 {
            return Ok(self.clone());
        }
        let mask: Vec<f64> = (0..self.numel()).map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Dropout(self.clone(), mask)))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, inner) = outer_inner(shape, axis);
        let n = shape[axis];
        let factor = if mean { 1.0 / n as f64 } else { 1.0 };
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += self.data()[(o * n + k) * inner + i];
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= factor);
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(out_shape, data, Op::SumAxis(self.clone(), axis, factor)))
    }

    /// Sums along `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(&self) -> Tensor {
        let flat = self.reshape(&[self.numel()]).expect("same size");
        flat.reduce_axis(0, false).expect("axis 0")
    }

    pub fn mean_all(&self) -> Tensor {
        let flat = self.reshape(&[self.numel()]).expect("same size");
        flat.reduce_axis(0, true).expect("axis 0")
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax(&self) -> Tensor {
        let (_, c) = self.rows_cols();
        let mut data = vec![0.0; self.numel()];
        for (x, o) in self.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(x, None, o);
        }
        Tensor::from_op(self.shape().to_vec(), data, Op::Softmax(self.clone()))
    }

    /// Row-wise softmax restricted to valid positions.
    ///
    /// `mask` has shape `(m, L)` with 0/1 entries, where `L` is the last extent
    /// of `self`. Consecutive groups of `rows / m` rows share one mask row,
    /// which lets one `(B, L)` padding mask serve all heads and query rows.
    /// Masked outputs are exactly zero.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Tensor> {
        let (rows, c) = self.rows_cols();
        let (mrows, mc) = mask.rows_cols();
        if mc != c || rows % mrows != 0 {
            return Err(mismatch("masked_softmax", self, mask));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(invalid("masked_softmax", "mask entries must be 0 or 1"));
        }
        let group = rows / mrows;
        let mut data = vec![0.0; self.numel()];
        for (r, (x, o)) in self.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let m = &mask.data()[(r / group) * c..(r / group + 1) * c];
            if !softmax_row(x, Some(m), o) {
                return Err(TensorError::NoValidPositions { row: r / group });
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Softmax(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.data().to_vec(), Op::Reshape(self.clone())))
    }

    /// Selects rows (over the last axis) by index, producing `(idx.len(), C)`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, c) = self.rows_cols();
        if idx.is_empty() {
            return Err(invalid("gather_rows", "no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, extent: rows });
            }
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_op(vec![idx.len(), c], data, Op::GatherRows(self.clone(), idx.to_vec())))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let (_, c) = self.rows_cols();
        if len == 0 || start + len > c {
            return Err(invalid("narrow", format!("range {start}..{} exceeds extent {c}", start + len)));
        }
        let data = self.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(Tensor::from_op(shape, data, Op::Narrow(self.clone(), start)))
    }

    /// One element per row: `out[r] = self[r, idx[r]]`.
    pub fn pick(&self, idx: &[usize]) -> Result<Tensor> {
        let (rows, c) = self.rows_cols();
        if idx.len() != rows {
            return Err(invalid("pick", format!("{} indices for {rows} rows", idx.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange { index: j, extent: c });
            }
            data.push(self.data()[r * c + j]);
        }
        Ok(Tensor::from_op(vec![rows], data, Op::Pick(self.clone(), idx.to_vec())))
    }

    /// Per-head scaled dot products.
    ///
    /// `q` and `k` are `(batch * L, D)` with heads laid out as contiguous
    /// column blocks of width `D / heads`. The result is `(batch * heads * L, L)`
    /// ordered by batch, head, query position.
    pub fn head_scores(&self, k: &Tensor, batch: usize, heads: usize, alpha: f64) -> Result<Tensor> {
        let (rows, d) = self.rows_cols();
        if self.shape() != k.shape() || self.shape().len() != 2 {
            return Err(mismatch("head_scores", self, k));
        }
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(invalid("head_scores", format!("cannot split {rows}x{d} into {batch} sequences of {heads} heads")));
        }
        let l = rows / batch;
        let dh = d / heads;
        let mut data = vec![0.0; batch * heads * l * l];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * l * d + h * dh;
                let qb = View::row_major(self.data(), off, l, dh, d);
                let kt = View::row_major(k.data(), off, l, dh, d).t();
                gemm(alpha, qb, kt, 0.0, &mut data, (b * heads + h) * l * l, l);
            }
        }
        let op = Op::HeadScores { q: self.clone(), k: k.clone(), batch, heads, alpha };
        Ok(Tensor::from_op(vec![batch * heads * l, l], data, op))
    }

    /// Per-head weighted sums of values.
    ///
    /// `self` holds attention weights `(batch * heads * Lq, Lk)`; `v` is
    /// `(batch * Lk, D)`. Returns `(batch * Lq, D)` with each head's output
    /// written to its own column block.
    pub fn head_context(&self, v: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
        let (arows, lk) = self.rows_cols();
        let (vrows, d) = v.rows_cols();
        if batch == 0 || heads == 0 || d % heads != 0 || vrows != batch * lk || arows % (batch * heads) != 0 {
            return Err(mismatch("head_context", self, v));
        }
        let lq = arows / (batch * heads);
        let dh = d / heads;
        let mut data = vec![0.0; batch * lq * d];
        for b in 0..batch {
            for h in 0..heads {
                let ab = View::row_major(self.data(), (b * heads + h) * lq * lk, lq, lk, lk);
                let vb = View::row_major(v.data(), b * lk * d + h * dh, lk, dh, d);
                gemm(1.0, ab, vb, 0.0, &mut data, b * lq * d + h * dh, d);
            }
        }
        let op = Op::HeadContext { attn: self.clone(), v: v.clone(), batch, heads };
        Ok(Tensor::from_op(vec![batch * lq, d], data, op))
    }
}
