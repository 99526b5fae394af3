//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied during a forward pass as a node
//! holding its output value plus whatever the backward rule needs.
//! [`Tape::backward`] walks the nodes in reverse, seeding the scalar loss
//! with 1, and returns gradients for every node. Parameters enter the
//! tape by name through [`Tape::param`] and their gradients are reported
//! under that name.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::params::{Gradients, ParamSet};
use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Reshape(Var),
    TConv {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Result of a backward pass.
pub struct Backward<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Gradients<T>,
}

impl<T: Real> Backward<T> {
    /// Gradient of the loss w.r.t. any recorded node; zeros when the node
    /// did not influence the loss.
    pub fn wrt(&self, v: Var, numel: usize) -> Vec<T> {
        self.nodes[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); numel])
    }

    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<String, Var>,
    tags: BTreeMap<&'static str, Vec<Var>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            tags: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter looked up by name; repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let mut value = params.get(name)?.clone();
        value.zero_grad();
        let v = self.push(value, Op::Param);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Attaches `v` to a named list for later inspection.
    pub fn tag(&mut self, label: &'static str, v: Var) {
        self.tags.entry(label).or_default().push(v);
    }

    pub fn tagged(&self, label: &str) -> &[Var] {
        self.tags.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Hash of every piecewise choice made in the forward pass: ReLU and
    /// clamp regions and group-max winners. Two evaluations with equal
    /// signatures were computed by the same smooth branch.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        h.write_u8((*v > T::zero()) as u8);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in self.value(*x).data() {
                        h.write_u8(if *v < *lo { 0 } else if *v > *hi { 2 } else { 1 });
                    }
                }
                Op::GroupMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    /// Matrix product of `[m×k]` and `[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, p) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        Ok(self.push(Tensor::new(vec![m, p], data)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds `bias[c]` to every row of `x[.., c]`; the only broadcast.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols();
        if self.shape(bias) != [c] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let src = self.value(x);
        let data = src
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bv)| v + bv))
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// closed interval and zeroed outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let (_, c) = src.rows_cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::SoftmaxRows(x)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// per-column gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols();
        for p in [gain, shift] {
            if self.shape(p) != [c] {
                return Err(dim_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps: T = lit(1e-5);
        let n: T = lit(c as f64);
        let src = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(shift).data());
        let mut xhat = Vec::with_capacity(src.numel());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix(a, "concat_cols")?;
        let (rb, cb) = self.matrix(b, "concat_cols")?;
        if ra != rb {
            return Err(dim_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![ra, ca + cb], data)?, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix(a, "concat_rows")?;
        let (rb, cb) = self.matrix(b, "concat_rows")?;
        if ca != cb {
            return Err(dim_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(vec![ra + rb, ca], data)?, Op::ConcatRows(a, b)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }))
    }

    /// Output row `i` is the column-wise max over rows `groups[i]` of `x`.
    /// Ties resolve to the first listed row.
    pub fn group_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.matrix(x, "group_max")?;
        check_groups(groups, r)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(groups.len() * c);
        let mut argmax = Vec::with_capacity(groups.len() * c);
        for g in groups {
            for j in 0..c {
                let mut best = g[0];
                for &row in &g[1..] {
                    if src[row * c + j] > src[best * c + j] {
                        best = row;
                    }
                }
                out.push(src[best * c + j]);
                argmax.push(best * c + j);
            }
        }
        Ok(self.push(Tensor::new(vec![groups.len(), c], out)?, Op::GroupMax { x, argmax }))
    }

    /// Output row `i` is the mean over rows `groups[i]` of `x`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.matrix(x, "group_mean")?;
        check_groups(groups, r)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * c];
        for (gi, g) in groups.iter().enumerate() {
            let inv: T = lit(1.0 / g.len() as f64);
            let orow = &mut out[gi * c..(gi + 1) * c];
            for &row in g {
                for (o, &v) in orow.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                    *o += v * inv;
                }
            }
        }
        let t = Tensor::new(vec![groups.len(), c], out)?;
        Ok(self.push(
            t,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Transposed 2D convolution of `x[h, w, c_in]` with
    /// `kernel[k, k, c_in, c_out]`.
    pub fn tconv2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(kernel), stride, pad, out_pad)?;
        let (oh, ow) = geom.out_dims().expect("checked");
        let data = kernels::tconv2d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let t = Tensor::new(vec![oh, ow, geom.c_out], data)?;
        Ok(self.push(t, Op::TConv { x, kernel, geom }))
    }

    /// Mean softmax cross-entropy of `logits[b×classes]` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::contract(format!(
                "{} labels for {b}x{c} logits",
                labels.len()
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
            loss -= row[label].ln();
        }
        loss /= lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Gradients::new();
        for (name, &v) in &self.param_vars {
            let numel = self.value(v).numel();
            let g = grads[v.0].clone().unwrap_or_else(|| vec![T::zero(); numel]);
            params.insert(name.clone(), g);
        }
        Ok(Backward {
            nodes: grads,
            params,
        })
    }

    /// Backward pass whose parameter gradients are added into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        params.accumulate(self.backward(loss)?.params())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = numel(v);
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                kernels::matmul_nt_acc(g, val(*b), acc!(*a), m, k, p);
                kernels::matmul_tn_acc(val(*a), g, acc!(*b), m, k, p);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = acc!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a).iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (&gv, &y))| *d += gv * y);
                acc!(*b).iter_mut().zip(g.iter().zip(va)).for_each(|(d, (&gv, &x))| *d += gv * x);
            }
            Op::Scale(a, c) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
            }
            Op::AddBias(x, b) => {
                add_into(acc!(*x), g);
                let c = numel(*b);
                let gb = acc!(*b);
                for row in g.chunks_exact(c) {
                    add_into(gb, row);
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc!(*x).iter_mut().zip(g.iter().zip(vx)).for_each(|(d, (&gv, &v))| {
                    if v > T::zero() {
                        *d += gv;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc!(*x).iter_mut().zip(g.iter().zip(vx)).for_each(|(d, (&gv, &v))| {
                    if v >= *lo && v <= *hi {
                        *d += gv;
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two: T = lit(2.0);
                acc!(*x).iter_mut().zip(g.iter().zip(vx)).for_each(|(d, (&gv, &v))| *d += two * v * gv);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let (_, c) = node.value.rows_cols();
                let gx = acc!(*x);
                for ((grow, yrow), dst) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let c = numel(*gain);
                let n: T = lit(c as f64);
                let gv = val(*gain).to_vec();
                {
                    let gg = acc!(*gain);
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                {
                    let gs = acc!(*shift);
                    for grow in g.chunks_exact(c) {
                        add_into(gs, grow);
                    }
                }
                let gx = acc!(*x);
                let mut dh = vec![T::zero(); c];
                for (r, ((grow, hrow), dst)) in g
                    .chunks_exact(c)
                    .zip(xhat.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        dh[j] = grow[j] * gv[j];
                        s1 += dh[j];
                        s2 += dh[j] * hrow[j];
                    }
                    let k = inv_std[r] / n;
                    for j in 0..c {
                        dst[j] += k * (n * dh[j] - s1 - hrow[j] * s2);
                    }
                }
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                acc!(*x).iter_mut().for_each(|d| *d += g0);
            }
            Op::MeanAll(x) => {
                let g0 = g[0] / lit(numel(*x) as f64);
                acc!(*x).iter_mut().for_each(|d| *d += g0);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let w = ca + cb;
                {
                    let ga = acc!(*a);
                    for (dst, grow) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(w)) {
                        add_into(dst, &grow[..ca]);
                    }
                }
                let gb = acc!(*b);
                for (dst, grow) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(w)) {
                    add_into(dst, &grow[ca..]);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = numel(*a);
                add_into(acc!(*a), &g[..na]);
                add_into(acc!(*b), &g[na..]);
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.value.shape()[1];
                let gx = acc!(*x);
                for (dst, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    add_into(&mut dst[*start..start + len], grow);
                }
            }
            Op::GroupMax { x, argmax } => {
                let gx = acc!(*x);
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
            Op::GroupMean { x, groups } => {
                let c = node.value.shape()[1];
                let gx = acc!(*x);
                for (gi, grp) in groups.iter().enumerate() {
                    let inv: T = lit(1.0 / grp.len() as f64);
                    for &row in grp {
                        for j in 0..c {
                            gx[row * c + j] += g[gi * c + j] * inv;
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::TConv { x, kernel, geom } => {
                let (vx, vk) = (val(*x), val(*kernel));
                let mut dx = grads[x.0].take().unwrap_or_else(|| vec![T::zero(); vx.len()]);
                let mut dk = grads[kernel.0].take().unwrap_or_else(|| vec![T::zero(); vk.len()]);
                kernels::tconv2d_backward(vx, vk, g, geom, Some(&mut dx), Some(&mut dk));
                grads[x.0] = Some(dx);
                grads[kernel.0] = Some(dk);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / lit(labels.len() as f64);
                let gl = acc!(*logits);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn check_groups(groups: &[Vec<usize>], rows: usize) -> Result<()> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&r| r >= rows)) {
        return Err(Error::contract("groups must be non-empty and index existing rows"));
    }
    Ok(())
}

/// Validates a transposed-convolution configuration against input and
/// kernel shapes.
pub fn conv_geom(
    x: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvGeom> {
    let (&[h, w, c_in], &[k, k2, kc, c_out]) = (x, kernel) else {
        return Err(dim_err("tconv2d", x, kernel));
    };
    if k != k2 || kc != c_in {
        return Err(dim_err("tconv2d", x, kernel));
    }
    if stride == 0 {
        return Err(Error::config("tconv2d stride must be at least 1"));
    }
    let geom = ConvGeom {
        h,
        w,
        c_in,
        c_out,
        kernel: k,
        stride,
        pad,
        out_pad,
    };
    if geom.out_dims().is_none() {
        return Err(Error::config(format!(
            "tconv2d output extent not positive for input {h}x{w}, k={k}, s={stride}, p={pad}, op={out_pad}"
        )));
    }
    Ok(geom)
}
