use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{round_f32, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Every op output and gradient is rounded to `f32`.
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over non-pad positions.
    #[default]
    Mean,
    /// Plain sum over non-pad positions.
    Sum,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<Option<usize>>,
        probs: Vec<f64>,
        denom: f64,
    },
    Sum(Var),
    MeanRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Ops append nodes in execution order, so the node list is
/// already topologically sorted for the reverse sweep.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    training: bool,
    dropout_seed: u64,
    dropout_calls: u64,
    param_vars: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Precision::F32)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            training: false,
            dropout_seed: 0,
            dropout_calls: 0,
            param_vars: Vec::new(),
            consumed: false,
        }
    }

    /// Training-mode tape: dropout is active and seeded per call from
    /// `(seed, step, call index)`.
    pub fn training(precision: Precision, seed: u64, step: u64) -> Self {
        let mut g = Graph::new(precision);
        g.training = true;
        g.dropout_seed = mix64(seed ^ mix64(step.wrapping_add(0x5851_f42d_4c95_7f2d)));
        g
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn finish(&self, mut v: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            for x in &mut v {
                *x = round_f32(*x);
            }
        }
        v
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = self.finish(value);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let value = self.finish(t.into_data());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a stored parameter. Repeated calls within one tape return the
    /// same node, so gradients from every use accumulate in one place. Ids
    /// are only unique within one store, so a tape must bind from one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.param_vars.push((id, v));
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sign pattern of every relu input on the tape, in op order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.nodes[x.0].value.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ---- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    fn last_axis_operand(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let n = *self.shape(x).last().unwrap();
        if self.value(r).len() != n || self.shape(r).iter().rev().skip(1).any(|&d| d != 1) {
            return Err(Error::shape(op, self.shape(x), self.shape(r)));
        }
        Ok(n)
    }

    /// Adds a bias vector to every row (last-axis broadcast).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.last_axis_operand(x, bias, "add_row")?;
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Scales each column `j` of every row by `r[j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.last_axis_operand(x, r, "mul_row")?;
        let rv = self.value(r);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * rv[i % n])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, r), &[x, r]))
    }

    /// Scales each row `i` of a 2-D tensor by `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_col")?;
        if self.value(c).len() != m || self.shape(c)[0] != m {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(c)));
        }
        let cv = self.value(c);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * cv[i / n])
            .collect();
        Ok(self.push(vec![m, n], out, Op::MulCol(x, c), &[x, c]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                extent: shape.len(),
            });
        }
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| xs[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xs[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.last_axis_operand(x, gamma, "layer_norm")?;
        self.last_axis_operand(x, beta, "layer_norm")?;
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / n;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gamma, beta]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let xs = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xs[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty()
            || shape.contains(&0)
            || shape.iter().product::<usize>() != self.value(x).len()
        {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                extent: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(shape, out, op, inputs))
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), d], out, op, &[table]))
    }

    /// Replaces elements where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let op = Op::MaskedFill {
            x,
            mask: mask.to_vec(),
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x]))
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.dropout_seed ^ mix64(call + 1)));
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = zip_map(self.value(x), &scale, |v, s| v * s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, scale }, &[x]))
    }

    /// Token-level cross-entropy of `logits[T×V]` against `targets`.
    /// Positions whose target equals `pad_id` are excluded.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: Option<usize>,
        reduction: LossReduction,
    ) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        let xs = self.value(logits);
        let mut rows = Vec::with_capacity(t);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &target) in targets.iter().enumerate() {
            if Some(target) == pad_id {
                rows.push(None);
                continue;
            }
            if target >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    extent: v,
                });
            }
            let row = &xs[r * v..(r + 1) * v];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    op: "cross_entropy",
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= sum;
            }
            total += max + sum.ln() - row[target];
            count += 1;
            rows.push(Some(target));
        }
        let denom = match reduction {
            LossReduction::Mean => count.max(1) as f64,
            LossReduction::Sum => 1.0,
        };
        let op = Op::CrossEntropy {
            logits,
            rows,
            probs,
            denom,
        };
        Ok(self.push(vec![1], vec![total / denom], op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Mean over rows of a 2-D tensor, giving `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mean_rows")?;
        let xs = self.value(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xs[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), &[x]))
    }

    /// Square-kernel convolution over an `H×W×Cin` map with weights
    /// `k×k×Cin×Cout`, zero padding `(k-1)/2` and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (h, wd, cin) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::shape("conv2d", s, self.shape(w))),
        };
        let (k, cout) = match self.shape(w) {
            &[k1, k2, ci, co] if k1 == k2 && ci == cin && k1 % 2 == 1 => (k1, co),
            s => return Err(Error::shape("conv2d", self.shape(x), s)),
        };
        if self.value(b).len() != cout {
            return Err(Error::shape("conv2d", self.shape(w), self.shape(b)));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let pad = (k - 1) / 2;
        let (oh, ow) = conv_out_hw(h, wd, k, stride);
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                o.copy_from_slice(bs);
                for ky in 0..k {
                    let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd)
                        else {
                            continue;
                        };
                        let xin = &xs[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                        for (ci, &xv) in xin.iter().enumerate() {
                            let wrow = &ws[((ky * k + kx) * cin + ci) * cout..][..cout];
                            for (acc, &wv) in o.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let op = Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        };
        Ok(self.push(vec![oh, ow, cout], out, op, &[x, w, b]))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Back-propagates from a scalar loss. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                self.accumulate(v, dg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, dg: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let dg = self.finish(dg);
        let precision = self.precision;
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(dg) {
                    *e += d;
                    if precision == Precision::F32 {
                        *e = round_f32(*e);
                    }
                }
            }
            slot @ None => *slot = Some(dg),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let bs = self.value(b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bs[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((a, da));
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(self.value(a), m, k);
                    out.push((b, matmul_raw(&at, g, k, m, n)));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::AddRow(x, bias) => {
                let n = self.value(bias).len();
                out.push((x, g.to_vec()));
                if self.wants(bias) {
                    let mut db = vec![0.0; n];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                    out.push((bias, db));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, zip_map(g, self.value(b), |x, y| x * y)));
                }
                if self.wants(b) {
                    out.push((b, zip_map(g, self.value(a), |x, y| x * y)));
                }
            }
            &Op::MulRow(x, r) => {
                let rv = self.value(r);
                let n = rv.len();
                if self.wants(x) {
                    out.push((
                        x,
                        g.iter().enumerate().map(|(i, gv)| gv * rv[i % n]).collect(),
                    ));
                }
                if self.wants(r) {
                    let xs = self.value(x);
                    let mut dr = vec![0.0; n];
                    for (idx, gv) in g.iter().enumerate() {
                        dr[idx % n] += gv * xs[idx];
                    }
                    out.push((r, dr));
                }
            }
            &Op::MulCol(x, c) => {
                let cv = self.value(c);
                let n = self.shape(x)[1];
                if self.wants(x) {
                    out.push((
                        x,
                        g.iter().enumerate().map(|(i, gv)| gv * cv[i / n]).collect(),
                    ));
                }
                if self.wants(c) {
                    let xs = self.value(x);
                    let mut dc = vec![0.0; cv.len()];
                    for (idx, gv) in g.iter().enumerate() {
                        dc[idx / n] += gv * xs[idx];
                    }
                    out.push((c, dc));
                }
            }
            &Op::Scale(x, s) => out.push((x, g.iter().map(|v| v * s).collect())),
            &Op::Relu(x) => {
                let xs = self.value(x);
                out.push((x, zip_map(g, xs, |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
            }
            &Op::Sigmoid(x) => out.push((x, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)))),
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                let n = gam.len();
                let rows = y.len() / n;
                if self.wants(*x) {
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let base = r * n;
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = g[base + j] * gam[j];
                            sum_d += d;
                            sum_dh += d * xhat[base + j];
                        }
                        for j in 0..n {
                            let d = g[base + j] * gam[j];
                            dx[base + j] = rstd[r] / n as f64
                                * (n as f64 * d - sum_d - xhat[base + j] * sum_dh);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (idx, gv) in g.iter().enumerate() {
                        dg[idx % n] += gv * xhat[idx];
                        db[idx % n] += gv;
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                out.push((x, transpose_raw(g, n, m)));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dv.extend_from_slice(
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                        out.push((v, dv));
                    }
                    offset += chunk;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::MaskedFill { x, mask } => {
                let dx = g
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { 0.0 } else { gv })
                    .collect();
                out.push((*x, dx));
            }
            Op::Dropout { x, scale } => out.push((*x, zip_map(g, scale, |a, b| a * b))),
            Op::CrossEntropy {
                logits,
                rows,
                probs,
                denom,
            } => {
                let v = self.shape(*logits)[1];
                let coef = g[0] / denom;
                let mut dl = vec![0.0; probs.len()];
                for (r, target) in rows.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * v + j] = coef * (probs[r * v + j] - onehot);
                    }
                }
                out.push((*logits, dl));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::MeanRows(x) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(g.iter().map(|gv| gv / m as f64));
                }
                out.push((x, dx));
            }
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (h, wd, cin) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let k = self.shape(w)[0];
                let (oh, ow, cout) = (node.shape[0], node.shape[1], node.shape[2]);
                let (xs, ws) = (self.value(x), self.value(w));
                let want_x = self.wants(x);
                let want_w = self.wants(w);
                let mut dx = vec![0.0; if want_x { xs.len() } else { 0 }];
                let mut dw = vec![0.0; if want_w { ws.len() } else { 0 }];
                let mut db = vec![0.0; cout];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for (acc, gv) in db.iter_mut().zip(go) {
                            *acc += gv;
                        }
                        for ky in 0..k {
                            let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h)
                            else {
                                continue;
                            };
                            for kx in 0..k {
                                let Some(ix) =
                                    (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd)
                                else {
                                    continue;
                                };
                                let xbase = (iy * wd + ix) * cin;
                                for ci in 0..cin {
                                    let wbase = ((ky * k + kx) * cin + ci) * cout;
                                    if want_x {
                                        let wrow = &ws[wbase..wbase + cout];
                                        dx[xbase + ci] +=
                                            go.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if want_w {
                                        let xv = xs[xbase + ci];
                                        for (acc, gv) in dw[wbase..wbase + cout].iter_mut().zip(go)
                                        {
                                            *acc += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    out.push((x, dx));
                }
                if want_w {
                    out.push((w, dw));
                }
                out.push((b, db));
            }
        }
        out
    }

    /// Adds this tape's parameter gradients into the store. Trainable
    /// parameters that were bound but not reached by the loss receive zeros.
    pub fn write_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.param_vars {
            if !store.is_trainable(id) {
                continue;
            }
            let n = &self.nodes[v.0];
            let g = n.grad.clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
            let t = store.get_mut(id);
            match t.grad_mut() {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(g) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Parameters bound to this tape.
    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars.iter().map(|(p, _)| *p)
    }
}

/// Output height and width of a "same"-padded convolution with odd kernel `k`.
pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let pad = (k - 1) / 2;
    (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    )
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
