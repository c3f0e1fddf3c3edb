//! Define-by-run tape over whole tensors.
//!
//! Every primitive appends one node holding its output and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep.

use std::fmt;
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A linear map applied row-wise to `[batch, 1, length]` tensors.
pub trait LinearMap: Send + Sync + fmt::Debug {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn forward_into(&self, x: &[f64], out: &mut [f64]);
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Sum(Vec<Var>),
    SumAll(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Shift {
        x: Var,
        shift: usize,
    },
    Mse(Var, Var),
    Softmax(Var),
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    Linear {
        x: Var,
        map: Arc<dyn LinearMap>,
        adjoint: bool,
    },
    Concat(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{what}: shape mismatch {a:?} vs {b:?}"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_nodes.get(id.0) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        if !p.frozen {
            self.nodes[v.0].param = Some(id);
        }
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn binary_shapes(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::invalid(format!(
                "scale_by: factor must have one element, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let c = self.value(s).item();
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy { x, s }, rg))
    }

    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("sum of zero tensors"))?;
        let mut out = self.value(first).clone();
        for &v in &inputs[1..] {
            let t = self.value(v);
            if t.shape() != out.shape() {
                return Err(shape_err("sum", out.shape(), t.shape()));
            }
            out.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Sum(inputs.to_vec()), rg))
    }

    /// Sum of every entry, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    /// Zero-padded "same" convolution: `x [B,Cin,L]`, `w [Cout,Cin,K]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, cin, len) = self.value(x).dims3()?;
        let (cout, wcin, k) = self.value(w).dims3()?;
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv1d: kernel size {k} must be odd")));
        }
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv1d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err("conv1d bias", self.value(b).shape(), &[cout]));
        }
        let half = k / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * cout * len);
        for _ in 0..batch {
            for &bias in bd {
                out.extend(std::iter::repeat_n(bias, len));
            }
        }
        for bi in 0..batch {
            for o in 0..cout {
                let row = &mut out[(bi * cout + o) * len..][..len];
                for c in 0..cin {
                    let xrow = &xd[(bi * cin + c) * len..][..len];
                    let wrow = &wd[(o * cin + c) * k..][..k];
                    for (j, &wj) in wrow.iter().enumerate() {
                        // out[l] += wj * x[l + j - half] over the valid range of l
                        let (lo, hi) = valid_range(j, half, len);
                        if hi <= lo {
                            continue;
                        }
                        let src = lo + j - half;
                        axpy(wj, &xrow[src..src + (hi - lo)], &mut row[lo..hi]);
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, len], out),
            Op::Conv1d { x, w, b },
            rg,
        ))
    }

    /// Per-channel normalization with statistics of the current batch (over batch and length).
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        let count = batch * len;
        if count < 2 {
            return Err(Error::invalid(format!(
                "batchnorm1d: needs at least 2 values per channel, got {count}"
            )));
        }
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::invalid(format!(
                "batchnorm1d: gamma/beta must have shape [{ch}]"
            )));
        }
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let n = count as f64;
        let mut mean = vec![0.0; ch];
        let mut inv_std = vec![0.0; ch];
        for c in 0..ch {
            let rows = (0..batch).map(|bi| (bi * ch + c) * len);
            let m = rows.clone().map(|s| xd[s..s + len].iter().sum::<f64>()).sum::<f64>() / n;
            let var = rows
                .map(|s| xd[s..s + len].iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum::<f64>()
                / n;
            mean[c] = m;
            inv_std[c] = 1.0 / (var + eps).sqrt();
        }
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (r, row) in xd.chunks_exact(len).enumerate() {
            let c = r % ch;
            let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
            xhat.extend(row.iter().map(|v| (v - m) * is));
            out.extend(xhat[r * len..].iter().map(|h| gc * h + bc));
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, ch, len], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
        );
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// `out[i] = x[(i - s) mod L]` along the last dimension.
    pub fn circular_shift(&mut self, x: Var, s: isize) -> Result<Var> {
        let t = self.value(x);
        let len = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("shift of a rank-0 tensor"))?;
        let shift = if len == 0 {
            0
        } else {
            s.rem_euclid(len as isize) as usize
        };
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(len.max(1)).zip(out.chunks_mut(len.max(1))) {
            dst[shift..].copy_from_slice(&src[..len - shift]);
            dst[..shift].copy_from_slice(&src[len - shift..]);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Shift { x, shift }, rg))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_shapes("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), rg))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let t = self.value(logits);
        if t.is_empty() {
            return Err(Error::invalid("softmax over zero logits"));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = Tensor::from_parts(vec![exps.len()], exps.into_iter().map(|e| e / z).collect());
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::Softmax(logits), rg))
    }

    /// `Σ_t weights[t] * inputs[t]` for a weight vector of matching length.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let w = self.value(weights).data().to_vec();
        if w.len() != inputs.len() || inputs.is_empty() {
            return Err(Error::invalid(format!(
                "weighted_sum: {} weights for {} inputs",
                w.len(),
                inputs.len()
            )));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(inputs[0]).len()];
        for (&v, &wt) in inputs.iter().zip(&w) {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("weighted_sum", &shape, t.shape()));
            }
            if wt != 0.0 {
                axpy(wt, t.data(), &mut out);
            }
        }
        let mut all = inputs.to_vec();
        all.push(weights);
        let rg = self.rg(&all);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Applies `map` (or its adjoint) to every `[1, length]` row of a `[B, 1, length]` tensor.
    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap>, adjoint: bool) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        let (inp, outp) = if adjoint {
            (map.output_len(), map.input_len())
        } else {
            (map.input_len(), map.output_len())
        };
        if ch != 1 || len != inp {
            return Err(Error::invalid(format!(
                "linear map expects [B, 1, {inp}], got {:?}",
                self.value(x).shape()
            )));
        }
        let mut out = vec![0.0; batch * outp];
        for (src, dst) in self.value(x).data().chunks(inp).zip(out.chunks_mut(outp)) {
            if adjoint {
                map.adjoint_into(src, dst);
            } else {
                map.forward_into(src, dst);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, 1, outp], out),
            Op::Linear { x, map, adjoint },
            rg,
        ))
    }

    /// Concatenates `[B, C_i, L]` tensors along the channel dimension.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (batch, _, len) = self.value(first).dims3()?;
        let mut chans = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (b, c, l) = self.value(v).dims3()?;
            if b != batch || l != len {
                return Err(shape_err("concat", self.value(first).shape(), self.value(v).shape()));
            }
            chans.push(c);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(batch * total * len);
        for bi in 0..batch {
            for (&v, &c) in inputs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(v).data()[bi * c * len..(bi + 1) * c * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(vec![batch, total, len], out),
            Op::Concat(inputs.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; gradients are added onto the store's slots.
    ///
    /// Every trainable parameter in `store` ends up with a gradient slot,
    /// zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.sweep(loss, false)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.accumulate_grad(id, &g);
            }
        }
        store.ensure_grads();
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None where it does not flow).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        self.sweep(loss, true)
    }

    /// Reverse sweep; intermediate gradients are dropped once used unless `keep_all`.
    fn sweep(&self, loss: Var, keep_all: bool) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if keep_all || node.param.is_some() {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    /// `d[i] += f(i)`, building the slot directly when it is still empty.
    fn accum_elementwise(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(d) => d.iter_mut().enumerate().for_each(|(i, d)| *d += f(i)),
            slot @ None => *slot = Some((0..self.nodes[v.0].value.len()).map(f).collect()),
        }
    }

    /// `d += c·g`, or `d = c·g` when the slot is still empty.
    fn accum_axpy(&self, grads: &mut [Option<Vec<f64>>], v: Var, c: f64, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(d) => axpy(c, g, d),
            slot @ None => {
                *slot = Some(if c == 1.0 {
                    g.to_vec()
                } else {
                    g.iter().map(|x| c * x).collect()
                })
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_axpy(grads, *a, 1.0, g);
                self.accum_axpy(grads, *b, 1.0, g);
            }
            Op::Sub(a, b) => {
                self.accum_axpy(grads, *a, 1.0, g);
                self.accum_axpy(grads, *b, -1.0, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum_elementwise(grads, *a, |i| g[i] * vb[i]);
                self.accum_elementwise(grads, *b, |i| g[i] * va[i]);
            }
            Op::Scale(x, c) => self.accum_axpy(grads, *x, *c, g),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                self.accum_axpy(grads, *x, c, g);
                let xd = self.value(*x).data();
                self.accum(grads, *s, |d| d[0] += dot(g, xd));
            }
            Op::Sum(inputs) => {
                for v in inputs {
                    self.accum_axpy(grads, *v, 1.0, g);
                }
            }
            Op::SumAll(x) => self.accum(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (batch, ch, len) = self.value(*x).dims3().expect("checked in forward");
                let gam = self.value(*gamma).data();
                let n = (batch * len) as f64;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for c in 0..ch {
                    for bi in 0..batch {
                        let s = (bi * ch + c) * len;
                        dgamma[c] += dot(&g[s..s + len], &xhat[s..s + len]);
                        dbeta[c] += g[s..s + len].iter().sum::<f64>();
                    }
                }
                // dx = γ·inv_std/n · (n·g − Σg − x̂·Σ(g·x̂))
                if self.nodes[x.0].requires_grad {
                    let slot = grads[x.0].get_or_insert_with(Vec::new);
                    let fresh = slot.is_empty();
                    for r in 0..batch * ch {
                        let c = r % ch;
                        let k = gam[c] * inv_std[c] / n;
                        let (db, dg) = (dbeta[c], dgamma[c]);
                        let span = r * len..(r + 1) * len;
                        let terms = g[span.clone()]
                            .iter()
                            .zip(&xhat[span.clone()])
                            .map(|(g, h)| k * (n * g - db - h * dg));
                        if fresh {
                            slot.extend(terms);
                        } else {
                            slot[span].iter_mut().zip(terms).for_each(|(d, t)| *d += t);
                        }
                    }
                }
                self.accum(grads, *gamma, |d| axpy(1.0, &dgamma, d));
                self.accum(grads, *beta, |d| axpy(1.0, &dbeta, d));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accum_elementwise(grads, *x, |i| if xd[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Shift { x, shift } => {
                let len = *node.value.shape().last().expect("rank >= 1");
                let shift = *shift;
                self.accum(grads, *x, |d| {
                    for (src, dst) in g.chunks(len).zip(d.chunks_mut(len)) {
                        // out[i] = x[i - s]  =>  dx[j] += g[j + s]
                        axpy(1.0, &src[shift..], &mut dst[..len - shift]);
                        axpy(1.0, &src[..shift], &mut dst[len - shift..]);
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pd, td) = (self.value(*p).data(), self.value(*t).data());
                let k = 2.0 * g[0] / pd.len().max(1) as f64;
                self.accum_elementwise(grads, *p, |i| k * (pd[i] - td[i]));
                self.accum_elementwise(grads, *t, |i| -(k * (pd[i] - td[i])));
            }
            Op::Softmax(logits) => {
                let beta = node.value.data();
                let inner = dot(g, beta);
                self.accum(grads, *logits, |d| {
                    for i in 0..d.len() {
                        d[i] += beta[i] * (g[i] - inner);
                    }
                });
            }
            Op::WeightedSum { weights, inputs } => {
                let w = self.value(*weights).data();
                for (v, &wt) in inputs.iter().zip(w) {
                    if wt != 0.0 {
                        self.accum_axpy(grads, *v, wt, g);
                    }
                }
                if self.nodes[weights.0].requires_grad {
                    let dw: Vec<f64> = inputs.iter().map(|v| dot(g, self.value(*v).data())).collect();
                    self.accum(grads, *weights, |d| axpy(1.0, &dw, d));
                }
            }
            Op::Linear { x, map, adjoint } => {
                let (inp, outp) = if *adjoint {
                    (map.output_len(), map.input_len())
                } else {
                    (map.input_len(), map.output_len())
                };
                self.accum(grads, *x, |d| {
                    let mut buf = vec![0.0; inp];
                    for (gr, dr) in g.chunks(outp).zip(d.chunks_mut(inp)) {
                        if *adjoint {
                            map.forward_into(gr, &mut buf);
                        } else {
                            map.adjoint_into(gr, &mut buf);
                        }
                        axpy(1.0, &buf, dr);
                    }
                });
            }
            Op::Concat(inputs) => {
                let (batch, total, len) = node.value.dims3().expect("rank 3");
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(*v).shape()[1];
                    self.accum(grads, *v, |d| {
                        for bi in 0..batch {
                            let src = &g[(bi * total + offset) * len..][..c * len];
                            axpy(1.0, src, &mut d[bi * c * len..][..c * len]);
                        }
                    });
                    offset += c;
                }
            }
        }
    }

    fn conv1d_backward(&self, x: Var, w: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (batch, cin, len) = self.value(x).dims3().expect("checked in forward");
        let (cout, _, k) = self.value(w).dims3().expect("checked in forward");
        let half = k / 2;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        self.accum(grads, b, |d| {
            for bi in 0..batch {
                for o in 0..cout {
                    d[o] += g[(bi * cout + o) * len..][..len].iter().sum::<f64>();
                }
            }
        });
        self.accum(grads, w, |d| {
            for bi in 0..batch {
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * len..][..len];
                    for c in 0..cin {
                        let xrow = &xd[(bi * cin + c) * len..][..len];
                        for j in 0..k {
                            let (lo, hi) = valid_range(j, half, len);
                            if hi <= lo {
                                continue;
                            }
                            let src = lo + j - half;
                            d[(o * cin + c) * k + j] += dot(&grow[lo..hi], &xrow[src..src + (hi - lo)]);
                        }
                    }
                }
            }
        });
        self.accum(grads, x, |d| {
            for bi in 0..batch {
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * len..][..len];
                    for c in 0..cin {
                        let drow = &mut d[(bi * cin + c) * len..][..len];
                        for j in 0..k {
                            let (lo, hi) = valid_range(j, half, len);
                            if hi <= lo {
                                continue;
                            }
                            let src = lo + j - half;
                            axpy(
                                wd[(o * cin + c) * k + j],
                                &grow[lo..hi],
                                &mut drow[src..src + (hi - lo)],
                            );
                        }
                    }
                }
            }
        });
    }
}

/// Output positions `l` for which `l + j - half` is inside `0..len`.
#[inline]
fn valid_range(j: usize, half: usize, len: usize) -> (usize, usize) {
    let lo = half.saturating_sub(j).min(len);
    let hi = (len + half).saturating_sub(j).min(len);
    (lo, hi.max(lo))
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
