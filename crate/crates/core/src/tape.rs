//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! needs for the backward rule. Node indices are a topological order, so the
//! backward pass is a single reverse sweep.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

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
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Softmax { x: Var, k: usize },
    Concat { inputs: Vec<Var>, outer: usize, inner: Vec<usize> },
    GlobalAvgPool { x: Var, rows: usize, spatial: usize },
    GroupMean { x: Var, groups: usize, features: usize },
    Linear { x: Var, w: Var, b: Var, n: usize, f: usize, k: usize },
    GraphAggregate { x: Var, a: Var, v: usize },
    ChannelMix { x: Var, w: Var, batch: usize, c_in: usize, c_out: usize, spatial: usize },
    TemporalConv { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, batch: usize, c: usize, spatial: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, k: usize },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    t_in: usize,
    t_out: usize,
    v: usize,
    l: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x != 0.0 {
                    for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Inverted dropout. A no-op when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, mask)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = match self.shape(x).last() {
            Some(&k) if k > 0 => k,
            _ => return dim_err(format!("softmax: bad shape {:?}", self.shape(x))),
        };
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(self.push(value, Op::Softmax { x, k }, &[x]))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return dim_err("concat: no inputs"),
        };
        if axis >= first.len() {
            return dim_err(format!("concat: axis {axis} out of range for {:?}", first));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut inner = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat: shape {:?} incompatible with {:?} on axis {axis}", s, first));
            }
            out_shape[axis] += s[axis];
            inner.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = first[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&inner) {
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), outer, inner }, inputs))
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return dim_err(format!("global_avg_pool: need rank >= 3, got {:?}", s));
        }
        let rows = s[0] * s[1];
        let spatial: usize = s[2..].iter().product();
        if spatial == 0 {
            return dim_err("global_avg_pool: empty spatial extent");
        }
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x, rows, spatial }, &[x]))
    }

    /// Averages consecutive groups of rows: `[N * groups, F] -> [N, F]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || groups == 0 || s[0] % groups != 0 {
            return dim_err(format!("group_mean: {:?} not divisible into groups of {groups}", s));
        }
        let (n, f) = (s[0] / groups, s[1]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * f];
        for i in 0..n {
            let out = &mut data[i * f..(i + 1) * f];
            for g in 0..groups {
                let row = &xv[(i * groups + g) * f..(i * groups + g + 1) * f];
                for (o, &r) in out.iter_mut().zip(row) {
                    *o += r;
                }
            }
            for o in out.iter_mut() {
                *o /= groups as f64;
            }
        }
        let value = Tensor::new(vec![n, f], data)?;
        Ok(self.push(value, Op::GroupMean { x, groups, features: f }, &[x]))
    }

    /// `x[N, F] · w[K, F]ᵀ + b[K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return dim_err(format!("linear: input {:?}, weight {:?}, bias {:?}", sx, sw, sb));
        }
        let (n, f, k) = (sx[0], sx[1], sw[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let xr = &xv[i * f..(i + 1) * f];
            for c in 0..k {
                data[i * k + c] = dot(xr, &wv[c * f..(c + 1) * f]) + bv[c];
            }
        }
        let value = Tensor::new(vec![n, k], data)?;
        Ok(self.push(value, Op::Linear { x, w, b, n, f, k }, &[x, w, b]))
    }

    /// Contracts the last (joint) axis with a `V × V` matrix:
    /// `out[.., k] = Σ_i x[.., i] · a[i, k]`.
    pub fn graph_aggregate(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x).to_vec(), self.shape(a));
        let v = match sx.last() {
            Some(&v) if sa == [v, v] => v,
            _ => return dim_err(format!("graph_aggregate: features {:?} vs adjacency {:?}", sx, sa)),
        };
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let mut data = vec![0.0; xv.len()];
        for (out, row) in data.chunks_mut(v).zip(xv.chunks(v)) {
            for (i, &xi) in row.iter().enumerate() {
                if xi != 0.0 {
                    for (o, &aik) in out.iter_mut().zip(&av[i * v..(i + 1) * v]) {
                        *o += xi * aik;
                    }
                }
            }
        }
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::GraphAggregate { x, a, v }, &[x, a]))
    }

    /// 1×1 convolution across the channel axis: `[B, C, ...]` with `w[C', C]`.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w));
        if sx.len() < 2 || sw.len() != 2 || sw[1] != sx[1] {
            return dim_err(format!("channel_mix: input {:?} vs weight {:?}", sx, sw));
        }
        let (batch, c_in, c_out) = (sx[0], sx[1], sw[0]);
        let spatial: usize = sx[2..].iter().product();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut data = vec![0.0; batch * c_out * spatial];
        for b in 0..batch {
            for o in 0..c_out {
                let out = &mut data[(b * c_out + o) * spatial..(b * c_out + o + 1) * spatial];
                for c in 0..c_in {
                    let wc = wv[o * c_in + c];
                    if wc != 0.0 {
                        let src = &xv[(b * c_in + c) * spatial..(b * c_in + c + 1) * spatial];
                        axpy(out, wc, src);
                    }
                }
            }
        }
        let mut shape = sx;
        shape[1] = c_out;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ChannelMix { x, w, batch, c_in, c_out, spatial }, &[x, w]))
    }

    /// Convolution along the frame axis of `x[B, C, T, V]` with `w[C', C, L]`
    /// (or `[C', C, L, 1]`), zero padding `(L - 1) / 2` so that
    /// `T' = ceil(T / stride)`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let kernel_ok = (sw.len() == 3 || (sw.len() == 4 && sw[3] == 1)) && sx.len() == 4 && sw[1] == sx[1];
        if !kernel_ok {
            return dim_err(format!("temporal_conv: input {:?} vs kernel {:?}", sx, sw));
        }
        let l = sw[2];
        if l % 2 == 0 {
            return Err(Error::Config(format!("temporal window {l} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("temporal stride must be positive".into()));
        }
        let pad = (l - 1) / 2;
        let (batch, c_in, t_in, v) = (sx[0], sx[1], sx[2], sx[3]);
        let t_out = (t_in + 2 * pad - l) / stride + 1;
        let g = ConvGeom { batch, c_in, c_out: sw[0], t_in, t_out, v, l, stride, pad };
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut data = vec![0.0; batch * g.c_out * t_out * v];
        for b in 0..batch {
            for c in 0..c_in {
                for k in 0..l {
                    for t in 0..t_out {
                        let Some(ti) = g.input_frame(t, k) else { continue };
                        let src = &xv[((b * c_in + c) * t_in + ti) * v..][..v];
                        for o in 0..g.c_out {
                            let wk = wv[(o * c_in + c) * l + k];
                            let dst = &mut data[((b * g.c_out + o) * t_out + t) * v..][..v];
                            axpy(dst, wk, src);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, g.c_out, t_out, v], data)?;
        Ok(self.push(value, Op::TemporalConv { x, w, geom: g }, &[x, w]))
    }

    /// Per-channel batch normalization of `x[B, C, ...]`.
    ///
    /// In training mode statistics come from the batch (biased variance) and
    /// the running estimates are updated with momentum [`BN_MOMENTUM`] using
    /// the unbiased variance. Evaluation mode normalizes with the running
    /// estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        train: bool,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return dim_err(format!("batch_norm: need rank >= 2, got {:?}", s));
        }
        let (batch, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if batch == 0 || spatial == 0 {
            return Err(Error::Input(format!("batch_norm: empty batch {:?}", s)));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running_mean.len() != c || running_var.len() != c {
            return dim_err(format!("batch_norm: parameters do not match {c} channels"));
        }
        let n = (batch * spatial) as f64;
        let xv = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..batch {
                for ch in 0..c {
                    let block = &xv[(b * c + ch) * spatial..][..spatial];
                    mean[ch] += block.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for b in 0..batch {
                for ch in 0..c {
                    let block = &xv[(b * c + ch) * spatial..][..spatial];
                    var[ch] += block.iter().map(|&v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for ch in 0..c {
                running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch];
                running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let op = Op::BatchNorm { x, gamma, beta, batch, c, spatial, xhat, inv_std, train };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Mean cross-entropy of `logits[N, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return dim_err(format!("cross_entropy: logits {:?} with {} labels", s, labels.len()));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        probs.chunks_mut(k).for_each(softmax_in_place);
        let mut loss = 0.0;
        for (row, &label) in lv.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs, k };
        Ok(self.push(value, op, &[logits]))
    }

    /// Accumulates gradients of the scalar `loss` into every reachable node
    /// that requires them. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, grads } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, node, &g);
        }
        Ok(())
    }
}

impl ConvGeom {
    fn input_frame(&self, t: usize, k: usize) -> Option<usize> {
        let ti = (t * self.stride + k) as isize - self.pad as isize;
        (ti >= 0 && (ti as usize) < self.t_in).then_some(ti as usize)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Runs `f` on the gradient buffer of `v` when `v` needs a gradient.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Matmul { a, b, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, |da| {
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                    }
                }
            });
            accumulate(nodes, grads, b, |db| {
                for i in 0..m {
                    for p in 0..k {
                        axpy(&mut db[p * n..(p + 1) * n], av[i * k + p], &g[i * n..(i + 1) * n]);
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, |da| axpy(da, 1.0, g));
            accumulate(nodes, grads, b, |db| axpy(db, 1.0, g));
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |da| axpy(da, 1.0, g));
            accumulate(nodes, grads, b, |db| axpy(db, -1.0, g));
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, b, |db| {
                for i in 0..db.len() {
                    db[i] += g[i] * av[i];
                }
            });
        }
        &Op::Scale(a, s) => accumulate(nodes, grads, a, |da| axpy(da, s, g)),
        &Op::Relu(a) => {
            let av = val(a);
            accumulate(nodes, grads, a, |da| {
                for i in 0..da.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            });
        }
        &Op::Sum(a) => accumulate(nodes, grads, a, |da| da.iter_mut().for_each(|d| *d += g[0])),
        &Op::Reshape(a) => accumulate(nodes, grads, a, |da| axpy(da, 1.0, g)),
        &Op::Softmax { x, k } => {
            let y = node.value.data();
            accumulate(nodes, grads, x, |dx| {
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let inner = dot(yr, gr);
                    for i in 0..k {
                        dxr[i] += yr[i] * (gr[i] - inner);
                    }
                }
            });
        }
        Op::Concat { inputs, outer, inner } => {
            let total: usize = inner.iter().sum();
            let mut start = 0;
            for (&v, &len) in inputs.iter().zip(inner) {
                accumulate(nodes, grads, v, |dv| {
                    for o in 0..*outer {
                        axpy(&mut dv[o * len..(o + 1) * len], 1.0, &g[o * total + start..o * total + start + len]);
                    }
                });
                start += len;
            }
        }
        &Op::GlobalAvgPool { x, rows, spatial } => {
            accumulate(nodes, grads, x, |dx| {
                for r in 0..rows {
                    let share = g[r] / spatial as f64;
                    dx[r * spatial..(r + 1) * spatial].iter_mut().for_each(|d| *d += share);
                }
            });
        }
        &Op::GroupMean { x, groups, features } => {
            accumulate(nodes, grads, x, |dx| {
                let scale = 1.0 / groups as f64;
                for (r, dr) in dx.chunks_mut(features).enumerate() {
                    let i = r / groups;
                    axpy(dr, scale, &g[i * features..(i + 1) * features]);
                }
            });
        }
        &Op::Linear { x, w, b, n, f, k } => {
            let (xv, wv) = (val(x), val(w));
            accumulate(nodes, grads, x, |dx| {
                for i in 0..n {
                    for c in 0..k {
                        axpy(&mut dx[i * f..(i + 1) * f], g[i * k + c], &wv[c * f..(c + 1) * f]);
                    }
                }
            });
            accumulate(nodes, grads, w, |dw| {
                for i in 0..n {
                    for c in 0..k {
                        axpy(&mut dw[c * f..(c + 1) * f], g[i * k + c], &xv[i * f..(i + 1) * f]);
                    }
                }
            });
            accumulate(nodes, grads, b, |db| {
                for i in 0..n {
                    axpy(db, 1.0, &g[i * k..(i + 1) * k]);
                }
            });
        }
        &Op::GraphAggregate { x, a, v } => {
            let (xv, av) = (val(x), val(a));
            accumulate(nodes, grads, x, |dx| {
                for (dr, gr) in dx.chunks_mut(v).zip(g.chunks(v)) {
                    for i in 0..v {
                        dr[i] += dot(gr, &av[i * v..(i + 1) * v]);
                    }
                }
            });
            accumulate(nodes, grads, a, |da| {
                for (xr, gr) in xv.chunks(v).zip(g.chunks(v)) {
                    for i in 0..v {
                        if xr[i] != 0.0 {
                            axpy(&mut da[i * v..(i + 1) * v], xr[i], gr);
                        }
                    }
                }
            });
        }
        &Op::ChannelMix { x, w, batch, c_in, c_out, spatial } => {
            let (xv, wv) = (val(x), val(w));
            accumulate(nodes, grads, x, |dx| {
                for b in 0..batch {
                    for o in 0..c_out {
                        let go = &g[(b * c_out + o) * spatial..][..spatial];
                        for c in 0..c_in {
                            axpy(&mut dx[(b * c_in + c) * spatial..][..spatial], wv[o * c_in + c], go);
                        }
                    }
                }
            });
            accumulate(nodes, grads, w, |dw| {
                for b in 0..batch {
                    for o in 0..c_out {
                        let go = &g[(b * c_out + o) * spatial..][..spatial];
                        for c in 0..c_in {
                            dw[o * c_in + c] += dot(go, &xv[(b * c_in + c) * spatial..][..spatial]);
                        }
                    }
                }
            });
        }
        &Op::TemporalConv { x, w, geom: gm } => {
            let (xv, wv) = (val(x), val(w));
            let v = gm.v;
            let out_row = |b: usize, o: usize, t: usize| ((b * gm.c_out + o) * gm.t_out + t) * v;
            let in_row = |b: usize, c: usize, t: usize| ((b * gm.c_in + c) * gm.t_in + t) * v;
            accumulate(nodes, grads, x, |dx| {
                for b in 0..gm.batch {
                    for c in 0..gm.c_in {
                        for k in 0..gm.l {
                            for t in 0..gm.t_out {
                                let Some(ti) = gm.input_frame(t, k) else { continue };
                                let dst = &mut dx[in_row(b, c, ti)..][..v];
                                for o in 0..gm.c_out {
                                    let wk = wv[(o * gm.c_in + c) * gm.l + k];
                                    axpy(dst, wk, &g[out_row(b, o, t)..][..v]);
                                }
                            }
                        }
                    }
                }
            });
            accumulate(nodes, grads, w, |dw| {
                for b in 0..gm.batch {
                    for c in 0..gm.c_in {
                        for k in 0..gm.l {
                            for t in 0..gm.t_out {
                                let Some(ti) = gm.input_frame(t, k) else { continue };
                                let src = &xv[in_row(b, c, ti)..][..v];
                                for o in 0..gm.c_out {
                                    dw[(o * gm.c_in + c) * gm.l + k] += dot(&g[out_row(b, o, t)..][..v], src);
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::BatchNorm { x, gamma, beta, batch, c, spatial, xhat, inv_std, train } => {
            let (batch, c, spatial) = (*batch, *c, *spatial);
            let gv = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    sum_g[ch] += g[off..off + spatial].iter().sum::<f64>();
                    sum_gx[ch] += dot(&g[off..off + spatial], &xhat[off..off + spatial]);
                }
            }
            accumulate(nodes, grads, *gamma, |dg| axpy(dg, 1.0, &sum_gx));
            accumulate(nodes, grads, *beta, |db| axpy(db, 1.0, &sum_g));
            let n = (batch * spatial) as f64;
            accumulate(nodes, grads, *x, |dx| {
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        let scale = gv[ch] * inv_std[ch];
                        for i in off..off + spatial {
                            dx[i] += if *train {
                                scale * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs, k } => {
            let scale = g[0] / labels.len() as f64;
            accumulate(nodes, grads, *logits, |dl| {
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..*k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dl[i * k + c] += scale * (probs[i * k + c] - onehot);
                    }
                }
            });
        }
    }
}
