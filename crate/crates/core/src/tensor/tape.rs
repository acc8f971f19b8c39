//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its output value and whatever the
//! backward rule needs. Nodes are only ever appended, so inputs always precede
//! their consumers and a single reverse sweep is a valid topological order.
//! A tape is rebuilt for every forward pass and may be swept backward once.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which statistics a batch-norm node normalizes with.
#[derive(Debug, Clone)]
pub enum BatchNormStats {
    /// Per-channel mean and biased variance of the current batch.
    Batch,
    /// Fixed running estimates.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::dim(format!("{what}: expected a 4-d tensor, got shape {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::dim(format!("{what}: expected a 2-d tensor, got shape {s:?}"))),
    }
}

fn conv_extent(size: usize, kernel: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * padding;
    if stride == 0 {
        return Err(Error::dim("conv2d: stride must be positive"));
    }
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "conv2d: axis {axis} of extent {size} with padding {padding} does not tile kernel {kernel} at stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
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

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.requires_grad = rg;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the swept loss with respect to `v`, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let [n, c, h, wd] = dims4(x, "conv2d input")?;
        let [k, kc, r, s] = dims4(w, "conv2d kernel")?;
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d: input channel axis has {c} but kernel channel axis has {kc}"
            )));
        }
        let oh = conv_extent(h, r, stride, padding, "H")?;
        let ow = conv_extent(wd, s, stride, padding, "W")?;
        let xd = x.data();
        let wdat = w.data();
        let mut out = vec![0.0; n * k * oh * ow];
        for ni in 0..n {
            for ki in 0..k {
                let obase = (ni * k + ki) * oh * ow;
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * wd;
                    let wbase = (ki * c + ci) * r * s;
                    for ri in 0..r {
                        for si in 0..s {
                            let wv = wdat[wbase + ri * s + si];
                            for oy in 0..oh {
                                let iy = (oy * stride + ri) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * wd;
                                let orow = obase + oy * ow;
                                for ox in 0..ow {
                                    let ix = (ox * stride + si) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    out[orow + ox] += wv * xd[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, stride, padding }, &[input, kernel]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, ka] = dims2(self.value(a), "matmul lhs")?;
        let [kb, n] = dims2(self.value(b), "matmul rhs")?;
        if ka != kb {
            return Err(Error::dim(format!("matmul: lhs axis 1 has {ka} but rhs axis 0 has {kb}")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let av = ad[i * ka + p];
                for j in 0..n {
                    out[i * n + j] += av * bd[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a per-channel bias along axis 1 (`[N,C]` or `[N,C,H,W]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::dim(format!("add_bias: bias shape {bs:?} does not match axis 1 of {xs:?}")));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bd = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / inner) % c])
            .collect();
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Batch normalization over axis 1 of a `[N,C,H,W]` tensor.
    ///
    /// With [`BatchNormStats::Batch`] also returns the batch mean and biased
    /// variance per channel so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let [n, c, h, w] = dims4(self.value(x), "batch_norm input")?;
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm: {name} shape {:?} does not match channel axis {c}",
                    self.value(p).shape()
                )));
            }
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            BatchNormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        s += xd[base..base + hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        v += xd[base..base + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = v / m;
                }
                (mean, var, true)
            }
            BatchNormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm: running statistics do not match channel axis"));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&xv, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ci = (i / hw) % c;
            *xh = (xv - mean[ci]) * inv_std[ci];
            *o = gd[ci] * *xh + bd[ci];
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        );
        Ok((var_out, batch_stats.then_some((mean, var))))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "max_pool2d input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("max_pool2d: spatial extent {h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "global_avg_pool input")?;
        let hw = h * w;
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, c] = dims2(self.value(logits), "softmax_cross_entropy logits")?;
        if labels.len() != n {
            return Err(Error::dim(format!("softmax_cross_entropy: {} labels for batch of {n}", labels.len())));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(Error::Index(format!("label {y} at position {i} is outside [0, {c})")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let log_z = z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            total += log_z - (row[labels[i]] - mx);
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Smallest distance of any recorded ReLU input from zero, or of any
    /// max-pool winner from its runner-up. Finite-difference checks are only
    /// meaningful when perturbations stay below this margin.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let xs = self.value(*x);
                    let w = xs.shape()[3];
                    let hw = xs.shape()[2] * w;
                    let ow = w / 2;
                    let oh = xs.shape()[2] / 2;
                    let xd = xs.data();
                    for (o, &best) in argmax.iter().enumerate() {
                        let plane = o / (oh * ow);
                        let (oy, ox) = ((o % (oh * ow)) / ow, o % ow);
                        let base = plane * hw;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            // Exact zero ties come from clipped ReLU outputs,
                            // whose distance to the kink is counted above.
                            if idx != best && !(xd[best] == 0.0 && xd[idx] == 0.0) {
                                margin = margin.min(xd[best] - xd[idx]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Sweeps the tape backward from a scalar `loss`, storing gradients on
    /// every node that requires one. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..count).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g);
        }
        for node in self.nodes.iter_mut().take(count) {
            if node.value.requires_grad() && node.value.grad.is_none() {
                let zeros = vec![0.0; node.value.len()];
                node.value.set_grad(zeros);
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].value.requires_grad();
        let mut accumulate = |v: Var, contribution: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, padding } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let [n, c, h, wd] = dims4(x, "").expect("checked in forward");
                let [k, _, r, s] = dims4(w, "").expect("checked in forward");
                let out_shape = self.nodes[idx].value.shape();
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let (stride, padding) = (*stride, *padding);
                let need_x = wants(*input);
                let need_w = wants(*kernel);
                let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
                let mut gw = vec![0.0; if need_w { w.len() } else { 0 }];
                let (xd, wdat) = (x.data(), w.data());
                for ni in 0..n {
                    for ki in 0..k {
                        let obase = (ni * k + ki) * oh * ow;
                        for ci in 0..c {
                            let xbase = (ni * c + ci) * h * wd;
                            let wbase = (ki * c + ci) * r * s;
                            for ri in 0..r {
                                for si in 0..s {
                                    let wv = wdat[wbase + ri * s + si];
                                    let mut acc_w = 0.0;
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ri) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * wd;
                                        let orow = obase + oy * ow;
                                        for ox in 0..ow {
                                            let ix = (ox * stride + si) as isize - padding as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let go = g[orow + ox];
                                            let xi = xrow + ix as usize;
                                            if need_x {
                                                gx[xi] += go * wv;
                                            }
                                            acc_w += go * xd[xi];
                                        }
                                    }
                                    if need_w {
                                        gw[wbase + ri * s + si] += acc_w;
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    accumulate(*input, gx);
                }
                if need_w {
                    accumulate(*kernel, gw);
                }
            }
            Op::MatMul { a, b } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, kk) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * kk];
                    for i in 0..m {
                        for p in 0..kk {
                            ga[i * kk + p] = (0..n).map(|j| g[i * n + j] * bt.data()[p * n + j]).sum();
                        }
                    }
                    accumulate(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; kk * n];
                    for i in 0..m {
                        for p in 0..kk {
                            let av = at.data()[i * kk + p];
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    accumulate(*b, gb);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(*a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    accumulate(*a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                }
                if wants(*b) {
                    accumulate(*b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    accumulate(*x, g.to_vec());
                }
                if wants(*bias) {
                    let xs = self.value(*x).shape();
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        gb[(i / inner) % c] += gv;
                    }
                    accumulate(*bias, gb);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xd = self.value(*x).data();
                    accumulate(*x, g.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = self.value(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n * hw) as f64;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    let ci = (i / hw) % c;
                    sum_g[ci] += gv;
                    sum_gx[ci] += gv * xh;
                }
                if wants(*x) {
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (gv, xh))| {
                            let ci = (i / hw) % c;
                            let scale = gd[ci] * inv_std[ci];
                            if *batch_stats {
                                scale * (gv - sum_g[ci] / m - xh * sum_gx[ci] / m)
                            } else {
                                scale * gv
                            }
                        })
                        .collect();
                    accumulate(*x, gx);
                }
                if wants(*gamma) {
                    accumulate(*gamma, sum_gx);
                }
                if wants(*beta) {
                    accumulate(*beta, sum_g);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if wants(*x) {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                    accumulate(*x, gx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if wants(*x) {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let gx = (0..self.value(*x).len()).map(|i| g[i / hw] / hw as f64).collect();
                    accumulate(*x, gx);
                }
            }
            Op::Mean { x } => {
                if wants(*x) {
                    let n = self.value(*x).len();
                    accumulate(*x, vec![g[0] / n as f64; n]);
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    accumulate(*x, vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    accumulate(*x, g.to_vec());
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * c + y] -= scale;
                    }
                    accumulate(*logits, gl);
                }
            }
        }
    }
}
