//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid backpropagation order.

use crate::element::Element;
use crate::error::{ModelError, Result};
use crate::kernels::{conv_backward, conv_forward, convt_backward, convt_forward, maxpool2, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

pub const BN_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    Conv {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
        cout: usize,
    },
    /// Adjoint of a 3×3 stride-2 convolution: doubles the spatial size.
    ConvTranspose {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
        cin: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<u32>,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Crop {
        x: NodeId,
        offset: [usize; 2],
    },
    Softmax {
        x: NodeId,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Batch statistics seen by a training-mode batch norm: slot, mean, unbiased variance.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub slot: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub struct Graph<'p, S> {
    params: &'p [Tensor<S>],
    nodes: Vec<Node<S>>,
    record: bool,
    stats: Vec<BatchStats<S>>,
    scratch: Vec<S>,
}

impl<'p, S: Element> Graph<'p, S> {
    /// `record` keeps what backpropagation needs; without it, intermediate
    /// values can be released as soon as they are consumed.
    pub fn new(params: &'p [Tensor<S>], record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record,
            stats: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn records(&self) -> bool {
        self.record
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    /// Drops a value that no later op reads; a no-op while recording.
    pub fn release(&mut self, id: NodeId) {
        if !self.record {
            self.take_value(id);
        }
    }

    pub fn batch_stats(&self) -> &[BatchStats<S>] {
        &self.stats
    }

    pub fn into_batch_stats(self) -> Vec<BatchStats<S>> {
        self.stats
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn param(&self, id: ParamId) -> &'p Tensor<S> {
        &self.params[id.0]
    }

    /// Square convolution; `w` has shape `[cout, cin, k, k]`, `b` `[1, cout, 1, 1]`.
    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Result<NodeId> {
        let wt = self.param(w);
        let [cout, cin, k, k2] = wt.shape();
        let [n, c, h, wd] = self.value(x).shape();
        if c != cin || k != k2 {
            return Err(ModelError::Shape(format!("conv weight {:?} on input {:?}", wt.shape(), [n, c, h, wd])));
        }
        let geom = ConvGeom { c, h, w: wd, k, stride, pad };
        let [ho, wo] = geom.out_hw();
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        let bias = b.map(|b| self.param(b).as_slice());
        let mut scratch = std::mem::take(&mut self.scratch);
        for s in 0..n {
            conv_forward(&geom, self.value(x).sample(s), wt.as_slice(), bias, cout, out.sample_mut(s), &mut scratch);
        }
        self.scratch = scratch;
        Ok(self.push(out, Op::Conv { x, w, b, geom, cout }, true))
    }

    /// Learned 2× upsampling, the transpose of a 3×3 stride-2 pad-1 convolution.
    /// `w` has shape `[cin, cout, 3, 3]`.
    pub fn conv_transpose2x(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let wt = self.param(w);
        let [cin, cout, k, _] = wt.shape();
        let [n, c, h, wd] = self.value(x).shape();
        if c != cin || k != 3 {
            return Err(ModelError::Shape(format!("transposed conv weight {:?} on input {:?}", wt.shape(), [n, c, h, wd])));
        }
        let geom = ConvGeom { c: cout, h: 2 * h, w: 2 * wd, k: 3, stride: 2, pad: 1 };
        debug_assert_eq!(geom.out_hw(), [h, wd]);
        let mut out = Tensor::zeros([n, cout, 2 * h, 2 * wd]);
        let mut scratch = std::mem::take(&mut self.scratch);
        for s in 0..n {
            convt_forward(&geom, self.value(x).sample(s), wt.as_slice(), cin, out.sample_mut(s), &mut scratch);
        }
        self.scratch = scratch;
        if let Some(b) = b {
            let bias = self.param(b).as_slice();
            for s in 0..n {
                for (o, &bv) in bias.iter().enumerate() {
                    out.plane_mut(s, o).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom, cin }, true))
    }

    /// Per-channel normalization with batch statistics (`running == None`)
    /// or fixed running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        slot: usize,
        running: Option<(&[S], &[S])>,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).shape();
        let (g, b) = (self.param(gamma).as_slice(), self.param(beta).as_slice());
        if g.len() != c || b.len() != c {
            return Err(ModelError::Shape(format!("batch norm over {c} channels with {} scales", g.len())));
        }
        let hw = h * w;
        let m = n * hw;
        let eps = S::lit(BN_EPS);
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let xv = self.value(x);
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for s in 0..n {
                        acc += xv.plane(s, ch).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        sq += xv.plane(s, ch).iter().map(|v| (v.to_f64_lossy() - mu).powi(2)).sum::<f64>();
                    }
                    mean[ch] = S::lit(mu);
                    var[ch] = S::lit(sq / m as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| if m > 1 { v * S::lit(m as f64 / (m - 1) as f64) } else { v })
                    .collect();
                self.stats.push(BatchStats {
                    slot,
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut xhat = if self.record { vec![S::zero(); n * c * hw] } else { Vec::new() };
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let (mu, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                let base = (s * c + ch) * hw;
                let dst = out.plane_mut(s, ch);
                for i in 0..hw {
                    let xh = (src[i] - mu) * is;
                    dst[i] = gc * xh + bc;
                    if !xhat.is_empty() {
                        xhat[base + i] = xh;
                    }
                }
            }
        }
        let batch_stats = running.is_none();
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, true))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ModelError::Shape(format!("2×2 pooling needs even extents, got {h}×{w}")));
        }
        let mut out = Tensor::zeros([n, c, h / 2, w / 2]);
        let mut arg = vec![0u32; out.len()];
        let per = c * (h / 2) * (w / 2);
        for s in 0..n {
            maxpool2(self.value(x).sample(s), c, h, w, out.sample_mut(s), &mut arg[s * per..(s + 1) * per]);
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(out, Op::MaxPool { x, arg }, needs))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.value(xs[0]).shape();
        let mut c = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(ModelError::Shape(format!("concat of {s:?} with {first:?}")));
            }
            c += s[1];
        }
        let [n, _, h, w] = first;
        let mut out = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            let dst = out.sample_mut(s);
            let mut at = 0;
            for &x in xs {
                let src = self.value(x).sample(s);
                dst[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        let needs = xs.iter().any(|x| self.nodes[x.0].needs_grad);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, needs))
    }

    pub fn crop(&mut self, x: NodeId, offset: [usize; 2], size: [usize; 2]) -> NodeId {
        let out = self.value(x).crop(offset, size);
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Crop { x, offset }, needs)
    }

    /// Normalized exponential over channels, per pixel.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.value(x).shape();
        let hw = h * w;
        let mut out = Tensor::zeros([n, c, h, w]);
        let xv = self.value(x);
        for s in 0..n {
            let src = xv.sample(s);
            let dst = out.sample_mut(s);
            for i in 0..hw {
                let mut mx = S::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(src[ch * hw + i]);
                }
                let mut sum = S::zero();
                for ch in 0..c {
                    let e = (src[ch * hw + i] - mx).exp();
                    dst[ch * hw + i] = e;
                    sum += e;
                }
                for ch in 0..c {
                    dst[ch * hw + i] /= sum;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Softmax { x }, needs)
    }

    /// Gradients of `<seed, output>` with respect to every parameter.
    pub fn backward(&mut self, output: NodeId, seed: Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        if !self.record {
            return Err(ModelError::Config("backward on a graph built without recording".into()));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(ModelError::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<S>>> = (0..self.params.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut scratch = std::mem::take(&mut self.scratch);
        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let params = self.params;
            let nodes = &self.nodes;
            let send = |grads: &mut Vec<Option<Tensor<S>>>, to: NodeId, g: Tensor<S>| {
                if !nodes[to.0].needs_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            let take = |pgrads: &mut Vec<Option<Tensor<S>>>, p: ParamId| -> Tensor<S> {
                pgrads[p.0].take().unwrap_or_else(|| Tensor::zeros(params[p.0].shape()))
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geom, cout } => {
                    let xv = &nodes[x.0].value;
                    let wt = &params[w.0];
                    let mut dw = take(&mut pgrads, *w);
                    let want_dx = nodes[x.0].needs_grad;
                    let mut dx = if want_dx { Some(Tensor::zeros(xv.shape())) } else { None };
                    for s in 0..xv.batch() {
                        conv_backward(
                            geom,
                            xv.sample(s),
                            wt.as_slice(),
                            *cout,
                            dy.sample(s),
                            dw.as_mut_slice(),
                            dx.as_mut().map(|d| d.sample_mut(s)),
                            &mut scratch,
                        );
                    }
                    pgrads[w.0] = Some(dw);
                    if let Some(b) = b {
                        let mut db = take(&mut pgrads, *b);
                        channel_sums(&dy, db.as_mut_slice());
                        pgrads[b.0] = Some(db);
                    }
                    if let Some(dx) = dx {
                        send(&mut grads, *x, dx);
                    }
                }
                Op::ConvTranspose { x, w, b, geom, cin } => {
                    let xv = &nodes[x.0].value;
                    let wt = &params[w.0];
                    let mut dw = take(&mut pgrads, *w);
                    let want_dx = nodes[x.0].needs_grad;
                    let mut dx = if want_dx { Some(Tensor::zeros(xv.shape())) } else { None };
                    for s in 0..xv.batch() {
                        convt_backward(
                            geom,
                            xv.sample(s),
                            wt.as_slice(),
                            *cin,
                            dy.sample(s),
                            dw.as_mut_slice(),
                            dx.as_mut().map(|d| d.sample_mut(s)),
                            &mut scratch,
                        );
                    }
                    pgrads[w.0] = Some(dw);
                    if let Some(b) = b {
                        let mut db = take(&mut pgrads, *b);
                        channel_sums(&dy, db.as_mut_slice());
                        pgrads[b.0] = Some(db);
                    }
                    if let Some(dx) = dx {
                        send(&mut grads, *x, dx);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let [n, c, h, w] = dy.shape();
                    let hw = h * w;
                    let m = S::lit((n * hw) as f64);
                    let g = params[gamma.0].as_slice();
                    let mut dgamma = take(&mut pgrads, *gamma);
                    let mut dbeta = take(&mut pgrads, *beta);
                    let mut dx = Tensor::zeros(dy.shape());
                    for ch in 0..c {
                        let (mut sum_dy, mut sum_dy_xh) = (S::zero(), S::zero());
                        for s in 0..n {
                            let base = (s * c + ch) * hw;
                            for (i, &d) in dy.plane(s, ch).iter().enumerate() {
                                sum_dy += d;
                                sum_dy_xh += d * xhat[base + i];
                            }
                        }
                        dgamma.as_mut_slice()[ch] += sum_dy_xh;
                        dbeta.as_mut_slice()[ch] += sum_dy;
                        let (gc, is) = (g[ch], inv_std[ch]);
                        for s in 0..n {
                            let base = (s * c + ch) * hw;
                            let d = dy.plane(s, ch);
                            let out = dx.plane_mut(s, ch);
                            if *batch_stats {
                                for i in 0..hw {
                                    out[i] = gc * is / m * (m * d[i] - sum_dy - xhat[base + i] * sum_dy_xh);
                                }
                            } else {
                                for i in 0..hw {
                                    out[i] = gc * is * d[i];
                                }
                            }
                        }
                    }
                    pgrads[gamma.0] = Some(dgamma);
                    pgrads[beta.0] = Some(dbeta);
                    send(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let y = &node.value;
                    let mut dx = dy;
                    for (d, &v) in dx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    send(&mut grads, *x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let xs = nodes[x.0].value.shape();
                    let mut dx = Tensor::zeros(xs);
                    let per_out = dy.len() / xs[0].max(1);
                    for s in 0..xs[0] {
                        let d = dy.sample(s);
                        let out = dx.sample_mut(s);
                        for (j, &v) in d.iter().enumerate() {
                            out[arg[s * per_out + j] as usize] += v;
                        }
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Concat { xs } => {
                    let mut at = 0;
                    for &x in xs {
                        let shape = nodes[x.0].value.shape();
                        let len = shape[1] * shape[2] * shape[3];
                        if nodes[x.0].needs_grad {
                            let mut part = Tensor::zeros(shape);
                            for s in 0..shape[0] {
                                part.sample_mut(s).copy_from_slice(&dy.sample(s)[at..at + len]);
                            }
                            send(&mut grads, x, part);
                        }
                        at += len;
                    }
                }
                Op::Crop { x, offset } => {
                    let xs = nodes[x.0].value.shape();
                    send(&mut grads, *x, dy.pad_to([xs[2], xs[3]], *offset));
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let [n, c, h, w] = y.shape();
                    let hw = h * w;
                    let mut dx = Tensor::zeros(y.shape());
                    for s in 0..n {
                        let (ys, ds) = (y.sample(s), dy.sample(s));
                        let out = dx.sample_mut(s);
                        for i in 0..hw {
                            let mut dot = S::zero();
                            for ch in 0..c {
                                dot += ys[ch * hw + i] * ds[ch * hw + i];
                            }
                            for ch in 0..c {
                                out[ch * hw + i] = ys[ch * hw + i] * (ds[ch * hw + i] - dot);
                            }
                        }
                    }
                    send(&mut grads, *x, dx);
                }
            }
        }
        self.scratch = scratch;
        Ok(pgrads)
    }
}

fn channel_sums<S: Element>(t: &Tensor<S>, out: &mut [S]) {
    for s in 0..t.batch() {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += t.plane(s, ch).iter().copied().sum::<S>();
        }
    }
}
