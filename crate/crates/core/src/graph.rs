//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Nodes that cannot reach a trainable leaf carry
//! `needs_grad = false` and are skipped, so frozen networks (the backbone, a
//! detached generator) only pay for the input gradients actually requested.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    LeakyRelu(usize, f64),
    Mul(usize, Tensor),
    Concat(Vec<usize>),
    PixelShuffle(usize, usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: usize,
        oh: usize,
        ow: usize,
    },
    Reshape(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    },
    /// Scalar-valued function whose local gradient was computed eagerly.
    Scalar {
        parents: Vec<usize>,
        local: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Output of a training-mode batch-norm: the graph node plus the batch
/// statistics the caller folds into its running estimates.
pub struct BatchNormOut {
    pub out: Var,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn parameter(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        let value = Tensor::new_unchecked(vec![geom.n, geom.o, geom.oh, geom.ow], y);
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            ng,
        )
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear width mismatch");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut y);
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        self.push(
            Tensor::new_unchecked(vec![n, o], y),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            ng,
        )
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new_unchecked(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a.0);
        self.push(v, Op::Scale(a.0, s), ng)
    }

    /// `a + s·b`
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Var {
        let sb = self.scale(b, s);
        self.add(a, sb)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a.0);
        self.push(v, Op::LeakyRelu(a.0, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), mask.shape());
        let data = ta.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let v = Tensor::new_unchecked(ta.shape().to_vec(), data);
        let ng = self.ng(a.0);
        self.push(v, Op::Mul(a.0, mask), ng)
    }

    /// Concatenation along axis 1 (channels for NCHW, features for `[N, F]`).
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat trailing dims mismatch");
            total += s[1];
        }
        let mut data = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            Tensor::new_unchecked(shape, data),
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            ng,
        )
    }

    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s[1] % (r * r), 0, "pixel shuffle needs C divisible by r²");
        let data = kernels::pixel_shuffle(&s, self.value(a).data(), r, false);
        let shape = vec![s[0], s[1] / (r * r), s[2] * r, s[3] * r];
        let ng = self.ng(a.0);
        self.push(Tensor::new_unchecked(shape, data), Op::PixelShuffle(a.0, r), ng)
    }

    pub fn max_pool2(&mut self, a: Var) -> Var {
        let (shape, data, argmax) = kernels::max_pool2(self.shape(a), self.value(a).data());
        let ng = self.ng(a.0);
        self.push(
            Tensor::new_unchecked(shape, data),
            Op::MaxPool2 { x: a.0, argmax },
            ng,
        )
    }

    pub fn adaptive_avg_pool(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(a).to_vec();
        let data = kernels::adaptive_avg_pool(&s, self.value(a).data(), oh, ow);
        let ng = self.ng(a.0);
        self.push(
            Tensor::new_unchecked(vec![s[0], s[1], oh, ow], data),
            Op::AdaptiveAvgPool { x: a.0, oh, ow },
            ng,
        )
    }

    /// `[N, ...] → [N, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product();
        let v = self.value(a).clone().reshape(&[n, rest]).expect("flatten preserves size");
        let ng = self.ng(a.0);
        self.push(v, Op::Reshape(a.0), ng)
    }

    /// Per-channel normalization of an NCHW tensor. With `running = None` the
    /// batch statistics are used (training mode); otherwise the supplied
    /// `(mean, var)` estimates are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> BatchNormOut {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => kernels::channel_moments(&shape, self.value(x).data()),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let hw = h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xv[i] - mean[ch]) * invstd[ch];
                    y[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let out = self.push(
            Tensor::new_unchecked(shape, y),
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                invstd,
                batch_stats: running.is_none(),
            },
            ng,
        );
        BatchNormOut { out, mean, var }
    }

    /// Records a scalar function of `parents` whose value and gradient with
    /// respect to each parent were computed outside the graph.
    pub fn scalar_fn(&mut self, parents: &[Var], value: f64, local: Vec<Tensor>) -> Var {
        assert_eq!(parents.len(), local.len());
        for (p, l) in parents.iter().zip(&local) {
            assert_eq!(self.shape(*p), l.shape(), "local gradient shape mismatch");
        }
        let ng = parents.iter().any(|p| self.ng(p.0));
        self.push(
            Tensor::scalar(value),
            Op::Scalar {
                parents: parents.iter().map(|p| p.0).collect(),
                local,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar root. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new_unchecked(self.value(root).shape().to_vec(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.ng(idx) {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, idx: usize, data: Vec<f64>) -> Tensor {
        Tensor::new_unchecked(self.nodes[idx].value.shape().to_vec(), data)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    gd,
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let (n, i) = (xs[0], xs[1]);
                let o = self.nodes[*w].value.shape()[0];
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * i];
                    kernels::gemm(n, o, i, gd, false, self.nodes[*w].value.data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * i];
                    kernels::gemm(o, n, i, gd, true, self.nodes[*x].value.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[*a].value.data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Mul(a, mask) => {
                let d = gd.iter().zip(mask.data()).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Concat(parts) => {
                let shape = node.value.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let row = shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.nodes[p].value.shape()[1] * inner;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * chunk);
                        for b in 0..n {
                            d.extend_from_slice(&gd[b * row + offset..b * row + offset + chunk]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    offset += chunk;
                }
            }
            Op::PixelShuffle(a, r) => {
                let d = kernels::pixel_shuffle(self.nodes[*a].value.shape(), gd, *r, true);
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.nodes[*x].value.len()];
                for (gv, &idx) in gd.iter().zip(argmax) {
                    d[idx] += gv;
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::AdaptiveAvgPool { x, oh, ow } => {
                let d = kernels::adaptive_avg_pool_backward(self.nodes[*x].value.shape(), gd, *oh, *ow);
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let count = (n * hw) as f64;
                let gamma_v = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = gamma_v[ch] * invstd[ch];
                            for i in off..off + hw {
                                dx[i] = if *batch_stats {
                                    k * (gd[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Scalar { parents, local } => {
                let s = gd[0];
                for (p, l) in parents.iter().zip(local) {
                    self.accumulate(grads, *p, l.map(|v| v * s));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, values.to_vec()).unwrap()
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a graph builder.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let n: usize = shape.iter().product();
        let x0: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.013).collect();
        let eval = |x: &[f64]| -> (f64, Option<Tensor>) {
            let mut g = Graph::new();
            let xv = g.parameter(probe(x, shape));
            let y = build(&mut g, xv);
            let yt = g.value(y).clone();
            let wts: Vec<f64> = (0..yt.len()).map(|i| ((i % 5) as f64 - 2.0) * 0.3 + 0.1).collect();
            let val: f64 = yt.data().iter().zip(&wts).map(|(a, b)| a * b).sum();
            let root = g.scalar_fn(&[y], val, vec![Tensor::from_vec(yt.shape(), wts).unwrap()]);
            let grads = g.backward(root);
            (val, grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x0);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "entry {i}: fd {fd} vs analytic {a}");
        }
    }

    #[test]
    fn conv_gradient() {
        let w = probe(&(0..54).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), &[2, 3, 3, 3]);
        check(&[1, 3, 5, 4], |g, x| {
            let wv = g.constant(w.clone());
            g.conv2d(x, wv, None, 2, 1)
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        check(&[2, 4, 2, 2], |g, x| {
            let a = g.leaky_relu(x, 0.2);
            let b = g.scale(x, 3.0);
            let c = g.concat(&[a, b]);
            let d = g.sub(c, c);
            let e = g.add(c, d);
            g.pixel_shuffle(e, 2)
        });
        check(&[1, 2, 4, 4], |g, x| g.max_pool2(x));
        check(&[1, 2, 5, 3], |g, x| g.adaptive_avg_pool(x, 2, 2));
    }

    #[test]
    fn linear_gradient() {
        let w = probe(&(0..12).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<_>>(), &[3, 4]);
        check(&[2, 4], |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::full(&[3], 0.1));
            g.linear(x, wv, bv)
        });
    }

    #[test]
    fn batch_norm_gradient() {
        let gamma = probe(&[1.5, -0.5], &[2]);
        let beta = probe(&[0.1, 0.2], &[2]);
        check(&[3, 2, 2, 2], |g, x| {
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            g.batch_norm(x, gv, bv, None, 1e-5).out
        });
        check(&[3, 2, 2, 2], |g, x| {
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            g.batch_norm(x, gv, bv, Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5).out
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1], 2.0));
        let p = g.parameter(Tensor::full(&[1], 3.0));
        let s = g.add(c, p);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }
}
