use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::kernels::{self, ConvShape, LinearShape};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Biased batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        shape: ConvShape,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    HardSigmoid {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Sum {
        x: usize,
    },
    Nmse {
        pred: usize,
        target: usize,
        inv_norm: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order: every
/// operation refers only to nodes created before it. [`Graph::backward`]
/// walks the tape once in descending index order.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Linear piece selected by every element entering a piecewise-linear
    /// activation. Two evaluations with equal patterns lie on the same
    /// smooth piece, which finite-difference checks rely on.
    pub fn activation_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { x, .. } => {
                    out.extend(self.nodes[x].value.data().iter().map(|v| i8::from(*v >= T::zero())));
                }
                Op::HardSigmoid { x } => out.extend(self.nodes[x].value.data().iter().map(|v| {
                    let v = v.wide();
                    if v <= -3.0 {
                        -1
                    } else if v >= 3.0 {
                        1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        if let Some((element, x)) = value.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} forward"),
                tensor: self.nodes.len(),
                element,
                value: x.wide(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `y[i, o] = Σ_k x[i, k]·w[o, k] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("linear", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::dim("linear bias", ws, bs));
        }
        let s = LinearShape {
            batch: xs[0],
            inputs: xs[1],
            outputs: ws[0],
        };
        let y = kernels::linear_forward(&s, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::new([s.batch, s.outputs], y)?;
        self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0], "linear")
    }

    /// Same-padded 2-D cross-correlation; kernel extents must be odd.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(b));
        if ks.len() != 4 {
            return Err(Error::dim("conv2d kernel", xs, ks));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::UnsupportedKernel {
                kh: ks[2],
                kw: ks[3],
                reason: "same padding needs odd kernel extents",
            });
        }
        if xs.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", xs, ks));
        }
        if bs != [ks[0]] {
            return Err(Error::dim("conv2d bias", ks, bs));
        }
        let shape = ConvShape {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            h: xs[2],
            w: xs[3],
            kh: ks[2],
            kw: ks[3],
        };
        let y = kernels::conv2d_forward(&shape, self.value(x).data(), self.value(k).data(), self.value(b).data());
        let out = Tensor::new([shape.batch, shape.cout, shape.h, shape.w], y)?;
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                b: b.0,
                shape,
            },
            &[x.0, k.0, b.0],
            "conv2d",
        )
    }

    /// Per-channel normalization of a `(B, C, H, W)` tensor.
    ///
    /// With [`NormStats::Batch`] the returned [`BatchStats`] carry the
    /// batch mean and biased variance for running-statistic updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("batch_norm", &xs, &[]));
        }
        let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(Error::dim("batch_norm affine", &xs, self.shape(p)));
            }
        }
        let xd = self.value(x).data();
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                if batch * plane < 2 {
                    return Err(Error::DegenerateBatch { count: batch * plane });
                }
                let (m, v) = kernels::channel_stats(xd, batch, ch, plane);
                let seen = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                    count: batch * plane,
                };
                (m, v, Some(seen))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::dim("batch_norm running stats", &xs, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let (y, xhat, inv_std) = kernels::batchnorm_apply(
            xd,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            eps,
            batch,
            plane,
        );
        let out = Tensor::new(xs, y)?;
        let var = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats: observed.is_some(),
            },
            &[x.0, gamma.0, beta.0],
            "batch_norm",
        )?;
        Ok((var, observed))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                v
            } else {
                T::cast(slope * v.wide())
            }
        });
        self.push(out, Op::LeakyRelu { x: x.0, slope }, &[x.0], "leaky_relu")
    }

    /// `clamp(x/6 + 1/2, 0, 1)`.
    pub fn hard_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| T::cast((v.wide() / 6.0 + 0.5).clamp(0.0, 1.0)));
        self.push(out, Op::HardSigmoid { x: x.0 }, &[x.0], "hard_sigmoid")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x: x.0 }, &[x.0], "reshape")
    }

    /// Collapses all trailing axes: `(B, ...) -> (B, rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat axis", &base, &[axis]));
        }
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat { parts: ids.clone(), axis }, &ids, "concat")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0], "add")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| T::cast(v.wide() * factor));
        self.push(out, Op::Scale { x: x.0, factor }, &[x.0], "scale")
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.wide()).sum();
        self.push(Tensor::scalar(T::cast(s)), Op::Sum { x: x.0 }, &[x.0], "sum")
    }

    /// Batch mean of `‖pred_b − target_b‖² / ‖target_b‖²`.
    ///
    /// The target is treated as data; no gradient flows into it.
    pub fn nmse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts || ps.is_empty() {
            return Err(Error::dim("nmse", ps, ts));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let (batch, w) = (t.rows(), t.row_len());
        let mut inv_norm = Vec::with_capacity(batch);
        let mut total = 0.0;
        for b in 0..batch {
            let tr = &t.data()[b * w..(b + 1) * w];
            let pr = &p.data()[b * w..(b + 1) * w];
            let den: f64 = tr.iter().map(|v| v.wide() * v.wide()).sum();
            if den == 0.0 {
                return Err(Error::DegenerateSample { sample: b });
            }
            let num: f64 = pr
                .iter()
                .zip(tr)
                .map(|(a, b)| (a.wide() - b.wide()).powi(2))
                .sum();
            total += num / den;
            inv_norm.push(1.0 / den);
        }
        let loss = Tensor::scalar(T::cast(total / batch as f64));
        self.push(
            loss,
            Op::Nmse {
                pred: pred.0,
                target: target.0,
                inv_norm,
            },
            &[pred.0],
            "nmse",
        )
    }

    /// Reverse-mode gradients of a scalar `loss` for every node on a path
    /// to a gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_from(loss, Tensor::full(v.shape().to_vec(), T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim("backward seed", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed.into_data());

        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some((element, x)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "backward".into(),
                    tensor: id,
                    element,
                    value: x.wide(),
                });
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let slots = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { slots })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let s = LinearShape {
                    batch: xs[0],
                    inputs: xs[1],
                    outputs: self.nodes[*w].value.shape()[0],
                };
                if self.wants(*x) {
                    accumulate(grads, *x, kernels::linear_backward_input(&s, g, val(*w)));
                }
                if self.wants(*w) || self.wants(*b) {
                    let (dw, db) = kernels::linear_backward_params(&s, g, val(*x));
                    if self.wants(*w) {
                        accumulate(grads, *w, dw);
                    }
                    if self.wants(*b) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Conv2d { x, k, b, shape } => {
                let (dx, dk, db) = kernels::conv2d_backward(shape, g, val(*x), val(*k), self.wants(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.nodes[*x].value.shape();
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    g,
                    xhat,
                    inv_std,
                    val(*gamma),
                    xs[0],
                    xs[2] * xs[3],
                    *batch_stats,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v >= T::zero() { g } else { T::cast(g.wide() * slope) })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::HardSigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        let v = v.wide();
                        if v > -3.0 && v < 3.0 {
                            T::cast(g.wide() / 6.0)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = self.nodes[id].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                let row = shape[*axis] * inner;
                for &p in parts {
                    let chunk = self.nodes[p].value.shape()[*axis] * inner;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += chunk;
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Scale { x, factor } => {
                let dx = g.iter().map(|&v| T::cast(v.wide() * factor)).collect();
                accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Nmse {
                pred,
                target,
                inv_norm,
            } => {
                let (p, t) = (val(*pred), val(*target));
                let batch = inv_norm.len();
                let w = p.len() / batch;
                let upstream = g[0].wide() * 2.0 / batch as f64;
                let mut dp = Vec::with_capacity(p.len());
                for (b, inv) in inv_norm.iter().enumerate() {
                    for j in b * w..(b + 1) * w {
                        dp.push(T::cast(upstream * (p[j].wide() - t[j].wide()) * inv));
                    }
                }
                accumulate(grads, *pred, dp);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, contribution: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradients produced by one backward traversal.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }

    /// Gradient of `v`, with zeros standing in for an unreached node.
    pub fn or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
