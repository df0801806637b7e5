//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to replay the backward rule. Node indices are strictly
//! increasing, so inputs always precede their consumers and a single
//! reverse sweep visits each node exactly once. Tensors recorded on a
//! tape are never mutated in place.

use crate::tensor::{strides, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = mul * x + add, with compile-time constants.
    Affine {
        x: Var,
        mul: f64,
    },
    Broadcast {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        pad: (usize, usize),
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Gelu {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

/// The computation record: an append-only list of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a differentiation
    /// target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients (inputs, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(id)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ── Elementwise ─────────────────────────────────────────────────

    /// Align `b` to `a`'s shape when `b`'s shape is a suffix of `a`'s
    /// (broadcast by leading-1 dimensions) or a scalar.
    fn align(&mut self, a: Var, b: Var, op: &'static str) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok(b);
        }
        let scalar = self.nodes[b.0].value.is_scalar();
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if scalar || suffix {
            self.broadcast_to(b, &sa)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let b = self.align(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let b = self.align(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let b = self.align(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Mul(a, b)))
    }

    /// Scale by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// y = mul * x + add.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| mul * v + add)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let req = self.requires(x);
        self.push(value, req, Op::Affine { x, mul })
    }

    /// Expand `x` to `target` shape. `x`'s shape is right-aligned against
    /// `target`; each dimension must match or be 1.
    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var, TensorError> {
        let src = self.shape(x).to_vec();
        if src.len() > target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                left: target.to_vec(),
                right: src,
            });
        }
        let mut padded = vec![1usize; target.len()];
        padded[target.len() - src.len()..].copy_from_slice(&src);
        for (d, (&s, &t)) in padded.iter().zip(target).enumerate() {
            if s != t && s != 1 {
                let _ = d;
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    left: target.to_vec(),
                    right: src,
                });
            }
        }
        let numel: usize = target.iter().product();
        let src_strides = strides(&padded);
        let mut data = vec![0.0; numel];
        let xs = self.nodes[x.0].value.data();
        let nd = target.len();
        let mut coords = vec![0usize; nd];
        let mut si = 0usize;
        for slot in data.iter_mut() {
            *slot = xs[si];
            // odometer increment
            for d in (0..nd).rev() {
                coords[d] += 1;
                if padded[d] != 1 {
                    si += src_strides[d];
                }
                if coords[d] < target[d] {
                    break;
                }
                coords[d] = 0;
                if padded[d] != 1 {
                    si -= src_strides[d] * target[d];
                }
            }
        }
        let value = Tensor::new(target.to_vec(), data)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Broadcast { x }))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Batched matrix product: `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading batch dimensions must be identical.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa.len() != sb.len() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let nd = sa.len();
        if sa[..nd - 2] != sb[..nd - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (k2, n) = (sb[nd - 2], sb[nd - 1]);
        if k != k2 {
            return Err(TensorError::InnerDim {
                left: sa,
                right: sb,
            });
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        for t in 0..batch {
            mm_nn_acc(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            value,
            req,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// 2-D convolution with zero padding. `x` is `[cin, h, w]`, `kernel` is
    /// `[cout, cin, kh, kw]`, output is `[cout, h', w']` with
    /// `h' = h + 2*ph - kh + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sk,
            });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, cin2, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if cin != cin2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sk,
            });
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(TensorError::KernelTooLarge {
                kernel: sk,
                input: sx,
            });
        }
        let oh = h + 2 * ph - kh + 1;
        let ow = w + 2 * pw - kw + 1;
        let xd = self.nodes[x.0].value.data();
        let kd = self.nodes[kernel.0].value.data();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for ci in 0..cin {
                for u in 0..kh {
                    for v in 0..kw {
                        let kv = kd[((co * cin + ci) * kh + u) * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let xi = i as isize + u as isize - ph as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            let xrow = (ci * h + xi as usize) * w;
                            let orow = (co * oh + i) * ow;
                            for j in 0..ow {
                                let xj = j as isize + v as isize - pw as isize;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                out[orow + j] += kv * xd[xrow + xj as usize];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, oh, ow], out)?;
        let req = self.requires(x) || self.requires(kernel);
        Ok(self.push(value, req, Op::Conv2d { x, kernel, pad }))
    }

    // ── Nonlinearities and normalization ────────────────────────────

    /// Numerically stable softmax along `axis` (per-slice max subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for a in 0..len {
                    maxv = maxv.max(xd[base + a * inner]);
                }
                let mut total = 0.0;
                for a in 0..len {
                    let e = (xd[base + a * inner] - maxv).exp();
                    out[base + a * inner] = e;
                    total += e;
                }
                for a in 0..len {
                    out[base + a * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last dimension, followed by an
    /// elementwise affine with `gain` and `bias` (both of the normalized
    /// length).
    pub fn layer_norm(
        &mut self,
        x: Var,
        normalized_len: usize,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != normalized_len
            || self.shape(gain) != [normalized_len]
            || self.shape(bias) != [normalized_len]
        {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: vec![normalized_len],
            });
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gain.0].value.data().to_vec();
        let bd = self.nodes[bias.0].value.data().to_vec();
        let rows = xd.len() / normalized_len;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let s = r * normalized_len;
            let row = &xd[s..s + normalized_len];
            let mean = row.iter().sum::<f64>() / normalized_len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / normalized_len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..normalized_len {
                out[s + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(value, req, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let req = self.requires(x);
        self.push(value, req, Op::Gelu { x })
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v.abs()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let req = self.requires(x);
        self.push(value, req, Op::Abs { x })
    }

    // ── Shape surgery ───────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[x.0].value.numel() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                got: self.nodes[x.0].value.numel(),
            });
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec())?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Reshape { x }))
    }

    /// Reorder axes: output dimension `d` is input dimension `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::Invalid(format!(
                "permute axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let numel = self.nodes[x.0].value.numel();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; numel];
        let mut coords = vec![0usize; nd];
        let mut si = 0usize;
        for slot in out.iter_mut() {
            *slot = xd[si];
            for d in (0..nd).rev() {
                coords[d] += 1;
                si += step[d];
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
                si -= step[d] * out_shape[d];
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let req = self.requires(x);
        Ok(self.push(
            value,
            req,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        if start + len > shape[axis] {
            return Err(TensorError::SliceOutOfRange {
                axis,
                start,
                end: start + len,
                shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Slice { x, axis, start }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: base });
        }
        let mut total = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for &v in xs {
            let len = self.shape(v)[axis];
            let xd = self.nodes[v.0].value.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
            }
            offset += len;
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        let req = xs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            value,
            req,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.nodes[x.0].value.data();
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::MeanAll { x })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss to every tracked leaf.
    /// Repeated calls accumulate into the persistent gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(
                self.shape(loss).to_vec(),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let Some(grad) = adj[id].take() else { continue };
            self.backprop_node(id, &grad, &mut adj);
            let n = self.nodes[id].value.numel();
            let g = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n]);
            for (a, b) in g.iter_mut().zip(&grad) {
                *a += b;
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], id: usize, delta: &[f64]) {
        if !self.nodes[id].requires {
            return;
        }
        let n = self.nodes[id].value.numel();
        let g = adj[id].get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    fn backprop_node(&self, id: usize, grad: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let op = &self.nodes[id].op;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a.0, grad);
                self.accumulate(adj, b.0, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a.0, grad);
                if self.nodes[b.0].requires {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(adj, b.0, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(adj, a.0, &da);
                }
                if self.nodes[b.0].requires {
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(adj, b.0, &db);
                }
            }
            Op::Affine { x, mul } => {
                if self.nodes[x.0].requires {
                    let dx: Vec<f64> = grad.iter().map(|g| g * mul).collect();
                    self.accumulate(adj, x.0, &dx);
                }
            }
            Op::Broadcast { x } => {
                if !self.nodes[x.0].requires {
                    return;
                }
                let target = self.nodes[id].value.shape().to_vec();
                let src = self.shape(*x).to_vec();
                let nd = target.len();
                let mut padded = vec![1usize; nd];
                padded[nd - src.len()..].copy_from_slice(&src);
                let src_strides = strides(&padded);
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                let mut coords = vec![0usize; nd];
                let mut si = 0usize;
                for g in grad {
                    dx[si] += g;
                    for d in (0..nd).rev() {
                        coords[d] += 1;
                        if padded[d] != 1 {
                            si += src_strides[d];
                        }
                        if coords[d] < target[d] {
                            break;
                        }
                        coords[d] = 0;
                        if padded[d] != 1 {
                            si -= src_strides[d] * target[d];
                        }
                    }
                }
                self.accumulate(adj, x.0, &dx);
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.nodes[a.0].requires {
                    let bd = self.nodes[b.0].value.data();
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        mm_nt_acc(
                            &grad[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(adj, a.0, &da);
                }
                if self.nodes[b.0].requires {
                    let ad = self.nodes[a.0].value.data();
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        mm_tn_acc(
                            &ad[t * m * k..(t + 1) * m * k],
                            &grad[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(adj, b.0, &db);
                }
            }
            Op::Conv2d { x, kernel, pad } => {
                let sx = self.shape(*x).to_vec();
                let sk = self.shape(*kernel).to_vec();
                let (cin, h, w) = (sx[0], sx[1], sx[2]);
                let (cout, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                let (ph, pw) = *pad;
                let oh = h + 2 * ph - kh + 1;
                let ow = w + 2 * pw - kw + 1;
                let need_dx = self.nodes[x.0].requires;
                let need_dk = self.nodes[kernel.0].requires;
                let xd = self.nodes[x.0].value.data();
                let kd = self.nodes[kernel.0].value.data();
                let mut dx = if need_dx { vec![0.0; xd.len()] } else { Vec::new() };
                let mut dk = if need_dk { vec![0.0; kd.len()] } else { Vec::new() };
                for co in 0..cout {
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let kidx = ((co * cin + ci) * kh + u) * kw + v;
                                let kv = kd[kidx];
                                let mut ksum = 0.0;
                                for i in 0..oh {
                                    let xi = i as isize + u as isize - ph as isize;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    let xrow = (ci * h + xi as usize) * w;
                                    let grow = (co * oh + i) * ow;
                                    for j in 0..ow {
                                        let xj = j as isize + v as isize - pw as isize;
                                        if xj < 0 || xj >= w as isize {
                                            continue;
                                        }
                                        let g = grad[grow + j];
                                        if need_dx {
                                            dx[xrow + xj as usize] += g * kv;
                                        }
                                        if need_dk {
                                            ksum += g * xd[xrow + xj as usize];
                                        }
                                    }
                                }
                                if need_dk {
                                    dk[kidx] += ksum;
                                }
                            }
                        }
                    }
                }
                if need_dx {
                    self.accumulate(adj, x.0, &dx);
                }
                if need_dk {
                    self.accumulate(adj, kernel.0, &dk);
                }
            }
            Op::Softmax { x, axis } => {
                if !self.nodes[x.0].requires {
                    return;
                }
                let shape = self.nodes[id].value.shape().to_vec();
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let out = self.nodes[id].value.data();
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for a in 0..len {
                            let f = base + a * inner;
                            dot += grad[f] * out[f];
                        }
                        for a in 0..len {
                            let f = base + a * inner;
                            dx[f] = out[f] * (grad[f] - dot);
                        }
                    }
                }
                self.accumulate(adj, x.0, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let ln = self.shape(*gain)[0];
                let xd = self.nodes[x.0].value.data().to_vec();
                let gd = self.nodes[gain.0].value.data().to_vec();
                let rows = xd.len() / ln;
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; ln];
                let mut dbias = vec![0.0; ln];
                for r in 0..rows {
                    let s = r * ln;
                    let row = &xd[s..s + ln];
                    let g = &grad[s..s + ln];
                    let mean = row.iter().sum::<f64>() / ln as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / ln as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let mut dxhat_sum = 0.0;
                    let mut dxhat_dot = 0.0;
                    for j in 0..ln {
                        let dxh = g[j] * gd[j];
                        dgain[j] += g[j] * xhat[j];
                        dbias[j] += g[j];
                        dxhat_sum += dxh;
                        dxhat_dot += dxh * xhat[j];
                    }
                    let lf = ln as f64;
                    for j in 0..ln {
                        let dxh = g[j] * gd[j];
                        dx[s + j] = inv / lf * (lf * dxh - dxhat_sum - xhat[j] * dxhat_dot);
                    }
                }
                self.accumulate(adj, x.0, &dx);
                self.accumulate(adj, gain.0, &dgain);
                self.accumulate(adj, bias.0, &dbias);
            }
            Op::Reshape { x } => {
                self.accumulate(adj, x.0, grad);
            }
            Op::Permute { x, axes } => {
                if !self.nodes[x.0].requires {
                    return;
                }
                let out_shape = self.nodes[id].value.shape().to_vec();
                let nd = out_shape.len();
                let in_shape = self.shape(*x).to_vec();
                let in_strides = strides(&in_shape);
                let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                let mut coords = vec![0usize; nd];
                let mut si = 0usize;
                for g in grad {
                    dx[si] += g;
                    for d in (0..nd).rev() {
                        coords[d] += 1;
                        si += step[d];
                        if coords[d] < out_shape[d] {
                            break;
                        }
                        coords[d] = 0;
                        si -= step[d] * out_shape[d];
                    }
                }
                self.accumulate(adj, x.0, &dx);
            }
            Op::Slice { x, axis, start } => {
                if !self.nodes[x.0].requires {
                    return;
                }
                let in_shape = self.shape(*x).to_vec();
                let out_shape = self.nodes[id].value.shape().to_vec();
                let len = out_shape[*axis];
                let full = in_shape[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        dx[dst + t] += grad[src + t];
                    }
                }
                self.accumulate(adj, x.0, &dx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let total = out_shape[*axis];
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let mut offset = 0usize;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.nodes[v.0].requires {
                        let mut dv = vec![0.0; self.nodes[v.0].value.numel()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            dv[dst..dst + len * inner]
                                .copy_from_slice(&grad[src..src + len * inner]);
                        }
                        self.accumulate(adj, v.0, &dv);
                    }
                    offset += len;
                }
            }
            Op::SumAll { x } => {
                if self.nodes[x.0].requires {
                    let dx = vec![grad[0]; self.nodes[x.0].value.numel()];
                    self.accumulate(adj, x.0, &dx);
                }
            }
            Op::MeanAll { x } => {
                if self.nodes[x.0].requires {
                    let n = self.nodes[x.0].value.numel();
                    let dx = vec![grad[0] / n as f64; n];
                    self.accumulate(adj, x.0, &dx);
                }
            }
            Op::Abs { x } => {
                if self.nodes[x.0].requires {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, &v)| {
                            if v > 0.0 {
                                *g
                            } else if v < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(adj, x.0, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.nodes[x.0].requires {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, &v)| g * gelu_grad(v))
                        .collect();
                    self.accumulate(adj, x.0, &dx);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

/// c += a @ b with a: m×k, b: k×n.
fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a @ bᵀ with a: m×k, b: n×k.
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// c += aᵀ @ b with a: k×m, b: k×n.
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Max relative error between analytic gradients of `f` at `x` and central
/// finite differences with the given step.
///
/// The error per element is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone(), true);
    let y = f(&mut tape, vx)?;
    if !tape.value(y).is_scalar() {
        return Err(TensorError::NonScalarLoss(tape.shape(y).to_vec()));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(vx)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |xt: Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let v = t.leaf(xt, false);
        let y = f(&mut t, v)?;
        Ok(t.value(y).data()[0])
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}
