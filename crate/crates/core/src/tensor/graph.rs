use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
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
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedMean {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Huber {
        pred: Var,
        targets: Vec<T>,
        delta: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// [`Graph::backward`] consumes the tape and walks it once in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Split `shape` around `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let val = half * x * (T::one() + th);
    let d = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (val, d)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. It receives a gradient iff the tensor requires one.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf copied from a borrowed tensor.
    pub fn leaf_ref(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            needs_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf built from raw parts.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph node shape")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            k,
            n,
            T::one(),
            self.data(a),
            self.data(b),
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[..×n] + bias[n]` with the bias broadcast over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&a, &c)| a + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, bias), &[x, bias]))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let src = self.data(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalise each trailing-axis vector to zero mean and unit variance,
    /// then apply `gain` and `bias`. Zero-variance vectors map to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let rows = src.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &gi), &bi)| h * gi + bi))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean over the rows of `x[t×d]` whose mask entry is true; yields `1×d`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.matrix_dims("masked_mean", x)?;
        if mask.len() != t {
            return Err(Error::Dimension {
                op: "masked_mean",
                lhs: vec![t, d],
                rhs: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); d];
        for (row, _) in src.chunks(d).zip(mask).filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(count as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            vec![1, d],
            out,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            &[x],
        ))
    }

    /// Mean over all rows of a matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, _) = self.matrix_dims("mean_rows", x)?;
        self.masked_mean(x, &vec![true; t])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if axis >= src_shape.len() || len == 0 || start + len > src_shape[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for {src_shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_blocks(&src_shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q[tq×d]`, `k[tk×d]`, `v[tk×d]`. Keys whose mask entry is false get
    /// zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, d) = self.matrix_dims("attention", q)?;
        let (tk, dk) = self.matrix_dims("attention", k)?;
        if dk != d || self.shape(v) != [tk, d] {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![tq, d],
                rhs: self.shape(v).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "model width {d} not divisible into {heads} heads"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != tk {
                return Err(Error::Dimension {
                    op: "attention mask",
                    lhs: vec![tk],
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::EmptyAttention);
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * d];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..tq {
                let row = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let qi = &qd[i * d + off..i * d + off + hd];
                let mut max = T::neg_infinity();
                for (j, p) in row.iter_mut().enumerate() {
                    if keep(j) {
                        let kj = &kd[j * d + off..j * d + off + hd];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        *p = s;
                        max = max.max(s);
                    }
                }
                let mut total = T::zero();
                for (j, p) in row.iter_mut().enumerate() {
                    if keep(j) {
                        *p = (*p - max).exp();
                        total += *p;
                    } else {
                        *p = T::zero();
                    }
                }
                let o = &mut out[i * d + off..i * d + off + hd];
                for (j, p) in row.iter_mut().enumerate() {
                    *p /= total;
                    if *p != T::zero() {
                        let vj = &vd[j * d + off..j * d + off + hd];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += *p * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![tq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights `[heads, tq, tk]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                q, k, heads, probs, ..
            } => {
                let tq = self.shape(*q)[0];
                let tk = self.shape(*k)[0];
                Tensor::new([*heads, tq, tk], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Inverted dropout with a caller-supplied keep mask (1 keeps, 0 drops);
    /// kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, keep_mask: &[bool], p: f64) -> Result<Var> {
        if keep_mask.len() != self.data(x).len() {
            return Err(Error::Dimension {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep_mask.len()],
            });
        }
        let s = T::lit(1.0 / (1.0 - p));
        let keep: Vec<T> = keep_mask
            .iter()
            .map(|&k| if k { s } else { T::zero() })
            .collect();
        let out = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, keep }, &[x]))
    }

    /// Mean Huber loss of `pred` (any shape, n entries) against `targets`.
    pub fn huber(&mut self, pred: Var, targets: &[T], delta: T) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != targets.len() {
            return Err(Error::Dimension {
                op: "huber",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&a, &b)| huber_value(a - b, delta))
            .sum::<T>()
            / T::lit(p.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Huber {
                pred,
                targets: targets.to_vec(),
                delta,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        // Gradients only survive on nodes that track them.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        let shapes = self.nodes.into_iter().map(|n| n.shape).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].needs_grad {
                let len = nodes[v.0].data.len();
                let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                acc(*a, &mut |g| {
                    T::gemm(false, true, m, n, k, T::one(), dy, bd, T::one(), g)
                });
                acc(*b, &mut |g| {
                    T::gemm(true, false, k, m, n, T::one(), ad, dy, T::one(), g)
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| add_into(g, dy));
                let n = self.nodes[b.0].data.len();
                acc(*b, &mut |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(o, &d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                acc(*a, &mut |g| {
                    for ((o, &d), &y) in g.iter_mut().zip(dy).zip(bd) {
                        *o += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((o, &d), &x) in g.iter_mut().zip(dy).zip(ad) {
                        *o += d * x;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                g.iter_mut().zip(dy).for_each(|(o, &d)| *o += d * *s)
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((o, &d), &y) in g.iter_mut().zip(dy).zip(&node.data) {
                    *o += d * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((o, &d), &y) in g.iter_mut().zip(dy).zip(&node.data) {
                    *o += d * (T::one() - y * y);
                }
            }),
            Op::Gelu(x) => {
                let xd = &self.nodes[x.0].data;
                acc(*x, &mut |g| {
                    for ((o, &d), &xv) in g.iter_mut().zip(dy).zip(xd) {
                        *o += d * gelu_parts(xv).1;
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_blocks(&node.shape, *axis);
                let y = &node.data;
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: T = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].data.len();
                let gd = &self.nodes[gain.0].data;
                acc(*gain, &mut |g| {
                    for (drow, hrow) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &dv), &h) in g.iter_mut().zip(drow).zip(hrow) {
                            *o += dv * h;
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for drow in dy.chunks(d) {
                        add_into(g, drow);
                    }
                });
                let inv_d = T::one() / T::lit(d as f64);
                acc(*x, &mut |g| {
                    for (r, ((grow, drow), hrow)) in g
                        .chunks_mut(d)
                        .zip(dy.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for ((&dv, &gv), &h) in drow.iter().zip(gd).zip(hrow) {
                            let dh = dv * gv;
                            mean_dh += dh;
                            mean_dhh += dh * h;
                        }
                        mean_dh *= inv_d;
                        mean_dhh *= inv_d;
                        for (((o, &dv), &gv), &h) in grow.iter_mut().zip(drow).zip(gd).zip(hrow) {
                            *o += rstd[r] * (dv * gv - mean_dh - h * mean_dhh);
                        }
                    }
                })
            }
            Op::MaskedMean { x, mask, count } => {
                let inv = T::one() / T::lit(*count as f64);
                let d = dy.len();
                acc(*x, &mut |g| {
                    for (grow, _) in g.chunks_mut(d).zip(mask).filter(|(_, &m)| m) {
                        for (o, &dv) in grow.iter_mut().zip(dy) {
                            *o += dv * inv;
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_blocks(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let block = self.nodes[p.0].shape[*axis] * inner;
                    let row = node.shape[*axis] * inner;
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            add_into(
                                &mut g[o * block..(o + 1) * block],
                                &dy[o * row + offset..o * row + offset + block],
                            );
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = &self.nodes[x.0].shape;
                let (outer, n, inner) = axis_blocks(src, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        add_into(
                            &mut g[base..base + len * inner],
                            &dy[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                })
            }
            Op::Transpose(x) => {
                let (c, r) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += dy[0])),
            Op::Mean(x) => {
                let s = dy[0] / T::lit(self.nodes[x.0].data.len() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += s))
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
                let tk = self.nodes[k.0].shape[0];
                let hd = d / heads;
                let scale = T::one() / T::lit(hd as f64).sqrt();
                let (qd, kd, vd) = (
                    &self.nodes[q.0].data,
                    &self.nodes[k.0].data,
                    &self.nodes[v.0].data,
                );
                // dS = P ∘ (dP − rowsum(dP ∘ P)), with dP = dO · Vᵀ.
                let mut ds = vec![T::zero(); heads * tq * tk];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..tq {
                        let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let doi = &dy[i * d + off..i * d + off + hd];
                        let dp: Vec<T> = (0..tk)
                            .map(|j| {
                                let vj = &vd[j * d + off..j * d + off + hd];
                                doi.iter().zip(vj).map(|(&a, &b)| a * b).sum()
                            })
                            .collect();
                        let dot: T = dp.iter().zip(p).map(|(&a, &b)| a * b).sum();
                        let row = &mut ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        for j in 0..tk {
                            row[j] = p[j] * (dp[j] - dot) * scale;
                        }
                    }
                }
                if wants(*q) {
                    acc(*q, &mut |g| {
                        for h in 0..*heads {
                            let off = h * hd;
                            for i in 0..tq {
                                let row = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                                let gi = &mut g[i * d + off..i * d + off + hd];
                                for (j, &s) in row.iter().enumerate() {
                                    if s != T::zero() {
                                        let kj = &kd[j * d + off..j * d + off + hd];
                                        gi.iter_mut().zip(kj).for_each(|(o, &kv)| *o += s * kv);
                                    }
                                }
                            }
                        }
                    });
                }
                if wants(*k) {
                    acc(*k, &mut |g| {
                        for h in 0..*heads {
                            let off = h * hd;
                            for i in 0..tq {
                                let row = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                                let qi = &qd[i * d + off..i * d + off + hd];
                                for (j, &s) in row.iter().enumerate() {
                                    if s != T::zero() {
                                        let gj = &mut g[j * d + off..j * d + off + hd];
                                        gj.iter_mut().zip(qi).for_each(|(o, &qv)| *o += s * qv);
                                    }
                                }
                            }
                        }
                    });
                }
                acc(*v, &mut |g| {
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..tq {
                            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                            let doi = &dy[i * d + off..i * d + off + hd];
                            for (j, &pj) in p.iter().enumerate() {
                                if pj != T::zero() {
                                    let gj = &mut g[j * d + off..j * d + off + hd];
                                    gj.iter_mut().zip(doi).for_each(|(o, &dv)| *o += pj * dv);
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, keep } => acc(*x, &mut |g| {
                for ((o, &d), &k) in g.iter_mut().zip(dy).zip(keep) {
                    *o += d * k;
                }
            }),
            Op::Huber {
                pred,
                targets,
                delta,
            } => {
                let pd = &self.nodes[pred.0].data;
                let inv = dy[0] / T::lit(pd.len() as f64);
                acc(*pred, &mut |g| {
                    for ((o, &p), &t) in g.iter_mut().zip(pd).zip(targets) {
                        *o += inv * huber_slope(p - t, *delta);
                    }
                })
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &s)| *o += s);
}

/// Huber penalty of one residual.
pub fn huber_value<T: Real>(e: T, delta: T) -> T {
    let a = e.abs();
    if a <= delta {
        T::lit(0.5) * e * e
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

/// Derivative of [`huber_value`] with respect to the residual.
pub fn huber_slope<T: Real>(e: T, delta: T) -> T {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// Result of a reverse sweep: one optional gradient buffer per tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zeros when the node tracked gradients but was
    /// not reached from the root.
    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0]
            .clone()
            .map(|g| Tensor::new(shape, g).expect("gradient shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    /// Store the gradient of `v` into `t.grad` (zeros when unreached).
    pub fn write_to(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        let g = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); t.len()]);
        t.set_grad(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut g = Graph::new();
        let i = g.leaf(Tensor::eye(2));
        let m = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros([2, 3]));
        let b = g.leaf(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.data(y) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let x = g.leaf(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_abs_diff_eq!(g.data(y)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.data(y)[1], 0.0, epsilon = 1e-12);
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let expect = [0.09003, 0.24473, 0.66524];
        for (v, e) in g.data(y).iter().zip(expect) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert_abs_diff_eq!(d[0] + d[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1] + d[3], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.leaf(t(&[2], &[1.0, 1.0]));
        let bias = g.leaf(t(&[2], &[0.0, 0.0]));
        let c = g.leaf(t(&[2], &[7.0, 7.0]));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);
        let x = g.leaf(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        assert_abs_diff_eq!(g.data(y)[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.data(y)[1], 1.0, epsilon = 1e-9);

        let bad = g.leaf(Tensor::zeros([3]));
        assert!(matches!(
            g.layer_norm(bad, gain, bias, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_variance_row_maps_to_bias() {
        let mut g = Graph::new();
        let gain = g.leaf(t(&[3], &[2.0, 2.0, 2.0]));
        let bias = g.leaf(t(&[3], &[0.5, -1.0, 3.0]));
        let x = g.leaf(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.5, -1.0, 3.0]);
    }

    #[test]
    fn layer_norm_moments_on_random_vector() {
        let data = [0.3, -1.7, 2.2, 0.9, -0.4];
        let mut g = Graph::new();
        let gain = g.leaf(t(&[5], &[1.0; 5]));
        let bias = g.leaf(t(&[5], &[0.0; 5]));
        let x = g.leaf(t(&[5], &data));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = g.data(y);
        let mean = out.iter().sum::<f64>() / 5.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn masked_mean_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[2.0, 2.0, 4.0, 4.0]));
        let m = g.masked_mean(x, &[true, true]).unwrap();
        assert_eq!(g.shape(m), &[1, 2]);
        assert_eq!(g.data(m), &[3.0, 3.0]);
        let x = g.leaf(t(&[2, 2], &[2.0, 2.0, 99.0, 99.0]));
        let m = g.masked_mean(x, &[true, false]).unwrap();
        assert_eq!(g.data(m), &[2.0, 2.0]);
        assert!(matches!(
            g.masked_mean(x, &[false, false]),
            Err(Error::EmptyPool)
        ));
    }

    #[test]
    fn masked_mean_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..21).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mask = [true, false, true, true, false, true, false];
        let mut g = Graph::new();
        let x = g.leaf(t(&[7, 3], &data));
        let m = g.masked_mean(x, &mask).unwrap();
        for c in 0..3 {
            let kept: Vec<f64> = (0..7).filter(|&r| mask[r]).map(|r| data[r * 3 + c]).collect();
            let brute = kept.iter().sum::<f64>() / kept.len() as f64;
            assert_abs_diff_eq!(g.data(m)[c], brute, epsilon = 1e-7);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.data(s), &[0.5]);
        let a = g.leaf(Tensor::zeros([1, 384]));
        let b = g.leaf(Tensor::zeros([1, 384]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[2, 384]);
        let bad = g.leaf(Tensor::zeros([1, 3]));
        assert!(g.add(a, bad).is_err());
        assert!(g.concat(&[a, bad], 0).is_err());
    }

    #[test]
    fn concat_slice_transpose_layouts() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.data(s), &[2.0, 5.0, 4.0, 6.0]);
        let tr = g.transpose(s).unwrap();
        assert_eq!(g.shape(tr), &[2, 2]);
        assert_eq!(g.data(tr), &[2.0, 4.0, 5.0, 6.0]);
        assert!(g.slice(c, 1, 2, 2).is_err());
    }

    #[test]
    fn untracked_input_gets_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]).with_grad(true));
        let b = g.leaf(t(&[2], &[3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a), Some(&[3.0, 4.0][..]));
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]).with_grad(true));
        let b = g.scale(a, 2.0);
        assert!(matches!(g.backward(b), Err(Error::Contract(_))));
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber_value(0.0, 1.0), 0.0);
        assert_eq!(huber_value(0.5, 1.0), 0.125);
        assert_eq!(huber_value(3.0, 1.0), 2.5);
        assert_eq!(huber_value(-3.0, 1.0), 2.5);
    }

    #[test]
    fn fully_masked_attention_is_an_error() {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::zeros([1, 2]));
        let k = g.leaf(Tensor::zeros([2, 2]));
        assert!(matches!(
            g.attention(q, k, k, 1, Some(&[false, false])),
            Err(Error::EmptyAttention)
        ));
    }
}
