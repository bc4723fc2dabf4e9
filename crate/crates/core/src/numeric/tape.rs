//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its output
//! and whatever it needs for the vector-Jacobian product. `backward` walks
//! the list in reverse from a scalar loss.

use crate::error::{Error, Result};
use crate::numeric::rng::Rng;
use crate::numeric::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `lhs + rhs`; when `broadcast` the rhs row is added to every lhs row.
    Add {
        broadcast: bool,
    },
    Sub,
    Mul,
    /// `scale * x + shift`
    Affine {
        scale: f64,
    },
    MatMul,
    Transpose,
    Reshape,
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
    },
    Sigmoid,
    Tanh,
    Relu,
    Softmax {
        axis: usize,
    },
    Dropout {
        mask: Vec<f64>,
    },
    Embedding {
        indices: Vec<usize>,
    },
    Mse,
    CrossEntropy {
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        targets: Vec<f64>,
    },
    LayerNorm {
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum,
    Normalize {
        total: f64,
    },
    Detach,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Axis decomposition `(outer, len, inner)` for strided reductions.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    rng: Option<Rng>,
}

impl Tape {
    /// Tape without a random stream; dropout must run with `train = false`.
    pub fn new() -> Self {
        Tape::default()
    }

    /// Tape whose dropout masks are drawn from a stream seeded by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: Some(Rng::new(seed)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, value: Vec<f64>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_with(op, inputs, shape, value, requires_grad)
    }

    fn push_with(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------------
    // Leaves and accessors
    // ---------------------------------------------------------------------

    /// Records `tensor` as a leaf; gradients reach it iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_with(
            Op::Leaf,
            vec![],
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    // ---------------------------------------------------------------------
    // Elementwise arithmetic
    // ---------------------------------------------------------------------

    /// Sum of equal shapes, or a `[n]`/`[1, n]` row broadcast over `[m, n]`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if ls == rs {
            let value = self
                .value(lhs)
                .iter()
                .zip(self.value(rhs))
                .map(|(a, b)| a + b)
                .collect();
            return Ok(self.push(Op::Add { broadcast: false }, vec![lhs.0, rhs.0], ls, value));
        }
        let row_len = match rs.as_slice() {
            [n] | [1, n] => *n,
            _ => return Err(Error::dim("add", &[&ls, &rs])),
        };
        if ls.last() != Some(&row_len) {
            return Err(Error::dim("add", &[&ls, &rs]));
        }
        let r = self.value(rhs).to_vec();
        let value = self
            .value(lhs)
            .chunks(row_len)
            .flat_map(|row| row.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(Op::Add { broadcast: true }, vec![lhs.0, rhs.0], ls, value))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("sub", lhs, rhs)?;
        let value = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(a, b)| a - b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Op::Sub, vec![lhs.0, rhs.0], shape, value))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", lhs, rhs)?;
        let value = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Op::Mul, vec![lhs.0, rhs.0], shape, value))
    }

    /// `scale * x + shift`, e.g. `affine(z, -1, 1)` for `1 - z`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Affine { scale }, vec![x.0], shape, value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Linear algebra and reshaping
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a)).ok_or_else(|| Error::dim("matmul", &[self.shape(a), self.shape(b)]))?;
        let (k2, n) =
            matrix_dims(self.shape(b)).ok_or_else(|| Error::dim("matmul", &[self.shape(a), self.shape(b)]))?;
        if k != k2 {
            return Err(Error::dim("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Op::MatMul, vec![a.0, b.0], vec![m, n], out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(x)).ok_or_else(|| Error::dim("transpose", &[self.shape(x)]))?;
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![x.0], vec![c, r], out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", &[self.shape(x), shape]));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(Op::Reshape, vec![x.0], shape.to_vec(), value))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &[&base]));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &[&base, s]));
            }
            sizes.push(s[axis]);
        }
        let mut shape = base.clone();
        shape[axis] = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                let chunk = len * inner;
                out.extend_from_slice(&self.value(*p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Concat { axis, sizes }, inputs, shape, out))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                shapes: format!("{shape:?} axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Op::Narrow { axis, start }, vec![x.0], new_shape, out))
    }

    /// Row `i` of a matrix as a `[1, cols]` tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.narrow(x, 0, i, 1)
    }

    // ---------------------------------------------------------------------
    // Nonlinearities
    // ---------------------------------------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid, vec![x.0], shape, value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh, vec![x.0], shape, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x.0], shape, value)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &[&shape]));
        }
        if shape[axis] == 0 {
            return Err(Error::Domain(format!("softmax over empty axis {axis} of {shape:?}")));
        }
        let value = softmax_values(self.value(x), &shape, axis);
        Ok(self.push(Op::Softmax { axis }, vec![x.0], shape, value))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Contract("dropout in training mode needs a seeded tape".into()))?;
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("dropout", &[self.shape(x), &[mask.len()]]));
        }
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout { mask }, vec![x.0], shape, value))
    }

    // ---------------------------------------------------------------------
    // Layers
    // ---------------------------------------------------------------------

    /// Gathers rows of a `[V, d]` table into `[n, d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) =
            matrix_dims(self.shape(table)).ok_or_else(|| Error::dim("embedding_lookup", &[self.shape(table)]))?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Bounds { index: i, len: rows });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::Embedding {
                indices: indices.to_vec(),
            },
            vec![table.0],
            vec![indices.len(), d],
            out,
        ))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", &[&shape]))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d || d == 0 {
            return Err(Error::dim("layer_norm", &[&shape, self.shape(gamma), self.shape(beta)]));
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(Op::LayerNorm { xhat, rstd }, vec![x.0, gamma.0, beta.0], shape, out))
    }

    // ---------------------------------------------------------------------
    // Reductions and losses
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        self.push(Op::Sum, vec![x.0], vec![], vec![total])
    }

    /// `x / sum(x)` over all elements.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().sum();
        if total == 0.0 || !total.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize by total {total}")));
        }
        let value = self.value(x).iter().map(|v| v / total).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Normalize { total }, vec![x.0], shape, value))
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::Contract("mse_loss over zero elements".into()));
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(Op::Mse, vec![pred.0, target.0], vec![], vec![loss]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, classes) =
            matrix_dims(self.shape(logits)).ok_or_else(|| Error::dim("cross_entropy_loss", &[self.shape(logits)]))?;
        if m != targets.len() || m == 0 {
            return Err(Error::dim(
                "cross_entropy_loss",
                &[self.shape(logits), &[targets.len()]],
            ));
        }
        let probs = softmax_values(self.value(logits), &[m, classes], 1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::Bounds { index: t, len: classes });
            }
            let row = &self.value(logits)[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= m as f64;
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits.0],
            vec![],
            vec![loss],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::dim("bce_with_logits", &[self.shape(logits), &[targets.len()]]));
        }
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(0.0) - t * v + (-v.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        Ok(self.push(
            Op::BceWithLogits {
                targets: targets.to_vec(),
            },
            vec![logits.0],
            vec![],
            vec![loss],
        ))
    }

    /// Identity in value, blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push_with(Op::Detach, vec![x.0], shape, value, false)
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let inp = |k: usize| &self.nodes[node.inputs[k]];
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        let mut acc = |k: usize, delta: Vec<f64>| {
            let slot = &mut grads[node.inputs[k]];
            match slot {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add { broadcast } => {
                if wants(0) {
                    acc(0, g.to_vec());
                }
                if wants(1) {
                    if *broadcast {
                        let n = inp(1).value.len();
                        let mut d = vec![0.0; n];
                        for row in g.chunks(n) {
                            d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        acc(1, d);
                    } else {
                        acc(1, g.to_vec());
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    acc(0, g.to_vec());
                }
                if wants(1) {
                    acc(1, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul => {
                let (a, b) = (&inp(0).value, &inp(1).value);
                if wants(0) {
                    acc(0, g.iter().zip(b).map(|(g, b)| g * b).collect());
                }
                if wants(1) {
                    acc(1, g.iter().zip(a).map(|(g, a)| g * a).collect());
                }
            }
            Op::Reshape => acc(0, g.to_vec()),
            Op::Affine { scale } => acc(0, g.iter().map(|v| v * scale).collect()),
            Op::MatMul => {
                let (m, k) = matrix_dims(&inp(0).shape).unwrap();
                let n = inp(1).shape[1];
                if wants(0) {
                    // dA = G · Bᵀ
                    let b = &inp(1).value;
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            d[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(0, d);
                }
                if wants(1) {
                    // dB = Aᵀ · G
                    let a = &inp(0).value;
                    let mut d = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av != 0.0 {
                                d[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, g)| *d += av * g);
                            }
                        }
                    }
                    acc(1, d);
                }
            }
            Op::Transpose => {
                let (r, c) = matrix_dims(&inp(0).shape).unwrap();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(0, d);
            }
            Op::Concat { axis, sizes } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (k, &len) in sizes.iter().enumerate() {
                    if wants(k) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(k, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { axis, start } => {
                let (outer, full, inner) = split_axis(&inp(0).shape, *axis);
                let len = node.shape[*axis];
                let mut d = vec![0.0; inp(0).value.len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(0, d);
            }
            Op::Sigmoid => acc(0, g.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh => acc(0, g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu => acc(
                0,
                g.iter()
                    .zip(&inp(0).value)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax { axis } => {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(0, d);
            }
            Op::Dropout { mask } => acc(0, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Embedding { indices } => {
                let d = node.shape[1];
                let mut out = vec![0.0; inp(0).value.len()];
                for (r, &i) in indices.iter().enumerate() {
                    out[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(o, g)| *o += g);
                }
                acc(0, out);
            }
            Op::Mse => {
                let (a, b) = (&inp(0).value, &inp(1).value);
                let scale = 2.0 * g[0] / a.len() as f64;
                let diff: Vec<f64> = a.iter().zip(b).map(|(a, b)| scale * (a - b)).collect();
                if wants(1) {
                    acc(1, diff.iter().map(|v| -v).collect());
                }
                if wants(0) {
                    acc(0, diff);
                }
            }
            Op::CrossEntropy { targets, probs } => {
                let m = targets.len();
                let classes = probs.len() / m;
                let scale = g[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * classes + t] -= scale;
                }
                acc(0, d);
            }
            Op::BceWithLogits { targets } => {
                let scale = g[0] / targets.len() as f64;
                acc(
                    0,
                    inp(0)
                        .value
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| scale * (sigmoid(x) - t))
                        .collect(),
                );
            }
            Op::LayerNorm { xhat, rstd } => {
                let d = node.shape[node.shape.len() - 1];
                let gamma = &inp(1).value;
                if wants(0) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gh: Vec<f64> = g[span.clone()].iter().zip(gamma).map(|(g, w)| g * w).collect();
                        let xh = &xhat[span.clone()];
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = rs / d as f64 * (d as f64 * gh[j] - sum_gh - xh[j] * sum_ghx);
                        }
                    }
                    acc(0, dx);
                }
                if wants(1) {
                    let mut dg = vec![0.0; d];
                    for (row_g, row_x) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_x[j];
                        }
                    }
                    acc(1, dg);
                }
                if wants(2) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc(2, db);
                }
            }
            Op::Sum => acc(0, vec![g[0]; inp(0).value.len()]),
            Op::Normalize { total } => {
                let dot: f64 = g.iter().zip(&node.value).map(|(a, b)| a * b).sum();
                acc(0, g.iter().map(|gk| (gk - dot) / total).collect());
            }
        }
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
}

pub(crate) fn softmax_values(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`], indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn param(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), values).unwrap().with_requires_grad(true)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_midpoint() {
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![0.0]).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.value(y), &[0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.leaf(&Tensor::identity(2));
        let m = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = t.matmul(i, m).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_over_empty_axis_is_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 0], vec![]).unwrap();
        assert!(matches!(t.softmax(x, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_through_sum() {
        let mut t = Tape::new();
        let x = t.leaf(&param(vec![1.0, -2.0, 3.0], &[3]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_of_identical_inputs_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&param(vec![0.3, 0.7], &[2]));
        let l = t.mse_loss(x, x).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn squared_product_chain_rule() {
        // loss = (x·w)^2 with x = 2, w = 3: d/dw = 2 (x w) x = 24
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![2.0]).unwrap();
        let w = t.leaf(&param(vec![3.0], &[1]));
        let xw = t.mul(x, w).unwrap();
        let sq = t.mul(xw, xw).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_abs_diff_eq!(g.get(w).unwrap()[0], 24.0, epsilon = 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&param(vec![1.0, 2.0], &[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&param(vec![1.0, 2.0], &[2]));
        let d = t.detach(x);
        let y = t.mul(d, x).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        // only the non-detached factor contributes: d(l)/dx = d = x
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.dropout(x, 0.5, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut t = Tape::with_seed(7);
        let n = 200_000;
        let x = t.constant(&[n], vec![1.0; n]).unwrap();
        let y = t.dropout(x, 0.3, true).unwrap();
        let mean = t.value(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::with_seed(99);
            let x = t.constant(&[64], (0..64).map(f64::from).collect()).unwrap();
            let y = t.dropout(x, 0.5, true).unwrap();
            t.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 3], vec![1.0, -5.0, 30.0, 0.1, 0.2, 0.3]).unwrap();
        let y = t.softmax(x, 1).unwrap();
        for row in t.value(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        let z = t.softmax(x, 0).unwrap();
        let v = t.value(z);
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_narrow_invert() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = t.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(back), &[5.0, 6.0]);
        let rows = t.concat(&[a, a], 0).unwrap();
        assert_eq!(t.shape(rows), &[4, 2]);
    }

    #[test]
    fn embedding_lookup_out_of_range() {
        let mut t = Tape::new();
        let table = t.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(
            t.embedding_lookup(table, &[3]),
            Err(Error::Bounds { index: 3, len: 3 })
        ));
    }
}
