use crate::error::{Error, Result};

use super::{matmul_raw, softmax_slices, transpose_raw, Tensor};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of recorded primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Softmax,
    LayerNorm,
    Gelu,
    Exp,
    Log,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Concat,
    Slice,
    Gather,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Second operand broadcasts over the leading axes of the first.
    Add(Var, Var),
    Mul(Var, Var),
    Softmax(Var),
    /// `aux` on the node holds one reciprocal standard deviation per row.
    LayerNorm(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm(_) => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    aux: Vec<f64>,
}

/// Define-by-run record of one forward pass.
///
/// Not `Sync`-shared: a graph belongs to the thread that records it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
    layer_norm_eps: f64,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter leaves recorded via [`Graph::param`], in recording order.
    pub fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }
}

/// Splits `shape` around `axis` into (outer, n, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            layer_norm_eps: 1e-5,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape invariant")
    }

    pub fn item(&self, v: Var) -> f64 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "item() on non-scalar node");
        d[0]
    }

    /// Values of every recorded node of the given kind, with their shapes.
    pub fn values_of(&self, kind: OpKind) -> impl Iterator<Item = (&[usize], &[f64])> {
        self.nodes
            .iter()
            .filter(move |n| n.op.kind() == kind)
            .map(|n| (n.shape.as_slice(), n.data.as_slice()))
    }

    /// Records an input leaf; tracks gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(t))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Records a parameter leaf and remembers which store slot it came from.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        );
        self.bindings.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sb.iter().product::<usize>() == 1
            || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Elementwise `a + b`; `b` may be a scalar or match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let bv = self.value(b);
        let nb = bv.len();
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), rg))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let bv = self.value(b);
        let nb = bv.len();
        let data = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % nb])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        if width == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let data = softmax_slices(self.value(x), width);
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Softmax(x), rg))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        if width == 0 {
            return Err(Error::contract("layer_norm over an empty axis"));
        }
        let eps = self.layer_norm_eps;
        let src = self.value(x);
        let mut data = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / width);
        for (row, out) in src.chunks(width).zip(data.chunks_mut(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(x);
        let v = self.push(shape, data, Op::LayerNorm(x), rg);
        self.nodes[v.0].aux = inv_std;
        Ok(v)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|v| v.ln()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Log(x), rg)
    }

    fn reduce(&self, x: Var, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(x);
        let src = self.value(x);
        match axis {
            None => Ok((Vec::new(), vec![src.iter().sum()])),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Dimension {
                        op: "reduce",
                        lhs: shape.to_vec(),
                        rhs: vec![ax],
                    });
                }
                let (outer, n, inner) = split_axis(shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                let mut out_shape = shape.to_vec();
                out_shape.remove(ax);
                Ok((out_shape, out))
            }
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, data) = self.reduce(x, axis)?;
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let count = match axis {
            None => self.value(x).len(),
            Some(ax) => *self.shape(x).get(ax).unwrap_or(&0),
        };
        if count == 0 {
            return Err(Error::contract("mean over zero elements"));
        }
        let (shape, mut data) = self.reduce(x, axis)?;
        for d in &mut data {
            *d /= count as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Mean { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// Swaps the two axes of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let data = transpose_raw(self.value(x), s[0], s[1]);
        let rg = self.rg(x);
        Ok(self.push(vec![s[1], s[0]], data, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != base[i])
            {
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
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let src = self.value(*p);
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::Dimension {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            data,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    /// Selects sub-blocks along axis 0; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = *s
            .first()
            .ok_or_else(|| Error::contract("gather on a scalar"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension {
                op: "gather",
                lhs: s,
                rhs: vec![bad],
            });
        }
        let block = s[1..].iter().product::<usize>();
        let src = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            data.extend_from_slice(&src[i * block..(i + 1) * block]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            data,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // Composites built only from the primitives above.

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `x·w + b` for `x: [n×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Runs reverse-mode accumulation from a scalar `loss`, consuming the graph.
    ///
    /// Every node with `requires_grad` ends with a populated gradient; nodes
    /// that the loss does not depend on receive zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.data.len()]);
            } else if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b), k, nn);
                    self.accumulate(grads, *a, matmul_raw(dy, &bt, m, nn, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, dy, k, m, nn));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                if self.rg(*b) {
                    let nb = self.value(*b).len();
                    let mut gb = vec![0.0; nb];
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % nb] += d;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                if self.rg(*a) {
                    let ga = dy.iter().enumerate().map(|(i, d)| d * bv[i % nb]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; nb];
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % nb] += d * av[i];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(x) => {
                let width = *node.shape.last().unwrap_or(&1);
                let mut gx = vec![0.0; dy.len()];
                for ((y, d), g) in node
                    .data
                    .chunks(width)
                    .zip(dy.chunks(width))
                    .zip(gx.chunks_mut(width))
                {
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    for ((gi, yi), di) in g.iter_mut().zip(y).zip(d) {
                        *gi = yi * (di - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm(x) => {
                let width = *node.shape.last().unwrap_or(&1);
                let w = width as f64;
                let mut gx = vec![0.0; dy.len()];
                for (((y, d), g), r) in node
                    .data
                    .chunks(width)
                    .zip(dy.chunks(width))
                    .zip(gx.chunks_mut(width))
                    .zip(&node.aux)
                {
                    let mean_d = d.iter().sum::<f64>() / w;
                    let mean_dy = d.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / w;
                    for ((gi, yi), di) in g.iter_mut().zip(y).zip(d) {
                        *gi = r * (di - mean_d - yi * mean_dy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = self
                    .value(*x)
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| d * gelu_grad(*v))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = node.data.iter().zip(dy).map(|(y, d)| d * y).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = self.value(*x).iter().zip(dy).map(|(v, d)| d / v).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let numel = self.value(*x).len();
                let is_mean = matches!(node.op, Op::Mean { .. });
                let gx = match axis {
                    None => {
                        let d = if is_mean { dy[0] / numel as f64 } else { dy[0] };
                        vec![d; numel]
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(shape, *ax);
                        let div = if is_mean { n as f64 } else { 1.0 };
                        let mut g = vec![0.0; numel];
                        for o in 0..outer {
                            for k in 0..n {
                                for i in 0..inner {
                                    g[(o * n + k) * inner + i] = dy[o * inner + i] / div;
                                }
                            }
                        }
                        g
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy.to_vec()),
            Op::Transpose(x) => {
                let s = &node.shape;
                self.accumulate(grads, *x, transpose_raw(dy, s[0], s[1]));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    if self.rg(*p) {
                        let mut g = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&dy[start..start + n * inner]);
                        }
                        self.accumulate(grads, *p, g);
                    }
                    offset += n;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut g = vec![0.0; outer * n * inner];
                let w = (end - start) * inner;
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    g[dst..dst + w].copy_from_slice(&dy[o * w..(o + 1) * w]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Gather { x, indices } => {
                let numel = self.value(*x).len();
                let block = node.shape[1..].iter().product::<usize>();
                let mut g = vec![0.0; numel];
                for (j, &i) in indices.iter().enumerate() {
                    for b in 0..block {
                        g[i * block + b] += dy[j * block + b];
                    }
                }
                self.accumulate(grads, *x, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let p = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(p), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 2]).with_grad());
        let s = g.sum(x, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn backward_of_sum_squares_is_twice_x() {
        let mut g = Graph::new();
        let vals = vec![0.5, -1.5, 2.0, 3.25];
        let x = g.leaf(Tensor::new(vec![4], vals.clone()).unwrap().with_grad());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq, None).unwrap();
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_grad());
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3], 1.0).with_grad());
        let unused = g.leaf(Tensor::full(&[2], 1.0).with_grad());
        let s = g.sum(x, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[3, 4]));
        let row = g.leaf(Tensor::full(&[4], 2.0));
        let col = g.leaf(Tensor::zeros(&[3]));
        let y = g.add(a, row).unwrap();
        assert_eq!(g.value(y), &[2.0; 12]);
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn concat_slice_gather_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), &[2.0, 5.0, 4.0, 6.0]);
        let r = g.gather(c, &[1, 1, 0]).unwrap();
        assert_eq!(g.shape(r), &[3, 3]);
        assert_eq!(&g.value(r)[..3], &[3.0, 4.0, 6.0]);
        assert!(g.gather(c, &[2]).is_err());
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let y = g.layer_norm(x).unwrap();
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
