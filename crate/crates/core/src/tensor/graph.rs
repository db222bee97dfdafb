use super::kernels::{axis_split, broadcast_map, broadcast_shape, matmul, matmul_at, matmul_bt, transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Sum,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softmax(Var, usize),
    Reduce {
        input: Var,
        axis: usize,
        mode: ReduceMode,
        /// Flat source index into the input for every output element (max only).
        sources: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording tape. Nodes are appended in evaluation order, so the node list
/// is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable (or otherwise differentiated) input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    ///
    /// `None` if `v` does not require grad or backward has not run. Nodes
    /// that require grad but received no signal report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::new(node.value.shape(), data).expect("grad shape"))
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[v.0].value.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "transpose needs rank 2".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = Tensor::new(&[n, m], transpose(self.value(a).data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
            let ma = broadcast_map(&shape, ta.shape());
            let mb = broadcast_map(&shape, tb.shape());
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            Tensor::new(&shape, data)?
        };
        Ok((out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("unary shape");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(x[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[base + k * inner] - max).exp();
                    y[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape(), y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Reduces along `axis`, keeping it as a size-1 dimension. For
    /// [`ReduceMode::Max`] the second value holds, per output element, the
    /// position along `axis` of the winning input (first index on ties).
    pub fn reduce(&mut self, a: Var, axis: usize, mode: ReduceMode) -> Result<(Var, Option<Vec<usize>>)> {
        self.check_axis("reduce", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if len == 0 {
            return Err(Error::EmptyReduction { op: "reduce" });
        }
        let x = t.data();
        let mut y = vec![0.0; outer * inner];
        let mut sources = Vec::new();
        let mut argmax = Vec::new();
        if mode == ReduceMode::Max {
            sources.reserve(outer * inner);
            argmax.reserve(outer * inner);
        }
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let out = &mut y[o * inner + i];
                match mode {
                    ReduceMode::Sum | ReduceMode::Mean => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += x[base + k * inner];
                        }
                        *out = if mode == ReduceMode::Mean { s / len as f64 } else { s };
                    }
                    ReduceMode::Max => {
                        let mut best = 0;
                        for k in 1..len {
                            if x[base + k * inner] > x[base + best * inner] {
                                best = k;
                            }
                        }
                        *out = x[base + best * inner];
                        sources.push(base + best * inner);
                        argmax.push(best);
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(&shape, y)?;
        let rg = self.rg(&[a]);
        let v = self.push(
            out,
            Op::Reduce {
                input: a,
                axis,
                mode,
                sources,
            },
            rg,
        );
        Ok((v, (mode == ReduceMode::Max).then_some(argmax)))
    }

    /// Sum over every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        Ok(self.reduce(flat, 0, ReduceMode::Sum)?.0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = t.reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Gathers slices `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("index_select", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("index {bad} out of range along axis {axis}"),
            });
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = o * len * inner + i * inner;
                data.extend_from_slice(&t.data()[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::IndexSelect(a, axis, indices.to_vec()), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of `root` on every node that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, cg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reduces a gradient of broadcast shape `out` back onto `src`.
    fn unbroadcast(out: &[usize], src: &Tensor, g: Vec<f64>) -> Vec<f64> {
        if out == src.shape() {
            return g;
        }
        let map = broadcast_map(out, src.shape());
        let mut acc = vec![0.0; src.numel()];
        for (gi, &si) in g.iter().zip(&map) {
            acc[si] += gi;
        }
        acc
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    res.push((*a, matmul_bt(g, tb.data(), m, n, k)));
                }
                if self.needs(*b) {
                    res.push((*b, matmul_at(ta.data(), g, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                res.push((*a, transpose(g, m, n)));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    res.push((*a, Self::unbroadcast(out_shape, val(*a), g.to_vec())));
                }
                if self.needs(*b) {
                    let gb = g.iter().map(|x| sign * x).collect();
                    res.push((*b, Self::unbroadcast(out_shape, val(*b), gb)));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let same = ta.shape() == out_shape && tb.shape() == out_shape;
                let (ma, mb);
                let (ia, ib): (&dyn Fn(usize) -> usize, &dyn Fn(usize) -> usize) = if same {
                    (&|i| i, &|i| i)
                } else {
                    ma = broadcast_map(out_shape, ta.shape());
                    mb = broadcast_map(out_shape, tb.shape());
                    (&|i| ma[i], &|i| mb[i])
                };
                let (xa, xb) = (ta.data(), tb.data());
                let is_div = matches!(node.op, Op::Div(..));
                if self.needs(*a) {
                    let ga = (0..g.len())
                        .map(|i| if is_div { g[i] / xb[ib(i)] } else { g[i] * xb[ib(i)] })
                        .collect();
                    res.push((*a, Self::unbroadcast(out_shape, ta, ga)));
                }
                if self.needs(*b) {
                    let gb = (0..g.len())
                        .map(|i| {
                            if is_div {
                                -g[i] * y[i] / xb[ib(i)]
                            } else {
                                g[i] * xa[ia(i)]
                            }
                        })
                        .collect();
                    res.push((*b, Self::unbroadcast(out_shape, tb, gb)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| x * c).collect())),
            Op::Offset(a) => res.push((*a, g.to_vec())),
            Op::Exp(a) => res.push((*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())),
            Op::Log(a) => {
                let x = val(*a).data();
                res.push((*a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect()));
            }
            Op::Tanh(a) => res.push((*a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect())),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..len {
                            let p = base + k * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                res.push((*a, gx));
            }
            Op::Reduce {
                input,
                axis,
                mode,
                sources,
            } => {
                let t = val(*input);
                let (outer, len, inner) = axis_split(t.shape(), *axis);
                let mut gx = vec![0.0; t.numel()];
                match mode {
                    ReduceMode::Max => {
                        for (gi, &s) in g.iter().zip(sources) {
                            gx[s] += gi;
                        }
                    }
                    ReduceMode::Sum | ReduceMode::Mean => {
                        let w = if *mode == ReduceMode::Mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i] * w;
                                for k in 0..len {
                                    gx[o * len * inner + k * inner + i] = gv;
                                }
                            }
                        }
                    }
                }
                res.push((*input, gx));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let mut grads: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(val(*p).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, p) in parts.iter().enumerate() {
                        let chunk = val(*p).shape()[*axis] * inner;
                        grads[k].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (p, gp) in parts.iter().zip(grads) {
                    if self.needs(*p) {
                        res.push((*p, gp));
                    }
                }
            }
            Op::IndexSelect(a, axis, indices) => {
                let t = val(*a);
                let (outer, len, inner) = axis_split(t.shape(), *axis);
                let mut gx = vec![0.0; t.numel()];
                let mut pos = 0;
                for o in 0..outer {
                    for &i in indices {
                        let start = o * len * inner + i * inner;
                        for (dst, src) in gx[start..start + inner].iter_mut().zip(&g[pos..pos + inner]) {
                            *dst += src;
                        }
                        pos += inner;
                    }
                }
                res.push((*a, gx));
            }
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let c = g.constant(m(&[&[5.0], &[6.0]]));
        let p = g.matmul(a, c).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);

        let x = g.constant(m(&[&[2.0]]));
        let y = g.constant(m(&[&[3.0]]));
        let p = g.matmul(x, y).unwrap();
        assert_eq!(g.value(p).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![0.7, 0.7, 0.7]));
        let s = g.softmax(v, 0).unwrap();
        for &x in g.value(s).data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = g.softmax(v, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);
        let v = g.constant(Tensor::vector(vec![-42.0]));
        let s = g.softmax(v, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);
        assert!(matches!(g.softmax(v, 1), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_extreme_logits_stay_normalised() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[2, 3], vec![700.0, -700.0, 699.5, -700.0, -699.0, 0.0]).unwrap());
        for axis in 0..2 {
            let s = g.softmax(v, axis).unwrap();
            let (r, _) = g.reduce(s, axis, ReduceMode::Sum).unwrap();
            for &x in g.value(r).data() {
                assert!((x - 1.0).abs() < 1e-12);
            }
            assert!(g.value(s).data().iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let (r, idx) = g.reduce(v, 0, ReduceMode::Mean).unwrap();
        assert_eq!(g.value(r).data(), &[2.0]);
        assert!(idx.is_none());
        let v = g.constant(Tensor::vector(vec![1.0, 5.0, 3.0]));
        let (r, idx) = g.reduce(v, 0, ReduceMode::Max).unwrap();
        assert_eq!(g.value(r).data(), &[5.0]);
        assert_eq!(idx.unwrap(), vec![1]);
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let (r, _) = g.reduce(v, 0, ReduceMode::Mean).unwrap();
        assert_eq!(g.value(r).data(), &[2.0]);
    }

    #[test]
    fn max_ties_pick_first_index() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(&[3, 2], vec![1.0, 4.0, 3.0, 4.0, 3.0, 2.0]).unwrap());
        let (r, idx) = g.reduce(v, 0, ReduceMode::Max).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0]);
        assert_eq!(idx.unwrap(), vec![1, 0]);
        let s = g.sum_all(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.exp(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let s0 = g.index_select(s, 0, &[0]).unwrap();
        g.backward(s0).unwrap();
        let gx = g.grad(x).unwrap();
        assert!((gx.data()[0] - 0.25).abs() < 1e-15);
        assert!((gx.data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.tanh(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(y).unwrap();
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn broadcast_gradients_accumulate() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.leaf(Tensor::new(&[1, 3], vec![1.0, 1.0, 2.0]).unwrap());
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn concat_and_index_select_route_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sel = g.index_select(c, 0, &[2, 2, 0]).unwrap();
        let s = g.sum_all(sel).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }
}
