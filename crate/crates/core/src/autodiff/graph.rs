use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{GroupSet, ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Input gradients of a custom op, one entry per input (`None` = no contribution).
pub type InputGrads = Vec<Option<Vec<f64>>>;

type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> InputGrads>;

enum Op {
    Affine,
    Conv2d(ConvGeom),
    ConvTranspose2d(ConvGeom),
    Relu,
    Tanh,
    Concat,
    MeanAxis { axis: usize },
    Tile { axis: usize },
    Reshape,
    Add,
    Scale(f64),
    Dot(Tensor),
    Custom(CustomBackward),
}

enum Kind {
    Leaf { requires_grad: bool },
    Param(ParamId, ParamGroup),
    Op(Op),
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    kind: Kind,
}

/// A tape of operations, recorded in insertion order.
///
/// Parameter leaves copy their values out of a [`ParamStore`]; `backward`
/// writes gradients back into the store, filtered by group.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
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

    fn push(&mut self, value: Tensor, inputs: Vec<usize>, kind: Kind) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            kind,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        self.push(value, inputs.iter().map(|v| v.0).collect(), Kind::Op(op))
    }

    /// Constant input. Never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(
            value,
            Vec::new(),
            Kind::Leaf {
                requires_grad: false,
            },
        )
    }

    /// Input leaf whose gradient is retained after `backward` (see [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(
            value,
            Vec::new(),
            Kind::Leaf {
                requires_grad: true,
            },
        )
    }

    /// Leaf bound to a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Vec::new(), Kind::Param(id, p.group));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of an `input` leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// `x·W + b` for `x: [N×I]`, `W: [I×O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("affine", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("affine bias", ws, bs));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        let bias = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, n, k, m);
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.op(value, &[x, w, b], Op::Affine))
    }

    /// Valid cross-correlation of `x: [B×C×H×W]` with `kernel: [F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] > xs[2] || ks[3] > xs[3] {
            return Err(Error::dim("conv2d", xs, ks));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            out_h: (xs[2] - ks[2]) / stride + 1,
            out_w: (xs[3] - ks[3]) / stride + 1,
        };
        let mut out = vec![0.0; geom.batch * geom.out_ch * geom.out_h * geom.out_w];
        kernels::gather(self.value(x).data(), self.value(kernel).data(), &mut out, &geom);
        let value = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.op(value, &[x, kernel], Op::Conv2d(geom)))
    }

    /// Transposed convolution of `x: [B×Cin×H×W]` with `kernel: [Cin×Cout×kh×kw]`,
    /// producing `[B×Cout×out_h×out_w]`. The output size must be one that a valid
    /// `conv2d` with the same kernel and stride maps back to `H×W`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if stride == 0 {
            return Err(Error::Parameter("conv_transpose2d stride must be positive".into()));
        }
        let (oh, ow) = out_hw;
        if xs.len() != 4
            || ks.len() != 4
            || xs[1] != ks[0]
            || oh < ks[2]
            || ow < ks[3]
            || (oh - ks[2]) / stride + 1 != xs[2]
            || (ow - ks[3]) / stride + 1 != xs[3]
        {
            return Err(Error::dim("conv_transpose2d", xs, ks));
        }
        // Same geometry as the forward conv it inverts: "in" is our output.
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: ks[1],
            in_h: oh,
            in_w: ow,
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            out_h: xs[2],
            out_w: xs[3],
        };
        let mut out = vec![0.0; geom.batch * geom.in_ch * oh * ow];
        kernels::scatter(self.value(x).data(), self.value(kernel).data(), &mut out, &geom);
        let value = Tensor::new(&[geom.batch, geom.in_ch, oh, ow], out)?;
        Ok(self.op(value, &[x, kernel], Op::ConvTranspose2d(geom)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.op(value, &[x], Op::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.op(value, &[x], Op::Tanh)
    }

    /// Row-wise concatenation `[a ‖ b]` of `a: [B×D1]`, `b: [B×D2]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("concat", sa, sb));
        }
        let (rows, d1, d2) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            out.extend_from_slice(&da[r * d1..(r + 1) * d1]);
            out.extend_from_slice(&db[r * d2..(r + 1) * d2]);
        }
        let value = Tensor::new(&[rows, d1 + d2], out)?;
        Ok(self.op(value, &[a, b], Op::Concat))
    }

    /// Same values, no backward edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::dim("mean_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = kernels::axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for t in 0..n {
                let row = &src[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
            let inv = 1.0 / n as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.op(value, &[x], Op::MeanAxis { axis }))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the values.
    pub fn tile(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::dim("tile", &shape, &[axis, n]));
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, n);
        let (outer, _, inner) = kernels::axis_extents(&out_shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.op(value, &[x], Op::Tile { axis }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.op(value, &[x], Op::Reshape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.op(value, &[a, b], Op::Add))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.op(value, &[x], Op::Scale(factor))
    }

    /// Scalar `Σ x ⊙ weights` against a constant weight tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != weights.shape() {
            return Err(Error::dim("dot_const", t.shape(), weights.shape()));
        }
        let s = t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.op(Tensor::scalar(s), &[x], Op::Dot(weights)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ones = Tensor::full(self.shape(x), 1.0);
        self.dot_const(x, ones).expect("same shape")
    }

    /// Per-column `(x − mean) / sqrt(var + eps)` over the rows of a `[B×D]`
    /// matrix, with batch statistics. No parameters.
    pub fn standardize_batch(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::dim("standardize_batch", &s, &[2]));
        }
        let (b, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut mean = vec![0.0; d];
        for row in src.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / b as f64;
            }
        }
        let mut inv = vec![0.0; d];
        for row in src.chunks(d) {
            for ((q, v), m) in inv.iter_mut().zip(row).zip(&mean) {
                *q += (v - m).powi(2) / b as f64;
            }
        }
        inv.iter_mut().for_each(|q| *q = 1.0 / (*q + eps).sqrt());
        let y: Vec<f64> = src
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).zip(&inv).map(|((v, m), q)| (v - m) * q))
            .collect();
        let value = Tensor::new(&s, y.clone())?;
        Ok(self.custom(&[x], value, move |_, _, go| {
            // dx = inv · (g − mean(g) − y · mean(g ⊙ y)), column-wise
            let (mut mg, mut mgy) = (vec![0.0; d], vec![0.0; d]);
            for (gr, yr) in go.chunks(d).zip(y.chunks(d)) {
                for k in 0..d {
                    mg[k] += gr[k] / b as f64;
                    mgy[k] += gr[k] * yr[k] / b as f64;
                }
            }
            let dx = go
                .chunks(d)
                .zip(y.chunks(d))
                .flat_map(|(gr, yr)| (0..d).map(|k| inv[k] * (gr[k] - mg[k] - yr[k] * mgy[k])).collect::<Vec<_>>())
                .collect();
            vec![Some(dx)]
        }))
    }

    /// Records an op computed outside this module. `backward` receives the input
    /// values, the output value and the output gradient.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&[&Tensor], &Tensor, &[f64]) -> InputGrads + 'static,
    {
        self.op(value, inputs, Op::Custom(Box::new(backward)))
    }

    /// Backpropagates from the scalar `root`, accumulating into parameters of
    /// `allowed` groups (and into `input` leaves). Parameters outside `allowed`
    /// are untouched, and subgraphs that cannot reach an allowed parameter are
    /// never visited.
    pub fn backward(&mut self, root: Var, allowed: GroupSet, store: &mut ParamStore) -> Result<()> {
        let n = root.0 + 1;
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut needs = vec![false; n];
        for (i, node) in self.nodes[..n].iter().enumerate() {
            needs[i] = match &node.kind {
                Kind::Leaf { requires_grad } => *requires_grad,
                Kind::Param(_, group) => allowed.contains(*group),
                Kind::Op(_) => node.inputs.iter().any(|&j| needs[j]),
            };
        }
        if !needs[root.0] {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                Kind::Leaf { .. } => {
                    let acc = self
                        .leaf_grads
                        .entry(i)
                        .or_insert_with(|| vec![0.0; g.len()]);
                    add_into(acc, &g);
                }
                Kind::Param(id, _) => {
                    add_into(&mut store.get_mut(*id).grad, &g);
                }
                Kind::Op(op) => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let contributions = op_backward(op, &ins, &node.value, &g, &node.inputs, &needs);
                    for (&j, c) in node.inputs.iter().zip(contributions) {
                        if let (true, Some(c)) = (needs[j], c) {
                            match &mut grads[j] {
                                Some(acc) => add_into(acc, &c),
                                slot => *slot = Some(c),
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn op_backward(
    op: &Op,
    ins: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    idx: &[usize],
    needs: &[bool],
) -> InputGrads {
    let need = |k: usize| needs[idx[k]];
    match op {
        Op::Affine => {
            let (x, w) = (ins[0], ins[1]);
            let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let dx = need(0).then(|| {
                let mut d = vec![0.0; n * k];
                kernels::matmul_bt_acc(g, w.data(), &mut d, n, k, m);
                d
            });
            let dw = need(1).then(|| {
                let mut d = vec![0.0; k * m];
                kernels::matmul_at_acc(x.data(), g, &mut d, n, k, m);
                d
            });
            let db = need(2).then(|| {
                let mut d = vec![0.0; m];
                for row in g.chunks(m) {
                    add_into(&mut d, row);
                }
                d
            });
            vec![dx, dw, db]
        }
        Op::Conv2d(geom) => {
            let dx = need(0).then(|| {
                let mut d = vec![0.0; ins[0].numel()];
                kernels::scatter(g, ins[1].data(), &mut d, geom);
                d
            });
            let dk = need(1).then(|| {
                let mut d = vec![0.0; ins[1].numel()];
                kernels::kernel_grad(ins[0].data(), g, &mut d, geom);
                d
            });
            vec![dx, dk]
        }
        Op::ConvTranspose2d(geom) => {
            let dx = need(0).then(|| {
                let mut d = vec![0.0; ins[0].numel()];
                kernels::gather(g, ins[1].data(), &mut d, geom);
                d
            });
            let dk = need(1).then(|| {
                let mut d = vec![0.0; ins[1].numel()];
                kernels::kernel_grad(g, ins[0].data(), &mut d, geom);
                d
            });
            vec![dx, dk]
        }
        Op::Relu => {
            let d = ins[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Some(d)]
        }
        Op::Tanh => {
            let d = out.data().iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect();
            vec![Some(d)]
        }
        Op::Concat => {
            let (d1, d2) = (ins[0].shape()[1], ins[1].shape()[1]);
            let mut ga = Vec::with_capacity(ins[0].numel());
            let mut gb = Vec::with_capacity(ins[1].numel());
            for row in g.chunks(d1 + d2) {
                ga.extend_from_slice(&row[..d1]);
                gb.extend_from_slice(&row[d1..]);
            }
            vec![Some(ga), Some(gb)]
        }
        Op::MeanAxis { axis } => {
            let (outer, n, inner) = kernels::axis_extents(ins[0].shape(), *axis);
            let inv = 1.0 / n as f64;
            let mut d = Vec::with_capacity(ins[0].numel());
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    d.extend(src.iter().map(|v| v * inv));
                }
            }
            vec![Some(d)]
        }
        Op::Tile { axis } => {
            let (outer, n, inner) = kernels::axis_extents(out.shape(), *axis);
            let mut d = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut d[o * inner..(o + 1) * inner];
                for t in 0..n {
                    add_into(dst, &g[(o * n + t) * inner..(o * n + t + 1) * inner]);
                }
            }
            vec![Some(d)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Scale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
        Op::Dot(w) => vec![Some(w.data().iter().map(|v| v * g[0]).collect())],
        Op::Custom(f) => f(ins, out, g),
    }
}
