//! Reverse-mode tape. Every primitive appends one node holding its forward
//! value; `backward` walks the nodes in exact reverse order.

use super::Tensor;
use crate::error::{config_err, dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Minimum {
        a: Var,
        b: Var,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
    SmoothL1 {
        x: Var,
        beta: f64,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        d: usize,
        norms: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaxAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Take {
        x: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        rows: usize,
    },
    Narrow {
        x: Var,
        start: usize,
        len: usize,
        width: usize,
        rows: usize,
    },
    RepeatAxis1 {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        t: usize,
        batch: usize,
        cin: usize,
        cout: usize,
        k: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
        k: usize,
    },
    AvgPool2x2 {
        x: Var,
        n: usize,
        h: usize,
        w: usize,
        c: usize,
    },
}

#[derive(Debug)]
struct Node {
    name: &'static str,
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Non-leaf nodes in the order their backward rules ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

fn shape_of_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four fixed accumulation lanes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
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

    /// Records an input. Its `requires_grad` flag decides whether gradients
    /// are tracked for it; any stored gradient buffer is dropped.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            name: "leaf",
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Operation names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.name).collect()
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: name,
                detail: format!("produced non-finite value {bad}"),
            });
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.nodes.push(Node { name, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, data, op, &[x])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul { a, b, m, k, n },
            &[a, b],
        )
    }

    /// Batched `a[B×m×k] · b[B×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err(format!(
                "batch_matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            matmul_raw(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err(format!("transpose expects a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = d[i * cols + j];
            }
        }
        self.push(
            "transpose",
            vec![cols, rows],
            out,
            Op::Transpose { x, rows, cols },
            &[x],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum { a, b })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", f64::max, Op::Maximum { a, b })
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != d {
            return Err(dim_err(format!(
                "add_bias: bias {sb:?} does not match last axis of {sx:?}"
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let shape = sx.to_vec();
        self.push("add_bias", shape, data, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * s, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + s, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu_scalar, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            "sigmoid",
            |v| 1.0 / (1.0 + (-v).exp()),
            Op::Sigmoid { x },
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", f64::ln, Op::Log { x })
    }

    /// Elementwise smooth-L1 (Huber with transition `beta`) of `x`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(config_err("smooth_l1 beta must be positive"));
        }
        self.unary(
            x,
            "smooth_l1",
            |v| {
                if v.abs() < beta {
                    0.5 * v * v / beta
                } else {
                    v.abs() - 0.5 * beta
                }
            },
            Op::SmoothL1 { x, beta },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = shape_of_axis(&shape, axis)?;
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (d[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[idx(i)] /= total;
                }
            }
        }
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax { x, outer, n, inner },
            &[x],
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(dim_err(format!(
                    "layer_norm: affine {:?} vs last axis of {shape:?}",
                    self.shape(p)
                )));
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.data(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for (r, row) in self.data(x).chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (row[i] - mean) * is;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * g[i] + b[i];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Scales each row (last axis) to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(nrm);
            if nrm > 0.0 {
                out.extend(row.iter().map(|v| v / nrm));
            } else {
                out.extend(std::iter::repeat_n(0.0, d));
            }
        }
        self.push(
            "l2_normalize_rows",
            shape,
            out,
            Op::L2NormalizeRows { x, d, norms },
            &[x],
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = shape_of_axis(&shape, axis)?;
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += d[(o * n + i) * inner + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.push(
            "mean_axis",
            reduced_shape(&shape, axis),
            out,
            Op::MeanAxis { x, outer, n, inner },
            &[x],
        )
    }

    /// Max along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = shape_of_axis(&shape, axis)?;
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                for i in 1..n {
                    if d[(o * n + i) * inner + j] > d[(o * n + best) * inner + j] {
                        best = i;
                    }
                }
                argmax[o * inner + j] = best;
                out[o * inner + j] = d[(o * n + best) * inner + j];
            }
        }
        self.push(
            "max_axis",
            reduced_shape(&shape, axis),
            out,
            Op::MaxAxis {
                x,
                outer,
                n,
                inner,
                argmax,
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() || shape.contains(&0) {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x }, &[x])
    }

    /// Gathers flat elements of `x` into a tensor of `shape`.
    pub fn take(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.data(x).len();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(dim_err(format!(
                "take: {} indices for shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(dim_err(format!(
                "take: index {bad} out of range for {n} elements"
            )));
        }
        let d = self.data(x);
        let data = indices.iter().map(|&i| d[i]).collect();
        self.push("take", shape.to_vec(), data, Op::Take { x, indices }, &[x])
    }

    /// Gathers rows (leading-axis slices) of `x`.
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width: usize = shape[1..].iter().product();
        if let Some(bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(dim_err(format!(
                "take_rows: row {bad} out of range for {shape:?}"
            )));
        }
        let indices = rows
            .iter()
            .flat_map(|&r| r * width..(r + 1) * width)
            .collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.take(x, indices, &out_shape)
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| dim_err("concat of nothing"))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(dim_err(format!(
                    "concat: shape {s:?} incompatible with {first:?}"
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                rows,
            },
            parts,
        )
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        if len == 0 || start + len > width {
            return Err(dim_err(format!(
                "narrow [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let rows = self.data(x).len() / width;
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * width + start..r * width + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push(
            "narrow",
            out_shape,
            out,
            Op::Narrow {
                x,
                start,
                len,
                width,
                rows,
            },
            &[x],
        )
    }

    /// Inserts a new axis 1 of length `n`, repeating `x[o, ...]` along it.
    pub fn repeat_axis1(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let outer = shape[0];
        let inner: usize = shape[1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = vec![outer, n];
        out_shape.extend_from_slice(&shape[1..]);
        self.push(
            "repeat_axis1",
            out_shape,
            out,
            Op::RepeatAxis1 { x, outer, n, inner },
            &[x],
        )
    }

    /// Same-length cross-correlation along axis 0 with zero padding.
    /// `x` is `[T×C_in]` or `[T×B×C_in]` (B independent sequences).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 {
            return Err(dim_err(format!(
                "conv1d: kernel must be [C_out×C_in×k], got {sw:?}"
            )));
        }
        let (cout, cin, k) = (sw[0], sw[1], sw[2]);
        if k % 2 == 0 {
            return Err(config_err(format!("conv1d: kernel size {k} must be odd")));
        }
        let (t, batch) = match sx.as_slice() {
            [t, c] if *c == cin => (*t, 1),
            [t, bt, c] if *c == cin => (*t, *bt),
            _ => {
                return Err(dim_err(format!(
                    "conv1d: input {sx:?} incompatible with kernel {sw:?}"
                )))
            }
        };
        if self.shape(b) != [cout] {
            return Err(dim_err(format!(
                "conv1d: bias {:?} vs {cout} output channels",
                self.shape(b)
            )));
        }
        let pad = k / 2;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; t * batch * cout];
        for ti in 0..t {
            for bi in 0..batch {
                let o_base = (ti * batch + bi) * cout;
                out[o_base..o_base + cout].copy_from_slice(bd);
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xd[(src as usize * batch + bi) * cin..][..cin];
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for (c, xv) in xrow.iter().enumerate() {
                            acc += wd[(o * cin + c) * k + j] * xv;
                        }
                        out[o_base + o] += acc;
                    }
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        self.push(
            "conv1d",
            shape,
            out,
            Op::Conv1d {
                x,
                w,
                b,
                t,
                batch,
                cin,
                cout,
                k,
            },
            &[x, w, b],
        )
    }

    /// Same-size 2-D cross-correlation with zero padding.
    /// `x` is `[H×W×C_in]` or `[N×H×W×C_in]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(dim_err(format!(
                "conv2d: kernel must be [C_out×C_in×k×k], got {sw:?}"
            )));
        }
        let (cout, cin, k) = (sw[0], sw[1], sw[2]);
        if k % 2 == 0 {
            return Err(config_err(format!("conv2d: kernel size {k} must be odd")));
        }
        let (n, h, wd_) = match sx.as_slice() {
            [h, w_, c] if *c == cin => (1, *h, *w_),
            [n, h, w_, c] if *c == cin => (*n, *h, *w_),
            _ => {
                return Err(dim_err(format!(
                    "conv2d: input {sx:?} incompatible with kernel {sw:?}"
                )))
            }
        };
        if self.shape(b) != [cout] {
            return Err(dim_err(format!(
                "conv2d: bias {:?} vs {cout} output channels",
                self.shape(b)
            )));
        }
        let pad = (k / 2) as isize;
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; n * h * wd_ * cout];
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..wd_ {
                    let o_base = ((ni * h + y) * wd_ + xx) * cout;
                    out[o_base..o_base + cout].copy_from_slice(bd);
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx_ = xx as isize + kx as isize - pad;
                            if sx_ < 0 || sx_ >= wd_ as isize {
                                continue;
                            }
                            let xrow =
                                &xd[((ni * h + sy as usize) * wd_ + sx_ as usize) * cin..][..cin];
                            for o in 0..cout {
                                let mut acc = 0.0;
                                for (c, xv) in xrow.iter().enumerate() {
                                    acc += wdat[((o * cin + c) * k + ky) * k + kx] * xv;
                                }
                                out[o_base + o] += acc;
                            }
                        }
                    }
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        self.push(
            "conv2d",
            shape,
            out,
            Op::Conv2d {
                x,
                w,
                b,
                n,
                h,
                wd: wd_,
                cin,
                cout,
                k,
            },
            &[x, w, b],
        )
    }

    /// 2×2 average pooling over the spatial axes of `[N×H×W×C]`.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, h, w, c] = s[..] else {
            return Err(dim_err(format!("avg_pool2x2 expects [N×H×W×C], got {s:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err(format!(
                "avg_pool2x2: spatial size {h}×{w} must be even"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = self.data(x);
        let mut out = vec![0.0; n * ho * wo * c];
        for ni in 0..n {
            for y in 0..ho {
                for xx in 0..wo {
                    let o_base = ((ni * ho + y) * wo + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i_base = ((ni * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o_base + ch] += 0.25 * d[i_base + ch];
                        }
                    }
                }
            }
        }
        self.push(
            "avg_pool2x2",
            vec![n, ho, wo, c],
            out,
            Op::AvgPool2x2 { x, n, h, w, c },
            &[x],
        )
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                visited.push(Var(i));
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc(grads, a, |ga| matmul_bt_acc(g, bd, m, n, k, ga));
                self.acc(grads, b, |gb| matmul_at_acc(ad, g, m, k, n, gb));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc(grads, a, |ga| {
                    for bi in 0..batch {
                        matmul_bt_acc(
                            &g[bi * m * n..][..m * n],
                            &bd[bi * k * n..][..k * n],
                            m,
                            n,
                            k,
                            &mut ga[bi * m * k..][..m * k],
                        );
                    }
                });
                self.acc(grads, b, |gb| {
                    for bi in 0..batch {
                        matmul_at_acc(
                            &ad[bi * m * k..][..m * k],
                            &g[bi * m * n..][..m * n],
                            m,
                            k,
                            n,
                            &mut gb[bi * k * n..][..k * n],
                        );
                    }
                });
            }
            &Op::Transpose { x, rows, cols } => self.acc(grads, x, |gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add { a, b } => {
                self.acc(grads, a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
                self.acc(grads, b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
            }
            &Op::Sub { a, b } => {
                self.acc(grads, a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
                self.acc(grads, b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc(grads, a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                self.acc(grads, b, |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            &Op::Div { a, b } => {
                let bd = self.data(b);
                self.acc(grads, a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bd[j];
                    }
                });
                self.acc(grads, b, |gb| {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * y[j] / bd[j];
                    }
                });
            }
            &Op::Minimum { a, b } | &Op::Maximum { a, b } => {
                let is_min = matches!(node.op, Op::Minimum { .. });
                let (ad, bd) = (self.data(a), self.data(b));
                // Ties route the gradient to `a`.
                let picks_a = |j: usize| {
                    if is_min {
                        ad[j] <= bd[j]
                    } else {
                        ad[j] >= bd[j]
                    }
                };
                self.acc(grads, a, |ga| {
                    for j in 0..g.len() {
                        if picks_a(j) {
                            ga[j] += g[j];
                        }
                    }
                });
                self.acc(grads, b, |gb| {
                    for j in 0..g.len() {
                        if !picks_a(j) {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                self.acc(grads, x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)
                });
                let d = self.value(bias).numel();
                self.acc(grads, bias, |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::Scale { x, s } => self.acc(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)
            }),
            &Op::AddScalar { x } => self.acc(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)
            }),
            &Op::Relu { x } => self.acc(grads, x, |gx| {
                for j in 0..g.len() {
                    if y[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }),
            &Op::Gelu { x } => {
                let xd = self.data(x);
                self.acc(grads, x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad(xd[j]);
                    }
                });
            }
            &Op::Sigmoid { x } => self.acc(grads, x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            &Op::Log { x } => {
                let xd = self.data(x);
                self.acc(grads, x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xd[j];
                    }
                });
            }
            &Op::SmoothL1 { x, beta } => {
                let xd = self.data(x);
                self.acc(grads, x, |gx| {
                    for j in 0..g.len() {
                        let v = xd[j];
                        let d = if v.abs() < beta { v / beta } else { v.signum() };
                        gx[j] += g[j] * d;
                    }
                });
            }
            &Op::Softmax { x, outer, n, inner } => self.acc(grads, x, |gx| {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let gm = self.data(gamma);
                self.acc(grads, x, |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..][..d];
                        let xh = &xhat[r * d..][..d];
                        let dxh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            gx[r * d + k] += is / d as f64 * (d as f64 * dxh[k] - s1 - xh[k] * s2);
                        }
                    }
                });
                self.acc(grads, gamma, |gg| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            gg[k] += gr[k] * xh[k];
                        }
                    }
                });
                self.acc(grads, beta, |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::L2NormalizeRows { x, d, norms } => {
                let d = *d;
                self.acc(grads, *x, |gx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let gr = &g[r * d..][..d];
                        let yr = &y[r * d..][..d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            gx[r * d + k] += (gr[k] - yr[k] * dot) / nrm;
                        }
                    }
                });
            }
            &Op::Sum { x } => self.acc(grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::MeanAxis { x, outer, n, inner } => self.acc(grads, x, |gx| {
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            gx[(o * n + i) * inner + j] += g[o * inner + j] / n as f64;
                        }
                    }
                }
            }),
            Op::MaxAxis {
                x,
                outer,
                n,
                inner,
                argmax,
            } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            gx[(o * n + argmax[o * inner + j]) * inner + j] += g[o * inner + j];
                        }
                    }
                });
            }
            &Op::Reshape { x } => self.acc(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)
            }),
            Op::Take { x, indices } => self.acc(grads, *x, |gx| {
                for (j, &src) in indices.iter().enumerate() {
                    gx[src] += g[j];
                }
            }),
            Op::Concat {
                parts,
                widths,
                rows,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    self.acc(grads, p, |gp| {
                        for r in 0..*rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Narrow {
                x,
                start,
                len,
                width,
                rows,
            } => self.acc(grads, x, |gx| {
                for r in 0..rows {
                    for c in 0..len {
                        gx[r * width + start + c] += g[r * len + c];
                    }
                }
            }),
            &Op::RepeatAxis1 { x, outer, n, inner } => self.acc(grads, x, |gx| {
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            gx[o * inner + j] += g[(o * n + i) * inner + j];
                        }
                    }
                }
            }),
            &Op::Conv1d {
                x,
                w,
                b,
                t,
                batch,
                cin,
                cout,
                k,
            } => {
                let pad = k / 2;
                let (xd, wd) = (self.data(x), self.data(w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            for bi in 0..batch {
                                f(ti, src as usize, j, bi);
                            }
                        }
                    }
                };
                self.acc(grads, x, |gx| {
                    taps(&mut |ti, src, j, bi| {
                        let go = &g[(ti * batch + bi) * cout..][..cout];
                        for c in 0..cin {
                            let mut acc = 0.0;
                            for (o, gv) in go.iter().enumerate() {
                                acc += wd[(o * cin + c) * k + j] * gv;
                            }
                            gx[(src * batch + bi) * cin + c] += acc;
                        }
                    })
                });
                self.acc(grads, w, |gw| {
                    taps(&mut |ti, src, j, bi| {
                        let go = &g[(ti * batch + bi) * cout..][..cout];
                        let xr = &xd[(src * batch + bi) * cin..][..cin];
                        for (o, gv) in go.iter().enumerate() {
                            for (c, xv) in xr.iter().enumerate() {
                                gw[(o * cin + c) * k + j] += gv * xv;
                            }
                        }
                    })
                });
                self.acc(grads, b, |gb| {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::Conv2d {
                x,
                w,
                b,
                n,
                h,
                wd: width,
                cin,
                cout,
                k,
            } => {
                let pad = (k / 2) as isize;
                let (xd, wdat) = (self.data(x), self.data(w));
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for ni in 0..n {
                        for yy in 0..h {
                            for xx in 0..width {
                                let o_pos = (ni * h + yy) * width + xx;
                                for ky in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let sx = xx as isize + kx as isize - pad;
                                        if sx < 0 || sx >= width as isize {
                                            continue;
                                        }
                                        let i_pos = (ni * h + sy as usize) * width + sx as usize;
                                        f(o_pos, i_pos, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                };
                self.acc(grads, x, |gx| {
                    taps(&mut |o_pos, i_pos, ky, kx| {
                        let go = &g[o_pos * cout..][..cout];
                        for c in 0..cin {
                            let mut acc = 0.0;
                            for (o, gv) in go.iter().enumerate() {
                                acc += wdat[((o * cin + c) * k + ky) * k + kx] * gv;
                            }
                            gx[i_pos * cin + c] += acc;
                        }
                    })
                });
                self.acc(grads, w, |gw| {
                    taps(&mut |o_pos, i_pos, ky, kx| {
                        let go = &g[o_pos * cout..][..cout];
                        let xr = &xd[i_pos * cin..][..cin];
                        for (o, gv) in go.iter().enumerate() {
                            for (c, xv) in xr.iter().enumerate() {
                                gw[((o * cin + c) * k + ky) * k + kx] += gv * xv;
                            }
                        }
                    })
                });
                self.acc(grads, b, |gb| {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            &Op::AvgPool2x2 { x, n, h, w, c } => self.acc(grads, x, |gx| {
                let (ho, wo) = (h / 2, w / 2);
                for ni in 0..n {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            let o_base = ((ni * ho + yy) * wo + xx) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i_base = ((ni * h + 2 * yy + dy) * w + 2 * xx + dx) * c;
                                for ch in 0..c {
                                    gx[i_base + ch] += 0.25 * g[o_base + ch];
                                }
                            }
                        }
                    }
                }
            }),
        }
    }
}
