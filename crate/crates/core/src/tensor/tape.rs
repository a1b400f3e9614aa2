use super::{as_matrix, kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    KlRows(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of primitive operations.
///
/// Nodes are appended after their parents, so index order is a topological
/// order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    pub stats: BackwardStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose gradient was propagated to their parents.
    pub visited: usize,
    /// Total nodes on the tape at backward time.
    pub nodes: usize,
    /// Largest number of times any single node was visited (always 0 or 1).
    pub max_visits_per_node: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tracked leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of `a` (last axis `n`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        if self.value(row).len() != n {
            return Err(dim_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let src = self.value(a);
        let mut data = src.data.clone();
        for i in 0..m {
            for (o, &b) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let value = Tensor { shape: src.shape.clone(), data };
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of `a` by `scale[i]`.
    pub fn mul_col(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        if self.value(scale).len() != m {
            return Err(dim_err("mul_col", self.shape(a), self.shape(scale)));
        }
        let s = self.value(scale).data();
        let src = self.value(a);
        let mut data = src.data.clone();
        for i in 0..m {
            for o in &mut data[i * n..(i + 1) * n] {
                *o *= s[i];
            }
        }
        let value = Tensor { shape: src.shape.clone(), data };
        let rg = self.rg(&[a, scale]);
        Ok(self.push(value, Op::MulCol(a, scale), rg))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), move |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), kernels::log_sigmoid)
    }

    fn rowwise(&mut self, a: Var, name: &'static str, op: Op, f: fn(&mut [f64])) -> Result<Var> {
        let src = self.value(a);
        if src.is_empty() {
            return Err(dim_err(name, &src.shape, &[]));
        }
        let (_, n) = as_matrix(&src.shape);
        let mut data = src.data.clone();
        for row in data.chunks_mut(n) {
            f(row);
        }
        let value = Tensor { shape: src.shape.clone(), data };
        let rg = self.rg(&[a]);
        Ok(self.push(value, op, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, "softmax", Op::SoftmaxRows(a), kernels::softmax_in_place)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, "log_softmax", Op::LogSoftmaxRows(a), kernels::log_softmax_in_place)
    }

    /// Layer normalization along the last axis with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(x));
        if n < 2 {
            return Err(dim_err("layer_norm", self.shape(x), &[2]));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xs, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            inv_std[i] = kernels::layer_norm_row(row, g, b, eps, &mut out[i * n..(i + 1) * n]);
            kernels::layer_norm_row(row, &ones, &zeros, eps, &mut xhat[i * n..(i + 1) * n]);
        }
        let value = Tensor { shape: self.shape(x).to_vec(), data: out };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNormRows { x, gain, bias, xhat, inv_std },
            rg,
        ))
    }

    /// Selects rows of `a` (last axis kept) in the given order; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(dim_err("gather_rows", self.shape(a), &[bad]));
        }
        if rows.is_empty() {
            return Err(dim_err("gather_rows", self.shape(a), &[0]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor { shape: vec![rows.len(), n], data };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec()), rg))
    }

    /// `out[i] = flat(a)[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let len = self.value(a).len();
        if index.iter().any(|&i| i >= len) || shape.iter().product::<usize>() != index.len() {
            return Err(dim_err("gather", self.shape(a), shape));
        }
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Gather(a, index.to_vec()), rg))
    }

    /// `out[index[i]] += flat(a)[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let out_len: usize = shape.iter().product();
        if index.len() != self.value(a).len() || index.iter().any(|&i| i >= out_len) {
            return Err(dim_err("scatter_add", self.shape(a), shape));
        }
        let mut data = vec![0.0; out_len];
        for (&i, &v) in index.iter().zip(self.value(a).data()) {
            data[i] += v;
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterAdd(a, index.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Stacks matrices with a common column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat_rows", &[], &[]))?;
        let (_, n) = as_matrix(self.shape(first));
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = as_matrix(self.shape(p));
            if c != n {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape: vec![rows, n], data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise `KL(p_i || prior_i)`; `prior` is a constant and is floored at
    /// [`super::KL_FLOOR`]. Returns a rank-1 tensor with one entry per row.
    pub fn kl_rows(&mut self, p: Var, prior: &Tensor) -> Result<Var> {
        if self.shape(p) != prior.shape() {
            return Err(dim_err("kl_rows", self.shape(p), prior.shape()));
        }
        let (m, n) = as_matrix(prior.shape());
        let pv = self.value(p).data();
        let data = (0..m)
            .map(|i| kernels::kl_row(&pv[i * n..(i + 1) * n], &prior.data[i * n..(i + 1) * n]))
            .collect();
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor { shape: vec![m], data }, Op::KlRows(p, prior.clone()), rg))
    }

    /// Reverse sweep from a single-element output. Each node is visited at most once.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(crate::error::validation(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut visits = vec![0usize; n];
        grads[output.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visits[i] += 1;
            visited += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape.clone()).collect(),
            stats: BackwardStats {
                visited,
                nodes: n,
                max_visits_per_node: visits.into_iter().max().unwrap_or(0),
            },
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let n = self.value(*row).len();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulCol(a, s) => {
                let (m, n) = self.value(*a).dims2();
                let sv = self.value(*s).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[r * n + c] * sv[r];
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for r in 0..m {
                        gs[r] += kernels::dot(&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Affine(a, scale) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += scale * x;
                    }
                }
            }
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |_, y| y * (1.0 - y), out),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |_, y| 1.0 - y * y, out),
            Op::Gelu(a) => self.elementwise(grads, *a, g, |x, _| kernels::gelu_grad(x), out),
            Op::Exp(a) => self.elementwise(grads, *a, g, |_, y| y, out),
            Op::Ln(a) => self.elementwise(grads, *a, g, |x, _| 1.0 / x, out),
            Op::LogSigmoid(a) => self.elementwise(grads, *a, g, |x, _| kernels::sigmoid(-x), out),
            Op::SoftmaxRows(a) => {
                let n = self.value(*a).dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), or) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = kernels::dot(gr, yr);
                        for j in 0..n {
                            or[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let n = self.value(*a).dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), or) in g.chunks(n).zip(out.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            or[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNormRows { x, gain, bias, xhat, inv_std } => {
                let n = self.value(*x).dims2().1;
                let gv = self.value(*gain).data();
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = n as f64;
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            gx[r * n + j] += inv / nf * (nf * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let n = self.value(*a).dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (&idx, &x) in index.iter().zip(g) {
                        ga[idx] += x;
                    }
                }
            }
            Op::ScatterAdd(a, index) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &idx) in ga.iter_mut().zip(index) {
                        *o += g[idx];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0] / len;
                    }
                }
            }
            Op::KlRows(p, prior) => {
                let n = prior.dims2().1;
                let pv = self.value(*p).data();
                if let Some(gp) = self.acc(grads, *p) {
                    for (idx, o) in gp.iter_mut().enumerate() {
                        let pk = pv[idx];
                        if pk > 0.0 {
                            let q = prior.data[idx].max(super::KL_FLOOR);
                            *o += g[idx / n] * ((pk / q).ln() + 1.0);
                        }
                    }
                }
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        d: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..ga.len() {
                ga[i] += g[i] * d(x[i], out[i]);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
