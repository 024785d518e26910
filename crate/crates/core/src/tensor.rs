//! Dense float64 tensors and a reverse-mode tape.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append a node holding the result and the handles of their inputs; nodes
//! are therefore stored in topological order and [`Tape::backward`] walks
//! them once, last to first. Leaves created with [`Tape::leaf`] track
//! gradients, leaves created with [`Tape::constant`] do not, and an op
//! output tracks gradients iff any of its inputs does.
//!
//! Every op checks shapes up front and rejects non-finite results, so a
//! blow-up surfaces at the first op that produced it.

use crate::error::{dim_err, Error, Result};

/// Row-major float64 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction (index {i})")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("ragged rows");
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the buffers hold at least m*k, k*n and m*n elements and the
    // strides describe dense row-major (or transposed) layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain (untaped) matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul inner extents {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowContract(Var, Var),
    BlockMix { adj: Var, x: Var, nodes: usize },
    PairScores { src: Var, dst: Var, nodes: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` for constants and unreached nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records one forward pass for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output shape of a broadcasting binary op. The smaller operand, once its
/// leading 1-extents are stripped, must be a suffix of the larger shape.
fn broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let stripped: Vec<usize> = small.iter().copied().skip_while(|&e| e == 1).collect();
    if stripped.len() <= big.len() && big[big.len() - stripped.len()..] == stripped[..] {
        Ok(big.to_vec())
    } else {
        dim_err(format!("cannot broadcast {a:?} with {b:?}"))
    }
}

fn acc(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-tracked input (a trainable parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Tensor { shape, data }, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let shape = out.shape.clone();
        self.push("matmul", shape, out.data, Op::MatMul(a, b), &[a, b])
    }

    /// Fully connected layer `x·w + bias`, with `bias` of shape `[n]` or `[1, n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        if k != k2 {
            return dim_err(format!("linear input width {k} vs weight rows {k2}"));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.numel() != n || bv.shape.iter().rev().skip(1).any(|&e| e != 1) {
                return dim_err(format!("bias shape {:?} for width {n}", bv.shape));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(&bv.data);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            m,
            k,
            n,
            &self.value(x).data,
            false,
            &self.value(w).data,
            false,
            &mut out,
            beta,
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("linear", vec![m, n], out, Op::Linear(x, w, bias), &inputs)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast(&av.shape, &bv.shape)?;
        let n: usize = shape.iter().product();
        let (na, nb) = (av.numel(), bv.numel());
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..n).map(|i| f(av.data[i % na], bv.data[i % nb])).collect();
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        self.push(name, shape, data, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let data = v.data.iter().map(|x| x * c).collect();
        let shape = v.shape.clone();
        self.push("scale", shape, data, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| f(x)).collect();
        let shape = v.shape.clone();
        self.push(name, shape, data, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), f64::abs)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let mut data = v.data.clone();
        for row in data.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push("softmax_rows", vec![r, c], data, Op::SoftmaxRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], data, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return dim_err("mean of an empty tensor");
        }
        let s = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a), &[a])
    }

    /// Per-row matrix-vector product: `a` is `R×(m·n)` holding an `m×n`
    /// matrix per row, `x` is `R×n`; the result is `R×m`.
    pub fn row_contract(&mut self, a: Var, x: Var) -> Result<Var> {
        let (r, mn) = self.value(a).dims2()?;
        let (r2, n) = self.value(x).dims2()?;
        if r != r2 || n == 0 || mn % n != 0 {
            return dim_err(format!("row_contract {r}x{mn} against {r2}x{n}"));
        }
        let m = mn / n;
        let (av, xv) = (&self.value(a).data, &self.value(x).data);
        let mut out = vec![0.0; r * m];
        for row in 0..r {
            let xr = &xv[row * n..(row + 1) * n];
            for i in 0..m {
                let ar = &av[row * mn + i * n..row * mn + (i + 1) * n];
                out[row * m + i] = ar.iter().zip(xr).map(|(p, q)| p * q).sum();
            }
        }
        self.push("row_contract", vec![r, m], out, Op::RowContract(a, x), &[a, x])
    }

    /// Node mixing inside each sample: `x` stacks `B` blocks of `nodes` rows;
    /// block `b` becomes `adj_b · x_b`. `adj` is either one shared
    /// `nodes×nodes` matrix or `B` stacked blocks (`(B·nodes)×nodes`).
    pub fn block_mix(&mut self, adj: Var, x: Var, nodes: usize) -> Result<Var> {
        let (ar, ac) = self.value(adj).dims2()?;
        let (xr, d) = self.value(x).dims2()?;
        if nodes == 0 || ac != nodes || xr % nodes != 0 || (ar != nodes && ar != xr) {
            return dim_err(format!("block_mix adj {ar}x{ac}, x {xr}x{d}, nodes {nodes}"));
        }
        let blocks = xr / nodes;
        let shared = ar == nodes;
        let mut out = vec![0.0; xr * d];
        let (av, xv) = (&self.value(adj).data, &self.value(x).data);
        for b in 0..blocks {
            let a_off = if shared { 0 } else { b * nodes * nodes };
            let x_off = b * nodes * d;
            gemm(
                nodes,
                nodes,
                d,
                &av[a_off..a_off + nodes * nodes],
                false,
                &xv[x_off..x_off + nodes * d],
                false,
                &mut out[x_off..x_off + nodes * d],
                0.0,
            );
        }
        self.push("block_mix", vec![xr, d], out, Op::BlockMix { adj, x, nodes }, &[adj, x])
    }

    /// Pairwise additive scores: `src` and `dst` are `(B·nodes)×1`; the result
    /// is `(B·nodes)×nodes` with entry `[b·nodes+i, j] = src[b,i] + dst[b,j]`.
    pub fn pair_scores(&mut self, src: Var, dst: Var, nodes: usize) -> Result<Var> {
        let (sr, sc) = self.value(src).dims2()?;
        let (dr, dc) = self.value(dst).dims2()?;
        if sc != 1 || dc != 1 || sr != dr || nodes == 0 || sr % nodes != 0 {
            return dim_err("pair_scores expects matching (B·nodes)x1 columns");
        }
        let (s, t) = (&self.value(src).data, &self.value(dst).data);
        let mut out = vec![0.0; sr * nodes];
        for row in 0..sr {
            let base = (row / nodes) * nodes;
            for j in 0..nodes {
                out[row * nodes + j] = s[row] + t[base + j];
            }
        }
        self.push(
            "pair_scores",
            vec![sr, nodes],
            out,
            Op::PairScores { src, dst, nodes },
            &[src, dst],
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// tracked leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            if let Op::Leaf = op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &op, &g, &mut grads);
        }

        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let (m, k) = (self.value(a).shape[0], self.value(a).shape[1]);
                let nn = self.value(b).shape[1];
                if tracked(a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    gemm(m, nn, k, g, false, &self.value(b).data, true, ga, 1.0);
                }
                if tracked(b) {
                    let gb = acc(&mut grads[b.0], k * nn);
                    gemm(k, m, nn, &self.value(a).data, true, g, false, gb, 1.0);
                }
                if let Op::Linear(_, _, Some(bias)) = *op {
                    if tracked(bias) {
                        let gbias = acc(&mut grads[bias.0], nn);
                        for row in g.chunks(nn) {
                            for (s, x) in gbias.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (na, nb) = (av.numel(), bv.numel());
                if tracked(a) {
                    let ga = acc(&mut grads[a.0], na);
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % na] += match kind {
                            BinKind::Add | BinKind::Sub => *gi,
                            BinKind::Mul => gi * bv.data[i % nb],
                        };
                    }
                }
                if tracked(b) {
                    let gb = acc(&mut grads[b.0], nb);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += match kind {
                            BinKind::Add => *gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * av.data[i % na],
                        };
                    }
                }
            }
            Op::Scale(a, c) => {
                if tracked(a) {
                    let ga = acc(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(s, x)| *s += c * x);
                }
            }
            Op::Relu(a) => {
                if tracked(a) {
                    let x = &self.value(a).data;
                    let ga = acc(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if tracked(a) {
                    let ga = acc(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        let y = out.data[i];
                        ga[i] += g[i] * (1.0 - y * y);
                    }
                }
            }
            Op::Abs(a) => {
                if tracked(a) {
                    let x = &self.value(a).data;
                    let ga = acc(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        let s = if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * s;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if tracked(a) {
                    let c = out.shape[1].max(1);
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((y, gy), gx) in out.data.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..y.len() {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if tracked(a) {
                    let (r, c) = (self.value(a).shape[0], self.value(a).shape[1]);
                    let ga = acc(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if tracked(a) {
                    let n = self.value(a).numel();
                    let scale = if matches!(op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    let ga = acc(&mut grads[a.0], n);
                    ga.iter_mut().for_each(|s| *s += scale);
                }
            }
            Op::RowContract(a, x) => {
                let (r, mn) = (self.value(a).shape[0], self.value(a).shape[1]);
                let n = self.value(x).shape[1];
                let m = mn / n;
                if tracked(a) {
                    let xv = &self.value(x).data;
                    let ga = acc(&mut grads[a.0], r * mn);
                    for row in 0..r {
                        for i in 0..m {
                            let gi = g[row * m + i];
                            for j in 0..n {
                                ga[row * mn + i * n + j] += gi * xv[row * n + j];
                            }
                        }
                    }
                }
                if tracked(x) {
                    let av = &self.value(a).data;
                    let gx = acc(&mut grads[x.0], r * n);
                    for row in 0..r {
                        for i in 0..m {
                            let gi = g[row * m + i];
                            for j in 0..n {
                                gx[row * n + j] += gi * av[row * mn + i * n + j];
                            }
                        }
                    }
                }
            }
            Op::BlockMix { adj, x, nodes } => {
                let (xr, d) = (self.value(x).shape[0], self.value(x).shape[1]);
                let ar = self.value(adj).shape[0];
                let blocks = xr / nodes;
                let shared = ar == nodes;
                let (av, xv) = (&self.value(adj).data, &self.value(x).data);
                if tracked(x) {
                    let gx = acc(&mut grads[x.0], xr * d);
                    for b in 0..blocks {
                        let a_off = if shared { 0 } else { b * nodes * nodes };
                        let x_off = b * nodes * d;
                        gemm(
                            nodes,
                            nodes,
                            d,
                            &av[a_off..a_off + nodes * nodes],
                            true,
                            &g[x_off..x_off + nodes * d],
                            false,
                            &mut gx[x_off..x_off + nodes * d],
                            1.0,
                        );
                    }
                }
                if tracked(adj) {
                    let ga = acc(&mut grads[adj.0], ar * nodes);
                    for b in 0..blocks {
                        let a_off = if shared { 0 } else { b * nodes * nodes };
                        let x_off = b * nodes * d;
                        gemm(
                            nodes,
                            d,
                            nodes,
                            &g[x_off..x_off + nodes * d],
                            false,
                            &xv[x_off..x_off + nodes * d],
                            true,
                            &mut ga[a_off..a_off + nodes * nodes],
                            1.0,
                        );
                    }
                }
            }
            Op::PairScores { src, dst, nodes } => {
                let r = self.value(src).shape[0];
                if tracked(src) {
                    let gs = acc(&mut grads[src.0], r);
                    for row in 0..r {
                        gs[row] += g[row * nodes..(row + 1) * nodes].iter().sum::<f64>();
                    }
                }
                if tracked(dst) {
                    let gd = acc(&mut grads[dst.0], r);
                    for row in 0..r {
                        let base = (row / nodes) * nodes;
                        for j in 0..nodes {
                            gd[base + j] += g[row * nodes + j];
                        }
                    }
                }
            }
        }
    }
}
