//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every intermediate value is computed eagerly when the op is recorded, so a
//! `Graph` doubles as the forward pass. `backward` walks the tape in reverse
//! and accumulates gradients for every node that (transitively) depends on a
//! leaf created with `requires_grad = true`.
//!
//! All values are row-major `f64` buffers. Shapes follow the tensor module:
//! `[]` is a scalar, `[r, c]` a matrix.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on the tape. Only valid for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product of same-shape inputs.
    Mul(Var, Var),
    Scale(Var, f64),
    /// `out[i,j] = m[i,j] + bias[i]` — one bias entry per row, broadcast
    /// across columns.
    AddColBias(Var, Var),
    /// `out[i,:] = m[i,:] - m[row,:]` for a fixed row index.
    SubRow(Var, usize),
    /// Extract row `r` of `[rows, c]` as a `[c, 1]` column vector.
    Row(Var, usize),
    Sigmoid(Var),
    Relu(Var),
    /// Softmax over the row axis, independently per column.
    SoftmaxCols(Var),
    /// Per-row cross-entropy against integer targets; output `[rows]`.
    CrossEntropyRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    /// `[r, c] -> [r, 1]`, mean over columns.
    MeanCols(Var),
    /// `[r, c] -> [r, 1]`, sum over columns.
    RowSums(Var),
    /// Stack two matrices with equal column counts: `[r1+r2, c]`.
    ConcatRows(Var, Var),
    /// Unfold `[channels, h*w]` into `[channels*k*k, h*w]` patches with zero
    /// padding, for expressing a same-size k x k convolution as a matmul.
    Im2Col {
        input: Var,
        height: usize,
        width: usize,
        kernel: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer for `v`, or `None` if the loss does not depend on it
    /// (or it was recorded without `requires_grad`).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Scalar value of a rank-0 node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if !node.shape.is_empty() {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, ctx: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("{ctx}: expected a matrix, got shape {other:?}"))),
        }
    }

    // ---- leaves -----------------------------------------------------------

    /// Record a tensor as a tape leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Record a constant (never differentiated) from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "constant: shape {:?} needs {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner dims disagree ({m}x{k} vs {k2}x{n})")));
        }
        let value = ops::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(Op::Transpose(a), vec![c, r], value, rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{ctx}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), shape, value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), shape, value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), shape, value, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(Op::Scale(a, s), shape, value, rg)
    }

    pub fn add_col_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(m, "add_col_bias")?;
        let bshape = self.nodes[bias.0].shape.as_slice();
        if bshape != [r] {
            return Err(Error::Shape(format!(
                "add_col_bias: bias shape {bshape:?} does not match {r} rows"
            )));
        }
        let mv = self.value(m);
        let bv = self.value(bias);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] = mv[i * c + j] + bv[i];
            }
        }
        let rg = self.needs(m) || self.needs(bias);
        Ok(self.push(Op::AddColBias(m, bias), vec![r, c], value, rg))
    }

    pub fn sub_row(&mut self, m: Var, row: usize) -> Result<Var> {
        let (r, c) = self.dims2(m, "sub_row")?;
        if row >= r {
            return Err(Error::Shape(format!("sub_row: row {row} out of {r}")));
        }
        let mv = self.value(m);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] = mv[i * c + j] - mv[row * c + j];
            }
        }
        let rg = self.needs(m);
        Ok(self.push(Op::SubRow(m, row), vec![r, c], value, rg))
    }

    pub fn row(&mut self, m: Var, r: usize) -> Result<Var> {
        let (rows, c) = self.dims2(m, "row")?;
        if r >= rows {
            return Err(Error::Shape(format!("row: index {r} out of {rows}")));
        }
        let value = self.value(m)[r * c..(r + 1) * c].to_vec();
        let rg = self.needs(m);
        Ok(self.push(Op::Row(m, r), vec![c, 1], value, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|&x| ops::sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(Op::Sigmoid(a), shape, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(Op::Relu(a), shape, value, rg)
    }

    // ---- normalization and losses ------------------------------------------

    /// Softmax across rows, independently for every column. For an `[m, l]`
    /// score matrix this normalizes the `m` entries competing at each of the
    /// `l` locations.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_cols")?;
        let av = self.value(a);
        let mut value = vec![0.0; r * c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = av[i * c + j];
            }
            let p = ops::softmax(&col)?;
            for i in 0..r {
                value[i * c + j] = p[i];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(Op::SoftmaxCols(a), vec![r, c], value, rg))
    }

    /// Row-wise cross-entropy: output `[rows]` with
    /// `out[i] = -log softmax(m[i,:])[targets[i]]`.
    pub fn cross_entropy_rows(&mut self, m: Var, targets: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims2(m, "cross_entropy_rows")?;
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy_rows: {} targets for {r} rows",
                targets.len()
            )));
        }
        let mv = self.value(m);
        let mut value = vec![0.0; r];
        for i in 0..r {
            value[i] = ops::cross_entropy_logits(&mv[i * c..(i + 1) * c], targets[i])?;
        }
        let rg = self.needs(m);
        Ok(self.push(Op::CrossEntropyRows(m, targets), vec![r], value, rg))
    }

    // ---- reductions and reshaping -------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        let rg = self.needs(a);
        self.push(Op::SumAll(a), vec![], value, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let value = vec![self.value(a).iter().sum::<f64>() / n as f64];
        let rg = self.needs(a);
        self.push(Op::MeanAll(a), vec![], value, rg)
    }

    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_cols")?;
        let av = self.value(a);
        let mut value = vec![0.0; r];
        for i in 0..r {
            value[i] = av[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
        }
        let rg = self.needs(a);
        Ok(self.push(Op::MeanCols(a), vec![r, 1], value, rg))
    }

    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_sums")?;
        let av = self.value(a);
        let mut value = vec![0.0; r];
        for i in 0..r {
            value[i] = av[i * c..(i + 1) * c].iter().sum();
        }
        let rg = self.needs(a);
        Ok(self.push(Op::RowSums(a), vec![r, 1], value, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r1, c1) = self.dims2(a, "concat_rows lhs")?;
        let (r2, c2) = self.dims2(b, "concat_rows rhs")?;
        if c1 != c2 {
            return Err(Error::Shape(format!("concat_rows: column counts {c1} and {c2} differ")));
        }
        let mut value = Vec::with_capacity((r1 + r2) * c1);
        value.extend_from_slice(self.value(a));
        value.extend_from_slice(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows(a, b), vec![r1 + r2, c1], value, rg))
    }

    /// Unfold a `[channels, height*width]` map into `[channels*k*k,
    /// height*width]` patch columns (zero padding, stride 1), so that a
    /// same-size k x k convolution becomes `weights @ im2col(x)`.
    /// Patch rows are ordered channel-major, then kernel row, then kernel
    /// column — matching a `[out_channels, channels*k*k]` weight layout.
    pub fn im2col(
        &mut self,
        input: Var,
        height: usize,
        width: usize,
        kernel: usize,
    ) -> Result<Var> {
        let (ch, hw) = self.dims2(input, "im2col")?;
        if hw != height * width {
            return Err(Error::Shape(format!(
                "im2col: {height}x{width} grid does not match {hw} columns"
            )));
        }
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "im2col: kernel size must be odd and positive, got {kernel}"
            )));
        }
        let pad = kernel / 2;
        let out_rows = ch * kernel * kernel;
        let iv = self.value(input);
        let mut value = vec![0.0; out_rows * hw];
        for c in 0..ch {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let orow = (c * kernel + ky) * kernel + kx;
                    for y in 0..height {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        for x in 0..width {
                            let sx = x as isize + kx as isize - pad as isize;
                            if sx < 0 || sx >= width as isize {
                                continue;
                            }
                            let src = c * hw + sy as usize * width + sx as usize;
                            value[orow * hw + y * width + x] = iv[src];
                        }
                    }
                }
            }
        }
        let rg = self.needs(input);
        Ok(self.push(Op::Im2Col { input, height, width, kernel }, vec![out_rows, hw], value, rg))
    }

    // ---- backward ------------------------------------------------------------

    /// Backpropagate from a scalar loss. Returns a gradient per node; nodes
    /// unreachable from the loss (or recorded without `requires_grad`) have
    /// `None`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lnode = &self.nodes[loss.0];
        if !lnode.shape.is_empty() {
            return Err(Error::NonScalarLoss(lnode.shape.clone()));
        }
        if !lnode.value[0].is_finite() {
            return Err(Error::NonFinite("loss".to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if lnode.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            graph: &Graph,
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !graph.needs(v) {
                return None;
            }
            let len = graph.nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(ga) = acc(grads, self, *a) {
                    // dA = dC @ B^T
                    let bv = self.value(*b);
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[r * n + j] * bv[p * n + j];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = acc(grads, self, *b) {
                    // dB = A^T @ dC
                    let av = self.value(*a);
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += av[r * k + p] * gout[r * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(ga) = acc(grads, self, *a) {
                    for i2 in 0..r {
                        for j in 0..c {
                            ga[i2 * c + j] += gout[j * r + i2];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if let Some(gb) = acc(grads, self, *b) {
                    for (g, &d) in gb.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if let Some(gb) = acc(grads, self, *b) {
                    for (g, &d) in gb.iter_mut().zip(gout) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(grads, self, *a) {
                    let bv = self.value(*b);
                    for ((g, &d), &y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = acc(grads, self, *b) {
                    let av = self.value(*a);
                    for ((g, &d), &x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for (g, &d) in ga.iter_mut().zip(gout) {
                        *g += d * s;
                    }
                }
            }
            Op::AddColBias(m, bias) => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if let Some(gm) = acc(grads, self, *m) {
                    for (g, &d) in gm.iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if let Some(gb) = acc(grads, self, *bias) {
                    for i2 in 0..r {
                        gb[i2] += gout[i2 * c..(i2 + 1) * c].iter().sum::<f64>();
                    }
                }
            }
            Op::SubRow(m, row) => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if let Some(gm) = acc(grads, self, *m) {
                    for (g, &d) in gm.iter_mut().zip(gout) {
                        *g += d;
                    }
                    for j in 0..c {
                        let mut s = 0.0;
                        for i2 in 0..r {
                            s += gout[i2 * c + j];
                        }
                        gm[row * c + j] -= s;
                    }
                }
            }
            Op::Row(m, r) => {
                let c = self.nodes[m.0].shape[1];
                if let Some(gm) = acc(grads, self, *m) {
                    for j in 0..c {
                        gm[r * c + j] += gout[j];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                if let Some(ga) = acc(grads, self, *a) {
                    for ((g, &d), &yv) in ga.iter_mut().zip(gout).zip(y) {
                        *g += d * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                if let Some(ga) = acc(grads, self, *a) {
                    for ((g, &d), &xv) in ga.iter_mut().zip(gout).zip(x) {
                        if xv > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::SoftmaxCols(a) => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let y = &self.nodes[i].value;
                if let Some(ga) = acc(grads, self, *a) {
                    for j in 0..c {
                        let mut dot = 0.0;
                        for i2 in 0..r {
                            dot += y[i2 * c + j] * gout[i2 * c + j];
                        }
                        for i2 in 0..r {
                            ga[i2 * c + j] += y[i2 * c + j] * (gout[i2 * c + j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropyRows(m, targets) => {
                let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let mv = self.value(*m);
                if let Some(gm) = acc(grads, self, *m) {
                    for i2 in 0..r {
                        let p = ops::softmax(&mv[i2 * c..(i2 + 1) * c])
                            .expect("forward pass already validated these logits");
                        for j in 0..c {
                            let indicator = if j == targets[i2] { 1.0 } else { 0.0 };
                            gm[i2 * c + j] += gout[i2] * (p[j] - indicator);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = acc(grads, self, *a) {
                    for g in ga.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f64;
                if let Some(ga) = acc(grads, self, *a) {
                    for g in ga.iter_mut() {
                        *g += gout[0] / n;
                    }
                }
            }
            Op::MeanCols(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(ga) = acc(grads, self, *a) {
                    for i2 in 0..r {
                        let d = gout[i2] / c as f64;
                        for j in 0..c {
                            ga[i2 * c + j] += d;
                        }
                    }
                }
            }
            Op::RowSums(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                if let Some(ga) = acc(grads, self, *a) {
                    for i2 in 0..r {
                        for j in 0..c {
                            ga[i2 * c + j] += gout[i2];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                if let Some(ga) = acc(grads, self, *a) {
                    for (g, &d) in ga.iter_mut().zip(&gout[..na]) {
                        *g += d;
                    }
                }
                if let Some(gb) = acc(grads, self, *b) {
                    for (g, &d) in gb.iter_mut().zip(&gout[na..]) {
                        *g += d;
                    }
                }
            }
            Op::Im2Col { input, height, width, kernel } => {
                let hw = height * width;
                let ch = self.nodes[input.0].shape[0];
                let pad = kernel / 2;
                if let Some(gi) = acc(grads, self, *input) {
                    for c in 0..ch {
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                let orow = (c * kernel + ky) * kernel + kx;
                                for y in 0..*height {
                                    let sy = y as isize + ky as isize - pad as isize;
                                    if sy < 0 || sy >= *height as isize {
                                        continue;
                                    }
                                    for x in 0..*width {
                                        let sx = x as isize + kx as isize - pad as isize;
                                        if sx < 0 || sx >= *width as isize {
                                            continue;
                                        }
                                        let src = c * hw + sy as usize * width + sx as usize;
                                        gi[src] += gout[orow * hw + y * width + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
/// The step is applied symmetrically: `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite_diff_gradient: step must be positive and finite, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        *g = (hi - lo) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
