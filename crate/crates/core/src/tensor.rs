//! A small reverse-mode autodiff engine over dense row-major matrices.
//!
//! Parameters live in a [`ParamStore`]. Each forward pass records onto a fresh
//! [`Tape`]; nodes are appended after their inputs, so walking the tape
//! backwards is a valid topological order and the accumulation order is fixed.

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{} values for shape [{rows}, {cols}]", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape { op: "from_rows", detail: "ragged rows".into() });
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

// out (r x c) += a (r x k) * b (k x c)
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out (r x c) += a (r x k) * b^T, b is (c x k)
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    let mut bt = vec![0.0; k * c];
    for j in 0..c {
        for p in 0..k {
            bt[p * c + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, out, r, k, c);
}

// out (k x c) += a^T * b, a is (r x k), b is (r x c)
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named model parameters with their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.data.len()];
        self.params.push(Param { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Looks a parameter up by name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = false;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += scale * v;
                }
            }
        }
        self.grads_ready = true;
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| &p.grad).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    /// Sums `other` into `self`, allocating where needed.
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Relu(Var),
    Dropout { x: Var, keep: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm_nn(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.cols);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.cols, t.rows);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.data[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols.max(1)) {
            row.iter_mut().zip(&tb.data).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|x| x * s).collect() };
        self.push(out, Op::Scale(a, s))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index {bad} outside table of {} rows", t.rows),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor { rows: ids.len(), cols: t.cols, data };
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tg.shape() != [1, tx.cols] || tb.shape() != [1, tx.cols] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let n = tx.cols;
        let mut xhat = vec![0.0; tx.data.len()];
        let mut rstd = vec![0.0; tx.rows];
        let mut out = Tensor::zeros(tx.rows, n);
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out.data[r * n + c] = h * tg.data[c] + tb.data[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Row-wise softmax. Entries of `-inf` get probability zero.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols.max(1)) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|v| v.max(0.0)).collect() };
        self.push(out, Op::Relu(x))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let t = self.value(x);
        let keep: Vec<f64> =
            (0..t.data.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }).collect();
        let data = t.data.iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(out, Op::Dropout { x, keep })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&v| self.value(v).cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("{} columns vs {cols}", t.cols),
                });
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("{start}..{end} of {} rows", t.rows),
            });
        }
        let data = t.data[start * t.cols..end * t.cols].to_vec();
        let out = Tensor { rows: end - start, cols: t.cols, data };
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Mean cross-entropy over the rows where `mask` is set. With no rows
    /// selected the loss is the constant zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.rows || mask.len() != t.rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{} targets, {} mask entries for {} rows", targets.len(), mask.len(), t.rows),
            });
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&c| c >= t.cols) {
            return Err(Error::Shape { op: "cross_entropy", detail: format!("class {bad} of {}", t.cols) });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let mut probs = t.data.clone();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(t.cols).enumerate() {
            if !mask[r] {
                continue;
            }
            let lse = log_sum_exp(row);
            total += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
        ))
    }

    /// Backpropagates from the scalar `loss` and returns per-parameter
    /// gradients.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(Error::Shape { op: "backward", detail: format!("non-scalar loss {:?}", lv.shape()) });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.value.rows, node.value.cols);
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    if out.0.len() <= id.0 {
                        out.0.resize(id.0 + 1, None);
                    }
                    match &mut out.0[id.0] {
                        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = ta.cols;
                    gemm_nt(&g, &tb.data, acc(&mut grads, *a, ta.data.len()), rows, cols, k);
                    gemm_tn(&ta.data, &g, acc(&mut grads, *b, tb.data.len()), rows, k, cols);
                }
                Op::Transpose(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    // node is (rows x cols); input is (cols x rows)
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] += g[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        acc(&mut grads, *v, g.len()).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    let gb = acc(&mut grads, *b, cols);
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data.clone(), self.value(*b).data.clone());
                    acc(&mut grads, *a, g.len()).iter_mut().zip(g.iter().zip(&vb)).for_each(|(x, (y, z))| *x += y * z);
                    acc(&mut grads, *b, g.len()).iter_mut().zip(g.iter().zip(&va)).for_each(|(x, (y, z))| *x += y * z);
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                }
                Op::Gather { table, ids } => {
                    let tlen = self.value(*table).data.len();
                    let gt = acc(&mut grads, *table, tlen);
                    for (r, &i) in ids.iter().enumerate() {
                        gt[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(x, y)| *x += y);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gain_v = &self.value(*gain).data;
                    let n = cols as f64;
                    let mut gx = vec![0.0; g.len()];
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gb[c] += gr[c];
                            dxhat[c] = gr[c] * gain_v[c];
                            sum_d += dxhat[c];
                            sum_dh += dxhat[c] * hr[c];
                        }
                        for c in 0..cols {
                            gx[r * cols + c] = rstd[r] / n * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                    acc(&mut grads, *x, gx.len()).iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                    acc(&mut grads, *gain, cols).iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
                    acc(&mut grads, *bias, cols).iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                }
                Op::Softmax(x) => {
                    let y = &node.value.data;
                    let gx = acc(&mut grads, *x, g.len());
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.value(*x).data;
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Dropout { x, keep } => {
                    acc(&mut grads, *x, g.len()).iter_mut().zip(g.iter().zip(keep)).for_each(|(a, (b, k))| *a += b * k);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).data.len();
                        acc(&mut grads, *p, len).iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let gx = acc(&mut grads, *x, tx.data.len());
                    let off = start * cols;
                    gx[off..off + g.len()].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::CrossEntropy { logits, targets, mask, probs, count } => {
                    let tl = self.value(*logits);
                    let c = tl.cols;
                    let scale = g[0] / *count as f64;
                    let gl = acc(&mut grads, *logits, tl.data.len());
                    for r in 0..tl.rows {
                        if !mask[r] {
                            continue;
                        }
                        for k in 0..c {
                            let onehot = if k == targets[r] { 1.0 } else { 0.0 };
                            gl[r * c + k] += scale * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Backpropagates and accumulates into the store's gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads, 1.0);
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Central-difference gradient check.
///
/// `f` builds the scalar loss on a fresh tape. Returns the largest relative
/// error `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` over every parameter
/// coordinate.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let analytic = tape.gradients(loss)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        Ok(tape.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    for p in 0..store.len() {
        let id = ParamId(p);
        for k in 0..store.get(id).value.data.len() {
            let orig = store.get(id).value.data[k];
            store.get_mut(id).value.data[k] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).value.data[k] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).value.data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.grad.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update using the stored gradients, which are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_ready() {
            return Err(Error::InvalidArgument("adam step without gradients".into()));
        }
        if self.m.len() != store.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("{} moment buffers for {} parameters", self.m.len(), store.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = Tensor::uniform(3, 4, 1.0, &mut rng());
        let va = tape.constant(a.clone());
        let id = tape.constant(Tensor::identity(4));
        let out = tape.matmul(va, id).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(1, 4, vec![3.0; 4]).unwrap());
        let y = tape.softmax(x);
        for &p in tape.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_of_confident_correct_prediction() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(1, 3, vec![0.0, 60.0, 0.0]).unwrap());
        let l = tape.cross_entropy(x, &[1], &[true]).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn scalar_product_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let y = store.add("y", Tensor::scalar(-2.0));
        let mut tape = Tape::new();
        let (vx, vy) = (tape.param(&store, x), tape.param(&store, y));
        let p = tape.mul(vx, vy).unwrap();
        tape.backward(p, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![-2.0]);
        assert_eq!(store.get(y).grad, vec![3.0]);
        // accumulates until zeroed
        tape.backward(p, &mut store).unwrap();
        assert_eq!(store.get(x).grad, vec![-4.0]);
        store.zero_grad();
        assert_eq!(store.get(x).grad, vec![0.0]);
    }

    #[test]
    fn masked_rows_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::uniform(3, 5, 1.0, &mut rng()));
        let mut tape = Tape::new();
        let vw = tape.param(&store, w);
        let l = tape.cross_entropy(vw, &[1, 2, 3], &[true, false, true]).unwrap();
        let g = tape.gradients(l).unwrap();
        let g = g.get(w).unwrap();
        assert!(g[5..10].iter().all(|&v| v == 0.0));
        assert!(g[0..5].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(tape.gradients(x).is_err());
    }

    #[test]
    fn empty_mask_is_constant_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::uniform(2, 3, 1.0, &mut rng()));
        let mut tape = Tape::new();
        let vw = tape.param(&store, w);
        let l = tape.cross_entropy(vw, &[0, 0], &[false, false]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(tape.gradients(l).unwrap().get(w).is_none());
    }

    #[test]
    fn quadratic_form_grad_check() {
        // f(x) = x^T A x with A symmetric positive definite
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(3, 1, vec![0.3, -0.7, 0.2]).unwrap());
        let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.3], vec![0.0, 0.3, 3.0]]).unwrap();
        let err = grad_check(
            &mut store,
            |s, tape| {
                let vx = tape.param(s, x);
                let va = tape.constant(a.clone());
                let ax = tape.matmul(va, vx)?;
                let xt = tape.transpose(vx);
                tape.matmul(xt, ax)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_function_grad_check() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(1, 2, vec![0.3, -0.7]).unwrap());
        let err = grad_check(
            &mut store,
            |s, tape| {
                let vx = tape.param(s, x);
                let z = tape.scale(vx, 0.0);
                let zt = tape.transpose(z);
                tape.matmul(vx, zt)
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::uniform(3, 4, 1.0, &mut r));
        let b = store.add("b", Tensor::uniform(4, 4, 1.0, &mut r));
        let row = store.add("row", Tensor::uniform(1, 4, 1.0, &mut r));
        let gain = store.add("gain", Tensor::uniform(1, 4, 1.0, &mut r));
        let bias = store.add("bias", Tensor::uniform(1, 4, 1.0, &mut r));
        let table = store.add("table", Tensor::uniform(5, 4, 1.0, &mut r));
        let err = grad_check(
            &mut store,
            |s, tape| {
                let va = tape.param(s, a);
                let vb = tape.param(s, b);
                let h = tape.matmul(va, vb)?;
                let vrow = tape.param(s, row);
                let h = tape.add_row(h, vrow)?;
                let (vg, vbias) = (tape.param(s, gain), tape.param(s, bias));
                let h = tape.layer_norm(h, vg, vbias)?;
                let h = tape.relu(h);
                let vt = tape.param(s, table);
                let e = tape.gather(vt, &[4, 1, 1])?;
                let h = tape.add(h, e)?;
                let h2 = tape.mul(h, e)?;
                let h = tape.add(h, h2)?;
                let ht = tape.transpose(h);
                let att = tape.matmul(h, ht)?;
                let att = tape.scale(att, 0.5);
                let att = tape.softmax(att);
                let mixed = tape.matmul(att, h)?;
                let top = tape.slice_rows(mixed, 0, 2)?;
                let bottom = tape.slice_rows(h, 2, 3)?;
                let all = tape.concat_rows(&[top, bottom])?;
                tape.cross_entropy(all, &[0, 3, 2], &[true, false, true])
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(1, 2, vec![0.5, -1.5]).unwrap());
        let mut adam = AdamState::new(&store, 0.1);
        store.accumulate(&Gradients(vec![Some(vec![0.0, 0.0])]), 1.0);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(x).value.data(), &[0.5, -1.5]);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(1, 2, vec![0.0, 0.0]).unwrap());
        let mut adam = AdamState::new(&store, 0.01);
        for _ in 0..50 {
            store.accumulate(&Gradients(vec![Some(vec![2.0, -0.5])]), 1.0);
            adam.step(&mut store).unwrap();
        }
        let v = store.get(x).value.data();
        assert!(v[0] < 0.0 && v[1] > 0.0);
    }

    #[test]
    fn adam_requires_gradients() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, 0.01);
        assert!(adam.step(&mut store).is_err());
    }

    #[test]
    fn adam_minimizes_a_bowl() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let mut adam = AdamState::new(&store, 0.01);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let vx = tape.param(&store, x);
            let sq = tape.mul(vx, vx).unwrap();
            tape.backward(sq, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert!(store.get(x).value.item().abs() < 1e-3, "{}", store.get(x).value.item());
    }
}
