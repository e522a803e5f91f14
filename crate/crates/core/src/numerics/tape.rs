use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Result, SegError};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only meaningful for the tape that issued them.
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
    Transpose(Var),
    Conv1d { x: Var, kernel: Var, bias: Var },
    Add(Var, Var),
    AddColumn(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogFloor(Var, f64),
    Softmax { x: Var, axis: usize },
    SegmentMaxPool { h: Var, argmax: Vec<Option<usize>> },
    GatherColumns { table: Var, ids: Vec<usize> },
    SelectRow { x: Var, row: usize },
    Concat(Vec<Var>),
    StackColumns(Vec<Var>),
    SumAxis { x: Var, axis: usize },
    Index(Var, usize),
    SumAll(Var),
    SumSquares(Var),
    Expand(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives for one forward pass.
///
/// Parameters are borrowed rather than copied, so a tape lives no longer than
/// the parameter store it reads from. Build a fresh tape per training step
/// (or per bag); dropping it clears the record.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> SegError {
    SegError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `(start, stride, len)` for every 1-D slice of `shape` along `axis`.
fn axis_slices(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match (shape.len(), axis) {
        (0, 0) => vec![(0, 1, 1)],
        (1, 0) => vec![(0, 1, shape[0])],
        (2, 0) => (0..shape[1]).map(|c| (c, shape[1], shape[0])).collect(),
        (2, 1) => (0..shape[0]).map(|r| (r * shape[1], 1, shape[1])).collect(),
        _ => unreachable!("axis validated by caller"),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-segment argmax for piecewise pooling. Segments are `[0..=p1]`,
/// `[p1+1..=p2]`, `[p2+1..n-1]`; an empty segment yields `None`. Ties go to
/// the lowest index.
pub(crate) fn segment_argmax(h: &Tensor, p1: usize, p2: usize) -> Vec<Option<usize>> {
    let (d, n) = h.dims2().expect("pool input is a matrix");
    let bounds = [(0, p1 + 1), (p1 + 1, p2 + 1), (p2 + 1, n)];
    let mut out = Vec::with_capacity(d * 3);
    for r in 0..d {
        let row = h.row(r);
        for &(lo, hi) in &bounds {
            let mut best: Option<usize> = None;
            for i in lo..hi.min(n) {
                match best {
                    Some(b) if row[i] <= row[b] => {}
                    _ => best = Some(i),
                }
            }
            out.push(best);
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product. `b` may be a vector, giving a matrix-vector product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = av
            .dims2()
            .ok_or_else(|| shape_err("matmul", av.shape(), bv.shape()))?;
        let (q2, r, out_shape) = match *bv.shape() {
            [q2, r] => (q2, r, vec![p, r]),
            [q2] => (q2, 1, vec![p]),
            _ => return Err(shape_err("matmul", av.shape(), bv.shape())),
        };
        if q != q2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let orow = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let aik = ad[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[k * r..(k + 1) * r];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av
            .dims2()
            .ok_or_else(|| shape_err("transpose", av.shape(), &[]))?;
        let d = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// Same-length 1-D convolution over the sequence axis.
    ///
    /// `x: [d_in, n]`, `kernel: [d_out, m, d_in]`, `bias: [d_out]`, `m` odd,
    /// zero padding of `(m-1)/2` on each side.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (d_in, n) = xv
            .dims2()
            .ok_or_else(|| shape_err("conv1d", xv.shape(), kv.shape()))?;
        let &[d_out, m, k_in] = kv.shape() else {
            return Err(shape_err("conv1d", xv.shape(), kv.shape()));
        };
        if m % 2 == 0 {
            return Err(SegError::Config(format!(
                "convolution window must be odd, got {m}"
            )));
        }
        if k_in != d_in || bv.shape() != [d_out] || n == 0 {
            return Err(shape_err("conv1d", xv.shape(), kv.shape()));
        }
        let pad = (m - 1) / 2;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![0.0; d_out * n];
        for o in 0..d_out {
            for i in 0..n {
                let mut acc = bd[o];
                for t in 0..m {
                    let Some(j) = (i + t).checked_sub(pad).filter(|&j| j < n) else {
                        continue;
                    };
                    let krow = &kd[(o * m + t) * d_in..(o * m + t + 1) * d_in];
                    for (c, &w) in krow.iter().enumerate() {
                        acc += w * xd[c * n + j];
                    }
                }
                out[o * n + i] = acc;
            }
        }
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::new(vec![d_out, n], out)?,
            Op::Conv1d { x, kernel, bias },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` vector to every column of a `[d, n]` matrix.
    pub fn add_column(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (self.value(m), self.value(v));
        let Some((d, n)) = mv.dims2().filter(|&(d, _)| vv.shape() == [d]) else {
            return Err(shape_err("add_column", mv.shape(), vv.shape()));
        };
        let mut data = mv.data().to_vec();
        for r in 0..d {
            let b = vv.data()[r];
            data[r * n..(r + 1) * n].iter_mut().for_each(|x| *x += b);
        }
        let t = Tensor::new(vec![d, n], data)?;
        let rg = self.rg(&[m, v]);
        Ok(self.push(t, Op::AddColumn(m, v), rg))
    }

    /// `W·x + b` where `x` is a vector or a matrix of column vectors.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        if self.value(wx).rank() == 1 {
            self.add(wx, b)
        } else {
            self.add_column(wx, b)
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| k * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// `ln(max(a, floor))`.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::LogFloor(a, floor), rg)
    }

    /// Max-stabilized softmax of every slice along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank().max(1);
        if axis >= rank || xv.rank() > 2 {
            return Err(SegError::Usage(format!(
                "softmax axis {axis} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for (start, stride, len) in axis_slices(xv.shape(), axis) {
            let idx = |k: usize| start + k * stride;
            let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (out[idx(k)] - max).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Piecewise max pooling of `h: [d, n]` into `[d, 3]`.
    ///
    /// Segments are `[0..=p1]`, `[p1+1..=p2]` and `[p2+1..n-1]`. An empty
    /// segment pools to 0. Gradient goes to the lowest-index maximizer.
    pub fn segment_max_pool(&mut self, h: Var, p1: usize, p2: usize) -> Result<Var> {
        let hv = self.value(h);
        let (d, n) = hv
            .dims2()
            .ok_or_else(|| shape_err("segment_max_pool", hv.shape(), &[]))?;
        if p1 > p2 || p2 >= n {
            return Err(SegError::Usage(format!(
                "segment boundaries ({p1}, {p2}) invalid for length {n}"
            )));
        }
        let argmax = segment_argmax(hv, p1, p2);
        let mut out = vec![0.0; d * 3];
        for r in 0..d {
            for s in 0..3 {
                if let Some(i) = argmax[r * 3 + s] {
                    out[r * 3 + s] = hv.at2(r, i);
                }
            }
        }
        let t = Tensor::new(vec![d, 3], out)?;
        let rg = self.rg(&[h]);
        Ok(self.push(t, Op::SegmentMaxPool { h, argmax }, rg))
    }

    /// Embedding lookup: `table: [V, d]` → `[d, ids.len()]`, column `i`
    /// holding row `ids[i]`.
    pub fn gather_columns(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv
            .dims2()
            .ok_or_else(|| shape_err("gather_columns", tv.shape(), &[]))?;
        let n = ids.len();
        let mut out = vec![0.0; d * n];
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(SegError::Lookup { id, len: rows });
            }
            for (k, &x) in tv.row(id).iter().enumerate() {
                out[k * n + i] = x;
            }
        }
        let t = Tensor::new(vec![d, n], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::GatherColumns {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, _) = xv
            .dims2()
            .ok_or_else(|| shape_err("select_row", xv.shape(), &[]))?;
        if row >= rows {
            return Err(SegError::Lookup { id: row, len: rows });
        }
        let t = Tensor::vector(xv.row(row).to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRow { x, row }, rg))
    }

    /// Concatenation along axis 0: vectors/scalars into a vector, or
    /// matrices with equal column counts into a taller matrix.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            SegError::Usage("concat of zero tensors".into())
        })?);
        let shape = if first.rank() == 2 {
            let cols = first.shape()[1];
            let mut rows = 0;
            for &p in parts {
                match self.value(p).dims2() {
                    Some((r, c)) if c == cols => rows += r,
                    _ => return Err(shape_err("concat", first.shape(), self.value(p).shape())),
                }
            }
            vec![rows, cols]
        } else {
            let mut len = 0;
            for &p in parts {
                let pv = self.value(p);
                if pv.rank() > 1 {
                    return Err(shape_err("concat", first.shape(), pv.shape()));
                }
                len += pv.len();
            }
            vec![len]
        };
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// `m` vectors of length `d` → `[d, m]`.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = self.value(*cols.first().ok_or_else(|| {
            SegError::Usage("stack of zero tensors".into())
        })?);
        let d = first.len();
        let m = cols.len();
        let mut out = vec![0.0; d * m];
        for (j, &c) in cols.iter().enumerate() {
            let cv = self.value(c);
            if cv.rank() != 1 || cv.len() != d {
                return Err(shape_err("stack_columns", &[d], cv.shape()));
            }
            for (k, &x) in cv.data().iter().enumerate() {
                out[k * m + j] = x;
            }
        }
        let t = Tensor::new(vec![d, m], out)?;
        let rg = self.rg(cols);
        Ok(self.push(t, Op::StackColumns(cols.to_vec()), rg))
    }

    /// Sum of a matrix along `axis` (1 = over columns, giving one value per row).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv
            .dims2()
            .filter(|_| axis < 2)
            .ok_or_else(|| shape_err("sum_axis", xv.shape(), &[axis]))?;
        let out = if axis == 1 {
            (0..r).map(|i| xv.row(i).iter().sum()).collect()
        } else {
            (0..c).map(|j| (0..r).map(|i| xv.at2(i, j)).sum()).collect()
        };
        let t = Tensor::vector(out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    /// Element at flat index `i`, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv
            .data()
            .get(i)
            .ok_or(SegError::Lookup { id: i, len: xv.len() })?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Index(x, i), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("expand", sv.shape(), shape));
        }
        let t = Tensor::filled(shape, sv.item());
        let rg = self.rg(&[s]);
        Ok(self.push(t, Op::Expand(s), rg))
    }

    /// Reinterprets the row-major data of `x` under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(shape.to_vec(), xv.data().to_vec())
            .map_err(|_| shape_err("reshape", xv.shape(), shape))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires grad and lies upstream of `loss` receives a
    /// gradient; others are left empty.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(SegError::Usage("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(SegError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let buf = grads[target.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = av.dims2().expect("matmul lhs");
                let r = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
                let (ad, bd) = (av.data(), bv.data());
                // dA = dC · Bᵀ
                self.accumulate(grads, *a, |ga| {
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &bd[k * r..(k + 1) * r];
                            ga[i * q + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.accumulate(grads, *b, |gb| {
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = ad[i * q + k];
                            for (o, &x) in gb[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *o += aik * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("transpose input");
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (d_in, n) = xv.dims2().expect("conv input");
                let (d_out, m) = (kv.shape()[0], kv.shape()[1]);
                let pad = (m - 1) / 2;
                let (xd, kd) = (xv.data(), kv.data());
                let taps = |i: usize| {
                    (0..m).filter_map(move |t| {
                        (i + t).checked_sub(pad).filter(|&j| j < n).map(|j| (t, j))
                    })
                };
                self.accumulate(grads, *x, |gx| {
                    for o in 0..d_out {
                        for i in 0..n {
                            let go = g[o * n + i];
                            for (t, j) in taps(i) {
                                let krow = &kd[(o * m + t) * d_in..(o * m + t + 1) * d_in];
                                for (c, &w) in krow.iter().enumerate() {
                                    gx[c * n + j] += go * w;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *kernel, |gk| {
                    for o in 0..d_out {
                        for i in 0..n {
                            let go = g[o * n + i];
                            for (t, j) in taps(i) {
                                let base = (o * m + t) * d_in;
                                for c in 0..d_in {
                                    gk[base + c] += go * xd[c * n + j];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for o in 0..d_out {
                        gb[o] += g[o * n..(o + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                    });
                }
            }
            Op::AddColumn(m, v) => {
                let (d, n) = self.value(*m).dims2().expect("add_column input");
                self.accumulate(grads, *m, |gm| {
                    gm.iter_mut().zip(g).for_each(|(o, x)| *o += x)
                });
                self.accumulate(grads, *v, |gv| {
                    for r in 0..d {
                        gv[r] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += k * x)
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for (i, &y) in out.data().iter().enumerate() {
                    ga[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for (i, &y) in out.data().iter().enumerate() {
                    ga[i] += g[i] * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LogFloor(a, floor) => {
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ad[i] > *floor {
                            ga[i] += g[i] / ad[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for (start, stride, len) in axis_slices(out.shape(), *axis) {
                        let idx = |k: usize| start + k * stride;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                });
            }
            Op::SegmentMaxPool { h, argmax } => {
                let n = self.value(*h).shape()[1];
                self.accumulate(grads, *h, |gh| {
                    for (cell, am) in argmax.iter().enumerate() {
                        if let Some(i) = am {
                            gh[(cell / 3) * n + i] += g[cell];
                        }
                    }
                });
            }
            Op::GatherColumns { table, ids } => {
                let d = self.value(*table).shape()[1];
                let n = ids.len();
                self.accumulate(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for k in 0..d {
                            gt[id * d + k] += g[k * n + i];
                        }
                    }
                });
            }
            Op::SelectRow { x, row } => {
                let d = out.len();
                self.accumulate(grads, *x, |gx| {
                    for k in 0..d {
                        gx[row * d + k] += g[k];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, *p, |gp| {
                        gp.iter_mut().zip(slice).for_each(|(o, x)| *o += x)
                    });
                    offset += len;
                }
            }
            Op::StackColumns(cols) => {
                let m = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    self.accumulate(grads, *c, |gc| {
                        for (k, o) in gc.iter_mut().enumerate() {
                            *o += g[k * m + j];
                        }
                    });
                }
            }
            Op::SumAxis { x, axis } => {
                let (r, c) = self.value(*x).dims2().expect("sum_axis input");
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += if *axis == 1 { g[i] } else { g[j] };
                        }
                    }
                });
            }
            Op::Index(x, i) => self.accumulate(grads, *x, |gx| gx[*i] += g[0]),
            Op::SumAll(x) => self.accumulate(grads, *x, |gx| {
                gx.iter_mut().for_each(|o| *o += g[0])
            }),
            Op::SumSquares(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += 2.0 * xd[i] * g[0];
                    }
                });
            }
            Op::Expand(s) => self.accumulate(grads, *s, |gs| gs[0] += g.iter().sum::<f64>()),
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)
            }),
        }
    }
}
