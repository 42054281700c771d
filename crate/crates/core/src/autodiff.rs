//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Besides the usual dense algebra the tape has a few
//! mesh-specific operators: constant dense or sparse operators applied to each
//! row block of a frame-stacked `(B·N) × d` tensor, and block-wise weighted
//! pooling.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::sparse::CsrMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "{rows}x{cols} matrix from {} values",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::from_vec(1, data.len(), data)
    }

    pub fn col_vector(data: Vec<f64>) -> Self {
        Self::from_vec(data.len(), 1, data)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = α·op(A)·op(B) + β·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the bounds of all three operands were asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Dense product of two matrices.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {:?} x {:?}", a.shape(), b.shape());
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        (a.cols, 1),
        &b.data,
        (b.cols, 1),
        0.0,
        &mut c.data,
        b.cols,
    );
    c
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `Y_b = P · X_b` for each row block of `X` (block height `P.cols`).
    BlockLeft(Arc<Mat>, Var),
    /// Same with a sparse operator; the transpose is kept for the backward pass.
    SparseLeft(Arc<CsrMatrix>, Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    SqrtEps(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    BlockWeightedSum(Var, Var),
    Sum(Var),
    Huber(Var, Arc<Vec<f64>>, f64),
    EntropyGap(Var, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `b` tiles `a` down the rows and is either full width or a single column.
fn check_broadcast(a: &Mat, b: &Mat) {
    assert!(
        b.rows > 0 && a.rows % b.rows == 0 && (b.cols == 1 || b.cols == a.cols),
        "cannot broadcast {:?} onto {:?}",
        b.shape(),
        a.shape()
    );
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let c = matmul(self.value(a), self.value(b));
        self.push(c, Op::MatMul(a, b))
    }

    /// Applies a constant `m × n` operator to every `n`-row block of `x`.
    pub fn block_left(&mut self, p: Arc<Mat>, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n, d) = (p.rows, p.cols, xv.cols);
        assert!(
            n > 0 && xv.rows % n == 0,
            "block operator {:?} on {:?}",
            p.shape(),
            xv.shape()
        );
        let blocks = xv.rows / n;
        let mut out = Mat::zeros(blocks * m, d);
        for b in 0..blocks {
            gemm(
                m,
                n,
                d,
                1.0,
                &p.data,
                (n, 1),
                &xv.data[b * n * d..],
                (d, 1),
                0.0,
                &mut out.data[b * m * d..],
                d,
            );
        }
        self.push(out, Op::BlockLeft(p, x))
    }

    pub fn sparse_left(&mut self, p: Arc<CsrMatrix>, pt: Arc<CsrMatrix>, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n, d) = (p.rows, p.cols, xv.cols);
        assert!(pt.rows == n && pt.cols == m);
        assert!(n > 0 && xv.rows % n == 0, "sparse operator {m}x{n} on {:?}", xv.shape());
        let blocks = xv.rows / n;
        let mut out = Mat::zeros(blocks * m, d);
        for b in 0..blocks {
            p.mul_dense_into(
                &xv.data[b * n * d..(b + 1) * n * d],
                d,
                &mut out.data[b * m * d..(b + 1) * m * d],
            );
        }
        self.push(out, Op::SparseLeft(p, pt, x))
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast(av, bv);
        let mut out = Mat::zeros(av.rows, av.cols);
        let cols = av.cols;
        for (r, (o, x)) in out.data.chunks_mut(cols).zip(av.data.chunks(cols)).enumerate() {
            let brow = bv.row(r % bv.rows);
            if bv.cols == 1 {
                let y = brow[0];
                o.iter_mut().zip(x).for_each(|(o, &x)| *o = f(x, y));
            } else {
                o.iter_mut().zip(x).zip(brow).for_each(|((o, &x), &y)| *o = f(x, y));
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_broadcast(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Mat {
        let av = self.value(a);
        Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `sqrt(x + eps)`, smooth at zero for non-negative `x`.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let v = self.map(a, |x| (x + eps).sqrt());
        self.push(v, Op::SqrtEps(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| s * x);
        self.push(v, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols);
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows);
        let data = av.data[start * av.cols..(start + len) * av.cols].to_vec();
        let cols = av.cols;
        self.push(Mat::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    /// Row-wise softmax over the columns where `mask` is true; masked-out
    /// columns are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.cols);
        assert!(mask.iter().any(|&m| m), "softmax needs at least one active column");
        let mut out = Mat::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
            let mut z = 0.0;
            for j in 0..av.cols {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    out.data[r * av.cols + j] = e;
                    z += e;
                }
            }
            for j in 0..av.cols {
                out.data[r * av.cols + j] /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `out[b, :] = Σ_i w[i] · h[b·N + i, :]` with `w` an `N × 1` column.
    pub fn block_weighted_sum(&mut self, w: Var, h: Var) -> Var {
        let (wv, hv) = (self.value(w), self.value(h));
        let n = wv.rows;
        assert!(wv.cols == 1 && hv.rows % n == 0);
        let blocks = hv.rows / n;
        let mut out = Mat::zeros(blocks, hv.cols);
        gemm_blocks_weighted(&wv.data, hv, &mut out);
        self.push(out, Op::BlockWeightedSum(w, h))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// Mean Huber loss of `a` (any shape) against a constant target.
    pub fn huber(&mut self, a: Var, target: Arc<Vec<f64>>, delta: f64) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), target.len(), "huber length mismatch");
        let loss = huber_value(&av.data, &target, delta);
        self.push(Mat::scalar(loss), Op::Huber(a, target, delta))
    }

    /// `(H(a) − h_target)²` with `H` the spectral entropy of the series `a`.
    pub fn entropy_gap(&mut self, a: Var, h_target: f64) -> Var {
        let h = spectral_entropy(&self.value(a).data).entropy;
        self.push(Mat::scalar((h - h_target).powi(2)), Op::EntropyGap(a, h_target))
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).data.len(), 1, "backward needs a scalar root");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            self.backprop_node(i, &dy, &mut g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                g[i] = Some(dy);
            }
        }
        Grads(g)
    }

    fn backprop_node(&self, i: usize, dy: &Mat, g: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, m: Mat| match &mut g[v.0] {
            Some(prev) => prev.add_assign(&m),
            slot => *slot = Some(m),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(av.rows, av.cols);
                gemm(
                    av.rows,
                    bv.cols,
                    av.cols,
                    1.0,
                    &dy.data,
                    (dy.cols, 1),
                    &bv.data,
                    (1, bv.cols),
                    0.0,
                    &mut da.data,
                    av.cols,
                );
                let mut db = Mat::zeros(bv.rows, bv.cols);
                gemm(
                    av.cols,
                    av.rows,
                    bv.cols,
                    1.0,
                    &av.data,
                    (1, av.cols),
                    &dy.data,
                    (dy.cols, 1),
                    0.0,
                    &mut db.data,
                    bv.cols,
                );
                acc(*a, da);
                acc(*b, db);
            }
            Op::BlockLeft(p, x) => {
                let (m, n, d) = (p.rows, p.cols, dy.cols);
                let blocks = dy.rows / m;
                let mut dx = Mat::zeros(blocks * n, d);
                for b in 0..blocks {
                    gemm(
                        n,
                        m,
                        d,
                        1.0,
                        &p.data,
                        (1, n),
                        &dy.data[b * m * d..],
                        (d, 1),
                        0.0,
                        &mut dx.data[b * n * d..],
                        d,
                    );
                }
                acc(*x, dx);
            }
            Op::SparseLeft(p, pt, x) => {
                let (m, n, d) = (p.rows, p.cols, dy.cols);
                let blocks = dy.rows / m;
                let mut dx = Mat::zeros(blocks * n, d);
                for b in 0..blocks {
                    pt.mul_dense_into(
                        &dy.data[b * m * d..(b + 1) * m * d],
                        d,
                        &mut dx.data[b * n * d..(b + 1) * n * d],
                    );
                }
                acc(*x, dx);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let bv = self.value(*b);
                let mut db = Mat::zeros(bv.rows, bv.cols);
                for (r, d) in dy.data.chunks(dy.cols).enumerate() {
                    let k = r % bv.rows;
                    if bv.cols == 1 {
                        db.data[k] += sign * d.iter().sum::<f64>();
                    } else {
                        db.data[k * bv.cols..(k + 1) * bv.cols]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(o, &v)| *o += sign * v);
                    }
                }
                acc(*a, dy.clone());
                acc(*b, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(av.rows, av.cols);
                let mut db = Mat::zeros(bv.rows, bv.cols);
                let cols = dy.cols;
                for (r, ((d, x), o)) in dy
                    .data
                    .chunks(cols)
                    .zip(av.data.chunks(cols))
                    .zip(da.data.chunks_mut(cols))
                    .enumerate()
                {
                    let k = r % bv.rows;
                    if bv.cols == 1 {
                        let y = bv.data[k];
                        o.iter_mut().zip(d).for_each(|(o, &d)| *o = d * y);
                        db.data[k] += d.iter().zip(x).map(|(d, x)| d * x).sum::<f64>();
                    } else {
                        let brow = &bv.data[k * cols..(k + 1) * cols];
                        o.iter_mut().zip(d).zip(brow).for_each(|((o, &d), &y)| *o = d * y);
                        db.data[k * cols..(k + 1) * cols]
                            .iter_mut()
                            .zip(d.iter().zip(x))
                            .for_each(|(o, (d, x))| *o += d * x);
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Tanh(a) => acc(*a, zip_map(dy, y, |d, t| d * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, zip_map(dy, y, |d, s| d * s * (1.0 - s))),
            Op::Exp(a) => acc(*a, zip_map(dy, y, |d, e| d * e)),
            Op::SqrtEps(a) => acc(*a, zip_map(dy, y, |d, s| 0.5 * d / s)),
            Op::Scale(a, s) => acc(*a, zip_map(dy, y, |d, _| s * d)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    let mut dp = Mat::zeros(dy.rows, w);
                    for r in 0..dy.rows {
                        dp.data[r * w..(r + 1) * w].copy_from_slice(&dy.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(p, dp);
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for r in 0..dy.rows {
                    da.data[r * av.cols + start..r * av.cols + start + dy.cols].copy_from_slice(dy.row(r));
                }
                acc(*a, da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.data.len();
                    acc(p, Mat::from_vec(pv.rows, pv.cols, dy.data[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                da.data[start * av.cols..start * av.cols + dy.data.len()].copy_from_slice(&dy.data);
                acc(*a, da);
            }
            Op::Transpose(a) => acc(*a, transpose(dy)),
            Op::SoftmaxRows(a) => {
                let mut da = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        da.data[r * y.cols + c] = yr[c] * (dr[c] - dot);
                    }
                }
                acc(*a, da);
            }
            Op::BlockWeightedSum(w, h) => {
                let (wv, hv) = (self.value(*w), self.value(*h));
                let n = wv.rows;
                let d = hv.cols;
                let mut dw = Mat::zeros(n, 1);
                let mut dh = Mat::zeros(hv.rows, d);
                for b in 0..dy.rows {
                    let drow = dy.row(b);
                    for i in 0..n {
                        let r = b * n + i;
                        let hr = hv.row(r);
                        dw.data[i] += hr.iter().zip(drow).map(|(x, y)| x * y).sum::<f64>();
                        for (o, &dv) in dh.data[r * d..(r + 1) * d].iter_mut().zip(drow) {
                            *o = wv.data[i] * dv;
                        }
                    }
                }
                acc(*w, dw);
                acc(*h, dh);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Mat::from_vec(av.rows, av.cols, vec![dy.item(); av.data.len()]));
            }
            Op::Huber(a, target, delta) => {
                let av = self.value(*a);
                let n = av.data.len() as f64;
                let scale = dy.item() / n;
                let data = av
                    .data
                    .iter()
                    .zip(target.iter())
                    .map(|(p, t)| scale * (p - t).clamp(-delta, *delta))
                    .collect();
                acc(*a, Mat::from_vec(av.rows, av.cols, data));
            }
            Op::EntropyGap(a, h_target) => {
                let av = self.value(*a);
                let se = spectral_entropy(&av.data);
                let outer = dy.item() * 2.0 * (se.entropy - h_target);
                let data = se.gradient().into_iter().map(|v| outer * v).collect();
                acc(*a, Mat::from_vec(av.rows, av.cols, data));
            }
        }
    }
}

fn gemm_blocks_weighted(w: &[f64], h: &Mat, out: &mut Mat) {
    let n = w.len();
    let d = h.cols;
    for b in 0..out.rows {
        gemm(
            1,
            n,
            d,
            1.0,
            w,
            (n, 1),
            &h.data[b * n * d..],
            (d, 1),
            0.0,
            &mut out.data[b * d..],
            d,
        );
    }
}

fn zip_map(dy: &Mat, y: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        dy.rows,
        dy.cols,
        dy.data.iter().zip(&y.data).map(|(&d, &v)| f(d, v)).collect(),
    )
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.get(r, c);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn huber_value(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e <= delta {
                0.5 * e * e
            } else {
                delta * (e - 0.5 * delta)
            }
        })
        .sum();
    total / pred.len() as f64
}

/// Normalized one-sided power spectrum of a mean-removed series and its
/// Shannon entropy.
#[derive(Clone, Debug)]
pub struct SpectralEntropy {
    pub entropy: f64,
    /// Bin probabilities (bins `0..=n/2`).
    pub p: Vec<f64>,
    /// Total power before normalization; zero means the uniform fallback.
    pub total: f64,
    spectrum: Vec<Complex<f64>>,
    n: usize,
}

pub fn spectral_entropy(x: &[f64]) -> SpectralEntropy {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bins = n / 2 + 1;
    buf.truncate(bins);
    let power: Vec<f64> = buf.iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power.iter().sum();
    if !(total > 0.0) {
        return SpectralEntropy {
            entropy: (bins as f64).ln(),
            p: vec![1.0 / bins as f64; bins],
            total: 0.0,
            spectrum: buf,
            n,
        };
    }
    let p: Vec<f64> = power.iter().map(|&v| v / total).collect();
    SpectralEntropy {
        entropy: entropy_of(&p),
        p,
        total,
        spectrum: buf,
        n,
    }
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

impl SpectralEntropy {
    /// `dH/dx` for the input series.
    pub fn gradient(&self) -> Vec<f64> {
        let n = self.n;
        if self.total == 0.0 {
            return vec![0.0; n];
        }
        let dh_dp: Vec<f64> = self
            .p
            .iter()
            .map(|&p| (-p.max(f64::MIN_POSITIVE).ln() - self.entropy) / self.total)
            .collect();
        let mut grad: Vec<f64> = (0..n)
            .map(|m| {
                self.spectrum
                    .iter()
                    .zip(&dh_dp)
                    .enumerate()
                    .map(|(j, (x, &w))| {
                        let theta = 2.0 * std::f64::consts::PI * ((j * m) % n) as f64 / n as f64;
                        w * 2.0 * (x.re * theta.cos() - x.im * theta.sin())
                    })
                    .sum()
            })
            .collect();
        let mean = grad.iter().sum::<f64>() / n as f64;
        grad.iter_mut().for_each(|g| *g -= mean);
        grad
    }
}

pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks `d(build)/d(inputs)` against central differences.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.rows, m.cols));
            for e in 0..m.data.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data[e] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|m| t.leaf(m)).collect();
                    let o = build(&mut t, &vs);
                    t.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k}[{e}]: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)],
            |t, v| {
                let ab = t.matmul(v[0], v[1]);
                let s = t.add(ab, v[2]);
                let th = t.tanh(s);
                let sg = t.sigmoid(th);
                let m = t.mul(sg, v[2]);
                let e = t.exp(m);
                let q = t.mul(e, e);
                let r = t.sqrt_eps(q, 1e-3);
                let d = t.sub(r, v[2]);
                let sc = t.scale(d, 0.7);
                t.sum(sc)
            },
        );
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![random(4, 3, &mut rng), random(4, 2, &mut rng), random(5, 1, &mut rng)],
            |t, v| {
                let c = t.concat_cols(&[v[0], v[1]]);
                let s = t.slice_cols(c, 1, 3);
                let tr = t.transpose(s);
                let r = t.slice_rows(tr, 1, 2);
                let rows = t.concat_rows(&[r, tr]);
                let w = t.mul(rows, rows);
                let sm = t.softmax_rows(w, Arc::new(vec![true, false, true, true]));
                let col = t.mul(sm, v[2]);
                let k = t.tanh(col);
                t.sum(k)
            },
        );
    }

    #[test]
    fn block_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Arc::new(random(2, 3, &mut rng));
        let sp = CsrMatrix::from_triplets(2, 3, &[(0, 0, 1.5), (0, 2, -0.5), (1, 1, 2.0)]);
        let spt = Arc::new(sp.transpose());
        let sp = Arc::new(sp);
        check(vec![random(6, 2, &mut rng), random(3, 1, &mut rng)], move |t, v| {
            let a = t.block_left(p.clone(), v[0]);
            let b = t.sparse_left(sp.clone(), spt.clone(), v[0]);
            let ab = t.mul(a, b);
            let tw = t.transpose(v[1]);
            let w = t.softmax_rows(tw, Arc::new(vec![true; 3]));
            let w = t.transpose(w);
            let x = t.tanh(v[0]);
            let pooled = t.block_weighted_sum(w, x);
            let s1 = t.sum(ab);
            let q = t.mul(pooled, pooled);
            let s2 = t.sum(q);
            t.add(s1, s2)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target: Arc<Vec<f64>> = Arc::new((0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let x = Mat::from_vec(12, 1, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        check(vec![x], move |t, v| {
            let h = t.huber(v[0], target.clone(), 1.0);
            let e = t.entropy_gap(v[0], 1.2);
            t.add(h, e)
        });
    }

    #[test]
    fn entropy_fixed_points() {
        // single tone aligned with bin 2 of 16
        let x: Vec<f64> = (0..16)
            .map(|n| (2.0 * std::f64::consts::PI * 2.0 * n as f64 / 16.0).cos())
            .collect();
        assert!(spectral_entropy(&x).entropy.abs() < 1e-12);
        let flat = [0.125; 8];
        assert!((entropy_of(&flat) - 8f64.ln()).abs() < 1e-12);
        let zero = spectral_entropy(&[0.0; 14]);
        assert!((zero.entropy - 8f64.ln()).abs() < 1e-12);
        assert!(zero.gradient().iter().all(|&g| g == 0.0));
    }
}
