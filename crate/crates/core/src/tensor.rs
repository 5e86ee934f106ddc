//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every op validates operand shapes, checks its output for NaN/Inf, and
//! records itself on the implicit graph (parent links) when any input
//! requires gradients. [`backward`] replays the graph in reverse
//! topological order and accumulates gradients into leaf tensors.
//!
//! Values are immutable after construction; only the per-leaf gradient
//! buffer mutates. Gradients sum across fan-out and across successive
//! backward passes until [`Tensor::zero_grad`] is called.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule: maps the output cotangent to one cotangent per parent.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    grad: RefCell<Option<Vec<f64>>>,
    consumed: Cell<bool>,
}

/// Handle to a node of the computation graph. Cloning is cheap and
/// refers to the same value.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(product(&shape), data.len());
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Rc::new(data),
                requires_grad,
                parents,
                backward,
                grad: RefCell::new(None),
                consumed: Cell::new(false),
            }),
        }
    }

    /// A constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if product(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, product(shape), data.len()),
            ));
        }
        Ok(Self::new_node(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// A leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if product(shape) != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {:?} needs {} values, got {}", shape, product(shape), data.len()),
            ));
        }
        Ok(Self::new_node(shape.to_vec(), data, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new_node(shape.to_vec(), vec![0.0; product(shape)], false, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new_node(vec![1], vec![v], false, Vec::new(), None)
    }

    /// Build an op node. Used by the fused ops in other modules
    /// (CTC) whose gradient rule is supplied directly.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        ensure_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if requires_grad {
            Ok(Self::new_node(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Self::new_node(shape, data, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.inner.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any backward pass reached
    /// this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.inner.data[0])
        } else {
            Err(Error::shape("value", format!("tensor has shape {:?}", self.shape())))
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 2, got {:?}", s))),
        }
    }

    fn dims1(&self, op: &'static str) -> Result<usize> {
        match self.shape() {
            [n] => Ok(*n),
            s => Err(Error::shape(op, format!("expected rank 1, got {:?}", s))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape().first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape().get(1).copied().unwrap_or(0)
    }

    /// Element (i, j) of a rank-2 tensor. Panics on rank/range misuse;
    /// intended for tests and readout, not hot paths.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let c = self.cols();
        self.inner.data[i * c + j]
    }
}

// ---------------------------------------------------------------------------
// Element-wise and broadcast ops
// ---------------------------------------------------------------------------

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|d| vec![d.to_vec(), d.to_vec()]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|d| vec![d.to_vec(), d.iter().map(|v| -v).collect()]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let a = self.data_rc();
        let b = other.data_rc();
        Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                vec![
                    d.iter().zip(b.iter()).map(|(d, b)| d * b).collect(),
                    d.iter().zip(a.iter()).map(|(d, a)| d * a).collect(),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(
            "neg",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|d| vec![d.iter().map(|v| -v).collect()]),
        )
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v * k).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |d| vec![d.iter().map(|v| v * k).collect()]),
        )
    }

    pub fn add_const(&self, k: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v + k).collect();
        Tensor::from_op(
            "add_const",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|d| vec![d.to_vec()]),
        )
    }

    /// `[T, D] + [D]`, the vector added to every row.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let (t, d) = self.dims2("add_row")?;
        let n = v.dims1("add_row")?;
        if n != d {
            return Err(Error::shape("add_row", format!("[{t}, {d}] + [{n}]")));
        }
        let mut data = self.data().to_vec();
        let vd = v.data();
        for row in data.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(vd) {
                *x += b;
            }
        }
        Tensor::from_op(
            "add_row",
            data,
            self.shape().to_vec(),
            vec![self.clone(), v.clone()],
            Box::new(move |dout| {
                let mut dv = vec![0.0; d];
                for row in dout.chunks(d) {
                    for (g, x) in dv.iter_mut().zip(row) {
                        *g += x;
                    }
                }
                vec![dout.to_vec(), dv]
            }),
        )
    }

    /// `[T, D] * [D]`, per-column scaling broadcast over rows.
    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        let (t, d) = self.dims2("mul_row")?;
        let n = v.dims1("mul_row")?;
        if n != d {
            return Err(Error::shape("mul_row", format!("[{t}, {d}] * [{n}]")));
        }
        let vd = v.data();
        let data: Vec<f64> = self
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(vd).map(|(x, s)| x * s).collect::<Vec<_>>())
            .collect();
        let x = self.data_rc();
        let vr = v.data_rc();
        Tensor::from_op(
            "mul_row",
            data,
            self.shape().to_vec(),
            vec![self.clone(), v.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0; dout.len()];
                let mut dv = vec![0.0; d];
                for (r, row) in dout.chunks(d).enumerate() {
                    for j in 0..d {
                        dx[r * d + j] = row[j] * vr[j];
                        dv[j] += row[j] * x[r * d + j];
                    }
                }
                vec![dx, dv]
            }),
        )
    }

    /// `[T, D] op [T]` column broadcasts: each row combined with its scalar.
    fn col_op(
        &self,
        c: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        bwd: impl Fn(&[f64], &[f64], &[f64], usize) -> (Vec<f64>, Vec<f64>) + 'static,
    ) -> Result<Tensor> {
        let (t, d) = self.dims2(op)?;
        let n = c.dims1(op)?;
        if n != t {
            return Err(Error::shape(op, format!("[{t}, {d}] with [{n}]")));
        }
        let cd = c.data();
        let mut data = Vec::with_capacity(t * d);
        for (r, row) in self.data().chunks(d).enumerate() {
            for &x in row {
                data.push(fwd(x, cd[r]));
            }
        }
        let xr = self.data_rc();
        let cr = c.data_rc();
        Tensor::from_op(
            op,
            data,
            self.shape().to_vec(),
            vec![self.clone(), c.clone()],
            Box::new(move |dout| {
                let (dx, dc) = bwd(dout, &xr, &cr, d);
                vec![dx, dc]
            }),
        )
    }

    pub fn sub_col(&self, c: &Tensor) -> Result<Tensor> {
        self.col_op(c, "sub_col", |x, s| x - s, |dout, _x, c, d| {
            let dc: Vec<f64> = dout.chunks(d).map(|row| -row.iter().sum::<f64>()).collect();
            debug_assert_eq!(dc.len(), c.len());
            (dout.to_vec(), dc)
        })
    }

    pub fn add_col(&self, c: &Tensor) -> Result<Tensor> {
        self.col_op(c, "add_col", |x, s| x + s, |dout, _x, _c, d| {
            let dc: Vec<f64> = dout.chunks(d).map(|row| row.iter().sum::<f64>()).collect();
            (dout.to_vec(), dc)
        })
    }

    pub fn mul_col(&self, c: &Tensor) -> Result<Tensor> {
        self.col_op(c, "mul_col", |x, s| x * s, |dout, x, c, d| {
            let mut dx = vec![0.0; dout.len()];
            let mut dc = vec![0.0; c.len()];
            for (r, row) in dout.chunks(d).enumerate() {
                for j in 0..d {
                    dx[r * d + j] = row[j] * c[r];
                    dc[r] += row[j] * x[r * d + j];
                }
            }
            (dx, dc)
        })
    }

    pub fn div_col(&self, c: &Tensor) -> Result<Tensor> {
        self.col_op(c, "div_col", |x, s| x / s, |dout, x, c, d| {
            let mut dx = vec![0.0; dout.len()];
            let mut dc = vec![0.0; c.len()];
            for (r, row) in dout.chunks(d).enumerate() {
                for j in 0..d {
                    dx[r * d + j] = row[j] / c[r];
                    dc[r] -= row[j] * x[r * d + j] / (c[r] * c[r]);
                }
            }
            (dx, dc)
        })
    }

    /// Broadcast a one-element tensor over every element: `self + s`.
    pub fn add_tscalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("add_tscalar", format!("scalar operand has shape {:?}", s.shape())));
        }
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|v| v + sv).collect();
        Tensor::from_op(
            "add_tscalar",
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(|d| vec![d.to_vec(), vec![d.iter().sum()]]),
        )
    }

    /// Broadcast a one-element tensor over every element: `self * s`.
    pub fn mul_tscalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("mul_tscalar", format!("scalar operand has shape {:?}", s.shape())));
        }
        let sv = s.data()[0];
        let data: Vec<f64> = self.data().iter().map(|v| v * sv).collect();
        let x = self.data_rc();
        Tensor::from_op(
            "mul_tscalar",
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(move |d| {
                let ds: f64 = d.iter().zip(x.iter()).map(|(d, x)| d * x).sum();
                vec![d.iter().map(|v| v * sv).collect(), vec![ds]]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

/// Row-major `[m, k] x [k, n]` product.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        let a = self.data_rc();
        let b = other.data_rc();
        Tensor::from_op(
            "matmul",
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |d| {
                let bt = transpose_raw(&b, k, n);
                let da = matmul_raw(d, &bt, m, n, k);
                let at = transpose_raw(&a, m, k);
                let db = matmul_raw(&at, d, k, m, n);
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let data = transpose_raw(self.data(), r, c);
        Tensor::from_op(
            "transpose",
            data,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |d| vec![transpose_raw(d, c, r)]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if product(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        // Same storage, new extents; gradient passes through unchanged.
        let requires_grad = self.inner.requires_grad;
        let node = Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            data: self.data_rc(),
            requires_grad,
            parents: if requires_grad { vec![self.clone()] } else { Vec::new() },
            backward: if requires_grad {
                Some(Box::new(|d: &[f64]| vec![d.to_vec()]) as BackwardFn)
            } else {
                None
            },
            grad: RefCell::new(None),
            consumed: Cell::new(false),
        };
        Ok(Tensor { inner: Rc::new(node) })
    }

    /// Concatenate along `axis` (0 or 1). Rank-1 tensors concatenate
    /// along axis 0 only.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let rank = parts[0].shape().len();
        if parts.iter().any(|p| p.shape().len() != rank) {
            return Err(Error::shape("concat", "mixed ranks"));
        }
        match (rank, axis) {
            (1, 0) => {
                let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
                let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
                let total = data.len();
                Tensor::from_op(
                    "concat",
                    data,
                    vec![total],
                    parts.iter().map(|p| (*p).clone()).collect(),
                    Box::new(move |d| {
                        let mut out = Vec::with_capacity(sizes.len());
                        let mut off = 0;
                        for &s in &sizes {
                            out.push(d[off..off + s].to_vec());
                            off += s;
                        }
                        out
                    }),
                )
            }
            (2, 0) => {
                let cols = parts[0].cols();
                if parts.iter().any(|p| p.cols() != cols) {
                    return Err(Error::shape("concat", "column counts differ"));
                }
                let rows: usize = parts.iter().map(|p| p.rows()).sum();
                let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
                let data: Vec<f64> = parts.iter().flat_map(|p| p.data().to_vec()).collect();
                Tensor::from_op(
                    "concat",
                    data,
                    vec![rows, cols],
                    parts.iter().map(|p| (*p).clone()).collect(),
                    Box::new(move |d| {
                        let mut out = Vec::with_capacity(sizes.len());
                        let mut off = 0;
                        for &s in &sizes {
                            out.push(d[off..off + s].to_vec());
                            off += s;
                        }
                        out
                    }),
                )
            }
            (2, 1) => {
                let rows = parts[0].rows();
                if parts.iter().any(|p| p.rows() != rows) {
                    return Err(Error::shape("concat", "row counts differ"));
                }
                let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
                let total: usize = widths.iter().sum();
                let mut data = vec![0.0; rows * total];
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    for r in 0..rows {
                        data[r * total + off..r * total + off + w]
                            .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
                    }
                    off += w;
                }
                let widths_b = widths.clone();
                Tensor::from_op(
                    "concat",
                    data,
                    vec![rows, total],
                    parts.iter().map(|p| (*p).clone()).collect(),
                    Box::new(move |d| {
                        let mut grads = Vec::with_capacity(widths_b.len());
                        let mut off = 0;
                        for &w in &widths_b {
                            let mut g = vec![0.0; rows * w];
                            for r in 0..rows {
                                g[r * w..(r + 1) * w]
                                    .copy_from_slice(&d[r * total + off..r * total + off + w]);
                            }
                            grads.push(g);
                            off += w;
                        }
                        grads
                    }),
                )
            }
            _ => Err(Error::shape("concat", format!("axis {axis} on rank {rank}"))),
        }
    }

    /// Rows `[r0, r1)` of a rank-2 tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (t, d) = self.dims2("slice_rows")?;
        if r0 > r1 || r1 > t {
            return Err(Error::shape("slice_rows", format!("[{r0}, {r1}) of {t} rows")));
        }
        let data = self.data()[r0 * d..r1 * d].to_vec();
        Tensor::from_op(
            "slice_rows",
            data,
            vec![r1 - r0, d],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; t * d];
                g[r0 * d..r1 * d].copy_from_slice(dout);
                vec![g]
            }),
        )
    }

    /// Columns `[c0, c1)` of a rank-2 tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (t, d) = self.dims2("slice_cols")?;
        if c0 > c1 || c1 > d {
            return Err(Error::shape("slice_cols", format!("[{c0}, {c1}) of {d} cols")));
        }
        let w = c1 - c0;
        let mut data = vec![0.0; t * w];
        for r in 0..t {
            data[r * w..(r + 1) * w].copy_from_slice(&self.data()[r * d + c0..r * d + c1]);
        }
        Tensor::from_op(
            "slice_cols",
            data,
            vec![t, w],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; t * d];
                for r in 0..t {
                    g[r * d + c0..r * d + c1].copy_from_slice(&dout[r * w..(r + 1) * w]);
                }
                vec![g]
            }),
        )
    }

    /// Gather entries of a rank-1 tensor: `out[i] = self[idx[i]]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.dims1("gather")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let data: Vec<f64> = idx.iter().map(|&i| self.data()[i]).collect();
        let idx_b = idx.to_vec();
        let len = idx.len();
        Tensor::from_op(
            "gather",
            data,
            vec![len],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; n];
                for (&i, &d) in idx_b.iter().zip(dout) {
                    g[i] += d;
                }
                vec![g]
            }),
        )
    }

    /// Replace the listed rows with zeros; other rows pass through
    /// bit-identically.
    pub fn mask_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (t, d) = self.dims2("mask_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(Error::shape("mask_rows", format!("row {bad} out of {t}")));
        }
        let mut data = self.data().to_vec();
        for &r in rows {
            data[r * d..(r + 1) * d].fill(0.0);
        }
        let rows_b = rows.to_vec();
        Tensor::from_op(
            "mask_rows",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = dout.to_vec();
                for &r in &rows_b {
                    g[r * d..(r + 1) * d].fill(0.0);
                }
                vec![g]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions and row statistics
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |d| vec![vec![d[0]; n]]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            "mean",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |d| vec![vec![d[0] / n as f64; n]]),
        )
    }

    /// Per-row mean of a rank-2 tensor, shape `[T]`.
    pub fn row_mean(&self) -> Result<Tensor> {
        let (t, d) = self.dims2("row_mean")?;
        if d == 0 {
            return Err(Error::domain("row_mean", "zero columns"));
        }
        let data: Vec<f64> = self
            .data()
            .chunks(d)
            .map(|row| row.iter().sum::<f64>() / d as f64)
            .collect();
        Tensor::from_op(
            "row_mean",
            data,
            vec![t],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; t * d];
                for (r, &dr) in dout.iter().enumerate() {
                    g[r * d..(r + 1) * d].fill(dr / d as f64);
                }
                vec![g]
            }),
        )
    }

    /// Per-row standard deviation `sqrt(mean((x - mu)^2) + eps)`,
    /// shape `[T]`.
    pub fn row_std(&self, eps: f64) -> Result<Tensor> {
        let (t, d) = self.dims2("row_std")?;
        if d == 0 {
            return Err(Error::domain("row_std", "zero columns"));
        }
        let mut stds = Vec::with_capacity(t);
        for row in self.data().chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let m2 = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            stds.push((m2 + eps).sqrt());
        }
        let x = self.data_rc();
        let stds_b = stds.clone();
        Tensor::from_op(
            "row_std",
            stds,
            vec![t],
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; t * d];
                for r in 0..t {
                    let row = &x[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let s = stds_b[r];
                    for j in 0..d {
                        g[r * d + j] = dout[r] * (row[j] - mu) / (d as f64 * s);
                    }
                }
                vec![g]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Unary nonlinearities
// ---------------------------------------------------------------------------

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tensor {
    fn unary(
        &self,
        op: &'static str,
        fwd: impl Fn(f64) -> f64,
        // Derivative given (input, output).
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| fwd(v)).collect();
        let x = self.data_rc();
        let y = Rc::new(data.clone());
        Tensor::from_op(
            op,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |d| {
                vec![d
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(d, (&x, &y))| d * deriv(x, y))
                    .collect()]
            }),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_deriv(x))
    }

    /// Row-wise softmax of a rank-2 tensor (a rank-1 tensor is treated
    /// as a single row).
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (t, d) = match self.shape() {
            [n] => (1, *n),
            [t, d] => (*t, *d),
            s => return Err(Error::shape("softmax", format!("rank {} input", s.len()))),
        };
        if d == 0 {
            return Err(Error::domain("softmax", "empty rows"));
        }
        let mut data = Vec::with_capacity(t * d);
        for row in self.data().chunks(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let y = Rc::new(data.clone());
        Tensor::from_op(
            "softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; dout.len()];
                for r in 0..t {
                    let yr = &y[r * d..(r + 1) * d];
                    let dr = &dout[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for j in 0..d {
                        g[r * d + j] = yr[j] * (dr[j] - dot);
                    }
                }
                vec![g]
            }),
        )
    }

    /// Row-wise log-softmax with the numerically stable gradient.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (t, d) = match self.shape() {
            [n] => (1, *n),
            [t, d] => (*t, *d),
            s => return Err(Error::shape("log_softmax", format!("rank {} input", s.len()))),
        };
        if d == 0 {
            return Err(Error::domain("log_softmax", "empty rows"));
        }
        let mut data = Vec::with_capacity(t * d);
        for row in self.data().chunks(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let y = Rc::new(data.clone());
        Tensor::from_op(
            "log_softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |dout| {
                let mut g = vec![0.0; dout.len()];
                for r in 0..t {
                    let yr = &y[r * d..(r + 1) * d];
                    let dr = &dout[r * d..(r + 1) * d];
                    let s: f64 = dr.iter().sum();
                    for j in 0..d {
                        g[r * d + j] = dr[j] - yr[j].exp() * s;
                    }
                }
                vec![g]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

impl Tensor {
    /// 1-D convolution over `[C_in, L]` input with `[C_out, C_in/groups, K]`
    /// weights, `[C_out]` bias, the given stride and symmetric zero
    /// padding. Output is `[C_out, L_out]`.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let (c_in, len) = self.dims2("conv1d")?;
        let (c_out, c_in_g, k) = match weight.shape() {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::shape("conv1d", format!("weight rank {:?}", s))),
        };
        if stride == 0 || groups == 0 {
            return Err(Error::domain("conv1d", "stride and groups must be positive"));
        }
        if c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_in_g {
            return Err(Error::shape(
                "conv1d",
                format!("{c_in} in / {c_out} out channels with {groups} groups, weight group width {c_in_g}"),
            ));
        }
        if bias.dims1("conv1d")? != c_out {
            return Err(Error::shape("conv1d", "bias length != out channels"));
        }
        let padded = len + 2 * padding;
        if padded < k {
            return Err(Error::shape(
                "conv1d",
                format!("input length {len} (+2*{padding} pad) shorter than kernel {k}"),
            ));
        }
        let l_out = (padded - k) / stride + 1;
        let out_g = c_out / groups;

        // Valid output range for tap kk: positions t with
        // 0 <= t*stride + kk - padding < len, hoisted out of the loops.
        let t_range = move |kk: usize| -> (usize, usize) {
            let lo = if padding > kk {
                (padding - kk).div_ceil(stride)
            } else {
                0
            };
            let hi = ((len + padding - kk - 1) / stride + 1).min(l_out);
            (lo.min(hi), hi)
        };

        let x = self.data();
        let w = weight.data();
        let b = bias.data();
        let mut out = vec![0.0; c_out * l_out];
        for o in 0..c_out {
            let g = o / out_g;
            let orow = &mut out[o * l_out..(o + 1) * l_out];
            orow.fill(b[o]);
            for cl in 0..c_in_g {
                let ci = g * c_in_g + cl;
                let xrow = &x[ci * len..(ci + 1) * len];
                let wrow = &w[(o * c_in_g + cl) * k..(o * c_in_g + cl + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = t_range(kk);
                    for t in lo..hi {
                        orow[t] += wv * xrow[t * stride + kk - padding];
                    }
                }
            }
        }

        let xr = self.data_rc();
        let wr = weight.data_rc();
        Tensor::from_op(
            "conv1d",
            out,
            vec![c_out, l_out],
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |dout| {
                let mut dx = vec![0.0; c_in * len];
                let mut dw = vec![0.0; c_out * c_in_g * k];
                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    let g = o / out_g;
                    let drow = &dout[o * l_out..(o + 1) * l_out];
                    db[o] = drow.iter().sum();
                    for cl in 0..c_in_g {
                        let ci = g * c_in_g + cl;
                        let xrow = &xr[ci * len..(ci + 1) * len];
                        let dxrow = &mut dx[ci * len..(ci + 1) * len];
                        for kk in 0..k {
                            let wi = (o * c_in_g + cl) * k + kk;
                            let wv = wr[wi];
                            let (lo, hi) = t_range(kk);
                            let mut wgrad = 0.0;
                            for t in lo..hi {
                                let j = t * stride + kk - padding;
                                let d = drow[t];
                                dxrow[j] += d * wv;
                                wgrad += d * xrow[j];
                            }
                            dw[wi] += wgrad;
                        }
                    }
                }
                vec![dx, dw, db]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, next_parent)) = stack.pop() {
        if next_parent < node.inner.parents.len() {
            let parent = node.inner.parents[next_parent].clone();
            stack.push((node, next_parent + 1));
            if visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Reverse-mode pass from a scalar loss. Populates the `grad` buffer
/// of every reachable leaf with `requires_grad`; gradients add to
/// whatever was already accumulated there.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, got {:?}", loss.shape()),
        ));
    }
    if loss.inner.consumed.get() {
        return Err(Error::domain("backward", "graph already consumed for this loss"));
    }
    loss.inner.consumed.set(true);

    let order = topo_order(loss);
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    for node in order.iter().rev() {
        let Some(d) = grads.remove(&node.id()) else {
            continue;
        };
        ensure_finite("backward", &d)?;
        if let Some(bw) = &node.inner.backward {
            let parent_grads = bw(&d);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                if !parent.inner.requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                grads
                    .entry(parent.id())
                    .and_modify(|acc| {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a += g;
                        }
                    })
                    .or_insert(pg);
            }
        } else if node.inner.requires_grad {
            let mut slot = node.inner.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&d) {
                        *a += g;
                    }
                }
                None => *slot = Some(d),
            }
        }
    }
    Ok(())
}

/// Compare the analytic gradient of a scalar-valued tensor function
/// with central finite differences at `x`.
///
/// Returns the max over coordinates of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-12)`. Any NaN produced
/// along the way is reported as an infinite error rather than panicking.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = match Tensor::param(x.data().to_vec(), x.shape()) {
        Ok(t) => t,
        Err(_) => return f64::INFINITY,
    };
    let loss = match f(&leaf) {
        Ok(t) => t,
        Err(_) => return f64::INFINITY,
    };
    if loss.numel() != 1 || backward(&loss).is_err() {
        return f64::INFINITY;
    }
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Option<f64> {
        let t = Tensor::from_vec(data, x.shape()).ok()?;
        f(&t).ok()?.value().ok()
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let (Some(fp), Some(fm)) = (eval(plus), eval(minus)) else {
            return f64::INFINITY;
        };
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-12);
        if !rel.is_finite() {
            return f64::INFINITY;
        }
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(data: &[f64], rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(data.to_vec(), &[rows, cols]).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let eye = t2(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let out = a.matmul(&eye).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn softmax_uniform_rows() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let y = x.softmax_rows().unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t2(&[0.3, -2.0, 5.0, 1.0, 1.0, 1.0, -9.0, 0.0, 9.0], 3, 3);
        let y = x.softmax_rows().unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_shapes_and_seam() {
        let a = t2(&[1.0; 6], 3, 2);
        let b = t2(&[2.0; 10], 5, 2);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[8, 2]);
        // Slicing at the seam returns bit-identical operands.
        let back_a = c.slice_rows(0, 3).unwrap();
        let back_b = c.slice_rows(3, 8).unwrap();
        assert_eq!(back_a.data(), a.data());
        assert_eq!(back_b.data(), b.data());
    }

    #[test]
    fn backward_square() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let loss = x.add(&x).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(backward(&y).is_err());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap();
        backward(&loss).unwrap();
        assert!(backward(&loss).is_err());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let l1 = x.mul(&x).unwrap();
        backward(&l1).unwrap();
        let l2 = x.mul(&x).unwrap();
        backward(&l2).unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let x = Tensor::from_vec(vec![800.0], &[1]).unwrap();
        // exp(800) overflows to +inf.
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
        let y = Tensor::from_vec(vec![-1.0], &[1]).unwrap();
        assert!(matches!(y.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn sigmoid_of_matvec_matches_finite_differences() {
        // loss = sum(sigmoid(W x)) over a seeded 4x4 W.
        let mut v = 0.37f64;
        let mut seeded = Vec::with_capacity(16);
        for _ in 0..16 {
            v = (v * 997.0 + 0.123).sin();
            seeded.push(v);
        }
        let w = Tensor::from_vec(seeded, &[4, 4]).unwrap();
        let x = Tensor::from_vec(vec![0.5, -1.0, 0.25, 2.0], &[4, 1]).unwrap();
        let err = finite_diff_check(
            |wt| wt.matmul(&x)?.sigmoid()?.sum(),
            &w,
            1e-5,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn finite_diff_constant_function() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = finite_diff_check(|t| t.scale(0.0)?.sum(), &x, 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_sum_of_squares() {
        let x = Tensor::from_vec(vec![0.4, -1.3, 0.9, 1.7], &[4]).unwrap();
        let err = finite_diff_check(|t| t.mul(t)?.sum(), &x, 1e-5);
        assert!(err < 1e-7, "max relative error {err}");
    }

    /// Every differentiable op against central differences on seeded
    /// inputs in [-2, 2].
    #[test]
    fn all_ops_pass_gradient_checks() {
        let mut state = 0x12345u64;
        let mut rnd = move || {
            // xorshift; enough for test fixtures
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let mk = |n: usize, rnd: &mut dyn FnMut() -> f64| -> Vec<f64> {
            (0..n).map(|_| rnd()).collect()
        };

        let x34 = Tensor::from_vec(mk(12, &mut rnd), &[3, 4]).unwrap();
        let y34 = Tensor::from_vec(mk(12, &mut rnd), &[3, 4]).unwrap();
        let v4 = Tensor::from_vec(mk(4, &mut rnd), &[4]).unwrap();
        let c3 = Tensor::from_vec(vec![1.3, -0.7, 2.1], &[3]).unwrap();
        let m42 = Tensor::from_vec(mk(8, &mut rnd), &[4, 2]).unwrap();
        let s1 = Tensor::from_vec(vec![0.8], &[1]).unwrap();

        let checks: Vec<(&str, f64)> = vec![
            ("add", finite_diff_check(|t| t.add(&y34)?.sum(), &x34, 1e-5)),
            ("sub", finite_diff_check(|t| y34.sub(t)?.sum(), &x34, 1e-5)),
            ("mul", finite_diff_check(|t| t.mul(&y34)?.mul(t)?.sum(), &x34, 1e-5)),
            ("neg", finite_diff_check(|t| t.neg()?.mul(t)?.sum(), &x34, 1e-5)),
            ("scale", finite_diff_check(|t| t.scale(-1.7)?.sum(), &x34, 1e-5)),
            ("add_row", finite_diff_check(|t| t.add_row(&v4)?.mul(t)?.sum(), &x34, 1e-5)),
            ("add_row_v", finite_diff_check(|t| x34.add_row(t)?.mul(&y34)?.sum(), &v4, 1e-5)),
            ("mul_row", finite_diff_check(|t| t.mul_row(&v4)?.sum(), &x34, 1e-5)),
            ("mul_row_v", finite_diff_check(|t| x34.mul_row(t)?.mul(&y34)?.sum(), &v4, 1e-5)),
            ("add_col", finite_diff_check(|t| x34.add_col(t)?.mul(&y34)?.sum(), &c3, 1e-5)),
            ("sub_col", finite_diff_check(|t| x34.sub_col(t)?.mul(&y34)?.sum(), &c3, 1e-5)),
            ("mul_col", finite_diff_check(|t| x34.mul_col(t)?.mul(&y34)?.sum(), &c3, 1e-5)),
            ("div_col", finite_diff_check(|t| x34.div_col(t)?.mul(&y34)?.sum(), &c3, 1e-5)),
            ("div_col_x", finite_diff_check(|t| t.div_col(&c3)?.sum(), &x34, 1e-5)),
            ("add_tscalar", finite_diff_check(|t| x34.add_tscalar(t)?.mul(&y34)?.sum(), &s1, 1e-5)),
            ("mul_tscalar", finite_diff_check(|t| x34.mul_tscalar(t)?.mul(&y34)?.sum(), &s1, 1e-5)),
            ("matmul_a", finite_diff_check(|t| t.matmul(&m42)?.sum(), &x34, 1e-5)),
            ("matmul_b", finite_diff_check(|t| x34.matmul(t)?.mul(&x34.matmul(t)?)?.sum(), &m42, 1e-5)),
            ("transpose", finite_diff_check(|t| t.transpose()?.matmul(&y34)?.sum(), &x34, 1e-5)),
            ("reshape", finite_diff_check(|t| t.reshape(&[4, 3])?.mul(&t.reshape(&[4, 3])?)?.sum(), &x34, 1e-5)),
            ("concat0", finite_diff_check(|t| Tensor::concat(&[t, &y34], 0)?.mul(&Tensor::concat(&[&y34, t], 0)?)?.sum(), &x34, 1e-5)),
            ("concat1", finite_diff_check(|t| Tensor::concat(&[t, &y34], 1)?.mul(&Tensor::concat(&[&y34, t], 1)?)?.sum(), &x34, 1e-5)),
            ("slice_rows", finite_diff_check(|t| t.slice_rows(1, 3)?.mul(&t.slice_rows(0, 2)?)?.sum(), &x34, 1e-5)),
            ("slice_cols", finite_diff_check(|t| t.slice_cols(1, 4)?.mul(&t.slice_cols(0, 3)?)?.sum(), &x34, 1e-5)),
            ("gather", finite_diff_check(|t| t.reshape(&[12])?.gather(&[0, 5, 5, 11])?.sum(), &x34, 1e-5)),
            ("mask_rows", finite_diff_check(|t| t.mask_rows(&[1])?.mul(&y34)?.sum(), &x34, 1e-5)),
            ("sum", finite_diff_check(|t| t.mul(t)?.sum(), &x34, 1e-5)),
            ("mean", finite_diff_check(|t| t.mul(t)?.mean(), &x34, 1e-5)),
            ("row_mean", finite_diff_check(|t| t.row_mean()?.mul(&c3)?.sum(), &x34, 1e-5)),
            ("row_std", finite_diff_check(|t| t.row_std(1e-5)?.mul(&c3)?.sum(), &x34, 1e-5)),
            ("exp", finite_diff_check(|t| t.exp()?.sum(), &x34, 1e-5)),
            ("log", finite_diff_check(|t| t.mul(t)?.add_const(0.5)?.log()?.sum(), &x34, 1e-5)),
            ("tanh", finite_diff_check(|t| t.tanh()?.mul(&y34)?.sum(), &x34, 1e-5)),
            ("sigmoid", finite_diff_check(|t| t.sigmoid()?.mul(&y34)?.sum(), &x34, 1e-5)),
            ("gelu", finite_diff_check(|t| t.gelu()?.mul(&y34)?.sum(), &x34, 1e-5)),
            ("softmax", finite_diff_check(|t| t.softmax_rows()?.mul(&y34)?.sum(), &x34, 1e-5)),
            ("log_softmax", finite_diff_check(|t| t.log_softmax_rows()?.mul(&y34)?.sum(), &x34, 1e-5)),
        ];
        for (name, err) in checks {
            assert!(err < 1e-5, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn conv1d_gradient_check() {
        let mut v = 0.11f64;
        let mut rnd = move || {
            v = (v * 131.0 + 0.71).sin();
            v
        };
        let x = Tensor::from_vec((0..2 * 12).map(|_| rnd()).collect(), &[2, 12]).unwrap();
        let w = Tensor::from_vec((0..3 * 2 * 4).map(|_| rnd()).collect(), &[3, 2, 4]).unwrap();
        let b = Tensor::from_vec((0..3).map(|_| rnd()).collect(), &[3]).unwrap();

        let ex = finite_diff_check(|t| t.conv1d(&w, &b, 2, 1, 1)?.mul(&t.conv1d(&w, &b, 2, 1, 1)?)?.sum(), &x, 1e-5);
        assert!(ex < 1e-6, "conv input grad error {ex}");
        let ew = finite_diff_check(|t| x.conv1d(t, &b, 2, 1, 1)?.mul(&x.conv1d(t, &b, 2, 1, 1)?)?.sum(), &w, 1e-5);
        assert!(ew < 1e-6, "conv weight grad error {ew}");
        let eb = finite_diff_check(|t| x.conv1d(&w, t, 2, 1, 1)?.mul(&x.conv1d(&w, t, 2, 1, 1)?)?.sum(), &b, 1e-5);
        assert!(eb < 1e-6, "conv bias grad error {eb}");

        // Grouped: 4 in channels, 4 out channels, 2 groups.
        let xg = Tensor::from_vec((0..4 * 10).map(|_| rnd()).collect(), &[4, 10]).unwrap();
        let wg = Tensor::from_vec((0..4 * 2 * 3).map(|_| rnd()).collect(), &[4, 2, 3]).unwrap();
        let bg = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0], &[4]).unwrap();
        let eg = finite_diff_check(|t| t.conv1d(&wg, &bg, 1, 1, 2)?.mul(&t.conv1d(&wg, &bg, 1, 1, 2)?)?.sum(), &xg, 1e-5);
        assert!(eg < 1e-6, "grouped conv grad error {eg}");
        let egw = finite_diff_check(|t| xg.conv1d(t, &bg, 1, 1, 2)?.mul(&xg.conv1d(t, &bg, 1, 1, 2)?)?.sum(), &wg, 1e-5);
        assert!(egw < 1e-6, "grouped conv weight grad error {egw}");
    }

    #[test]
    fn conv1d_same_padding_preserves_length() {
        let x = Tensor::from_vec(vec![0.5; 2 * 9], &[2, 9]).unwrap();
        let w = Tensor::from_vec(vec![0.1; 2 * 2 * 5], &[2, 2, 5]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = x.conv1d(&w, &b, 1, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 9]);
    }

    #[test]
    fn identical_inputs_give_bit_identical_results() {
        let data: Vec<f64> = (0..20).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect();
        let run = || {
            let x = Tensor::param(data.clone(), &[4, 5]).unwrap();
            let y = x.gelu().unwrap().softmax_rows().unwrap().mean().unwrap();
            backward(&y).unwrap();
            (y.value().unwrap(), x.grad().unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mask_rows_zeroes_exactly() {
        let x = t2(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let y = x.mask_rows(&[1]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
