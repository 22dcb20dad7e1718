//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Tensors are immutable once built; an op returns a fresh tensor holding
//! references to its inputs plus a closure that routes the output gradient
//! back to them. `backward` on a scalar walks the graph in reverse
//! topological order. All reductions accumulate in index order, so a
//! single-threaded run is bit-reproducible.

mod check;
mod ops;

pub use check::grad_check;
pub use ops::{attention, conv2d, depthwise_conv1d, embedding, sinusoid_table, AttnMask};

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{HydraError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HydraError::NonFinite(op))
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward_fn,
        }))
    }

    /// Leaf tensor participating in differentiation.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(HydraError::Dimension(format!(
                "leaf: shape {:?} does not hold {} values",
                shape,
                data.len()
            )));
        }
        check_finite(&data, "leaf")?;
        Ok(Self::new_inner(shape.to_vec(), data, true, vec![], None))
    }

    /// Leaf tensor excluded from differentiation (inputs, masks, tables).
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(HydraError::Dimension(format!(
                "constant: shape {:?} does not hold {} values",
                shape,
                data.len()
            )));
        }
        check_finite(&data, "constant")?;
        Ok(Self::new_inner(shape.to_vec(), data, false, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new_inner(shape.to_vec(), vec![0.0; numel_of(shape)], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Self::constant(&[1], vec![v])
    }

    /// Result of an op: output requires grad iff any parent does, and only
    /// then is the backward closure retained.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        op: &'static str,
        backward_fn: impl Fn(&[f64]) + 'static,
    ) -> Result<Tensor> {
        check_finite(&data, op)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Ok(Self::new_inner(shape, data, true, parents, Some(Box::new(backward_fn))))
        } else {
            Ok(Self::new_inner(shape, data, false, vec![], None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative post-order DFS: parents land before their consumers.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.0.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let next = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if next.0.requires_grad && seen.insert(next.0.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Reverse-mode differentiation from a scalar root. Gradients accumulate
    /// into every reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(HydraError::Usage(
                "backward requires a scalar root".to_string(),
            ));
        }
        if !self.0.requires_grad {
            return Err(HydraError::Usage(
                "backward root does not require grad".to_string(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(f) = &node.0.backward_fn {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    f(&g);
                }
            }
        }
        Ok(())
    }

    // ---- elementwise / shape ops ----

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(HydraError::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            "add",
            move |dy| {
                a.accumulate_grad(dy);
                b.accumulate_grad(dy);
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(HydraError::Dimension(format!(
                "sub: {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a - b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            "sub",
            move |dy| {
                a.accumulate_grad(dy);
                let neg: Vec<f64> = dy.iter().map(|d| -d).collect();
                b.accumulate_grad(&neg);
            },
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(HydraError::Dimension(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            "mul",
            move |dy| {
                let da: Vec<f64> = dy.iter().zip(b.data()).map(|(d, bv)| d * bv).collect();
                let db: Vec<f64> = dy.iter().zip(a.data()).map(|(d, av)| d * av).collect();
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            },
        )
    }

    /// y = a*x + b, elementwise with scalar coefficients.
    pub fn affine(&self, a: f64, b: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| a * v + b).collect();
        let x = self.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone()],
            "affine",
            move |dy| {
                let dx: Vec<f64> = dy.iter().map(|d| a * d).collect();
                x.accumulate_grad(&dx);
            },
        )
    }

    pub fn scale(&self, a: f64) -> Result<Tensor> {
        self.affine(a, 0.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let x = self.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone()],
            "relu",
            move |dy| {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.data())
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                x.accumulate_grad(&dx);
            },
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let mut acc = 0.0;
        for v in self.data() {
            acc += v;
        }
        let x = self.clone();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![acc], vec![self.clone()], "sum", move |dy| {
            x.accumulate_grad(&vec![dy[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Reinterpret the contiguous buffer under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(HydraError::Dimension(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        let x = self.clone();
        Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            "reshape",
            move |dy| x.accumulate_grad(dy),
        )
    }

    /// Swap two axes (copying).
    pub fn swap_axes(&self, a: usize, b: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(HydraError::Dimension(format!(
                "swap_axes({a},{b}) on rank-{rank} tensor"
            )));
        }
        if a == b {
            return self.reshape(&self.0.shape.clone());
        }
        let src_shape = self.0.shape.clone();
        let mut dst_shape = src_shape.clone();
        dst_shape.swap(a, b);
        let perm = permuted_copy(self.data(), &src_shape, a, b);
        let x = self.clone();
        Tensor::from_op(
            dst_shape.clone(),
            perm,
            vec![self.clone()],
            "swap_axes",
            move |dy| {
                // Swapping the same two axes of the gradient undoes the permutation.
                let back = permuted_copy(dy, &dst_shape, a, b);
                x.accumulate_grad(&back);
            },
        )
    }

    /// Rows `0..len` of batch entry `b` from a (B, R, C) tensor -> (len, C).
    pub fn slice_batch_rows(&self, b: usize, len: usize) -> Result<Tensor> {
        let sh = self.shape();
        if sh.len() != 3 {
            return Err(HydraError::Dimension(format!(
                "slice_batch_rows expects rank 3, got {:?}",
                sh
            )));
        }
        let (bs, rows, cols) = (sh[0], sh[1], sh[2]);
        if b >= bs || len > rows {
            return Err(HydraError::Dimension(format!(
                "slice_batch_rows: b={b} len={len} out of ({bs},{rows},{cols})"
            )));
        }
        let start = b * rows * cols;
        let data = self.data()[start..start + len * cols].to_vec();
        let x = self.clone();
        let total = self.numel();
        Tensor::from_op(
            vec![len, cols],
            data,
            vec![self.clone()],
            "slice_batch_rows",
            move |dy| {
                let mut dx = vec![0.0; total];
                dx[start..start + dy.len()].copy_from_slice(dy);
                x.accumulate_grad(&dx);
            },
        )
    }

    /// Linear layer over the last axis: weight (Out, In), bias (Out).
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let in_dim = *self.shape().last().ok_or_else(|| {
            HydraError::Dimension("linear on rank-0 tensor".to_string())
        })?;
        let wsh = weight.shape();
        if wsh.len() != 2 || wsh[1] != in_dim {
            return Err(HydraError::Dimension(format!(
                "linear: weight {:?} vs input {:?}",
                wsh,
                self.shape()
            )));
        }
        let out_dim = wsh[0];
        if bias.shape() != [out_dim] {
            return Err(HydraError::Dimension(format!(
                "linear: bias {:?} vs out dim {out_dim}",
                bias.shape()
            )));
        }
        let rows = self.numel() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        {
            let x = self.data();
            let w = weight.data();
            let bv = bias.data();
            for r in 0..rows {
                let xr = &x[r * in_dim..(r + 1) * in_dim];
                let or = &mut out[r * out_dim..(r + 1) * out_dim];
                for o in 0..out_dim {
                    let wr = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = bv[o];
                    for i in 0..in_dim {
                        acc += xr[i] * wr[i];
                    }
                    or[o] = acc;
                }
            }
        }
        let mut shape = self.0.shape.clone();
        *shape.last_mut().unwrap() = out_dim;
        let (x, w, b) = (self.clone(), weight.clone(), bias.clone());
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            "linear",
            move |dy| {
                let xd = x.data();
                let wd = w.data();
                if x.requires_grad() {
                    let mut dx = vec![0.0; xd.len()];
                    for r in 0..rows {
                        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
                        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let wr = &wd[o * in_dim..(o + 1) * in_dim];
                            let d = dyr[o];
                            for i in 0..in_dim {
                                dxr[i] += d * wr[i];
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if w.requires_grad() {
                    let mut dw = vec![0.0; wd.len()];
                    for r in 0..rows {
                        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
                        let xr = &xd[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let d = dyr[o];
                            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
                            for i in 0..in_dim {
                                dwr[i] += d * xr[i];
                            }
                        }
                    }
                    w.accumulate_grad(&dw);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; out_dim];
                    for r in 0..rows {
                        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
                        for o in 0..out_dim {
                            db[o] += dyr[o];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            },
        )
    }

    /// Batched matrix product: (..., m, k) x (..., k, n) with equal leading dims.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (self.shape(), rhs.shape());
        if ash.len() < 2 || bsh.len() != ash.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(HydraError::Dimension(format!(
                "matmul: {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(HydraError::Dimension(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let batch = numel_of(&ash[..ash.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bt in 0..batch {
                let ab = &a[bt * m * k..(bt + 1) * m * k];
                let bb = &b[bt * k * n..(bt + 1) * k * n];
                let ob = &mut out[bt * m * n..(bt + 1) * m * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = ab[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &bb[kk * n..(kk + 1) * n];
                        let orow = &mut ob[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
            }
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            "matmul",
            move |dy| {
                let ad = a.data();
                let bd = b.data();
                if a.requires_grad() {
                    // da = dy . b^T
                    let mut da = vec![0.0; ad.len()];
                    for bt in 0..batch {
                        let dyb = &dy[bt * m * n..(bt + 1) * m * n];
                        let bb = &bd[bt * k * n..(bt + 1) * k * n];
                        let dab = &mut da[bt * m * k..(bt + 1) * m * k];
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                let dyr = &dyb[i * n..(i + 1) * n];
                                let brow = &bb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    acc += dyr[j] * brow[j];
                                }
                                dab[i * k + kk] += acc;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // db = a^T . dy
                    let mut db = vec![0.0; bd.len()];
                    for bt in 0..batch {
                        let dyb = &dy[bt * m * n..(bt + 1) * m * n];
                        let ab = &ad[bt * m * k..(bt + 1) * m * k];
                        let dbb = &mut db[bt * k * n..(bt + 1) * k * n];
                        for i in 0..m {
                            let dyr = &dyb[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let av = ab[i * k + kk];
                                if av == 0.0 {
                                    continue;
                                }
                                let dbr = &mut dbb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    dbr[j] += av * dyr[j];
                                }
                            }
                        }
                    }
                    b.accumulate_grad(&db);
                }
            },
        )
    }

    /// Layer normalization over the last axis with learnable gain/offset.
    pub fn layer_norm(&self, gain: &Tensor, offset: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let d = *self.shape().last().ok_or_else(|| {
            HydraError::Dimension("layer_norm on rank-0 tensor".to_string())
        })?;
        if gain.shape() != [d] || offset.shape() != [d] {
            return Err(HydraError::Dimension(format!(
                "layer_norm: gain {:?} offset {:?} vs last dim {d}",
                gain.shape(),
                offset.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.data();
            let g = gain.data();
            let b = offset.data();
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mut mean = 0.0;
                for v in xr {
                    mean += v;
                }
                mean /= d as f64;
                let mut var = 0.0;
                for v in xr {
                    let c = v - mean;
                    var += c * c;
                }
                var /= d as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[r] = is;
                for i in 0..d {
                    let h = (xr[i] - mean) * is;
                    xhat[r * d + i] = h;
                    out[r * d + i] = h * g[i] + b[i];
                }
            }
        }
        let (x, g, b) = (self.clone(), gain.clone(), offset.clone());
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone(), gain.clone(), offset.clone()],
            "layer_norm",
            move |dy| {
                let gd = g.data();
                if x.requires_grad() {
                    let mut dx = vec![0.0; x.numel()];
                    let nd = d as f64;
                    for r in 0..rows {
                        let dyr = &dy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let is = inv_std[r];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for i in 0..d {
                            let dh = dyr[i] * gd[i];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[i];
                        }
                        for i in 0..d {
                            let dh = dyr[i] * gd[i];
                            dx[r * d + i] = is * (dh - sum_dh / nd - hr[i] * sum_dh_h / nd);
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if g.requires_grad() {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += dy[r * d + i] * xhat[r * d + i];
                        }
                    }
                    g.accumulate_grad(&dg);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += dy[r * d + i];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            },
        )
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            HydraError::Dimension("softmax on rank-0 tensor".to_string())
        })?;
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mut mx = f64::NEG_INFINITY;
                for v in xr {
                    mx = mx.max(*v);
                }
                let mut z = 0.0;
                for i in 0..d {
                    let e = (xr[i] - mx).exp();
                    out[r * d + i] = e;
                    z += e;
                }
                for i in 0..d {
                    out[r * d + i] /= z;
                }
            }
        }
        let x = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            "softmax",
            move |dy| {
                let mut dx = vec![0.0; dy.len()];
                for r in 0..rows {
                    let sr = &saved[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += dyr[i] * sr[i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = sr[i] * (dyr[i] - dot);
                    }
                }
                x.accumulate_grad(&dx);
            },
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            HydraError::Dimension("log_softmax on rank-0 tensor".to_string())
        })?;
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mut mx = f64::NEG_INFINITY;
                for v in xr {
                    mx = mx.max(*v);
                }
                let mut z = 0.0;
                for v in xr {
                    z += (v - mx).exp();
                }
                let lz = mx + z.ln();
                for i in 0..d {
                    out[r * d + i] = xr[i] - lz;
                }
            }
        }
        let x = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            "log_softmax",
            move |dy| {
                let mut dx = vec![0.0; dy.len()];
                for r in 0..rows {
                    let yr = &saved[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mut sum = 0.0;
                    for v in dyr {
                        sum += v;
                    }
                    for i in 0..d {
                        dx[r * d + i] = dyr[i] - yr[i].exp() * sum;
                    }
                }
                x.accumulate_grad(&dx);
            },
        )
    }
}

fn permuted_copy(data: &[f64], src_shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    let rank = src_shape.len();
    let mut dst_shape = src_shape.to_vec();
    dst_shape.swap(a, b);
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let mut dst_strides_in_src = src_strides.clone();
    dst_strides_in_src.swap(a, b);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for i in 0..rank {
            off += idx[i] * dst_strides_in_src[i];
        }
        *slot = data[off];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < dst_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::grad_check;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, data).unwrap()
    }

    #[test]
    fn relu_clamps_negative() {
        let x = t(&[3], vec![-2.0, 0.0, 1.5]);
        let y = x.relu().unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_before_gain_offset() {
        let x = t(&[1, 4], vec![3.0; 4]);
        let g = Tensor::constant(&[4], vec![1.0; 4]).unwrap();
        let b = Tensor::constant(&[4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&g, &b).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn softmax_rows_are_simplexes() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = x.softmax().unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 3..(r + 1) * 3];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = t(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = t(&[2], vec![1.0, 2.0]);
        let y = x.relu().unwrap();
        assert!(matches!(y.backward(), Err(HydraError::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let x = t(&[1], vec![1e308]);
        let y = x.mul(&x);
        assert!(matches!(y, Err(HydraError::NonFinite(_))));
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = t(&[2, 2], vec![1.0, 1.0, 2.0, 3.0]);
        let b = t(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0, 3.0, 2.0]);
    }

    #[test]
    fn swap_axes_round_trips() {
        let x = t(&[2, 3, 4], (0..24).map(|v| v as f64).collect());
        let y = x.swap_axes(1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        let z = y.swap_axes(1, 2).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn grad_check_linear_layer_norm_softmax_chain() {
        let leaves = vec![
            (vec![2, 5], vec![0.3, -0.2, 0.7, 1.1, -0.6, 0.05, 0.4, -1.2, 0.9, 0.25]),
            (vec![4, 5], (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.13).collect()),
            (vec![4], vec![0.1, -0.2, 0.05, 0.3]),
            (vec![4], vec![1.1, 0.9, 1.0, 1.05]),
            (vec![4], vec![0.0, 0.1, -0.1, 0.02]),
        ];
        let err = grad_check(
            |ts| {
                let h = ts[0].linear(&ts[1], &ts[2])?;
                let n = h.layer_norm(&ts[3], &ts[4])?;
                n.softmax()?.mul(&n)?.sum_all()
            },
            &leaves,
            64,
            7,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_composite_graph_with_remaining_ops() {
        // exercises matmul, swap_axes, reshape, slice_batch_rows, sub,
        // affine, log_softmax and embedding backward in one graph
        use crate::tensor::ops::embedding;
        let table: Vec<f64> = (0..12).map(|i| ((i * 11 % 13) as f64 - 6.0) * 0.15).collect();
        let a: Vec<f64> = (0..24).map(|i| ((i * 7 % 19) as f64 - 9.0) * 0.09).collect();
        let b: Vec<f64> = (0..24).map(|i| ((i * 5 % 17) as f64 - 8.0) * 0.12).collect();
        let leaves = vec![
            (vec![4, 3], table),
            (vec![2, 3, 4], a),
            (vec![2, 3, 4], b),
        ];
        let err = grad_check(
            |ts| {
                let emb = embedding(&[0, 2, 1, 3, 3, 0], &[2, 3], &ts[0])?; // (2,3,3)
                let prod = ts[1].matmul(&ts[2].swap_axes(1, 2)?)?; // (2,3,3)
                let mixed = prod.sub(&emb)?.affine(0.7, 0.1)?;
                let sliced = mixed.slice_batch_rows(1, 2)?; // (2,3)
                sliced.log_softmax()?.mul(&sliced)?.sum_all()
            },
            &leaves,
            64,
            23,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_constant_function_is_exact_zero() {
        let leaves = vec![(vec![3], vec![0.5, -1.0, 2.0])];
        let err = grad_check(|_ts| Tensor::scalar(4.2), &leaves, 8, 1).unwrap();
        assert_eq!(err, 0.0);
    }

    proptest! {
        #[test]
        fn prop_softmax_simplex(rows in 1usize..4, cols in 1usize..6, seed in 0u64..500) {
            let mut v = Vec::new();
            let mut s = seed;
            for _ in 0..rows * cols {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push(((s >> 33) as f64 / (1u64 << 31) as f64) * 8.0 - 4.0);
            }
            let x = Tensor::constant(&[rows, cols], v).unwrap();
            let y = x.softmax().unwrap();
            for r in 0..rows {
                let row = &y.data()[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }
}
