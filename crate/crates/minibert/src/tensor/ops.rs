//! Forward kernels and their adjoints. Every op validates shapes, computes
//! the forward result, and (when the tape is live and an input is tracked)
//! records a closure that pulls the upstream gradient and accumulates into
//! the inputs.

use rand::Rng;

use super::tape::Tape;
use super::{Dtype, Tensor};
use crate::error::{Error, Result};

/// Row index value marking a cross-entropy target as excluded from the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

fn matmul_raw<T: Dtype>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a[m,k] * b[n,k]^T -> [m,n]
fn matmul_nt_raw<T: Dtype>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// a[k,m]^T * b[k,n] -> [m,n]
fn matmul_tn_raw<T: Dtype>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<T: Dtype>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

impl<T: Dtype> Tape<T> {
    fn output(&self, tracked: bool, shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::result(shape, data, self.tracks(tracked))
    }

    /// Standard matrix product; adjoints dA = dC*B^T and dB = A^T*dC.
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: lhs {:?} vs rhs {:?}",
                    a.shape(),
                    b.shape()
                ),
            ));
        }
        let data = matmul_raw(&a.data(), &b.data(), m, k, n);
        let out = self.output(a.requires_grad() || b.requires_grad(), vec![m, n], data);
        if out.requires_grad() {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    let da = matmul_nt_raw(&up, &b.data(), m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db = matmul_tn_raw(&a.data(), &up, m, k, n);
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = x.dims2("transpose")?;
        let data = transpose_raw(&x.data(), r, c);
        let out = self.output(x.requires_grad(), vec![c, r], data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                x.accumulate_grad(&transpose_raw(&up, c, r));
            });
        }
        Ok(out)
    }

    /// Elementwise sum. `b` may also be a rank-1 tensor (or shape `[1, c]`)
    /// broadcast across the rows of a rank-2 `a`; its adjoint is then the
    /// column sum of the upstream gradient.
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let broadcast = a.shape() != b.shape();
        if broadcast {
            let (r, c) = a.dims2("add")?;
            let blen = b.len();
            if !(blen == c && (b.rank() == 1 || b.shape() == [1, c])) {
                return Err(Error::shape(
                    "add",
                    format!("cannot add shapes {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let mut data = a.to_vec();
            {
                let bd = b.data();
                for i in 0..r {
                    for j in 0..c {
                        data[i * c + j] += bd[j];
                    }
                }
            }
            let out = self.output(
                a.requires_grad() || b.requires_grad(),
                a.shape().to_vec(),
                data,
            );
            if out.requires_grad() {
                let (a, b, o) = (a.clone(), b.clone(), out.clone());
                self.record(move || {
                    let Some(up) = o.grad_snapshot() else { return };
                    if a.requires_grad() {
                        a.accumulate_grad(&up);
                    }
                    if b.requires_grad() {
                        let mut db = vec![T::zero(); c];
                        for i in 0..r {
                            for j in 0..c {
                                db[j] += up[i * c + j];
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                });
            }
            return Ok(out);
        }
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = self.output(
            a.requires_grad() || b.requires_grad(),
            a.shape().to_vec(),
            data,
        );
        if out.requires_grad() {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&up);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&up);
                }
            });
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "sub",
                format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = self.output(
            a.requires_grad() || b.requires_grad(),
            a.shape().to_vec(),
            data,
        );
        if out.requires_grad() {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&up);
                }
                if b.requires_grad() {
                    let neg: Vec<T> = up.iter().map(|&u| -u).collect();
                    b.accumulate_grad(&neg);
                }
            });
        }
        Ok(out)
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "mul",
                format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = self.output(
            a.requires_grad() || b.requires_grad(),
            a.shape().to_vec(),
            data,
        );
        if out.requires_grad() {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                if a.requires_grad() {
                    let da: Vec<T> = up
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&u, &y)| u * y)
                        .collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<T> = up
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&u, &x)| u * x)
                        .collect();
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
        let kk = T::c(k);
        let data: Vec<T> = x.data().iter().map(|&v| v * kk).collect();
        let out = self.output(x.requires_grad(), x.shape().to_vec(), data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let dx: Vec<T> = up.iter().map(|&u| u * kk).collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Multiply every element by a single-element tensor (both sides get
    /// gradients). Used for learned scalar mixing.
    pub fn mul_by_scalar(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.len() != 1 {
            return Err(Error::shape(
                "mul_by_scalar",
                format!("scale must be a single element, got {:?}", s.shape()),
            ));
        }
        let sv = s.data()[0];
        let data: Vec<T> = x.data().iter().map(|&v| v * sv).collect();
        let out = self.output(
            x.requires_grad() || s.requires_grad(),
            x.shape().to_vec(),
            data,
        );
        if out.requires_grad() {
            let (x, s, o) = (x.clone(), s.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                if x.requires_grad() {
                    let dx: Vec<T> = up.iter().map(|&u| u * sv).collect();
                    x.accumulate_grad(&dx);
                }
                if s.requires_grad() {
                    let mut ds = T::zero();
                    for (&u, &v) in up.iter().zip(x.data().iter()) {
                        ds += u * v;
                    }
                    s.accumulate_grad(&[ds]);
                }
            });
        }
        Ok(out)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in x.data().iter() {
            acc += v;
        }
        let out = self.output(x.requires_grad(), vec![], vec![acc]);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let dx = vec![up[0]; x.len()];
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Select rows of a rank-2 tensor. Duplicate indices are allowed; the
    /// adjoint scatter-adds in record order.
    pub fn gather_rows(&self, x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
        let (r, c) = x.dims2("gather_rows")?;
        for &i in idx {
            if i >= r {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row index {} out of range for {} rows", i, r),
                ));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        {
            let xd = x.data();
            for &i in idx {
                data.extend_from_slice(&xd[i * c..(i + 1) * c]);
            }
        }
        let out = self.output(x.requires_grad(), vec![idx.len(), c], data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            let idx = idx.to_vec();
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let mut dx = vec![T::zero(); x.len()];
                for (r_out, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += up[r_out * c + j];
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Single row of a rank-2 tensor as `[1, cols]`.
    pub fn row(&self, x: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
        self.gather_rows(x, &[i])
    }

    pub fn slice_cols(&self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, c) = x.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {}..{} out of range for width {}", start, start + len, c),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        {
            let xd = x.data();
            for i in 0..r {
                data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
            }
        }
        let out = self.output(x.requires_grad(), vec![r, len], data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let mut dx = vec![T::zero(); x.len()];
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] += up[i * len + j];
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    pub fn concat_cols(&self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no tensors given".to_string()));
        }
        let (r, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", r, pr),
                ));
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                let pd = p.data();
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|p| p.requires_grad());
        let out = self.output(tracked, vec![r, total], data);
        if out.requires_grad() {
            let parts: Vec<Tensor<T>> = parts.to_vec();
            let o = out.clone();
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let mut start = 0;
                for p in &parts {
                    let w = p.shape()[1];
                    if p.requires_grad() {
                        let mut dp = vec![T::zero(); r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&up[i * total + start..i * total + start + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    start += w;
                }
            });
        }
        Ok(out)
    }

    pub fn concat_rows(&self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no tensors given".to_string()));
        }
        let (_, c) = parts[0].dims2("concat_rows")?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", c, pc),
                ));
            }
            total += pr;
        }
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let tracked = parts.iter().any(|p| p.requires_grad());
        let out = self.output(tracked, vec![total, c], data);
        if out.requires_grad() {
            let parts: Vec<Tensor<T>> = parts.to_vec();
            let o = out.clone();
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let mut start = 0;
                for p in &parts {
                    let n = p.len();
                    if p.requires_grad() {
                        p.accumulate_grad(&up[start..start + n]);
                    }
                    start += n;
                }
            });
        }
        Ok(out)
    }

    pub fn reshape(&self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", x.shape(), shape),
            ));
        }
        let out = self.output(x.requires_grad(), shape, x.to_vec());
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                x.accumulate_grad(&up);
            });
        }
        Ok(out)
    }

    /// Softmax along `axis`, computed with max subtraction so it is shift
    /// invariant. `-inf` entries are mask sentinels and map to exactly 0.
    /// A lane that is entirely `-inf` is a degenerate distribution and errors.
    pub fn softmax(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let axis_len = if shape.is_empty() { 1 } else { shape[axis] };
        let inner: usize = shape[axis + 1.min(shape.len())..].iter().product();
        let inner = if shape.is_empty() { 1 } else { inner };
        let outer = x.len() / (axis_len * inner).max(1);
        let mut data = x.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = T::neg_inf();
                for k in 0..axis_len {
                    mx = mx.maximum(data[base + k * inner]);
                }
                if mx == T::neg_inf() {
                    return Err(Error::DegenerateSoftmax { row: o * inner + i });
                }
                let mut denom = T::zero();
                for k in 0..axis_len {
                    let e = (data[base + k * inner] - mx).exp();
                    data[base + k * inner] = e;
                    denom += e;
                }
                for k in 0..axis_len {
                    let idx = base + k * inner;
                    data[idx] = data[idx] / denom;
                }
            }
        }
        let out = self.output(x.requires_grad(), shape, data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let probs = o.data();
                let mut dx = vec![T::zero(); x.len()];
                for ob in 0..outer {
                    for i in 0..inner {
                        let base = ob * axis_len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dot += up[idx] * probs[idx];
                        }
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dx[idx] = probs[idx] * (up[idx] - dot);
                        }
                    }
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Exact Gaussian error linear unit, x * Phi(x), via erf.
    pub fn gelu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inv_sqrt2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::c(0.5);
        let data: Vec<T> = x
            .data()
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let out = self.output(x.requires_grad(), x.shape().to_vec(), data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let inv_sqrt_2pi = T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let dx: Vec<T> = x
                    .data()
                    .iter()
                    .zip(up.iter())
                    .map(|(&v, &u)| {
                        let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                        u * (phi_cdf + v * pdf)
                    })
                    .collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data: Vec<T> = x
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let out = self.output(x.requires_grad(), x.shape().to_vec(), data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let y = o.data();
                let dx: Vec<T> = y
                    .iter()
                    .zip(up.iter())
                    .map(|(&yv, &u)| u * yv * (T::one() - yv))
                    .collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    pub fn tanh_act(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data: Vec<T> = x.data().iter().map(|&v| v.tanh()).collect();
        let out = self.output(x.requires_grad(), x.shape().to_vec(), data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let y = o.data();
                let dx: Vec<T> = y
                    .iter()
                    .zip(up.iter())
                    .map(|(&yv, &u)| u * (T::one() - yv * yv))
                    .collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Per-position normalization over the last dimension, then affine.
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let h = *x.shape().last().ok_or_else(|| {
            Error::shape("layer_norm", "input must have at least one dimension".to_string())
        })?;
        if h == 0 {
            return Err(Error::shape("layer_norm", "last dimension is zero".to_string()));
        }
        if gain.len() != h || bias.len() != h {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain/bias must have length {}, got {} and {}",
                    h,
                    gain.len(),
                    bias.len()
                ),
            ));
        }
        let rows = x.len() / h;
        let inv_h = T::c(1.0 / h as f64);
        let epst = T::c(eps);
        let mut data = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        {
            let xd = x.data();
            let g = gain.data();
            let b = bias.data();
            for r in 0..rows {
                let src = &xd[r * h..(r + 1) * h];
                let mut mean = T::zero();
                for &v in src {
                    mean += v;
                }
                mean = mean * inv_h;
                let mut var = T::zero();
                for &v in src {
                    let d = v - mean;
                    var += d * d;
                }
                var = var * inv_h;
                let inv = T::one() / (var + epst).sqrt();
                inv_std[r] = inv;
                for j in 0..h {
                    let xh = (src[j] - mean) * inv;
                    xhat[r * h + j] = xh;
                    data[r * h + j] = xh * g[j] + b[j];
                }
            }
        }
        let tracked = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let out = self.output(tracked, x.shape().to_vec(), data);
        if out.requires_grad() {
            let (x, gain, bias, o) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let g = gain.data().clone();
                if x.requires_grad() {
                    let mut dx = vec![T::zero(); x.len()];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..h {
                            let dxh = up[r * h + j] * g[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * h + j];
                        }
                        m1 = m1 * inv_h;
                        m2 = m2 * inv_h;
                        for j in 0..h {
                            let dxh = up[r * h + j] * g[j];
                            dx[r * h + j] = (dxh - m1 - xhat[r * h + j] * m2) * inv_std[r];
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if gain.requires_grad() {
                    let mut dg = vec![T::zero(); h];
                    for r in 0..rows {
                        for j in 0..h {
                            dg[j] += up[r * h + j] * xhat[r * h + j];
                        }
                    }
                    gain.accumulate_grad(&dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![T::zero(); h];
                    for r in 0..rows {
                        for j in 0..h {
                            db[j] += up[r * h + j];
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Mean negative log-softmax over the non-ignored rows of `logits`.
    /// Rows whose target equals [`IGNORE_INDEX`] contribute nothing to the
    /// value or the gradient. Errors when every row is ignored.
    pub fn cross_entropy(
        &self,
        logits: &Tensor<T>,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Tensor<T>> {
        let (n, v) = logits.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows but {} targets", n, targets.len()),
            ));
        }
        let mut count = 0usize;
        for &t in targets {
            if t == ignore_index {
                continue;
            }
            if t >= v {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {} out of range for {} classes", t, v),
                ));
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllTargetsIgnored);
        }
        let mut total = T::zero();
        {
            let ld = logits.data();
            for (r, &t) in targets.iter().enumerate() {
                if t == ignore_index {
                    continue;
                }
                let row = &ld[r * v..(r + 1) * v];
                let mut mx = T::neg_inf();
                for &x in row {
                    mx = mx.maximum(x);
                }
                let mut denom = T::zero();
                for &x in row {
                    denom += (x - mx).exp();
                }
                total += mx + denom.ln() - row[t];
            }
        }
        let inv_count = T::c(1.0 / count as f64);
        let out = self.output(logits.requires_grad(), vec![], vec![total * inv_count]);
        if out.requires_grad() {
            let (l, o) = (logits.clone(), out.clone());
            let targets = targets.to_vec();
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let scale = up[0] * inv_count;
                let ld = l.data().clone();
                let mut dl = vec![T::zero(); l.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == ignore_index {
                        continue;
                    }
                    let row = &ld[r * v..(r + 1) * v];
                    let mut mx = T::neg_inf();
                    for &x in row {
                        mx = mx.maximum(x);
                    }
                    let mut denom = T::zero();
                    for &x in row {
                        denom += (x - mx).exp();
                    }
                    for j in 0..v {
                        let p = (row[j] - mx).exp() / denom;
                        let ind = if j == t { T::one() } else { T::zero() };
                        dl[r * v + j] = (p - ind) * scale;
                    }
                }
                l.accumulate_grad(&dl);
            });
        }
        Ok(out)
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by 1/(1-p); in inference it is identity.
    pub fn dropout<R: Rng>(
        &self,
        x: &Tensor<T>,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::shape(
                "dropout",
                format!("p must be in [0, 1), got {}", p),
            ));
        }
        if !training || p == 0.0 {
            // Identity, but still a distinct node so later in-place parameter
            // updates cannot alias through it.
            return self.scale(x, 1.0);
        }
        let keep_scale = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<T> = x
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let out = self.output(x.requires_grad(), x.shape().to_vec(), data);
        if out.requires_grad() {
            let (x, o) = (x.clone(), out.clone());
            self.record(move || {
                let Some(up) = o.grad_snapshot() else { return };
                let dx: Vec<T> = up.iter().zip(mask.iter()).map(|(&u, &m)| u * m).collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }
}
