//! Dense row-major `f64` tensors and the forward kernels shared by the
//! tape and the plain (tape-free) reference paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this input `softplus(x)` is returned as `x`.
pub const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row-major strides; the last axis has stride 1.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Two-dimensional transpose.
    pub fn transpose(&self) -> Result<Self> {
        let [rows, cols] = self.dims2()?;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data: out,
        })
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Dimension(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Matrix product of `[m,k] x [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let [k, m] = [a.shape[0], a.shape[1]];
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a · bᵀ` without materializing the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let [m, k] = [a.shape[0], a.shape[1]];
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_ABOVE {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Numerically stable softmax of a non-empty vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    let max = x
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Dimension("softmax of an empty vector".into()))?;
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Same-size depthwise 3D cross-correlation with zero padding.
///
/// `x` is `[d,T,H,W]`, `kernel` is `[d,kt,kh,kw]` with odd extents. Output
/// channel `c` reads only input channel `c`.
pub fn conv3d_depthwise(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let geom = ConvGeometry::new(x, kernel)?;
    let mut out = Tensor::zeros(x.shape());
    geom.for_each_tap(|x_off, y_off, k_off, run| {
        let w = kernel.data[k_off];
        if w == 0.0 {
            return;
        }
        let src = &x.data[x_off..x_off + run];
        let dst = &mut out.data[y_off..y_off + run];
        for (o, v) in dst.iter_mut().zip(src) {
            *o += w * v;
        }
    });
    Ok(out)
}

/// Adjoints of [`conv3d_depthwise`] with respect to input and kernel.
pub fn conv3d_depthwise_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let geom = ConvGeometry::new(x, kernel)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    geom.for_each_tap(|x_off, y_off, k_off, run| {
        let w = kernel.data[k_off];
        let g = &grad_out.data[y_off..y_off + run];
        let xs = &x.data[x_off..x_off + run];
        let mut acc = 0.0;
        for (gv, xv) in g.iter().zip(xs) {
            acc += gv * xv;
        }
        gk.data[k_off] += acc;
        let dst = &mut gx.data[x_off..x_off + run];
        for (o, gv) in dst.iter_mut().zip(g) {
            *o += w * gv;
        }
    });
    Ok((gx, gk))
}

struct ConvGeometry {
    dims: [usize; 4],
    kdims: [usize; 3],
}

impl ConvGeometry {
    fn new(x: &Tensor, kernel: &Tensor) -> Result<Self> {
        let dims = x.dims4()?;
        let [kd, kt, kh, kw] = kernel.dims4()?;
        if kd != dims[0] {
            return Err(Error::Dimension(format!(
                "depthwise kernel has {kd} channels, input has {}",
                dims[0]
            )));
        }
        if [kt, kh, kw].iter().any(|&e| e % 2 == 0) {
            return Err(Error::Config(format!(
                "depthwise kernel extents must be odd, got ({kt},{kh},{kw})"
            )));
        }
        Ok(Self {
            dims,
            kdims: [kt, kh, kw],
        })
    }

    /// Visits every (channel, tap, output row) with the contiguous run of
    /// valid `w` positions: callback gets input offset, output offset,
    /// kernel offset and run length.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [d, t_len, h_len, w_len] = self.dims;
        let [kt, kh, kw] = self.kdims;
        let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        for c in 0..d {
            for a in 0..kt {
                let dt = a as isize - pt;
                for b in 0..kh {
                    let dh = b as isize - ph;
                    for e in 0..kw {
                        let dw = e as isize - pw;
                        let k_off = ((c * kt + a) * kh + b) * kw + e;
                        // output w range such that w + dw in [0, w_len)
                        let w_lo = (-dw).max(0) as usize;
                        let w_hi = (w_len as isize - dw).min(w_len as isize);
                        if w_hi <= w_lo as isize {
                            continue;
                        }
                        let run = w_hi as usize - w_lo;
                        for t in 0..t_len {
                            let ts = t as isize + dt;
                            if ts < 0 || ts >= t_len as isize {
                                continue;
                            }
                            for h in 0..h_len {
                                let hs = h as isize + dh;
                                if hs < 0 || hs >= h_len as isize {
                                    continue;
                                }
                                let y_off = ((c * t_len + t) * h_len + h) * w_len + w_lo;
                                let x_off = ((c * t_len + ts as usize) * h_len + hs as usize)
                                    * w_len
                                    + (w_lo as isize + dw) as usize;
                                f(x_off, y_off, k_off, run);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Mean of `x` along `axis`, counting only positions where `mask` is true.
pub fn masked_mean(x: &Tensor, axis: usize, mask: &[bool]) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if mask.len() != x.shape[axis] {
        return Err(Error::Dimension(format!(
            "mask length {} does not match axis extent {}",
            mask.len(),
            x.shape[axis]
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyReduction("mask selects no positions".into()));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let n = x.shape[axis];
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let src = &x.data[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}
