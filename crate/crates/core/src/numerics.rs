//! Dense row-major tensors and the handful of kernels the model forward pass needs.
//!
//! Every reduction runs in a fixed sequential order, so the same input always yields
//! bit-identical output on every platform. Matrix products accumulate each output
//! element over the inner dimension in ascending order starting from zero, which makes
//! the blocked kernel bit-identical to the textbook triple loop.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for inference, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid tensor shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor.
    ///
    /// # Panics
    ///
    /// Panics if any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Square identity matrix.
    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!("expected rank 3, got shape {:?}", self.shape))),
        }
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Element-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + scale * b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(other, T::one())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

const KC: usize = 256;

/// Matrix operand view: `rows x cols` with row stride `ld`.
#[derive(Clone, Copy)]
struct MatRef<'a, T> {
    data: &'a [T],
    ld: usize,
}

/// `c += a * b` for an `m x k` by `k x n` product.
///
/// Each `c[i][j]` is updated with `a[i][p] * b[p][j]` for `p = 0..k` in order, so with a
/// zeroed `c` the result equals the naive loop bit for bit.
#[inline(always)]
fn gemm_body<T: Scalar, const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
) {
    let mut panel = vec![T::zero(); KC * NR];
    let full_tiles = m / MR;
    let mut apack = vec![T::zero(); full_tiles * KC * MR];
    for kb in (0..k).step_by(KC) {
        let ke = (kb + KC).min(k);
        // A tiles laid out `[tile][p][r]` so each step reads MR contiguous values.
        for tile in 0..full_tiles {
            for p in kb..ke {
                for r in 0..MR {
                    apack[(tile * KC + p - kb) * MR + r] = a.data[(tile * MR + r) * a.ld + p];
                }
            }
        }
        for jb in (0..n).step_by(NR) {
            let nr = (n - jb).min(NR);
            if nr == NR {
                // Contiguous copy of the B panel so the inner loop streams from L1/L2.
                for p in kb..ke {
                    panel[(p - kb) * NR..(p - kb + 1) * NR].copy_from_slice(&b.data[p * b.ld + jb..p * b.ld + jb + NR]);
                }
            }
            let mut i = 0;
            while i < m {
                let mr = (m - i).min(MR);
                if mr == MR && nr == NR {
                    let mut acc = [[T::zero(); NR]; MR];
                    for (r, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&c[(i + r) * ldc + jb..(i + r) * ldc + jb + NR]);
                    }
                    let tile = i / MR;
                    for p in 0..ke - kb {
                        let brow: &[T; NR] = panel[p * NR..(p + 1) * NR].try_into().unwrap();
                        let acol: &[T; MR] = apack[(tile * KC + p) * MR..(tile * KC + p + 1) * MR].try_into().unwrap();
                        for (row, &av) in acc.iter_mut().zip(acol) {
                            for j in 0..NR {
                                row[j] = row[j] + av * brow[j];
                            }
                        }
                    }
                    for (r, row) in acc.iter().enumerate() {
                        c[(i + r) * ldc + jb..(i + r) * ldc + jb + NR].copy_from_slice(row);
                    }
                } else {
                    for r in 0..mr {
                        let crow = &mut c[(i + r) * ldc + jb..(i + r) * ldc + jb + nr];
                        for p in kb..ke {
                            let av = a.data[(i + r) * a.ld + p];
                            let brow = &b.data[p * b.ld + jb..p * b.ld + jb + nr];
                            for (cv, &bv) in crow.iter_mut().zip(brow) {
                                *cv = *cv + av * bv;
                            }
                        }
                    }
                }
                i += MR;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
) {
    gemm_body::<T, 8, 32>(m, k, n, a, b, c, ldc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_avx<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
) {
    gemm_body::<T, 4, 16>(m, k, n, a, b, c, ldc)
}

// Register width and tile shape only change how many outputs are computed at once, never
// the per-element operation order (no fused multiply-add is emitted), so every path
// agrees bit for bit.
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F, checked just above.
            unsafe { gemm_avx512(m, k, n, a, b, c, ldc) };
            return;
        }
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: the CPU supports AVX, checked just above.
            unsafe { gemm_avx(m, k, n, a, b, c, ldc) };
            return;
        }
    }
    gemm_body::<T, 4, 16>(m, k, n, a, b, c, ldc)
}

/// Matrix product of `M x K` and `K x N` tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims differ: {m}x{k} * {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, MatRef { data: &a.data, ld: k }, MatRef { data: &b.data, ld: n }, &mut out, n);
    Tensor::new(vec![m, n], out)
}

/// `x * w + bias` where `w` is stored `in x out`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if let Some(bias) = bias {
        let (_, n) = y.dims2()?;
        if bias.len() != n {
            return Err(Error::shape(format!("bias length {} != {n}", bias.len())));
        }
        for row in y.data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
    }
    Ok(y)
}

/// Numerically stable softmax of every row.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// 3x3 cross-correlation with zero padding 1 and stride 1 (`C x H x W` -> `O x H x W`).
pub fn conv2d_3x3<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let (c, h, wd) = x.dims3()?;
    let (o, wc, kh, kw) = match w.shape[..] {
        [o, wc, kh, kw] => (o, wc, kh, kw),
        _ => return Err(Error::shape(format!("conv weight must be rank 4, got {:?}", w.shape))),
    };
    if (kh, kw) != (3, 3) {
        return Err(Error::shape(format!("conv kernel must be 3x3, got {kh}x{kw}")));
    }
    if wc != c {
        return Err(Error::shape(format!("conv expects {wc} input channels, got {c}")));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::shape(format!("conv bias length {} != {o}", b.len())));
        }
    }
    let kdim = c * 9;
    let hw = h * wd;
    let mut out = vec![T::zero(); o * hw];
    // Unfold a band of output rows at a time to bound the scratch buffer.
    let rows_per_chunk = ((1 << 22) / (kdim * wd)).clamp(1, h);
    let mut cols = vec![T::zero(); kdim * rows_per_chunk * wd];
    for y0 in (0..h).step_by(rows_per_chunk) {
        let y1 = (y0 + rows_per_chunk).min(h);
        let npix = (y1 - y0) * wd;
        for ci in 0..c {
            let plane = &x.data[ci * hw..(ci + 1) * hw];
            for dy in 0..3 {
                for dx in 0..3 {
                    let krow = (ci * 9 + dy * 3 + dx) * npix;
                    for y in y0..y1 {
                        let dst = &mut cols[krow + (y - y0) * wd..krow + (y - y0 + 1) * wd];
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                        for (xx, d) in dst.iter_mut().enumerate() {
                            let sx = xx as isize + dx as isize - 1;
                            *d = if sx < 0 || sx >= wd as isize { T::zero() } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
        gemm(
            o,
            kdim,
            npix,
            MatRef { data: &w.data, ld: kdim },
            MatRef { data: &cols, ld: npix },
            &mut out[y0 * wd..],
            hw,
        );
    }
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(hw).zip(b) {
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::new(vec![o, h, wd], out)
}

/// Per-channel 1-D convolution over time with "same" padding (`T x D`, kernel `D x K`).
pub fn depthwise_conv1d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let (t, d) = x.dims2()?;
    let (kd, k) = kernel.dims2()?;
    if kd != d {
        return Err(Error::shape(format!("depthwise kernel has {kd} channels, input has {d}")));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!("depthwise kernel size {k} is even and cannot be centred")));
    }
    let pad = k / 2;
    let mut out = vec![T::zero(); t * d];
    for ti in 0..t {
        for ch in 0..d {
            let taps = &kernel.data[ch * k..(ch + 1) * k];
            let mut acc = T::zero();
            for (j, &w) in taps.iter().enumerate() {
                let src = ti as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    acc = acc + w * x.data[src as usize * d + ch];
                }
            }
            out[ti * d + ch] = acc + bias.map_or(T::zero(), |b| b[ch]);
        }
    }
    Tensor::new(vec![t, d], out)
}

/// 2x2 mean pooling with stride 2; trailing odd rows/columns average what is present.
pub fn avgpool2d_stride2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x.data[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = T::zero();
                let mut count = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        sum = sum + plane[y * w + xx];
                        count += 1;
                    }
                }
                out[(ci * oh + oy) * ow + ox] = sum / T::from(count).unwrap();
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Inference-mode affine normalisation statistics, one entry per normalised feature.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Which axis of the tensor carries the normalised feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxis {
    /// Axis 0, e.g. channels of a `C x H x W` map.
    Leading,
    /// Last axis, e.g. features of a `T x D` sequence.
    Trailing,
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn norm_infer<T: Scalar>(
    x: &Tensor<T>,
    p: &NormParams<T>,
    eps: T,
    axis: NormAxis,
) -> Result<Tensor<T>> {
    let features = match axis {
        NormAxis::Leading => x.shape[0],
        NormAxis::Trailing => *x.shape.last().unwrap(),
    };
    for (name, v) in [("gamma", &p.gamma), ("beta", &p.beta), ("mean", &p.mean), ("var", &p.var)] {
        if v.len() != features {
            return Err(Error::shape(format!("norm {name} has {} entries, expected {features}", v.len())));
        }
    }
    if eps < T::zero() {
        return Err(Error::invalid("norm eps must be non-negative"));
    }
    if p.var.iter().any(|&v| v < T::zero() || v + eps <= T::zero()) {
        return Err(Error::invalid("norm variance must be non-negative with var + eps > 0"));
    }
    let scale: Vec<T> = p.var.iter().zip(&p.gamma).map(|(&v, &g)| g / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    match axis {
        NormAxis::Leading => {
            let inner = x.len() / features;
            for (f, chunk) in out.data.chunks_mut(inner).enumerate() {
                for v in chunk {
                    *v = (*v - p.mean[f]) * scale[f] + p.beta[f];
                }
            }
        }
        NormAxis::Trailing => {
            for row in out.data.chunks_mut(features) {
                for (f, v) in row.iter_mut().enumerate() {
                    *v = (*v - p.mean[f]) * scale[f] + p.beta[f];
                }
            }
        }
    }
    Ok(out)
}

/// Layer normalisation of every row of a `T x D` tensor with per-row statistics.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (_, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!("layer norm params must have length {d}")));
    }
    let dn = T::from(d).unwrap();
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
        let inv = T::one() / (var + eps).sqrt();
        for (f, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[f] + beta[f];
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(v: T) -> T {
    v.max(T::zero())
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`.
pub fn swish<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

/// Gated linear unit over the last axis: first half times sigmoid of the second half.
pub fn glu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (t, d2) = x.dims2()?;
    if d2 % 2 != 0 {
        return Err(Error::shape(format!("glu needs an even feature count, got {d2}")));
    }
    let d = d2 / 2;
    let mut out = vec![T::zero(); t * d];
    for (o, row) in out.chunks_mut(d).zip(x.data.chunks(d2)) {
        for j in 0..d {
            o[j] = row[j] * sigmoid(row[d + j]);
        }
    }
    Tensor::new(vec![t, d], out)
}
