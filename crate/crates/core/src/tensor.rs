//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autograd graph and the plain forward paths.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
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

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Element `[i, j]` of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Bit-level SHA-256 over shape and values.
    pub fn checksum_into(&self, hasher: &mut Sha256) {
        for d in &self.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = a[m,n] * b[k,n]^T`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * b[m,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `o` along one axis for which `o*stride + k - pad`
    /// lands inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        // o*s + k - p <= len - 1  =>  o <= (len - 1 + p - k) / s
        let hi = if len + p > k {
            ((len - 1 + p - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k, s) = (g.height, g.width, g.kernel, g.stride);
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for oc in 0..g.out_channels {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[oc]);
        }
        for ic in 0..g.in_channels {
            let xin = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..k {
                    let wv = w[((oc * g.in_channels + ic) * k + ky) * k + kx];
                    let (x0, x1) = g.valid_range(kx, wd, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * wd..(iy + 1) * wd];
                        for ox in x0..x1 {
                            orow[ox] += wv * irow[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input(gout: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k, s) = (g.height, g.width, g.kernel, g.stride);
    let mut gx = vec![0.0; g.in_channels * h * wd];
    for oc in 0..g.out_channels {
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..g.in_channels {
            let gin = &mut gx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..k {
                    let wv = w[((oc * g.in_channels + ic) * k + ky) * k + kx];
                    let (x0, x1) = g.valid_range(kx, wd, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &mut gin[iy * wd..(iy + 1) * wd];
                        for ox in x0..x1 {
                            irow[ox * s + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Returns `(grad_weight, grad_bias)`.
pub fn conv2d_backward_params(gout: &[f64], x: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k, s) = (g.height, g.width, g.kernel, g.stride);
    let mut gw = vec![0.0; g.out_channels * g.in_channels * k * k];
    let mut gb = vec![0.0; g.out_channels];
    for oc in 0..g.out_channels {
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] = gplane.iter().sum();
        for ic in 0..g.in_channels {
            let xin = &x[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..k {
                    let (x0, x1) = g.valid_range(kx, wd, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &xin[iy * wd..(iy + 1) * wd];
                        for ox in x0..x1 {
                            acc += grow[ox] * irow[ox * s + kx - g.pad];
                        }
                    }
                    gw[((oc * g.in_channels + ic) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    (gw, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    /// Half-pixel-centre bilinear interpolation (`align_corners = false`).
    Bilinear,
}

/// A fixed linear map from an `in_h x in_w` plane to an `out_h x out_w`
/// plane, stored as sparse `(out, in, weight)` triples.
#[derive(Clone, Debug)]
pub struct ResampleMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    entries: Vec<(u32, u32, f64)>,
}

fn axis_weights(mode: ResampleMode, in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = ((o as f64 * scale).floor() as usize).min(in_len - 1);
                vec![(i, 1.0)]
            }
            ResampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - frac), (i1, frac)]
                }
            }
        })
        .collect()
}

impl ResampleMap {
    pub fn new(mode: ResampleMode, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let wy = axis_weights(mode, in_h, out_h);
        let wx = axis_weights(mode, in_w, out_w);
        let mut entries = Vec::with_capacity(out_h * out_w * 4);
        for (oy, ys) in wy.iter().enumerate() {
            for (ox, xs) in wx.iter().enumerate() {
                let o = (oy * out_w + ox) as u32;
                for &(iy, a) in ys {
                    for &(ix, b) in xs {
                        entries.push((o, (iy * in_w + ix) as u32, a * b));
                    }
                }
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            entries,
        }
    }

    /// Applies the map to every plane of a `[channels, in_h, in_w]` buffer.
    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![0.0; channels * op];
        for c in 0..channels {
            let src = &x[c * ip..(c + 1) * ip];
            let dst = &mut out[c * op..(c + 1) * op];
            for &(o, i, w) in &self.entries {
                dst[o as usize] += w * src[i as usize];
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &[f64], channels: usize) -> Vec<f64> {
        let (ip, op) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![0.0; channels * ip];
        for c in 0..channels {
            let src = &g[c * op..(c + 1) * op];
            let dst = &mut out[c * ip..(c + 1) * ip];
            for &(o, i, w) in &self.entries {
                dst[i as usize] += w * src[o as usize];
            }
        }
        out
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over each row of a `[rows, cols]` buffer.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += w[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx]
                                    * x[(ic * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(h, w, k, s, p) in &[(7, 5, 3, 2, 1), (8, 8, 3, 1, 1), (4, 6, 1, 1, 0), (1, 1, 3, 2, 1)] {
            let g = ConvGeometry {
                in_channels: 2,
                out_channels: 3,
                height: h,
                width: w,
                kernel: k,
                stride: s,
                pad: p,
            };
            let x = Tensor::randn(&[2 * h * w], 1.0, &mut rng);
            let wt = Tensor::randn(&[3 * 2 * k * k], 1.0, &mut rng);
            let b = [0.1, -0.2, 0.3];
            let fast = conv2d(x.data(), wt.data(), Some(&b), &g);
            let slow = naive_conv(x.data(), wt.data(), &b, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        for h in 1..20 {
            let g = ConvGeometry {
                in_channels: 1,
                out_channels: 1,
                height: h,
                width: h,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            assert_eq!(g.out_height(), h.div_ceil(2));
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let map = ResampleMap::new(ResampleMode::Bilinear, 3, 5, 12, 20);
        let out = map.apply(&[2.5; 15], 1);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        let bt = transpose(&b, 3, 2);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), c);
    }
}
