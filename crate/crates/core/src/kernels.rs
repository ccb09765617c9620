//! Loop kernels behind the differentiable ops.
//!
//! Every kernel accumulates each output element in a fixed order starting
//! from zero, with out-of-bounds taps skipped. Convolution accumulates over
//! (input channel, ky, kx), so a depthwise filter and a one-input-channel
//! `conv2d` produce bitwise-identical planes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(K - 1) / 2`; requires odd `K`.
    Same,
    Valid,
}

/// Resolved shapes of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for input `N×C×H×W` and kernel `O×C×KH×KW`.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OIKK kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (batch, in_ch, h, w) = (input[0], input[1], input[2], input[3]);
        let (out_ch, kin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kin != in_ch {
            return Err(Error::shape(format!("conv2d kernel expects {kin} input channels, input has {in_ch}")));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::config(format!("`same` padding needs an odd kernel, got {kh}x{kw}")));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::shape(format!("kernel {kh}x{kw} larger than input {h}x{w}")));
        }
        let oh = (h + 2 * pad_h - kh) / stride + 1;
        let ow = (w + 2 * pad_w - kw) / stride + 1;
        Ok(ConvGeom { batch, in_ch, h, w, out_ch, kh, kw, stride, pad_h, pad_w, oh, ow })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.oh, self.ow]
    }

    /// Range of output columns whose tap `kx` lands inside the input row.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad_w > kx { (self.pad_w - kx).div_ceil(self.stride) } else { 0 };
        let last = self.w + self.pad_w - 1;
        let hi = if last < kx { 0 } else { ((last - kx) / self.stride + 1).min(self.ow) };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.pad_h && iy - self.pad_h < self.h).then(|| iy - self.pad_h)
    }
}

/// `out += plane ⋆ kernel` for one (output, input) channel pair.
#[inline]
fn correlate_plane<T: Scalar>(out: &mut [T], plane: &[T], kernel: &[T], g: &ConvGeom) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = kernel[ky * g.kw + kx];
            let (lo, hi) = g.ox_range(kx);
            if lo >= hi {
                continue;
            }
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let out_row = &mut out[oy * g.ow + lo..oy * g.ow + hi];
                let in_row = &plane[iy * g.w..(iy + 1) * g.w];
                let start = lo * g.stride + kx - g.pad_w;
                if g.stride == 1 {
                    for (o, &x) in out_row.iter_mut().zip(&in_row[start..start + (hi - lo)]) {
                        *o += wv * x;
                    }
                } else {
                    for (j, o) in out_row.iter_mut().enumerate() {
                        *o += wv * in_row[start + j * g.stride];
                    }
                }
            }
        }
    }
}

/// `grad_plane += grad_out ⋆ᵀ kernel` (input gradient of `correlate_plane`).
#[inline]
fn correlate_plane_input_grad<T: Scalar>(grad_plane: &mut [T], grad_out: &[T], kernel: &[T], g: &ConvGeom) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = kernel[ky * g.kw + kx];
            let (lo, hi) = g.ox_range(kx);
            if lo >= hi {
                continue;
            }
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let go = &grad_out[oy * g.ow + lo..oy * g.ow + hi];
                let start = lo * g.stride + kx - g.pad_w;
                let gi = &mut grad_plane[iy * g.w..(iy + 1) * g.w];
                if g.stride == 1 {
                    for (d, &o) in gi[start..start + (hi - lo)].iter_mut().zip(go) {
                        *d += wv * o;
                    }
                } else {
                    for (j, &o) in go.iter().enumerate() {
                        gi[start + j * g.stride] += wv * o;
                    }
                }
            }
        }
    }
}

/// `grad_kernel += Σ grad_out · plane` over all output positions.
#[inline]
fn correlate_plane_kernel_grad<T: Scalar>(grad_kernel: &mut [T], grad_out: &[T], plane: &[T], g: &ConvGeom) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let (lo, hi) = g.ox_range(kx);
            if lo >= hi {
                continue;
            }
            let mut acc = T::zero();
            for oy in 0..g.oh {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                let go = &grad_out[oy * g.ow + lo..oy * g.ow + hi];
                let start = lo * g.stride + kx - g.pad_w;
                let in_row = &plane[iy * g.w..(iy + 1) * g.w];
                if g.stride == 1 {
                    for (&o, &x) in go.iter().zip(&in_row[start..start + (hi - lo)]) {
                        acc += o * x;
                    }
                } else {
                    for (j, &o) in go.iter().enumerate() {
                        acc += o * in_row[start + j * g.stride];
                    }
                }
            }
            grad_kernel[ky * g.kw + kx] += acc;
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (in_plane, out_plane, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    // 1x1 stride-1 convolution is a per-pixel channel mix; same accumulation
    // order as the general path, laid out for contiguous inner loops.
    let mut out = vec![T::zero(); g.batch * g.out_ch * out_plane];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let dst = &mut out[(n * g.out_ch + o) * out_plane..][..out_plane];
            for c in 0..g.in_ch {
                let src = &x[(n * g.in_ch + c) * in_plane..][..in_plane];
                let k = &w[(o * g.in_ch + c) * kk..][..kk];
                if kk == 1 && g.stride == 1 {
                    let wv = k[0];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                } else {
                    correlate_plane(dst, src, k, g);
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; either may be skipped.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (in_plane, out_plane, kk) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let mut gx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_kernel.then(|| vec![T::zero(); w.len()]);
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let go = &grad_out[(n * g.out_ch + o) * out_plane..][..out_plane];
            for c in 0..g.in_ch {
                let k_off = (o * g.in_ch + c) * kk;
                let x_off = (n * g.in_ch + c) * in_plane;
                if let Some(gx) = gx.as_mut() {
                    correlate_plane_input_grad(&mut gx[x_off..x_off + in_plane], go, &w[k_off..k_off + kk], g);
                }
                if let Some(gw) = gw.as_mut() {
                    correlate_plane_kernel_grad(&mut gw[k_off..k_off + kk], go, &x[x_off..x_off + in_plane], g);
                }
            }
        }
    }
    (gx, gw)
}

/// Geometry of a depthwise convolution: kernel `C×1×K×K`, same padding,
/// stride 1. `out_ch == in_ch`.
pub fn depthwise_geom(input: &[usize], kernel: &[usize]) -> Result<ConvGeom> {
    if input.len() != 4 || kernel.len() != 4 || kernel[1] != 1 {
        return Err(Error::shape(format!(
            "depthwise conv expects NCHW input and C×1×K×K kernel, got {input:?} and {kernel:?}"
        )));
    }
    if kernel[0] != input[1] {
        return Err(Error::shape(format!("depthwise kernel has {} channels, input has {}", kernel[0], input[1])));
    }
    let mut g = ConvGeom::new(&[input[0], 1, input[2], input[3]], &[1, 1, kernel[2], kernel[3]], 1, Padding::Same)?;
    g.in_ch = input[1];
    g.out_ch = input[1];
    Ok(g)
}

pub fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (plane, kk) = (g.h * g.w, g.kh * g.kw);
    let mut out = vec![T::zero(); x.len()];
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let off = (n * g.in_ch + c) * plane;
            correlate_plane(&mut out[off..off + plane], &x[off..off + plane], &w[c * kk..(c + 1) * kk], g);
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (plane, kk) = (g.h * g.w, g.kh * g.kw);
    let mut gx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_kernel.then(|| vec![T::zero(); w.len()]);
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let off = (n * g.in_ch + c) * plane;
            let go = &grad_out[off..off + plane];
            if let Some(gx) = gx.as_mut() {
                correlate_plane_input_grad(&mut gx[off..off + plane], go, &w[c * kk..(c + 1) * kk], g);
            }
            if let Some(gw) = gw.as_mut() {
                correlate_plane_kernel_grad(&mut gw[c * kk..(c + 1) * kk], go, &x[off..off + plane], g);
            }
        }
    }
    (gx, gw)
}

/// Flat input index of each pooling window's maximum (first on ties).
pub fn maxpool_argmax<T: Scalar>(x: &[T], shape: &[usize], factor: usize) -> Result<(Vec<usize>, [usize; 4])> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("maxpool2d expects NCHW, got {shape:?}")));
    }
    if factor == 0 {
        return Err(Error::config("maxpool factor must be positive"));
    }
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("maxpool factor {factor} does not divide spatial extent {h}x{w}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut idx = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * factor * w + ox * factor;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = base + (oy * factor + dy) * w + ox * factor + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [shape[0], shape[1], oh, ow]))
}

/// Source index map for a spatial resize of NCHW planes, given per-axis
/// source row/column tables.
pub fn spatial_gather_index(shape: &[usize], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(nc * rows.len() * cols.len());
    for p in 0..nc {
        for &r in rows {
            debug_assert!(r < h);
            for &c in cols {
                debug_assert!(c < w);
                idx.push(p * h * w + r * w + c);
            }
        }
    }
    idx
}

/// `(m×k) · (k×n)`, accumulated over `k` in order.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

pub fn matmul_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        for k in [1, 3, 5, 7] {
            let g = ConvGeom::new(&[1, 2, 9, 6], &[4, 2, k, k], 1, Padding::Same).unwrap();
            assert_eq!((g.oh, g.ow), (9, 6));
        }
        let g = ConvGeom::new(&[1, 1, 56, 56], &[1, 1, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (28, 28));
        let g = ConvGeom::new(&[1, 1, 7, 7], &[1, 1, 3, 3], 2, Padding::Valid).unwrap();
        assert_eq!((g.oh, g.ow), (3, 3));
        assert!(ConvGeom::new(&[1, 1, 7, 7], &[1, 1, 2, 2], 1, Padding::Same).is_err());
        assert!(ConvGeom::new(&[1, 2, 7, 7], &[1, 1, 3, 3], 1, Padding::Same).is_err());
    }

    #[test]
    fn strided_ranges_cover_only_valid_taps() {
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 2, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (3, 3));
        // kx = 0 with pad 1: output column 0 maps to input -1
        assert_eq!(g.ox_range(0), (1, 3));
        assert_eq!(g.ox_range(2), (0, 2));
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        // aᵀ as 3x2
        let at: Vec<f64> = vec![a[0], a[3], a[1], a[4], a[2], a[5]];
        let mut tn = vec![0.0; 8];
        matmul_tn_acc(&mut tn, &at, &b, 3, 2, 4);
        assert_eq!(ab, tn);
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut nt = vec![0.0; 8];
        matmul_nt_acc(&mut nt, &a, &bt, 2, 3, 4);
        assert_eq!(ab, nt);
    }
}
