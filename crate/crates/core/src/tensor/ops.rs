//! Raw numeric kernels shared by the tape's forward and backward passes.

use super::gemm;
use crate::error::{Error, Result};

/// Resolved geometry of one 2-D convolution over an `H×W×Cin` input with a
/// `kh×kw×Cin×Cout` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let &[h, w, cin] = input else {
            return Err(Error::shape("conv2d", format!("input must be H×W×C, got {input:?}")));
        };
        let &[kh, kw, kcin, cout] = kernel else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be kh×kw×Cin×Cout, got {kernel:?}"),
            ));
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel extent must be odd, got {kh}×{kw}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("conv2d stride and dilation must be ≥ 1".into()));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel span {span_h}×{span_w} exceeds padded input {h}×{w}+{padding}"),
            ));
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            dilation,
            oh: (h + 2 * padding - span_h) / stride + 1,
            ow: (w + 2 * padding - span_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source coordinate for output index `o` and kernel tap `k` along one
    /// axis, or `None` when it lands in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds the input into a `(oh·ow) × (kh·kw·cin)` patch matrix whose column
/// order `(ky, kx, ci)` matches the kernel's row-major layout.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    if g.is_pointwise() {
        return input.to_vec();
    }
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_pixels() * plen];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let src = (iy * g.w + ix) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im_add(dcols: &[f64], g: &ConvGeometry, dinput: &mut [f64]) {
    if g.is_pointwise() {
        for (d, s) in dinput.iter_mut().zip(dcols) {
            *d += s;
        }
        return;
    }
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dcols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let dst = (iy * g.w + ix) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for (d, s) in dinput[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let mut out = vec![0.0; g.out_pixels() * g.cout];
    gemm(g.out_pixels(), g.patch_len(), g.cout, &cols, false, kernel, false, &mut out, false);
    (out, cols)
}

/// Per-axis linear interpolation table with corner alignment.
#[derive(Debug, Clone)]
pub(crate) struct AxisInterp {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisInterp {
    pub fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let pos = if dst > 1 && src > 1 {
                (o * (src - 1)) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let l = (pos.floor() as usize).min(src - 1);
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(pos - l as f64);
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn bilinear_forward(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    ys: &AxisInterp,
    xs: &AxisInterp,
) -> Vec<f64> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut out = vec![0.0; oh * ow * c];
    debug_assert_eq!(input.len(), h * w * c);
    for oy in 0..oh {
        let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for (ch, d) in dst.iter_mut().enumerate() {
                *d = w00 * input[p00 + ch]
                    + w01 * input[p01 + ch]
                    + w10 * input[p10 + ch]
                    + w11 * input[p11 + ch];
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad: &[f64],
    (_h, w, c): (usize, usize, usize),
    ys: &AxisInterp,
    xs: &AxisInterp,
    dinput: &mut [f64],
) {
    let ow = xs.lo.len();
    for (oy, ((&y0, &y1), &fy)) in ys.lo.iter().zip(&ys.hi).zip(&ys.frac).enumerate() {
        for (ox, ((&x0, &x1), &fx)) in xs.lo.iter().zip(&xs.hi).zip(&xs.frac).enumerate() {
            let weights = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let src = &grad[(oy * ow + ox) * c..][..c];
            for (base, wt) in weights {
                if wt == 0.0 {
                    continue;
                }
                for (ch, g) in src.iter().enumerate() {
                    dinput[base + ch] += wt * g;
                }
            }
        }
    }
}

/// Numerically stable softmax over each contiguous row of length `width`.
pub(crate) fn softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (src, dst) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Backward of a row softmax given its output `y` and upstream gradient `g`.
pub(crate) fn softmax_rows_backward(y: &[f64], g: &[f64], width: usize, dx: &mut [f64]) {
    for ((yr, gr), dr) in y
        .chunks_exact(width)
        .zip(g.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}
