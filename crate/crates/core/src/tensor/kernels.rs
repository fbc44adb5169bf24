//! Raw numeric kernels over contiguous row-major buffers.

use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// `floor((n + 2·pad − kernel) / stride) + 1`, or `None` if the window does
/// not fit.
pub fn conv_out_side(n: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = n + 2 * spec.pad;
    if padded < kernel || spec.stride == 0 {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (s, p) = (g.spec.stride as isize, g.spec.pad as isize);
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// y[b] = W · im2col(x[b]).
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (k, hw) = (g.k(), g.hw_out());
    let mut y = vec![T::zero(); batch * g.cout * hw];
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..batch {
        im2col(
            g,
            &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w],
            &mut cols,
        );
        let out = &mut y[b * g.cout * hw..(b + 1) * g.cout * hw];
        T::gemm(
            g.cout,
            k,
            hw,
            w,
            k as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::zero(),
            out,
            hw as isize,
        );
    }
    y
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn conv2d_backward_data<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    gy: &[T],
    w: &[T],
) -> Vec<T> {
    let (k, hw) = (g.k(), g.hw_out());
    let mut gx = vec![T::zero(); batch * g.cin * g.h * g.w];
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..batch {
        let gyb = &gy[b * g.cout * hw..(b + 1) * g.cout * hw];
        // cols = Wᵀ · gy
        T::gemm(
            k,
            g.cout,
            hw,
            w,
            1,
            k as isize,
            gyb,
            hw as isize,
            1,
            T::zero(),
            &mut cols,
            hw as isize,
        );
        col2im(
            g,
            &cols,
            &mut gx[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w],
        );
    }
    gx
}

/// Gradient of the convolution with respect to its filter.
pub(crate) fn conv2d_backward_filter<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    gy: &[T],
) -> Vec<T> {
    let (k, hw) = (g.k(), g.hw_out());
    let mut gw = vec![T::zero(); g.cout * k];
    let mut cols = vec![T::zero(); k * hw];
    for b in 0..batch {
        im2col(
            g,
            &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w],
            &mut cols,
        );
        let gyb = &gy[b * g.cout * hw..(b + 1) * g.cout * hw];
        // gw += gy · colsᵀ
        T::gemm(
            g.cout,
            hw,
            k,
            gyb,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            T::one(),
            &mut gw,
            k as isize,
        );
    }
    gw
}

/// Plain 2-D matrix product with optional transposes of either operand.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    a_shape: [usize; 2],
    ta: bool,
    b: &[T],
    b_shape: [usize; 2],
    tb: bool,
) -> (Vec<T>, [usize; 2]) {
    let (m, k) = if ta {
        (a_shape[1], a_shape[0])
    } else {
        (a_shape[0], a_shape[1])
    };
    let n = if tb { b_shape[0] } else { b_shape[1] };
    let (rsa, csa) = if ta {
        (1, a_shape[1] as isize)
    } else {
        (a_shape[1] as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b_shape[1] as isize)
    } else {
        (b_shape[1] as isize, 1)
    };
    let mut c = vec![T::zero(); m * n];
    if m > 0 && n > 0 {
        if k == 0 {
            return (c, [m, n]);
        }
        T::gemm(
            m,
            k,
            n,
            a,
            rsa,
            csa,
            b,
            rsb,
            csb,
            T::zero(),
            &mut c,
            n as isize,
        );
    }
    (c, [m, n])
}

pub(crate) fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub(crate) fn sumpool2x<T: Scalar>(x: &[T], planes: usize, h2: usize, w2: usize) -> Vec<T> {
    let (h, w) = (h2 / 2, w2 / 2);
    let mut y = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut y[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
    y
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut y[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    y
}

pub(crate) fn softmax_rows_backward<T: Scalar>(
    y: &[T],
    gy: &[T],
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let ys = &y[r * cols..(r + 1) * cols];
        let gs = &gy[r * cols..(r + 1) * cols];
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((g, &yv), &gv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(ys).zip(gs) {
            *g = yv * (gv - dot);
        }
    }
    gx
}

/// Per-channel sum over `[B, C, spatial]`.
pub(crate) fn channel_sum<T: Scalar>(x: &[T], batch: usize, c: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..batch {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * spatial;
            *o += x[base..base + spatial].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn channel_expand<T: Scalar>(v: &[T], batch: usize, c: usize, spatial: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * c * spatial);
    for _ in 0..batch {
        for &val in v.iter().take(c) {
            out.extend(std::iter::repeat_n(val, spatial));
        }
    }
    out
}
