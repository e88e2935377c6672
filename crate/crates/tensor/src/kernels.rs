//! Raw numeric kernels shared by the forward and backward passes.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::par;
use crate::tensor::{numel, Tensor};

/// Strided read-only matrix view: element `(i, j)` lives at `i*rs + j*cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    pub fn transposed(self) -> Self {
        View {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (m×n, row-major) = a (m×k) · b (k×n)`, optionally accumulating.
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len(), "gemm lhs out of bounds");
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len(), "gemm rhs out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dimensions of a matmul: batch count, m, k, n, and whether `b` is shared.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_b: bool,
    pub trans_b: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || TensorError::mismatch("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(err());
    }
    let batch_dims = &a[..a.len() - 2];
    let shared_b = b.len() == 2;
    if !shared_b && &b[..b.len() - 2] != batch_dims {
        return Err(err());
    }
    let mut out = batch_dims.to_vec();
    out.extend([m, n]);
    let dims = MatmulDims {
        batch: numel(batch_dims),
        m,
        k,
        n,
        shared_b,
        trans_b,
    };
    Ok((dims, out))
}

fn b_view<'a, T>(b: &'a [T], d: &MatmulDims) -> View<'a, T> {
    if d.trans_b {
        View::row_major(b, d.k).transposed()
    } else {
        View::row_major(b, d.n)
    }
}

pub(crate) fn matmul_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (d, out_shape) = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![T::zero(); numel(&out_shape)];
    if d.shared_b {
        gemm(
            d.batch * d.m,
            d.k,
            d.n,
            View::row_major(a.data(), d.k),
            b_view(b.data(), &d),
            &mut out,
            false,
        );
    } else {
        let (ad, bd) = (a.data(), b.data());
        par::for_each_chunk_mut(&mut out, d.m * d.n, |i, c| {
            let aa = &ad[i * d.m * d.k..(i + 1) * d.m * d.k];
            let bb = &bd[i * d.k * d.n..(i + 1) * d.k * d.n];
            gemm(d.m, d.k, d.n, View::row_major(aa, d.k), b_view(bb, &d), c, false);
        });
    }
    Tensor::new(&out_shape, out)
}

/// Gradient of `a` given upstream `g` (shape of the product).
pub(crate) fn matmul_grad_a<T: Element>(g: &[T], b: &Tensor<T>, d: &MatmulDims) -> Vec<T> {
    let mut ga = vec![T::zero(); d.batch * d.m * d.k];
    if d.shared_b {
        gemm(
            d.batch * d.m,
            d.n,
            d.k,
            View::row_major(g, d.n),
            b_view(b.data(), d).transposed(),
            &mut ga,
            false,
        );
    } else {
        let bd = b.data();
        par::for_each_chunk_mut(&mut ga, d.m * d.k, |i, c| {
            let gg = &g[i * d.m * d.n..(i + 1) * d.m * d.n];
            let bb = &bd[i * d.k * d.n..(i + 1) * d.k * d.n];
            gemm(d.m, d.n, d.k, View::row_major(gg, d.n), b_view(bb, d).transposed(), c, false);
        });
    }
    ga
}

/// Gradient of `b`, laid out like `b` itself (respecting `trans_b`).
pub(crate) fn matmul_grad_b<T: Element>(g: &[T], a: &Tensor<T>, d: &MatmulDims) -> Vec<T> {
    let per_b = d.k * d.n;
    let (rows, batches) = if d.shared_b {
        (d.batch * d.m, 1)
    } else {
        (d.m, d.batch)
    };
    let mut gb = vec![T::zero(); batches * per_b];
    let ad = a.data();
    par::for_each_chunk_mut(&mut gb, per_b, |i, c| {
        let aa = View::row_major(&ad[i * rows * d.k..(i + 1) * rows * d.k], d.k);
        let gg = View::row_major(&g[i * rows * d.n..(i + 1) * rows * d.n], d.n);
        if d.trans_b {
            // b is n×k: grad = gᵀ · a
            gemm(d.n, rows, d.k, gg.transposed(), aa, c, false);
        } else {
            gemm(d.k, rows, d.n, aa.transposed(), gg, c, false);
        }
    });
    gb
}

/// Geometry of an NHWC convolution with HWIO weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub o: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let err = || TensorError::mismatch("conv2d", input, weight);
        if input.len() != 4 || weight.len() != 4 || input[3] != weight[2] || stride == 0 {
            return Err(err());
        }
        let (n, h, w, c) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, o) = (weight[0], weight[1], weight[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(err());
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            h,
            w,
            c,
            kh,
            kw,
            o,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.o]
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let per_image = g.ho * g.wo * patch;
    let mut cols = vec![T::zero(); g.n * per_image];
    par::for_each_chunk_mut(&mut cols, per_image, |img, out| {
        let src = &x[img * g.h * g.w * g.c..(img + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut out[(oy * g.wo + ox) * patch..][..patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let dst = (ky * g.kw + kx) * g.c;
                            let s = (iy * g.w + ix) * g.c;
                            row[dst..dst + g.c].copy_from_slice(&src[s..s + g.c]);
                        }
                    }
                }
            }
        }
    });
    cols
}

pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let per_image = g.h * g.w * g.c;
    let mut x = vec![T::zero(); g.n * per_image];
    par::for_each_chunk_mut(&mut x, per_image, |img, dst| {
        let src = &cols[img * g.ho * g.wo * patch..(img + 1) * g.ho * g.wo * patch];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &src[(oy * g.wo + ox) * patch..][..patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let s = (ky * g.kw + kx) * g.c;
                            let d = (iy * g.w + ix) * g.c;
                            for ch in 0..g.c {
                                dst[d + ch] = dst[d + ch] + row[s + ch];
                            }
                        }
                    }
                }
            }
        }
    });
    x
}

pub(crate) fn conv_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let cols = im2col(x.data(), g);
    let mut out = vec![T::zero(); g.rows() * g.o];
    gemm(
        g.rows(),
        g.patch(),
        g.o,
        View::row_major(&cols, g.patch()),
        View::row_major(w.data(), g.o),
        &mut out,
        false,
    );
    Tensor::new(&g.out_shape(), out).expect("conv output shape")
}

/// Returns `(grad_input, grad_weight)`.
pub(crate) fn conv_backward<T: Element>(
    gy: &[T],
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let gy_view = View::row_major(gy, g.o);
    let gw = need_w.then(|| {
        let cols = im2col(x.data(), g);
        let mut gw = vec![T::zero(); g.patch() * g.o];
        gemm(
            g.patch(),
            g.rows(),
            g.o,
            View::row_major(&cols, g.patch()).transposed(),
            gy_view,
            &mut gw,
            false,
        );
        gw
    });
    let gx = need_x.then(|| {
        let mut dcols = vec![T::zero(); g.rows() * g.patch()];
        gemm(
            g.rows(),
            g.o,
            g.patch(),
            gy_view,
            View::row_major(w.data(), g.o).transposed(),
            &mut dcols,
            false,
        );
        col2im(&dcols, g)
    });
    (gx, gw)
}

pub(crate) fn softmax_rows<T: Element>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], gy: &[T], cols: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), xr) in y.chunks(cols).zip(gy.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..cols {
            xr[i] = yr[i] * (gr[i] - dot);
        }
    }
    gx
}

/// Normalizes each row to zero mean and unit variance; returns `(y, rstd)`.
pub(crate) fn layer_norm_rows<T: Element>(x: &[T], cols: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let nf = T::of(cols as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + T::of(eps)).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, rstd)
}

pub(crate) fn layer_norm_backward<T: Element>(y: &[T], rstd: &[T], gy: &[T], cols: usize) -> Vec<T> {
    let nf = T::of(cols as f64);
    let mut gx = vec![T::zero(); y.len()];
    for (((yr, gr), xr), &r) in y.chunks(cols).zip(gy.chunks(cols)).zip(gx.chunks_mut(cols)).zip(rstd) {
        let mean_g = gr.iter().copied().sum::<T>() / nf;
        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for i in 0..cols {
            xr[i] = r * (gr[i] - mean_g - yr[i] * mean_gy);
        }
    }
    gx
}
