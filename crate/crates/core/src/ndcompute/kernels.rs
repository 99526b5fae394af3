//! Raw loops behind the differentiable ops. Row-major slices, no shape
//! checks; callers validate extents.

use super::tensor::Real;

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results are deterministic.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

/// `out[m×p] = a[m×k] · b[k×p]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * p..(kk + 1) * p], row);
            }
        }
    }
    out
}

/// `out[m×k] += g[m×p] · b[k×p]ᵀ`
pub fn matmul_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            out[i * k + kk] += dot(grow, &b[kk * p..(kk + 1) * p]);
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · g[m×p]`
pub fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != T::zero() {
                axpy(aik, grow, &mut out[kk * p..(kk + 1) * p]);
            }
        }
    }
}

/// Geometry of one transposed-convolution stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvGeom {
    /// `(h−1)·stride − 2·pad + kernel + out_pad` per axis, or `None` when
    /// an extent is not positive.
    pub fn out_dims(&self) -> Option<(usize, usize)> {
        let axis = |n: usize| {
            let v = (n as i64 - 1) * self.stride as i64 - 2 * self.pad as i64
                + self.kernel as i64
                + self.out_pad as i64;
            (v > 0).then_some(v as usize)
        };
        Some((axis(self.h)?, axis(self.w)?))
    }

    #[inline]
    fn target(&self, i: usize, a: usize, limit: usize) -> Option<usize> {
        let o = (i * self.stride + a) as i64 - self.pad as i64;
        (o >= 0 && (o as usize) < limit).then_some(o as usize)
    }
}

/// Transposed convolution, input `[h, w, c_in]`, kernel
/// `[k, k, c_in, c_out]`, output `[h', w', c_out]`.
pub fn tconv2d_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_dims().expect("validated geometry");
    let (k, ci, co) = (g.kernel, g.c_in, g.c_out);
    let mut out = vec![T::zero(); oh * ow * co];
    for i in 0..g.h {
        for j in 0..g.w {
            let xv = &x[(i * g.w + j) * ci..(i * g.w + j + 1) * ci];
            for a in 0..k {
                let Some(oi) = g.target(i, a, oh) else { continue };
                for b in 0..k {
                    let Some(oj) = g.target(j, b, ow) else { continue };
                    let orow = &mut out[(oi * ow + oj) * co..(oi * ow + oj + 1) * co];
                    let kbase = (a * k + b) * ci * co;
                    for (c, &xc) in xv.iter().enumerate() {
                        if xc != T::zero() {
                            axpy(xc, &kernel[kbase + c * co..kbase + (c + 1) * co], orow);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients given the output gradient.
pub fn tconv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_dims().expect("validated geometry");
    let (k, ci, co) = (g.kernel, g.c_in, g.c_out);
    let mut dx = dx;
    let mut dk = dk;
    for i in 0..g.h {
        for j in 0..g.w {
            let px = (i * g.w + j) * ci;
            for a in 0..k {
                let Some(oi) = g.target(i, a, oh) else { continue };
                for b in 0..k {
                    let Some(oj) = g.target(j, b, ow) else { continue };
                    let grow = &dout[(oi * ow + oj) * co..(oi * ow + oj + 1) * co];
                    let kbase = (a * k + b) * ci * co;
                    if let Some(dx) = dx.as_deref_mut() {
                        for c in 0..ci {
                            dx[px + c] += dot(grow, &kernel[kbase + c * co..kbase + (c + 1) * co]);
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        for c in 0..ci {
                            let xc = x[px + c];
                            if xc != T::zero() {
                                axpy(xc, grow, &mut dk[kbase + c * co..kbase + (c + 1) * co]);
                            }
                        }
                    }
                }
            }
        }
    }
}
