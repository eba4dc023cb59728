//! Dense kernels with hand-written backward passes.
//!
//! Tensors are flat channel-major slices (`c × h × w`). The strided
//! convolutions use a 4×4 kernel, stride 2 and one cell of zero padding, and
//! run as patch gathers around a GEMM.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Scalar: Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static {
    /// `c ← α·a·b + β·c` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: (&mut [Self], isize, isize));
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: (&mut [Self], isize, isize)) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 { 0 } else { (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1 }
                };
                assert!(a.0.len() >= span(m, k, a.1, a.2) && b.0.len() >= span(k, n, b.1, b.2) && c.0.len() >= span(m, n, c.1, c.2));
                // SAFETY: the extents of all three operands were checked above.
                unsafe { $f(m, k, n, alpha, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2) }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal fits every scalar type")
}

pub const K: usize = 4;

/// Indices `o < iter_len` whose tap `2·o + k − 1` lands inside `[0, mapped_len)`.
#[inline]
fn tap_range(k: usize, iter_len: usize, mapped_len: usize) -> std::ops::Range<usize> {
    let lo = usize::from(k == 0);
    let hi = iter_len.min((mapped_len - k) / 2 + 1);
    lo..hi.max(lo)
}

/// Patch matrix of a `c × h × w` map for a stride-2 4×4 footprint: row
/// `(ci, ky, kx)`, column `(oy, ox)` over the `h/2 × w/2` grid.
fn gather<T: Scalar>(big: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    cols.fill(T::zero());
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((ci * K + ky) * K + kx) * oh * ow..][..oh * ow];
                for oy in tap_range(ky, oh, h) {
                    let src = &big[(ci * h + 2 * oy + ky - 1) * w..][..w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in tap_range(kx, ow, w) {
                        dst[ox] = src[2 * ox + kx - 1];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: adds every patch entry back into the map.
fn scatter_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, big: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((ci * K + ky) * K + kx) * oh * ow..][..oh * ow];
                for oy in tap_range(ky, oh, h) {
                    let dst = &mut big[(ci * h + 2 * oy + ky - 1) * w..][..w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in tap_range(kx, ow, w) {
                        dst[2 * ox + kx - 1] += src[ox];
                    }
                }
            }
        }
    }
}

fn fill_bias<T: Scalar>(out: &mut [T], b: &[T], plane: usize) {
    for (chunk, &bias) in out.chunks_exact_mut(plane).zip(b) {
        chunk.fill(bias);
    }
}

/// Strided convolution halving the spatial size. Weights are `cout × cin × 4 × 4`.
pub fn conv_down<T: Scalar>(inp: &[T], cin: usize, h: usize, w: usize, wt: &[T], b: &[T], cout: usize, out: &mut [T]) {
    let p = (h / 2) * (w / 2);
    let kk = cin * K * K;
    let mut cols = vec![T::zero(); kk * p];
    gather(inp, cin, h, w, &mut cols);
    fill_bias(out, b, p);
    T::gemm(cout, kk, p, T::one(), (wt, kk as isize, 1), (&cols, p as isize, 1), T::one(), (out, p as isize, 1));
}

#[allow(clippy::too_many_arguments)]
pub fn conv_down_back<T: Scalar>(
    inp: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    cout: usize,
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
    gin: Option<&mut [T]>,
) {
    let p = (h / 2) * (w / 2);
    let kk = cin * K * K;
    for (g, plane) in gb.iter_mut().zip(gout.chunks_exact(p)) {
        *g += plane.iter().copied().sum::<T>();
    }
    let mut cols = vec![T::zero(); kk * p];
    gather(inp, cin, h, w, &mut cols);
    // gW += gout · colsᵀ
    T::gemm(cout, p, kk, T::one(), (gout, p as isize, 1), (&cols, 1, p as isize), T::one(), (gw, kk as isize, 1));
    if let Some(gin) = gin {
        // gcols = Wᵀ · gout
        T::gemm(kk, cout, p, T::one(), (wt, 1, kk as isize), (gout, p as isize, 1), T::zero(), (&mut cols, p as isize, 1));
        scatter_add(&cols, cin, h, w, gin);
    }
}

/// Transposed convolution doubling the spatial size. Weights are `cin × cout × 4 × 4`.
pub fn conv_up<T: Scalar>(inp: &[T], cin: usize, h: usize, w: usize, wt: &[T], b: &[T], cout: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    let p = h * w;
    let kk = cout * K * K;
    let mut cols = vec![T::zero(); kk * p];
    // cols = Wᵀ · x
    T::gemm(kk, cin, p, T::one(), (wt, 1, kk as isize), (inp, p as isize, 1), T::zero(), (&mut cols, p as isize, 1));
    fill_bias(out, b, oh * ow);
    scatter_add(&cols, cout, oh, ow, out);
}

#[allow(clippy::too_many_arguments)]
pub fn conv_up_back<T: Scalar>(
    inp: &[T],
    cin: usize,
    h: usize,
    w: usize,
    wt: &[T],
    cout: usize,
    gout: &[T],
    gw: &mut [T],
    gb: &mut [T],
    gin: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let p = h * w;
    let kk = cout * K * K;
    for (g, plane) in gb.iter_mut().zip(gout.chunks_exact(oh * ow)) {
        *g += plane.iter().copied().sum::<T>();
    }
    let mut cols = vec![T::zero(); kk * p];
    gather(gout, cout, oh, ow, &mut cols);
    // gW += x · gcolsᵀ ; gx += W · gcols
    T::gemm(cin, p, kk, T::one(), (inp, p as isize, 1), (&cols, 1, p as isize), T::one(), (gw, kk as isize, 1));
    T::gemm(cin, kk, p, T::one(), (wt, kk as isize, 1), (&cols, p as isize, 1), T::one(), (gin, p as isize, 1));
}

/// `out = W·inp + b` with `W` stored `out × in`.
pub fn linear<T: Scalar>(inp: &[T], wt: &[T], b: &[T], out: &mut [T]) {
    let n = inp.len();
    for (o, (row, bias)) in out.iter_mut().zip(wt.chunks_exact(n).zip(b)) {
        *o = *bias + row.iter().zip(inp).map(|(a, x)| *a * *x).sum::<T>();
    }
}

pub fn linear_back<T: Scalar>(inp: &[T], wt: &[T], gout: &[T], gw: &mut [T], gb: &mut [T], mut gin: Option<&mut [T]>) {
    let n = inp.len();
    for (o, &g) in gout.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        gb[o] += g;
        let row = &wt[o * n..(o + 1) * n];
        for (gwi, x) in gw[o * n..(o + 1) * n].iter_mut().zip(inp) {
            *gwi += g * *x;
        }
        if let Some(gin) = gin.as_deref_mut() {
            for (gi, wv) in gin.iter_mut().zip(row) {
                *gi += g * *wv;
            }
        }
    }
}

/// Per-pixel affine map across channels (a 1×1 convolution), added into `out`.
pub fn pointwise_add<T: Scalar>(inp: &[T], cin: usize, wt: &[T], b: &[T], cout: usize, out: &mut [T]) {
    let hw = inp.len() / cin;
    for co in 0..cout {
        let dst = &mut out[co * hw..(co + 1) * hw];
        for v in dst.iter_mut() {
            *v += b[co];
        }
        for ci in 0..cin {
            let a = wt[co * cin + ci];
            for (d, x) in dst.iter_mut().zip(&inp[ci * hw..(ci + 1) * hw]) {
                *d += a * *x;
            }
        }
    }
}

/// Parameter gradients of [`pointwise_add`]; its input is never trained.
pub fn pointwise_back<T: Scalar>(inp: &[T], cin: usize, cout: usize, gout: &[T], gw: &mut [T], gb: &mut [T]) {
    let hw = inp.len() / cin;
    for co in 0..cout {
        let g = &gout[co * hw..(co + 1) * hw];
        gb[co] += g.iter().copied().sum::<T>();
        for ci in 0..cin {
            gw[co * cin + ci] += g.iter().zip(&inp[ci * hw..(ci + 1) * hw]).map(|(a, b)| *a * *b).sum::<T>();
        }
    }
}

pub fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries whose pre-activation was not positive.
pub fn relu_mask<T: Scalar>(grad: &mut [T], pre: &[T]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= T::zero() {
            *g = T::zero();
        }
    }
}
