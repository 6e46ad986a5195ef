//! Dense kernels used by the model and the statistics toolkit.
//!
//! Weight matrices are row-major `[out][in]` so the hot loops stream
//! contiguous rows. The dot kernel keeps eight independent accumulators so
//! the compiler can vectorize the reduction; every matmul funnels through
//! it, which keeps differently-chunked execution paths bit-identical.

use crate::real::Real;

/// Explicit SIMD encodings of the f32 kernels. The compiler's
/// auto-vectorizer proved too inconsistent across codegen contexts to rely
/// on for the decode hot path. All f32 kernels in one build share the same
/// per-lane multiply-add chains and reduction tree, so a row's value never
/// depends on which blocked variant produced it.
#[cfg(all(
    target_arch = "x86_64",
    target_feature = "avx512f",
    target_feature = "avx2",
    target_feature = "fma"
))]
mod x86 {
    use core::arch::x86_64::*;

    /// Deterministic tree over the 16 lanes: fold high half onto low, then
    /// the 8-lane tree.
    #[inline]
    unsafe fn reduce_tree(acc: __m512) -> f32 {
        let lo = _mm512_castps512_ps256(acc);
        let hi = _mm512_extractf32x8_ps(acc, 1);
        let fold = _mm256_add_ps(lo, hi);
        let lo4 = _mm256_castps256_ps128(fold);
        let hi4 = _mm256_extractf128_ps(fold, 1);
        let pair = _mm_add_ps(lo4, hi4);
        let swapped = _mm_movehl_ps(pair, pair);
        let quad = _mm_add_ps(pair, swapped);
        let other = _mm_shuffle_ps(quad, quad, 0b01);
        _mm_cvtss_f32(_mm_add_ss(quad, other))
    }

    #[inline]
    pub unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len();
        let blocks = n / 16;
        let mut acc = _mm512_setzero_ps();
        for c in 0..blocks {
            let o = c * 16;
            let va = _mm512_loadu_ps(a.as_ptr().add(o));
            let vb = _mm512_loadu_ps(b.as_ptr().add(o));
            acc = _mm512_fmadd_ps(va, vb, acc);
        }
        let mut out = reduce_tree(acc);
        for i in blocks * 16..n {
            out = a[i].mul_add(b[i], out);
        }
        out
    }

    #[inline]
    pub unsafe fn dot4(w: &[f32], xs: [&[f32]; 4], out: &mut [f32]) {
        let n = w.len();
        let blocks = n / 16;
        let [x0, x1, x2, x3] = xs;
        let mut a0 = _mm512_setzero_ps();
        let mut a1 = _mm512_setzero_ps();
        let mut a2 = _mm512_setzero_ps();
        let mut a3 = _mm512_setzero_ps();
        for c in 0..blocks {
            let o = c * 16;
            let vw = _mm512_loadu_ps(w.as_ptr().add(o));
            a0 = _mm512_fmadd_ps(_mm512_loadu_ps(x0.as_ptr().add(o)), vw, a0);
            a1 = _mm512_fmadd_ps(_mm512_loadu_ps(x1.as_ptr().add(o)), vw, a1);
            a2 = _mm512_fmadd_ps(_mm512_loadu_ps(x2.as_ptr().add(o)), vw, a2);
            a3 = _mm512_fmadd_ps(_mm512_loadu_ps(x3.as_ptr().add(o)), vw, a3);
        }
        out[0] = reduce_tree(a0);
        out[1] = reduce_tree(a1);
        out[2] = reduce_tree(a2);
        out[3] = reduce_tree(a3);
        for i in blocks * 16..n {
            let wj = w[i];
            out[0] = x0[i].mul_add(wj, out[0]);
            out[1] = x1[i].mul_add(wj, out[1]);
            out[2] = x2[i].mul_add(wj, out[2]);
            out[3] = x3[i].mul_add(wj, out[3]);
        }
    }

    #[inline]
    pub unsafe fn dot8(w: &[f32], xs: [&[f32]; 8], out: &mut [f32]) {
        let n = w.len();
        let blocks = n / 16;
        let [x0, x1, x2, x3, x4, x5, x6, x7] = xs;
        let mut a0 = _mm512_setzero_ps();
        let mut a1 = _mm512_setzero_ps();
        let mut a2 = _mm512_setzero_ps();
        let mut a3 = _mm512_setzero_ps();
        let mut a4 = _mm512_setzero_ps();
        let mut a5 = _mm512_setzero_ps();
        let mut a6 = _mm512_setzero_ps();
        let mut a7 = _mm512_setzero_ps();
        for c in 0..blocks {
            let o = c * 16;
            let vw = _mm512_loadu_ps(w.as_ptr().add(o));
            a0 = _mm512_fmadd_ps(_mm512_loadu_ps(x0.as_ptr().add(o)), vw, a0);
            a1 = _mm512_fmadd_ps(_mm512_loadu_ps(x1.as_ptr().add(o)), vw, a1);
            a2 = _mm512_fmadd_ps(_mm512_loadu_ps(x2.as_ptr().add(o)), vw, a2);
            a3 = _mm512_fmadd_ps(_mm512_loadu_ps(x3.as_ptr().add(o)), vw, a3);
            a4 = _mm512_fmadd_ps(_mm512_loadu_ps(x4.as_ptr().add(o)), vw, a4);
            a5 = _mm512_fmadd_ps(_mm512_loadu_ps(x5.as_ptr().add(o)), vw, a5);
            a6 = _mm512_fmadd_ps(_mm512_loadu_ps(x6.as_ptr().add(o)), vw, a6);
            a7 = _mm512_fmadd_ps(_mm512_loadu_ps(x7.as_ptr().add(o)), vw, a7);
        }
        out[0] = reduce_tree(a0);
        out[1] = reduce_tree(a1);
        out[2] = reduce_tree(a2);
        out[3] = reduce_tree(a3);
        out[4] = reduce_tree(a4);
        out[5] = reduce_tree(a5);
        out[6] = reduce_tree(a6);
        out[7] = reduce_tree(a7);
        for i in blocks * 16..n {
            let wj = w[i];
            out[0] = x0[i].mul_add(wj, out[0]);
            out[1] = x1[i].mul_add(wj, out[1]);
            out[2] = x2[i].mul_add(wj, out[2]);
            out[3] = x3[i].mul_add(wj, out[3]);
            out[4] = x4[i].mul_add(wj, out[4]);
            out[5] = x5[i].mul_add(wj, out[5]);
            out[6] = x6[i].mul_add(wj, out[6]);
            out[7] = x7[i].mul_add(wj, out[7]);
        }
    }

    #[inline]
    pub unsafe fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
        let n = y.len();
        let blocks = n / 16;
        let va = _mm512_set1_ps(alpha);
        for c in 0..blocks {
            let o = c * 16;
            let vx = _mm512_loadu_ps(x.as_ptr().add(o));
            let vy = _mm512_loadu_ps(y.as_ptr().add(o));
            _mm512_storeu_ps(y.as_mut_ptr().add(o), _mm512_fmadd_ps(vx, va, vy));
        }
        for i in blocks * 16..n {
            y[i] = x[i].mul_add(alpha, y[i]);
        }
    }
}

#[cfg(all(
    target_arch = "x86_64",
    not(target_feature = "avx512f"),
    target_feature = "avx2",
    target_feature = "fma"
))]
mod x86 {
    use core::arch::x86_64::*;

    /// `((a0+a4)+(a2+a6)) + ((a1+a5)+(a3+a7))`, matching `reduce8`.
    #[inline]
    unsafe fn reduce_tree(acc: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(acc);
        let hi = _mm256_extractf128_ps(acc, 1);
        let pair = _mm_add_ps(lo, hi);
        let swapped = _mm_movehl_ps(pair, pair);
        let quad = _mm_add_ps(pair, swapped);
        let other = _mm_shuffle_ps(quad, quad, 0b01);
        _mm_cvtss_f32(_mm_add_ss(quad, other))
    }

    #[inline]
    pub unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len();
        let blocks = n / 8;
        let mut acc = _mm256_setzero_ps();
        for c in 0..blocks {
            let o = c * 8;
            let va = _mm256_loadu_ps(a.as_ptr().add(o));
            let vb = _mm256_loadu_ps(b.as_ptr().add(o));
            acc = _mm256_fmadd_ps(va, vb, acc);
        }
        let mut out = reduce_tree(acc);
        for i in blocks * 8..n {
            out = a[i].mul_add(b[i], out);
        }
        out
    }

    #[inline]
    pub unsafe fn dot4(w: &[f32], xs: [&[f32]; 4], out: &mut [f32]) {
        let n = w.len();
        let blocks = n / 8;
        let [x0, x1, x2, x3] = xs;
        let mut a0 = _mm256_setzero_ps();
        let mut a1 = _mm256_setzero_ps();
        let mut a2 = _mm256_setzero_ps();
        let mut a3 = _mm256_setzero_ps();
        for c in 0..blocks {
            let o = c * 8;
            let vw = _mm256_loadu_ps(w.as_ptr().add(o));
            a0 = _mm256_fmadd_ps(_mm256_loadu_ps(x0.as_ptr().add(o)), vw, a0);
            a1 = _mm256_fmadd_ps(_mm256_loadu_ps(x1.as_ptr().add(o)), vw, a1);
            a2 = _mm256_fmadd_ps(_mm256_loadu_ps(x2.as_ptr().add(o)), vw, a2);
            a3 = _mm256_fmadd_ps(_mm256_loadu_ps(x3.as_ptr().add(o)), vw, a3);
        }
        out[0] = reduce_tree(a0);
        out[1] = reduce_tree(a1);
        out[2] = reduce_tree(a2);
        out[3] = reduce_tree(a3);
        for i in blocks * 8..n {
            let wj = w[i];
            out[0] = x0[i].mul_add(wj, out[0]);
            out[1] = x1[i].mul_add(wj, out[1]);
            out[2] = x2[i].mul_add(wj, out[2]);
            out[3] = x3[i].mul_add(wj, out[3]);
        }
    }

    #[inline]
    pub unsafe fn dot8(w: &[f32], xs: [&[f32]; 8], out: &mut [f32]) {
        let n = w.len();
        let blocks = n / 8;
        let [x0, x1, x2, x3, x4, x5, x6, x7] = xs;
        let mut a0 = _mm256_setzero_ps();
        let mut a1 = _mm256_setzero_ps();
        let mut a2 = _mm256_setzero_ps();
        let mut a3 = _mm256_setzero_ps();
        let mut a4 = _mm256_setzero_ps();
        let mut a5 = _mm256_setzero_ps();
        let mut a6 = _mm256_setzero_ps();
        let mut a7 = _mm256_setzero_ps();
        for c in 0..blocks {
            let o = c * 8;
            let vw = _mm256_loadu_ps(w.as_ptr().add(o));
            a0 = _mm256_fmadd_ps(_mm256_loadu_ps(x0.as_ptr().add(o)), vw, a0);
            a1 = _mm256_fmadd_ps(_mm256_loadu_ps(x1.as_ptr().add(o)), vw, a1);
            a2 = _mm256_fmadd_ps(_mm256_loadu_ps(x2.as_ptr().add(o)), vw, a2);
            a3 = _mm256_fmadd_ps(_mm256_loadu_ps(x3.as_ptr().add(o)), vw, a3);
            a4 = _mm256_fmadd_ps(_mm256_loadu_ps(x4.as_ptr().add(o)), vw, a4);
            a5 = _mm256_fmadd_ps(_mm256_loadu_ps(x5.as_ptr().add(o)), vw, a5);
            a6 = _mm256_fmadd_ps(_mm256_loadu_ps(x6.as_ptr().add(o)), vw, a6);
            a7 = _mm256_fmadd_ps(_mm256_loadu_ps(x7.as_ptr().add(o)), vw, a7);
        }
        out[0] = reduce_tree(a0);
        out[1] = reduce_tree(a1);
        out[2] = reduce_tree(a2);
        out[3] = reduce_tree(a3);
        out[4] = reduce_tree(a4);
        out[5] = reduce_tree(a5);
        out[6] = reduce_tree(a6);
        out[7] = reduce_tree(a7);
        for i in blocks * 8..n {
            let wj = w[i];
            out[0] = x0[i].mul_add(wj, out[0]);
            out[1] = x1[i].mul_add(wj, out[1]);
            out[2] = x2[i].mul_add(wj, out[2]);
            out[3] = x3[i].mul_add(wj, out[3]);
            out[4] = x4[i].mul_add(wj, out[4]);
            out[5] = x5[i].mul_add(wj, out[5]);
            out[6] = x6[i].mul_add(wj, out[6]);
            out[7] = x7[i].mul_add(wj, out[7]);
        }
    }

    #[inline]
    pub unsafe fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
        let n = y.len();
        let blocks = n / 8;
        let va = _mm256_set1_ps(alpha);
        for c in 0..blocks {
            let o = c * 8;
            let vx = _mm256_loadu_ps(x.as_ptr().add(o));
            let vy = _mm256_loadu_ps(y.as_ptr().add(o));
            _mm256_storeu_ps(y.as_mut_ptr().add(o), _mm256_fmadd_ps(vx, va, vy));
        }
        for i in blocks * 8..n {
            y[i] = x[i].mul_add(alpha, y[i]);
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
#[inline(always)]
fn is_f32<T: 'static>() -> bool {
    std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>()
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
#[inline(always)]
fn as_f32_slice<T: 'static>(v: &[T]) -> &[f32] {
    debug_assert!(is_f32::<T>());
    unsafe { &*(v as *const [T] as *const [f32]) }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
#[inline(always)]
fn as_f32_slice_mut<T: 'static>(v: &mut [T]) -> &mut [f32] {
    debug_assert!(is_f32::<T>());
    unsafe { &mut *(v as *mut [T] as *mut [f32]) }
}

macro_rules! f32_fast_path {
    ($t:ty, $body:block) => {
        #[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma"))]
        if is_f32::<$t>() {
            $body
        }
    };
}

/// Dot product over eight accumulator lanes. The lane structure, reduction
/// tree, and tail handling are shared with the blocked kernels so a row's
/// value is bit-identical whether it was computed alone or inside a block.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    f32_fast_path!(T, {
        let r = unsafe { x86::dot(as_f32_slice(a), as_f32_slice(b)) };
        return T::from_f32(r);
    });
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = xa[j].mul_add(xb[j], acc[j]);
        }
    }
    let mut out = ((acc[0] + acc[4]) + (acc[2] + acc[6]))
        + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        out = x.mul_add(*y, out);
    }
    out
}

/// Four dot products of one shared row against four others. The shared row
/// streams once per lane block; the 32 independent multiply-add chains keep
/// the fused units busy.
#[inline(always)]
fn fma8<T: Real>(acc: &mut [T; 8], x: &[T; 8], w: &[T; 8]) {
    for j in 0..8 {
        acc[j] = x[j].mul_add(w[j], acc[j]);
    }
}

#[inline(always)]
fn reduce8<T: Real>(a: &[T; 8]) -> T {
    ((a[0] + a[4]) + (a[2] + a[6])) + ((a[1] + a[5]) + (a[3] + a[7]))
}

/// Four dot products of one shared row against four others. The shared row
/// streams once per lane block; the independent multiply-add chains keep
/// the fused units busy. Per-row arithmetic is the [`dot`] chain exactly,
/// so a row's result does not depend on the blocking.
#[inline]
fn dot4<T: Real>(w: &[T], x0: &[T], x1: &[T], x2: &[T], x3: &[T]) -> [T; 4] {
    f32_fast_path!(T, {
        let mut out = [0.0f32; 4];
        unsafe {
            x86::dot4(
                as_f32_slice(w),
                [as_f32_slice(x0), as_f32_slice(x1), as_f32_slice(x2), as_f32_slice(x3)],
                &mut out,
            )
        };
        return out.map(T::from_f32);
    });
    let n = w.len();
    let blocks = n / 8;
    let mut a0 = [T::ZERO; 8];
    let mut a1 = [T::ZERO; 8];
    let mut a2 = [T::ZERO; 8];
    let mut a3 = [T::ZERO; 8];
    for c in 0..blocks {
        let o = c * 8;
        let bw: &[T; 8] = w[o..o + 8].try_into().expect("block");
        fma8(&mut a0, x0[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a1, x1[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a2, x2[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a3, x3[o..o + 8].try_into().expect("block"), bw);
    }
    let mut out = [reduce8(&a0), reduce8(&a1), reduce8(&a2), reduce8(&a3)];
    for i in blocks * 8..n {
        let wj = w[i];
        out[0] = x0[i].mul_add(wj, out[0]);
        out[1] = x1[i].mul_add(wj, out[1]);
        out[2] = x2[i].mul_add(wj, out[2]);
        out[3] = x3[i].mul_add(wj, out[3]);
    }
    out
}

/// Eight-row variant of [`dot4`].
#[inline]
#[allow(clippy::too_many_arguments)]
fn dot8<T: Real>(
    w: &[T],
    x0: &[T],
    x1: &[T],
    x2: &[T],
    x3: &[T],
    x4: &[T],
    x5: &[T],
    x6: &[T],
    x7: &[T],
) -> [T; 8] {
    f32_fast_path!(T, {
        let mut out = [0.0f32; 8];
        unsafe {
            x86::dot8(
                as_f32_slice(w),
                [
                    as_f32_slice(x0),
                    as_f32_slice(x1),
                    as_f32_slice(x2),
                    as_f32_slice(x3),
                    as_f32_slice(x4),
                    as_f32_slice(x5),
                    as_f32_slice(x6),
                    as_f32_slice(x7),
                ],
                &mut out,
            )
        };
        return out.map(T::from_f32);
    });
    let n = w.len();
    let blocks = n / 8;
    let mut a0 = [T::ZERO; 8];
    let mut a1 = [T::ZERO; 8];
    let mut a2 = [T::ZERO; 8];
    let mut a3 = [T::ZERO; 8];
    let mut a4 = [T::ZERO; 8];
    let mut a5 = [T::ZERO; 8];
    let mut a6 = [T::ZERO; 8];
    let mut a7 = [T::ZERO; 8];
    for c in 0..blocks {
        let o = c * 8;
        let bw: &[T; 8] = w[o..o + 8].try_into().expect("block");
        fma8(&mut a0, x0[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a1, x1[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a2, x2[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a3, x3[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a4, x4[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a5, x5[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a6, x6[o..o + 8].try_into().expect("block"), bw);
        fma8(&mut a7, x7[o..o + 8].try_into().expect("block"), bw);
    }
    let mut out = [
        reduce8(&a0),
        reduce8(&a1),
        reduce8(&a2),
        reduce8(&a3),
        reduce8(&a4),
        reduce8(&a5),
        reduce8(&a6),
        reduce8(&a7),
    ];
    for i in blocks * 8..n {
        let wj = w[i];
        out[0] = x0[i].mul_add(wj, out[0]);
        out[1] = x1[i].mul_add(wj, out[1]);
        out[2] = x2[i].mul_add(wj, out[2]);
        out[3] = x3[i].mul_add(wj, out[3]);
        out[4] = x4[i].mul_add(wj, out[4]);
        out[5] = x5[i].mul_add(wj, out[5]);
        out[6] = x6[i].mul_add(wj, out[6]);
        out[7] = x7[i].mul_add(wj, out[7]);
    }
    out
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    f32_fast_path!(T, {
        let a = alpha.to_f64() as f32;
        unsafe { x86::axpy(as_f32_slice_mut(y), a, as_f32_slice(x)) };
        return;
    });
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

/// `y[m x out] = x[m x in] * w^T` with `w` stored `[out][in]`.
///
/// Weight rows are the streamed operand: each is read once per call and
/// reused across a 4-row block of `x`, so chunked decoding amortizes the
/// weight traffic that dominates one-row decoding.
pub fn matmul_nt<T: Real>(y: &mut [T], x: &[T], w: &[T], m: usize, in_dim: usize, out_dim: usize) {
    debug_assert_eq!(y.len(), m * out_dim);
    debug_assert_eq!(x.len(), m * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let xrow = |s: usize| &x[s * in_dim..(s + 1) * in_dim];
    for o in 0..out_dim {
        let wrow = &w[o * in_dim..(o + 1) * in_dim];
        let mut s = 0;
        while s + 8 <= m {
            let r = dot8(
                wrow,
                xrow(s),
                xrow(s + 1),
                xrow(s + 2),
                xrow(s + 3),
                xrow(s + 4),
                xrow(s + 5),
                xrow(s + 6),
                xrow(s + 7),
            );
            for (i, v) in r.into_iter().enumerate() {
                y[(s + i) * out_dim + o] = v;
            }
            s += 8;
        }
        while s + 4 <= m {
            let r = dot4(wrow, xrow(s), xrow(s + 1), xrow(s + 2), xrow(s + 3));
            for (i, v) in r.into_iter().enumerate() {
                y[(s + i) * out_dim + o] = v;
            }
            s += 4;
        }
        while s < m {
            y[s * out_dim + o] = dot(xrow(s), wrow);
            s += 1;
        }
    }
}

/// `dx[m x in] += dy[m x out] * w` with `w` stored `[out][in]`.
pub fn matmul_nn_acc<T: Real>(
    dx: &mut [T],
    dy: &[T],
    w: &[T],
    m: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(dx.len(), m * in_dim);
    debug_assert_eq!(dy.len(), m * out_dim);
    for s in 0..m {
        let dxrow = &mut dx[s * in_dim..(s + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy[s * out_dim + o];
            axpy(dxrow, g, &w[o * in_dim..(o + 1) * in_dim]);
        }
    }
}

/// `dw[out x in] += dy^T[m x out] * x[m x in]`.
pub fn matmul_tn_acc<T: Real>(
    dw: &mut [T],
    dy: &[T],
    x: &[T],
    m: usize,
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(dw.len(), out_dim * in_dim);
    for o in 0..out_dim {
        let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for s in 0..m {
            axpy(dwrow, dy[s * out_dim + o], &x[s * in_dim..(s + 1) * in_dim]);
        }
    }
}

/// In-place softmax over `row`, numerically stabilized.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut max = T::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place Cholesky factorization of a symmetric positive-definite matrix
/// (lower triangle). Returns `false` when a pivot drops below `tol`.
pub fn cholesky_in_place(a: &mut [f64], n: usize, tol: f64) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= tol {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    // Zero the upper triangle so the factor is usable directly.
    for i in 0..n {
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Solves `L L^T x = b` in place given the lower factor from
/// [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Eigenvalues of a small symmetric matrix via cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_matches_naive() {
        let mut rng = Rng::seeded(1);
        let (m, in_dim, out_dim) = (5, 19, 257);
        let x: Vec<f64> = (0..m * in_dim).map(|_| rng.normal_f64()).collect();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.normal_f64()).collect();
        let mut y = vec![0.0; m * out_dim];
        matmul_nt(&mut y, &x, &w, m, in_dim, out_dim);
        for s in 0..m {
            for o in 0..out_dim {
                let naive: f64 =
                    (0..in_dim).map(|i| x[s * in_dim + i] * w[o * in_dim + i]).sum();
                assert!((y[s * out_dim + o] - naive).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blocked_rows_match_single_rows_bitwise() {
        // A row's product must not depend on how many rows share the call.
        let mut rng = Rng::seeded(9);
        let (m, in_dim, out_dim) = (7, 33, 13);
        let x: Vec<f32> = (0..m * in_dim).map(|_| rng.normal_f64() as f32).collect();
        let w: Vec<f32> = (0..out_dim * in_dim).map(|_| rng.normal_f64() as f32).collect();
        let mut all = vec![0.0f32; m * out_dim];
        matmul_nt(&mut all, &x, &w, m, in_dim, out_dim);
        for s in 0..m {
            let mut one = vec![0.0f32; out_dim];
            matmul_nt(&mut one, &x[s * in_dim..(s + 1) * in_dim], &w, 1, in_dim, out_dim);
            assert_eq!(one, all[s * out_dim..(s + 1) * out_dim].to_vec(), "row {s}");
        }
    }

    #[test]
    fn backward_kernels_match_naive() {
        let mut rng = Rng::seeded(2);
        let (m, in_dim, out_dim) = (3, 7, 11);
        let x: Vec<f64> = (0..m * in_dim).map(|_| rng.normal_f64()).collect();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.normal_f64()).collect();
        let dy: Vec<f64> = (0..m * out_dim).map(|_| rng.normal_f64()).collect();
        let mut dx = vec![0.0; m * in_dim];
        matmul_nn_acc(&mut dx, &dy, &w, m, in_dim, out_dim);
        let mut dw = vec![0.0; out_dim * in_dim];
        matmul_tn_acc(&mut dw, &dy, &x, m, in_dim, out_dim);
        for s in 0..m {
            for i in 0..in_dim {
                let naive: f64 =
                    (0..out_dim).map(|o| dy[s * out_dim + o] * w[o * in_dim + i]).sum();
                assert!((dx[s * in_dim + i] - naive).abs() < 1e-9);
            }
        }
        for o in 0..out_dim {
            for i in 0..in_dim {
                let naive: f64 =
                    (0..m).map(|s| dy[s * out_dim + o] * x[s * in_dim + i]).sum();
                assert!((dw[o * in_dim + i] - naive).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut row = vec![1.0f64, 2.0, 3.0, -100.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = B B^T + I is SPD.
        let mut rng = Rng::seeded(3);
        let n = 6;
        let b: Vec<f64> = (0..n * n).map(|_| rng.normal_f64()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>()
                    + if i == j { 1.0 } else { 0.0 };
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = (0..n).map(|j| a[i * n + j] * x_true[j]).sum();
        }
        let mut l = a.clone();
        assert!(cholesky_in_place(&mut l, n, 1e-12));
        cholesky_solve(&l, n, &mut rhs);
        for (got, want) in rhs.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_flags_rank_deficiency() {
        // Rank-1 matrix.
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(!cholesky_in_place(&mut a, 2, 1e-12));
    }

    #[test]
    fn jacobi_eigenvalues_match_known() {
        let a = vec![2.0, 1.0, 1.0, 2.0];
        let mut ev = sym_eigenvalues(&a, 2);
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((ev[0] - 1.0).abs() < 1e-10);
        assert!((ev[1] - 3.0).abs() < 1e-10);
        // Diagonal case.
        let d = vec![4.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 16.0];
        let mut ev = sym_eigenvalues(&d, 3);
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(ev, vec![4.0, 9.0, 16.0]);
    }
}
