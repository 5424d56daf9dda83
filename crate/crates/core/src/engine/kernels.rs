//! `f32` inference kernels. An AVX2/FMA path is selected at runtime on x86-64;
//! the scalar path is the reference and the fallback.

use crate::model::BLOCK_ROWS;

/// Whether the vector path is in use on this machine.
pub fn simd_enabled() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out += W x` for row-major `W` of `out.len()` rows.
pub fn gemv_acc(w: &[f32], x: &[f32], out: &mut [f32]) {
    gemv_acc_dir(w, x, out, false)
}

/// As [`gemv_acc`], visiting rows last to first when `reverse` is set. Every
/// output is bit-identical either way; alternating the direction between calls
/// lets a matrix slightly larger than the cache reuse its most recent rows.
pub fn gemv_acc_dir(w: &[f32], x: &[f32], out: &mut [f32], reverse: bool) {
    assert_eq!(w.len(), x.len() * out.len());
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        // SAFETY: features detected; shape checked above.
        unsafe { avx2::gemv_acc(w, x, out, reverse) };
        return;
    }
    scalar::gemv_acc(w, x, out)
}

/// `out += S x` for a matrix stored as 16×1 blocks in row-block order.
pub fn block_sparse_acc(row_ptr: &[u32], col_idx: &[u32], values: &[f32], x: &[f32], out: &mut [f32]) {
    block_sparse_acc_dir(row_ptr, col_idx, values, x, out, false)
}

/// As [`block_sparse_acc`], visiting row blocks last to first when `reverse` is set.
pub fn block_sparse_acc_dir(
    row_ptr: &[u32],
    col_idx: &[u32],
    values: &[f32],
    x: &[f32],
    out: &mut [f32],
    reverse: bool,
) {
    assert_eq!(row_ptr.len(), out.len() / BLOCK_ROWS + 1);
    assert!(values.len() >= BLOCK_ROWS * row_ptr[row_ptr.len() - 1] as usize);
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        // SAFETY: features detected; block values are in range by the check
        // above and column indices are bounds-checked in the loop.
        unsafe { avx2::block_sparse_acc(row_ptr, col_idx, values, x, out, reverse) };
        return;
    }
    scalar::block_sparse_acc(row_ptr, col_idx, values, x, out)
}

#[inline]
pub fn add_assign(out: &mut [f32], a: &[f32]) {
    for (o, v) in out.iter_mut().zip(a) {
        *o += v;
    }
}

const TANH_CLAMP: f32 = 7.905_311;
const TANH_A: [f32; 7] = [
    4.893_524_6e-3,
    6.372_619_3e-4,
    1.485_722_4e-5,
    5.122_297e-8,
    -8.604_672e-11,
    2.000_188e-13,
    -2.760_768_5e-16,
];
const TANH_B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347e-4, 1.198_258_4e-6];

/// Rational approximation of `tanh`, within a few ulp of the libm value.
#[inline]
pub fn tanh_approx(x: f32) -> f32 {
    let x = x.clamp(-TANH_CLAMP, TANH_CLAMP);
    let x2 = x * x;
    let mut p = TANH_A[6];
    for c in TANH_A[..6].iter().rev() {
        p = p * x2 + c;
    }
    let mut q = TANH_B[3];
    for c in TANH_B[..3].iter().rev() {
        q = q * x2 + c;
    }
    if x.abs() < 4e-4 {
        x
    } else {
        x * p / q
    }
}

#[inline]
pub fn sigmoid_approx(x: f32) -> f32 {
    0.5 + 0.5 * tanh_approx(0.5 * x)
}

/// Reset-after GRU update in place: `gi` and `gh` are `[z; r; n]` pre-activations.
pub fn gru_update(h: &mut [f32], gi: &[f32], gh: &[f32]) {
    assert!(gi.len() >= 3 * h.len() && gh.len() >= 3 * h.len());
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        // SAFETY: features detected; lengths checked above.
        unsafe { avx2::gru_update(h, gi, gh) };
        return;
    }
    scalar::gru_update(h, gi, gh)
}

pub mod scalar {
    use super::{sigmoid_approx, tanh_approx, BLOCK_ROWS};

    pub fn gru_update(h: &mut [f32], gi: &[f32], gh: &[f32]) {
        let u = h.len();
        for i in 0..u {
            let z = sigmoid_approx(gi[i] + gh[i]);
            let r = sigmoid_approx(gi[u + i] + gh[u + i]);
            let n = tanh_approx(gi[2 * u + i] + r * gh[2 * u + i]);
            h[i] = (1.0 - z) * n + z * h[i];
        }
    }

    pub fn gemv_acc(w: &[f32], x: &[f32], out: &mut [f32]) {
        let n = x.len();
        for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
        }
    }

    pub fn block_sparse_acc(row_ptr: &[u32], col_idx: &[u32], values: &[f32], x: &[f32], out: &mut [f32]) {
        for (rb, o) in out.chunks_exact_mut(BLOCK_ROWS).enumerate() {
            for b in row_ptr[rb] as usize..row_ptr[rb + 1] as usize {
                let v = x[col_idx[b] as usize];
                for (oi, w) in o.iter_mut().zip(&values[b * BLOCK_ROWS..(b + 1) * BLOCK_ROWS]) {
                    *oi += w * v;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
pub mod avx2 {
    use std::arch::x86_64::*;

    use super::BLOCK_ROWS;

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn dot(wp: *const f32, xp: *const f32, n: usize) -> f32 {
        let body = n - n % 8;
        let mut acc = _mm256_setzero_ps();
        let mut j = 0;
        while j < body {
            acc = _mm256_fmadd_ps(_mm256_loadu_ps(wp.add(j)), _mm256_loadu_ps(xp.add(j)), acc);
            j += 8;
        }
        let mut s = hsum(acc);
        for k in body..n {
            s += *wp.add(k) * *xp.add(k);
        }
        s
    }

    /// Four rows at once; each row sums exactly as in [`dot`].
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn dot4(w0: *const f32, n: usize, xp: *const f32) -> [f32; 4] {
        let body = n - n % 8;
        let (w1, w2, w3) = (w0.add(n), w0.add(2 * n), w0.add(3 * n));
        let z = _mm256_setzero_ps();
        let (mut a0, mut a1, mut a2, mut a3) = (z, z, z, z);
        let mut j = 0;
        while j < body {
            let xv = _mm256_loadu_ps(xp.add(j));
            a0 = _mm256_fmadd_ps(_mm256_loadu_ps(w0.add(j)), xv, a0);
            a1 = _mm256_fmadd_ps(_mm256_loadu_ps(w1.add(j)), xv, a1);
            a2 = _mm256_fmadd_ps(_mm256_loadu_ps(w2.add(j)), xv, a2);
            a3 = _mm256_fmadd_ps(_mm256_loadu_ps(w3.add(j)), xv, a3);
            j += 8;
        }
        let mut s = [hsum(a0), hsum(a1), hsum(a2), hsum(a3)];
        for k in body..n {
            let xk = *xp.add(k);
            s[0] += *w0.add(k) * xk;
            s[1] += *w1.add(k) * xk;
            s[2] += *w2.add(k) * xk;
            s[3] += *w3.add(k) * xk;
        }
        s
    }

    /// # Safety
    /// Requires AVX2 and FMA; `w.len() == x.len() * out.len()`.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gemv_acc(w: &[f32], x: &[f32], out: &mut [f32], reverse: bool) {
        let n = x.len();
        let (wp, xp) = (w.as_ptr(), x.as_ptr());
        let rows = out.len();
        let groups = rows / 4;
        if reverse {
            for r in (4 * groups..rows).rev() {
                out[r] += dot(wp.add(r * n), xp, n);
            }
        }
        for k in 0..groups {
            let g = if reverse { groups - 1 - k } else { k };
            let s = dot4(wp.add(4 * g * n), n, xp);
            for (o, v) in out[4 * g..4 * g + 4].iter_mut().zip(s) {
                *o += v;
            }
        }
        if !reverse {
            for r in 4 * groups..rows {
                out[r] += dot(wp.add(r * n), xp, n);
            }
        }
    }

    /// # Safety
    /// Requires AVX2 and FMA; `values` must hold 16 entries for every block.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn block_sparse_acc(
        row_ptr: &[u32],
        col_idx: &[u32],
        values: &[f32],
        x: &[f32],
        out: &mut [f32],
        reverse: bool,
    ) {
        debug_assert_eq!(BLOCK_ROWS, 16);
        let vp = values.as_ptr();
        let nb = out.len() / BLOCK_ROWS;
        for k in 0..nb {
            let rb = if reverse { nb - 1 - k } else { k };
            let o = &mut out[rb * BLOCK_ROWS..(rb + 1) * BLOCK_ROWS];
            let (lo, hi) = (row_ptr[rb] as usize, row_ptr[rb + 1] as usize);
            let cols = &col_idx[lo..hi];
            // Four blocks per iteration keep eight FMA chains in flight.
            let z = _mm256_setzero_ps();
            let (mut a0, mut a1, mut a2, mut a3, mut a4, mut a5, mut a6, mut a7) = (z, z, z, z, z, z, z, z);
            let mut p = vp.add(lo * 16);
            let quads = cols.chunks_exact(4);
            let rest = quads.remainder();
            for q in quads {
                let (v0, v1) = (_mm256_set1_ps(x[q[0] as usize]), _mm256_set1_ps(x[q[1] as usize]));
                let (v2, v3) = (_mm256_set1_ps(x[q[2] as usize]), _mm256_set1_ps(x[q[3] as usize]));
                a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p), v0, a0);
                a1 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(8)), v0, a1);
                a2 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(16)), v1, a2);
                a3 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(24)), v1, a3);
                a4 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(32)), v2, a4);
                a5 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(40)), v2, a5);
                a6 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(48)), v3, a6);
                a7 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(56)), v3, a7);
                p = p.add(64);
            }
            for &c in rest {
                let v = _mm256_set1_ps(x[c as usize]);
                a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p), v, a0);
                a1 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(8)), v, a1);
                p = p.add(16);
            }
            let a = [a0, a1, a2, a3, a4, a5, a6, a7];
            let op = o.as_mut_ptr();
            let lo8 = _mm256_add_ps(_mm256_add_ps(a[0], a[2]), _mm256_add_ps(a[4], a[6]));
            let hi8 = _mm256_add_ps(_mm256_add_ps(a[1], a[3]), _mm256_add_ps(a[5], a[7]));
            _mm256_storeu_ps(op, _mm256_add_ps(_mm256_loadu_ps(op), lo8));
            _mm256_storeu_ps(op.add(8), _mm256_add_ps(_mm256_loadu_ps(op.add(8)), hi8));
        }
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tanh8(x: __m256) -> __m256 {
        let c = _mm256_set1_ps(super::TANH_CLAMP);
        let x = _mm256_max_ps(_mm256_min_ps(x, c), _mm256_sub_ps(_mm256_setzero_ps(), c));
        let x2 = _mm256_mul_ps(x, x);
        let a = &super::TANH_A;
        let mut p = _mm256_set1_ps(a[6]);
        for k in (0..6).rev() {
            p = _mm256_fmadd_ps(p, x2, _mm256_set1_ps(a[k]));
        }
        let bq = &super::TANH_B;
        let mut q = _mm256_set1_ps(bq[3]);
        for k in (0..3).rev() {
            q = _mm256_fmadd_ps(q, x2, _mm256_set1_ps(bq[k]));
        }
        let r = _mm256_div_ps(_mm256_mul_ps(x, p), q);
        let abs = _mm256_andnot_ps(_mm256_set1_ps(-0.0), x);
        let small = _mm256_cmp_ps::<_CMP_LT_OQ>(abs, _mm256_set1_ps(4e-4));
        _mm256_blendv_ps(r, x, small)
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn sigmoid8(x: __m256) -> __m256 {
        let half = _mm256_set1_ps(0.5);
        _mm256_fmadd_ps(half, tanh8(_mm256_mul_ps(half, x)), half)
    }

    /// # Safety
    /// Requires AVX2 and FMA; `gi` and `gh` hold at least `3 h.len()` values.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn gru_update(h: &mut [f32], gi: &[f32], gh: &[f32]) {
        let u = h.len();
        let body = u - u % 8;
        let (ip, hp, op) = (gi.as_ptr(), gh.as_ptr(), h.as_mut_ptr());
        let one = _mm256_set1_ps(1.0);
        let mut i = 0;
        while i < body {
            let ld = |p: *const f32, k: usize| _mm256_loadu_ps(p.add(k));
            let z = sigmoid8(_mm256_add_ps(ld(ip, i), ld(hp, i)));
            let r = sigmoid8(_mm256_add_ps(ld(ip, u + i), ld(hp, u + i)));
            let n = tanh8(_mm256_fmadd_ps(r, ld(hp, 2 * u + i), ld(ip, 2 * u + i)));
            let hv = _mm256_loadu_ps(op.add(i));
            let out = _mm256_fmadd_ps(_mm256_sub_ps(one, z), n, _mm256_mul_ps(z, hv));
            _mm256_storeu_ps(op.add(i), out);
            i += 8;
        }
        for k in body..u {
            let z = super::sigmoid_approx(gi[k] + gh[k]);
            let r = super::sigmoid_approx(gi[u + k] + gh[u + k]);
            let n = super::tanh_approx(gi[2 * u + k] + r * gh[2 * u + k]);
            h[k] = (1.0 - z) * n + z * h[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn tanh_and_sigmoid_track_libm() {
        let mut worst = (0.0f32, 0.0f32);
        for i in -200_000..=200_000 {
            let x = i as f32 * 1e-4;
            worst.0 = worst.0.max((tanh_approx(x) - x.tanh()).abs());
            worst.1 = worst.1.max((sigmoid_approx(x) - 1.0 / (1.0 + (-x).exp())).abs());
        }
        assert!(worst.0 < 5e-7 && worst.1 < 5e-7, "{worst:?}");
        assert_eq!(tanh_approx(50.0), tanh_approx(TANH_CLAMP));
        assert!(tanh_approx(f32::MAX) <= 1.0);
    }

    #[test]
    fn gemv_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (rows, cols) in [(1, 1), (3, 15), (7, 16), (9, 37), (96, 1184)] {
            let w = rand_vec(&mut rng, rows * cols);
            let x = rand_vec(&mut rng, cols);
            let base = rand_vec(&mut rng, rows);
            let (mut a, mut b) = (base.clone(), base.clone());
            gemv_acc(&w, &x, &mut a);
            scalar::gemv_acc(&w, &x, &mut b);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-5 * (cols as f32).sqrt(), "{rows}x{cols}: {p} {q}");
            }
        }
    }

    #[test]
    fn gru_update_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for u in [1, 7, 8, 21, 64] {
            let gi: Vec<f32> = (0..3 * u).map(|_| rng.gen_range(-9.0..9.0)).collect();
            let gh: Vec<f32> = (0..3 * u).map(|_| rng.gen_range(-9.0..9.0)).collect();
            let h0 = rand_vec(&mut rng, u);
            let (mut a, mut b) = (h0.clone(), h0);
            gru_update(&mut a, &gi, &gh);
            scalar::gru_update(&mut b, &gi, &gh);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-6, "{u}: {p} {q}");
            }
        }
    }

    #[test]
    fn block_sparse_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, cols) = (48, 40);
        let mut dense = vec![0.0f32; rows * cols];
        let mut row_ptr = vec![0u32];
        let (mut col_idx, mut values) = (Vec::new(), Vec::new());
        for rb in 0..rows / 16 {
            for c in 0..cols {
                if rng.gen_bool(0.3) {
                    col_idx.push(c as u32);
                    for r in 0..16 {
                        let v = rng.gen_range(-1.0..1.0);
                        values.push(v);
                        dense[(rb * 16 + r) * cols + c] = v;
                    }
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        let x = rand_vec(&mut rng, cols);
        let mut a = vec![0.5f32; rows];
        let mut b = a.clone();
        let mut c = a.clone();
        block_sparse_acc(&row_ptr, &col_idx, &values, &x, &mut a);
        scalar::block_sparse_acc(&row_ptr, &col_idx, &values, &x, &mut b);
        scalar::gemv_acc(&dense, &x, &mut c);
        for i in 0..rows {
            assert!((a[i] - b[i]).abs() < 1e-5 && (a[i] - c[i]).abs() < 1e-5);
        }
    }
}
