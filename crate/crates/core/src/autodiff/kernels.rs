//! Row-major dense kernels. All of them accumulate into `out`.

use num_traits::Float;

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    for v in acc {
        s = s + v;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out (r×c) += a (r×k) · b (k×c)`
pub fn mm<T: Float>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * c..(p + 1) * c], orow);
            }
        }
    }
}

/// `out (r×c) += a (r×k) · bᵀ` with `b` stored `c×k`.
pub fn mm_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            out[i * c + j] = out[i * c + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out (k×c) += aᵀ · b` with `a` stored `r×k` and `b` stored `r×c`.
pub fn mm_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, brow, &mut out[p * c..(p + 1) * c]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn kernels_agree_with_naive() {
        let (r, k, c) = (3, 11, 5);
        let a: alloc::vec::Vec<f64> = (0..r * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f64> = (0..k * c).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for p in 0..k {
                    naive[i * c + j] += a[i * k + p] * b[p * c + j];
                }
            }
        }
        let mut out = vec![0.0; r * c];
        mm(&a, &b, &mut out, r, k, c);
        let mut bt = vec![0.0; c * k];
        for p in 0..k {
            for j in 0..c {
                bt[j * k + p] = b[p * c + j];
            }
        }
        let mut out_nt = vec![0.0; r * c];
        mm_nt(&a, &bt, &mut out_nt, r, k, c);
        let mut at = vec![0.0; k * r];
        for i in 0..r {
            for p in 0..k {
                at[p * r + i] = a[i * k + p];
            }
        }
        let mut out_tn = vec![0.0; r * c];
        mm_tn(&at, &b, &mut out_tn, k, r, c);
        for i in 0..r * c {
            assert!((out[i] - naive[i]).abs() < 1e-12);
            assert!((out_nt[i] - naive[i]).abs() < 1e-12);
            assert!((out_tn[i] - naive[i]).abs() < 1e-12);
        }
    }
}
