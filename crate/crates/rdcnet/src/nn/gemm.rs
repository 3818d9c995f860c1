//! Serial matrix multiply kernels.
//!
//! All three accumulate into `c` (`c += ...`), so callers chain per-sample
//! contributions without extra buffers. Loop orders are chosen so the inner
//! loop walks both operands contiguously; that is where nearly all training
//! time goes on a single core.

use crate::tensor::Elem;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn<T: Elem>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (rows of `a` dotted with rows of `b`)
pub fn gemm_nt<T: Elem>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn gemm_tn<T: Elem>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // a = [1 2; 3 4], b = [5 6; 7 8]
    const A: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
    const B: [f64; 4] = [5.0, 6.0, 7.0, 8.0];

    #[test]
    fn nn_matches_hand_product() {
        let mut c = [0.0f64; 4];
        gemm_nn(&mut c, &A, &B, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // accumulation: second call doubles
        gemm_nn(&mut c, &A, &B, 2, 2, 2);
        assert_eq!(c, [38.0, 44.0, 86.0, 100.0]);
    }

    #[test]
    fn nt_equals_nn_with_pretransposed_b() {
        let b_t = [5.0, 7.0, 6.0, 8.0]; // B^T
        let mut via_nt = [0.0f64; 4];
        gemm_nt(&mut via_nt, &A, &b_t, 2, 2, 2);
        let mut via_nn = [0.0f64; 4];
        gemm_nn(&mut via_nn, &A, &B, 2, 2, 2);
        assert_eq!(via_nt, via_nn);
    }

    #[test]
    fn tn_equals_nn_with_pretransposed_a() {
        let a_t = [1.0, 3.0, 2.0, 4.0]; // A^T stored, gemm_tn re-transposes
        let mut via_tn = [0.0f64; 4];
        gemm_tn(&mut via_tn, &a_t, &B, 2, 2, 2);
        let mut via_nn = [0.0f64; 4];
        gemm_nn(&mut via_nn, &A, &B, 2, 2, 2);
        assert_eq!(via_tn, via_nn);
    }

    #[test]
    fn rectangular_shapes() {
        // a[1,3] * b[3,2]
        let a = [1.0f64, 2.0, 3.0];
        let b = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c = [0.0f64; 2];
        gemm_nn(&mut c, &a, &b, 1, 3, 2);
        assert_eq!(c, [14.0, 32.0]);
    }
}
