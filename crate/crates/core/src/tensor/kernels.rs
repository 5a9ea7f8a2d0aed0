//! Dense 2-D matrix kernels. Row-parallel; each output row is computed
//! independently so parallel and sequential runs are bit-identical.

use crate::par;

/// out[m×n] = a[m×k] · b[k×n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row(out, n, k * n, |i, row| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
                    *o += aip * bv;
                }
            }
        }
    });
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row(out, n, k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = dot(a_row, b_row);
        }
    });
}

/// out[k×n] = a[m×k]ᵀ · b[m×n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    par::for_each_row(out, n, m * n, |p, row| {
        row.fill(0.0);
        for i in 0..m {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let b_row = &b[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
                    *o += aip * bv;
                }
            }
        }
    });
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_identity() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 6];
        matmul_nn(&eye, &b, 3, 3, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn nt_matches_nn_with_transpose() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]; // 2x3 (treated as Bᵀ of 3x2)
        let mut nt = vec![0.0; 4];
        matmul_nt(&a, &b, 2, 3, 2, &mut nt);
        // transpose b manually -> 3x2
        let bt = vec![7.0, 1.0, 8.0, 2.0, 9.0, 3.0];
        let mut nn = vec![0.0; 4];
        matmul_nn(&a, &bt, 2, 3, 2, &mut nn);
        assert_eq!(nt, nn);
    }

    #[test]
    fn tn_matches_nn_with_transpose() {
        let a = vec![1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = vec![5.0, 6.0, 7.0, 8.0]; // 2x2
        let mut tn = vec![0.0; 4];
        matmul_tn(&a, &b, 2, 2, 2, &mut tn);
        let at = vec![1.0, 3.0, 2.0, 4.0];
        let mut nn = vec![0.0; 4];
        matmul_nn(&at, &b, 2, 2, 2, &mut nn);
        assert_eq!(tn, nn);
    }
}
