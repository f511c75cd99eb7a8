//! Matrix kernels. Every output element is reduced in a fixed order so
//! results do not depend on how rows are spread across threads.

use crate::parallel::Parallelism;

const PAR_THRESHOLD: usize = 1 << 15;

fn mode(work: usize) -> Parallelism {
    if work >= PAR_THRESHOLD {
        Parallelism::default()
    } else {
        Parallelism::Sequential
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    mode(m * k * n).for_each_chunk(c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], c: &mut [f64]) {
    debug_assert_eq!(c.len(), k * n);
    mode(m * k * n).for_each_chunk(c, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            for (cv, &gv) in row.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    });
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * k);
    mode(m * k * n).for_each_chunk(c, k, |i, row| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, cv) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *cv += s;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree_with_plain_gemm() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.11).cos()).collect();
        // aᵀ explicitly
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c1 = vec![0.0; k * n];
        gemm(k, m, n, &at, &g, &mut c1);
        let mut c2 = vec![0.0; k * n];
        gemm_tn(m, k, n, &a, &g, &mut c2);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
