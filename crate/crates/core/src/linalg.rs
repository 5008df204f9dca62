//! Dense symmetric positive-definite routines on row-major buffers.

use crate::error::{numeric_err, Result};

const BLOCK: usize = 64;

/// Relative pivot floor: a pivot below `PIVOT_TOL * max(diag)` is treated
/// as a loss of positive definiteness.
pub const PIVOT_TOL: f64 = 1e-12;

/// Lower Cholesky factor `L` with `A = L Lᵀ`. Only the lower triangle of
/// `a` is read; the strict upper triangle of the result is zero.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n, "cholesky: buffer is not n x n");
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return Err(numeric_err!("cholesky: matrix has no positive diagonal entry"));
    }
    let floor = PIVOT_TOL * max_diag;
    let mut l = a.to_vec();
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + BLOCK).min(n);
        // diagonal block
        for j in k0..k1 {
            let mut d = l[j * n + j];
            for p in k0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if !(d > floor) || !d.is_finite() {
                return Err(numeric_err!("cholesky: pivot {d:e} at row {j} below tolerance {floor:e}"));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..k1 {
                let mut s = l[i * n + j];
                for p in k0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / d;
            }
        }
        // panel below the diagonal block: P <- P L11^-T
        for i in k1..n {
            for j in k0..k1 {
                let mut s = l[i * n + j];
                for p in k0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / l[j * n + j];
            }
        }
        // trailing update: A22 <- A22 - P Pᵀ
        let m = n - k1;
        if m > 0 {
            let kb = k1 - k0;
            let ptr = l.as_mut_ptr();
            // SAFETY: the panel (rows k1.., cols k0..k1) and the trailing
            // block (rows k1.., cols k1..) are disjoint regions of `l`, both
            // in bounds for an n x n buffer.
            unsafe {
                let panel = ptr.add(k1 * n + k0);
                let c = ptr.add(k1 * n + k1);
                matrixmultiply::dgemm(
                    m,
                    kb,
                    m,
                    -1.0,
                    panel,
                    n as isize,
                    1,
                    panel,
                    1,
                    n as isize,
                    1.0,
                    c,
                    n as isize,
                    1,
                );
            }
        }
        k0 = k1;
    }
    for i in 0..n {
        for j in i + 1..n {
            l[i * n + j] = 0.0;
        }
    }
    Ok(l)
}

/// Cholesky of `A + ε I`, retrying with `10ε` and `100ε`. Returns the
/// factor and the jitter that succeeded.
pub fn cholesky_jittered(a: &[f64], n: usize, eps: f64) -> Result<(Vec<f64>, f64)> {
    let mut tried = Vec::with_capacity(3);
    let mut last = None;
    for mult in [1.0, 10.0, 100.0] {
        let jitter = eps * mult;
        if tried.contains(&jitter) {
            continue;
        }
        tried.push(jitter);
        let mut m = a.to_vec();
        for i in 0..n {
            m[i * n + i] += jitter;
        }
        match cholesky(&m, n) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = Some(e),
        }
    }
    Err(numeric_err!(
        "cholesky failed with jitter {tried:?}: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    ))
}

/// Solves `L X = B` in place for lower-triangular `L` (`n x n`) and `B`
/// of shape `n x m`.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i * m);
        let row = &mut rest[..m];
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                let src = &done[p * m..(p + 1) * m];
                row.iter_mut().zip(src).for_each(|(r, s)| *r -= lip * s);
            }
        }
        let d = l[i * n + i];
        row.iter_mut().for_each(|r| *r /= d);
    }
}

/// Solves `Lᵀ X = B` in place.
pub fn solve_upper_t(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in (0..n).rev() {
        let (head, tail) = b.split_at_mut((i + 1) * m);
        let row = &mut head[i * m..];
        for p in i + 1..n {
            let lpi = l[p * n + i];
            if lpi != 0.0 {
                let src = &tail[(p - i - 1) * m..(p - i) * m];
                row.iter_mut().zip(src).for_each(|(r, s)| *r -= lpi * s);
            }
        }
        let d = l[i * n + i];
        row.iter_mut().for_each(|r| *r /= d);
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` given its factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    solve_lower(l, n, &mut x, 1);
    solve_upper_t(l, n, &mut x, 1);
    x
}

/// `L v` for lower-triangular `L`.
pub fn lower_mul_vec(l: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| (0..=i).map(|j| l[i * n + j] * v[j]).sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> Vec<f64> {
        // A = B Bᵀ + n I with a deterministic B
        let b: Vec<f64> = (0..n * n).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64) / 500.0 - 1.0).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>() + if i == j { n as f64 } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn reconstructs_across_block_sizes() {
        for n in [1, 3, 64, 65, 150] {
            let a = spd(n, 7);
            let l = cholesky(&a, n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
                    assert!((s - a[i * n + j]).abs() < 1e-9 * a[i * n + i].abs().max(1.0), "n={n}");
                }
            }
        }
    }

    #[test]
    fn solves_match() {
        let n = 70;
        let a = spd(n, 3);
        let l = cholesky(&a, n).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = cholesky_solve(&l, n, &b);
        for i in 0..n {
            let r: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_fails_and_jitter_rescues() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        assert!(cholesky(&a, 2).is_err());
        assert!(cholesky_jittered(&a, 2, 0.0).is_err());
        let (_, used) = cholesky_jittered(&a, 2, 1e-6).unwrap();
        assert_eq!(used, 1e-6);
    }
}
