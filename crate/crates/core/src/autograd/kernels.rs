//! Raw row-major matrix kernels. All inner products accumulate in f64
//! and round to f32 once at the end. Operands are widened to f64 in a
//! scratch buffer up front so the hot loops run pure f64 multiply-adds.

fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| v as f64));
}

/// f64 dot, eight-wide unroll.
fn ddot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += x[i + l] * y[i + l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..n {
        s += x[i] * y[i];
    }
    s
}

/// out = a[m,k] . b[k,n]
pub(crate) fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut b64 = Vec::new();
    widen(b, &mut b64);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let aip = aip as f64;
            let brow = &b64[p * n..(p + 1) * n];
            for j in 0..n {
                acc[j] += aip * brow[j];
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = acc[j] as f32;
        }
    }
}

/// out = a[m,k] . b[n,k]^T  (dot products of rows)
pub(crate) fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut b64 = Vec::new();
    widen(b, &mut b64);
    let mut arow64 = vec![0.0f64; k];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for (d, &v) in arow64.iter_mut().zip(arow.iter()) {
            *d = v as f64;
        }
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = ddot(&arow64, &b64[j * k..(j + 1) * k]) as f32;
        }
    }
}

/// out = a[m,k]^T . b[m,n]
pub(crate) fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut acc = vec![0.0f64; k * n];
    let mut brow64 = vec![0.0f64; n];
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (d, &v) in brow64.iter_mut().zip(brow.iter()) {
            *d = v as f64;
        }
        for (i, &api) in arow.iter().enumerate() {
            let api = api as f64;
            let dst = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += api * brow64[j];
            }
        }
    }
    for (o, v) in out.iter_mut().zip(acc.iter()) {
        *o = *v as f32;
    }
}

/// f64-accumulated dot product over f32 slices (used by loss reductions).
pub(crate) fn dot(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += x[i] as f64 * y[i] as f64;
        s1 += x[i + 1] as f64 * y[i + 1] as f64;
        s2 += x[i + 2] as f64 * y[i + 2] as f64;
        s3 += x[i + 3] as f64 * y[i + 3] as f64;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..x.len() {
        s += x[i] as f64 * y[i] as f64;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_loops() {
        use rand::Rng;
        let mut rng = crate::seed::rng_for(11, "kernels");
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (2, 3, 4), (5, 7, 3), (8, 8, 8), (3, 17, 5)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive(&a, &b, m, k, n);

            let mut got = vec![0.0; m * n];
            mm(&a, &b, m, k, n, &mut got);
            assert_eq!(got, want);

            // b^T laid out as [n,k]
            let mut bt = vec![0.0f32; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut got_nt = vec![0.0; m * n];
            mm_nt(&a, &bt, m, k, n, &mut got_nt);
            for (x, y) in got_nt.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-6);
            }

            // a^T laid out as [k,m]; mm_tn(a^T as [k rows of m]) reproduces a.b
            let mut at = vec![0.0f32; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut got_tn = vec![0.0; m * n];
            mm_tn(&at, &b, k, m, n, &mut got_tn);
            for (x, y) in got_tn.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dot_matches_scalar_sum()
    {
        use rand::Rng;
        let mut rng = crate::seed::rng_for(13, "dot");
        for len in [0usize, 1, 3, 4, 9, 64, 65] {
            let x: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want: f64 = x.iter().zip(y.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((dot(&x, &y) - want).abs() < 1e-12);
        }
    }
}
