//! Dense row-major kernels used by the Q-network.
//!
//! Shapes are passed explicitly; all matrices are contiguous row-major
//! slices. The kernels block over four rows so that each loaded row of the
//! shared operand feeds four accumulators.

const LANES: usize = 8;

#[inline(always)]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut s = 0.0;
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    acc.iter().sum::<f64>() + s
}

#[inline(always)]
fn dot4(w: &[f64], x0: &[f64], x1: &[f64], x2: &[f64], x3: &[f64]) -> [f64; 4] {
    let k = w.len();
    let mut a0 = [0.0f64; LANES];
    let mut a1 = [0.0f64; LANES];
    let mut a2 = [0.0f64; LANES];
    let mut a3 = [0.0f64; LANES];
    let chunks = k / LANES;
    for c in 0..chunks {
        let r = c * LANES..(c + 1) * LANES;
        let wc = &w[r.clone()];
        let (c0, c1, c2, c3) = (&x0[r.clone()], &x1[r.clone()], &x2[r.clone()], &x3[r]);
        for l in 0..LANES {
            a0[l] += wc[l] * c0[l];
            a1[l] += wc[l] * c1[l];
            a2[l] += wc[l] * c2[l];
            a3[l] += wc[l] * c3[l];
        }
    }
    let mut out = [a0.iter().sum::<f64>(), a1.iter().sum(), a2.iter().sum(), a3.iter().sum()];
    for i in chunks * LANES..k {
        out[0] += w[i] * x0[i];
        out[1] += w[i] * x1[i];
        out[2] += w[i] * x2[i];
        out[3] += w[i] * x3[i];
    }
    out
}

/// `c[i][j] = sum_k a[i][k] * b[j][k]`, with `a: m x k`, `b: n x k`,
/// `c: m x n`. Overwrites `c`.
pub fn matmul_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let rows = [
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        ];
        for j in 0..n {
            let d = dot4(&b[j * k..(j + 1) * k], rows[0], rows[1], rows[2], rows[3]);
            for r in 0..4 {
                c[(i + r) * n + j] = d[r];
            }
        }
    }
    for i in blocks * 4..m {
        for j in 0..n {
            c[i * n + j] = dot_lanes(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[i][j] += sum_k a[i][k] * b[k][j]`, with `a: m x k`, `b: k x n`,
/// `c: m x n`.
pub fn matmul_ab_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        axpy_rows(crow, |t| arow[t], |t| &b[t * n..(t + 1) * n], k);
    }
}

/// `c[i][j] += sum_r a[r][i] * b[r][j]`, with `a: rows x m`, `b: rows x n`,
/// `c: m x n`.
pub fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], rows: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), rows * m);
    debug_assert_eq!(b.len(), rows * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        axpy_rows(crow, |r| a[r * m + i], |r| &b[r * n..(r + 1) * n], rows);
    }
}

/// `c += sum_t coef(t) * row(t)` for `t < count`, four rows per pass.
#[inline(always)]
fn axpy_rows<'a>(c: &mut [f64], coef: impl Fn(usize) -> f64, row: impl Fn(usize) -> &'a [f64], count: usize) {
    let blocks = count / 4;
    for blk in 0..blocks {
        let t = blk * 4;
        let (s0, s1, s2, s3) = (coef(t), coef(t + 1), coef(t + 2), coef(t + 3));
        if s0 == 0.0 && s1 == 0.0 && s2 == 0.0 && s3 == 0.0 {
            continue;
        }
        let (r0, r1, r2, r3) = (row(t), row(t + 1), row(t + 2), row(t + 3));
        for j in 0..c.len() {
            c[j] += s0 * r0[j] + s1 * r1[j] + s2 * r2[j] + s3 * r3[j];
        }
    }
    for t in blocks * 4..count {
        let s = coef(t);
        if s != 0.0 {
            for (cj, rj) in c.iter_mut().zip(row(t)) {
                *cj += s * rj;
            }
        }
    }
}
