//! Register-tiled matrix multiply kernels backing the conv layers.
//!
//! The accumulators live in fixed-size local arrays so the autovectorizer
//! keeps them in vector registers across the reduction loop.

use super::tensor::Scalar;

const TILE: usize = 16;

/// `c[M,S] += a[M,K] * b[K,S]`, row-major, accumulating.
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, s: usize) {
    matmul_impl::<T, true>(c, a, b, m, k, s)
}

/// `c[M,S] = a[M,K] * b[K,S]`, overwriting every element of `c`.
pub fn matmul_set<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, s: usize) {
    matmul_impl::<T, false>(c, a, b, m, k, s)
}

fn matmul_impl<T: Scalar, const ACC: bool>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    s: usize,
) {
    debug_assert_eq!(c.len(), m * s);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * s);

    let mut row = 0;
    while row + 4 <= m {
        let (head, _) = c[row * s..].split_at_mut(4 * s);
        let (c0, rest) = head.split_at_mut(s);
        let (c1, rest) = rest.split_at_mut(s);
        let (c2, c3) = rest.split_at_mut(s);
        let a0 = &a[row * k..(row + 1) * k];
        let a1 = &a[(row + 1) * k..(row + 2) * k];
        let a2 = &a[(row + 2) * k..(row + 3) * k];
        let a3 = &a[(row + 3) * k..(row + 4) * k];

        let mut j = 0;
        while j + TILE <= s {
            let mut acc0 = [T::ZERO; TILE];
            let mut acc1 = [T::ZERO; TILE];
            let mut acc2 = [T::ZERO; TILE];
            let mut acc3 = [T::ZERO; TILE];
            for kk in 0..k {
                let bt = &b[kk * s + j..kk * s + j + TILE];
                let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                for t in 0..TILE {
                    let bv = bt[t];
                    acc0[t] += v0 * bv;
                    acc1[t] += v1 * bv;
                    acc2[t] += v2 * bv;
                    acc3[t] += v3 * bv;
                }
            }
            for t in 0..TILE {
                if ACC {
                    c0[j + t] += acc0[t];
                    c1[j + t] += acc1[t];
                    c2[j + t] += acc2[t];
                    c3[j + t] += acc3[t];
                } else {
                    c0[j + t] = acc0[t];
                    c1[j + t] = acc1[t];
                    c2[j + t] = acc2[t];
                    c3[j + t] = acc3[t];
                }
            }
            j += TILE;
        }
        while j < s {
            let (mut s0, mut s1, mut s2, mut s3) = (T::ZERO, T::ZERO, T::ZERO, T::ZERO);
            for kk in 0..k {
                let bv = b[kk * s + j];
                s0 += a0[kk] * bv;
                s1 += a1[kk] * bv;
                s2 += a2[kk] * bv;
                s3 += a3[kk] * bv;
            }
            if ACC {
                c0[j] += s0;
                c1[j] += s1;
                c2[j] += s2;
                c3[j] += s3;
            } else {
                c0[j] = s0;
                c1[j] = s1;
                c2[j] = s2;
                c3[j] = s3;
            }
            j += 1;
        }
        row += 4;
    }
    while row < m {
        let crow = &mut c[row * s..(row + 1) * s];
        if !ACC {
            crow.iter_mut().for_each(|v| *v = T::ZERO);
        }
        let arow = &a[row * k..(row + 1) * k];
        for kk in 0..k {
            let v = arow[kk];
            let brow = &b[kk * s..(kk + 1) * s];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += v * bv;
            }
        }
        row += 1;
    }
}

/// `c[M,N] += a[M,S] * b[N,S]^T` (rows of `a` dotted with rows of `b`).
pub fn matmul_abt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, n: usize, s: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * s);
    debug_assert_eq!(b.len(), n * s);

    // 4x4 register blocks over full tiles, scalar fallback rows below
    let mut row = 0;
    while row + 4 <= m {
        let a0 = &a[row * s..(row + 1) * s];
        let a1 = &a[(row + 1) * s..(row + 2) * s];
        let a2 = &a[(row + 2) * s..(row + 3) * s];
        let a3 = &a[(row + 3) * s..(row + 4) * s];
        let mut col = 0;
        while col + 4 <= n {
            let b0 = &b[col * s..(col + 1) * s];
            let b1 = &b[(col + 1) * s..(col + 2) * s];
            let b2 = &b[(col + 2) * s..(col + 3) * s];
            let b3 = &b[(col + 3) * s..(col + 4) * s];
            let mut acc = [[T::ZERO; TILE]; 16];
            let mut j = 0;
            while j + TILE <= s {
                for t in 0..TILE {
                    let (av0, av1, av2, av3) = (a0[j + t], a1[j + t], a2[j + t], a3[j + t]);
                    let (bv0, bv1, bv2, bv3) = (b0[j + t], b1[j + t], b2[j + t], b3[j + t]);
                    acc[0][t] += av0 * bv0;
                    acc[1][t] += av0 * bv1;
                    acc[2][t] += av0 * bv2;
                    acc[3][t] += av0 * bv3;
                    acc[4][t] += av1 * bv0;
                    acc[5][t] += av1 * bv1;
                    acc[6][t] += av1 * bv2;
                    acc[7][t] += av1 * bv3;
                    acc[8][t] += av2 * bv0;
                    acc[9][t] += av2 * bv1;
                    acc[10][t] += av2 * bv2;
                    acc[11][t] += av2 * bv3;
                    acc[12][t] += av3 * bv0;
                    acc[13][t] += av3 * bv1;
                    acc[14][t] += av3 * bv2;
                    acc[15][t] += av3 * bv3;
                }
                j += TILE;
            }
            let mut sums = [T::ZERO; 16];
            for (sum, tile) in sums.iter_mut().zip(acc.iter()) {
                for &v in tile {
                    *sum += v;
                }
            }
            while j < s {
                let (av0, av1, av2, av3) = (a0[j], a1[j], a2[j], a3[j]);
                let (bv0, bv1, bv2, bv3) = (b0[j], b1[j], b2[j], b3[j]);
                sums[0] += av0 * bv0;
                sums[1] += av0 * bv1;
                sums[2] += av0 * bv2;
                sums[3] += av0 * bv3;
                sums[4] += av1 * bv0;
                sums[5] += av1 * bv1;
                sums[6] += av1 * bv2;
                sums[7] += av1 * bv3;
                sums[8] += av2 * bv0;
                sums[9] += av2 * bv1;
                sums[10] += av2 * bv2;
                sums[11] += av2 * bv3;
                sums[12] += av3 * bv0;
                sums[13] += av3 * bv1;
                sums[14] += av3 * bv2;
                sums[15] += av3 * bv3;
                j += 1;
            }
            for r in 0..4 {
                for q in 0..4 {
                    c[(row + r) * n + col + q] += sums[r * 4 + q];
                }
            }
            col += 4;
        }
        while col < n {
            let brow = &b[col * s..(col + 1) * s];
            for r in 0..4 {
                let arow = &a[(row + r) * s..(row + r + 1) * s];
                let mut acc = T::ZERO;
                for (av, bv) in arow.iter().zip(brow.iter()) {
                    acc += *av * *bv;
                }
                c[(row + r) * n + col] += acc;
            }
            col += 1;
        }
        row += 4;
    }

    for row in row..m {
        let arow = &a[row * s..(row + 1) * s];
        let crow = &mut c[row * n..(row + 1) * n];
        let mut col = 0;
        while col + 4 <= n {
            let b0 = &b[col * s..(col + 1) * s];
            let b1 = &b[(col + 1) * s..(col + 2) * s];
            let b2 = &b[(col + 2) * s..(col + 3) * s];
            let b3 = &b[(col + 3) * s..(col + 4) * s];
            let mut acc0 = [T::ZERO; TILE];
            let mut acc1 = [T::ZERO; TILE];
            let mut acc2 = [T::ZERO; TILE];
            let mut acc3 = [T::ZERO; TILE];
            let mut j = 0;
            while j + TILE <= s {
                for t in 0..TILE {
                    let av = arow[j + t];
                    acc0[t] += av * b0[j + t];
                    acc1[t] += av * b1[j + t];
                    acc2[t] += av * b2[j + t];
                    acc3[t] += av * b3[j + t];
                }
                j += TILE;
            }
            let (mut s0, mut s1, mut s2, mut s3) = (T::ZERO, T::ZERO, T::ZERO, T::ZERO);
            while j < s {
                let av = arow[j];
                s0 += av * b0[j];
                s1 += av * b1[j];
                s2 += av * b2[j];
                s3 += av * b3[j];
                j += 1;
            }
            for t in 0..TILE {
                s0 += acc0[t];
                s1 += acc1[t];
                s2 += acc2[t];
                s3 += acc3[t];
            }
            crow[col] += s0;
            crow[col + 1] += s1;
            crow[col + 2] += s2;
            crow[col + 3] += s3;
            col += 4;
        }
        while col < n {
            let brow = &b[col * s..(col + 1) * s];
            let mut acc = T::ZERO;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += *av * *bv;
            }
            crow[col] += acc;
            col += 1;
        }
    }
}
