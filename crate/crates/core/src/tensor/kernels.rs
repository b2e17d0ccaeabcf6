// Dense f64 kernels. Every output element is reduced in a fixed index order,
// independent of how many rows are processed together, so a row of a batched
// result is bit-identical to the same row computed alone.

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let block = &mut c[i * n..(i + 4) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let (s0, s1, s2, s3) = (a0[p], a1[p], a2[p], a3[p]);
            let br = &b[p * n..(p + 1) * n];
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(br)
            {
                *x0 += s0 * bv;
                *x1 += s1 * bv;
                *x2 += s2 * bv;
                *x3 += s3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let cr = &mut c[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let s = ar[p];
            let br = &b[p * n..(p + 1) * n];
            for (x, &bv) in cr.iter_mut().zip(br) {
                *x += s * bv;
            }
        }
        i += 1;
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// Row-major transpose of an `[rows, cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c += aᵀ · g` with `a: [m,k]`, `g: [m,n]`, `c: [k,n]`; sums over `m` in order.
pub fn matmul_at_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for (p, &s) in ar.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let cr = &mut c[p * n..(p + 1) * n];
            for (x, &gv) in cr.iter_mut().zip(gr) {
                *x += s * gv;
            }
        }
    }
}

/// `c += g · bᵀ` with `g: [m,n]`, `b: [k,n]`, `c: [m,k]`.
pub fn matmul_bt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, c, m, n, k);
}
