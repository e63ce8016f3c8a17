// Plain loops over contiguous row-major buffers. Every output element is
// produced by one fixed summation order, so results do not depend on how
// rows are batched together.

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Four rows of `b` are applied per sweep over an output row; each output
/// element still accumulates its `k` products in index order. The AVX2
/// build of the same loop only widens the lanes, so both paths round
/// identically.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_acc_avx2(a, b, out, m, k, n) };
    }
    matmul_acc_body(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc_body(a, b, out, m, k, n)
}

#[inline(always)]
fn matmul_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for (row, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                row[j] = row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
            p += 1;
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for (orow, grow) in out.chunks_exact_mut(k).zip(g.chunks_exact(n)).take(m) {
        let mut p = 0;
        while p + 4 <= k {
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..n {
                let gv = grow[j];
                s0 += gv * b0[j];
                s1 += gv * b1[j];
                s2 += gv * b2[j];
                s3 += gv * b3[j];
            }
            orow[p] += s0;
            orow[p + 1] += s1;
            orow[p + 2] += s2;
            orow[p + 3] += s3;
            p += 4;
        }
        while p < k {
            let brow = &b[p * n..(p + 1) * n];
            orow[p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            p += 1;
        }
    }
}

/// [`matmul_nt_acc`] for a tall `g`: transposes `b` once and streams rows.
pub(crate) fn matmul_nt_tall_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_acc(g, &bt, out, m, n, k);
}

/// [`matmul_nt_acc`] over `bs` consecutive matrix triples.
pub(crate) fn bmm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], bs: usize, m: usize, k: usize, n: usize) {
    for t in 0..bs {
        matmul_nt_acc(
            &g[t * m * n..(t + 1) * m * n],
            &b[t * k * n..(t + 1) * k * n],
            &mut out[t * m * k..(t + 1) * m * k],
            m,
            k,
            n,
        );
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_tn_acc_avx2(a, g, out, m, k, n) };
    }
    matmul_tn_acc_body(a, g, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_tn_acc_avx2(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tn_acc_body(a, g, out, m, k, n)
}

#[inline(always)]
fn matmul_tn_acc_body(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves axis `perm[j]` of the input to axis `j` of the output.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if out_shape.len() <= 4 {
        let pad = 4 - out_shape.len();
        let mut ext = [1usize; 4];
        let mut st = [0usize; 4];
        ext[pad..].copy_from_slice(&out_shape);
        st[pad..].copy_from_slice(&src_strides);
        for a in 0..ext[0] {
            for b in 0..ext[1] {
                for c in 0..ext[2] {
                    let base = a * st[0] + b * st[1] + c * st[2];
                    if st[3] == 1 {
                        out.extend_from_slice(&data[base..base + ext[3]]);
                    } else {
                        out.extend((0..ext[3]).map(|e| data[base + e * st[3]]));
                    }
                }
            }
        }
        return (out, out_shape);
    }
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_8;
pub(crate) const GELU_A: f64 = 0.044_715;

fn tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// The tanh factor of the GELU approximation at `x`.
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    tanh(GELU_C * (x + GELU_A * x * x * x))
}

#[cfg(test)]
pub(crate) fn gelu(x: f64) -> f64 {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub(crate) fn gelu_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

#[cfg(test)]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

pub(crate) fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let shape = [2, 3, 4];
        let perm = [2, 0, 1];
        let (p, ps) = permute(&data, &shape, &perm);
        assert_eq!(ps, vec![4, 2, 3]);
        // p[c][a][b] == data[a][b][c]
        assert_eq!(p[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let (back, bs) = permute(&p, &ps, &inverse_perm(&perm));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn permute_general_rank() {
        let data: Vec<f64> = (0..120).map(f64::from).collect();
        let shape = [2, 3, 4, 5];
        for perm in [[0, 2, 1, 3], [3, 1, 0, 2], [1, 0, 3, 2]] {
            let (p, ps) = permute(&data, &shape, &perm);
            let is = strides(&shape);
            let os = strides(&ps);
            for (flat, v) in p.iter().enumerate() {
                let src: usize = (0..4).map(|j| (flat / os[j]) % ps[j] * is[perm[j]]).sum();
                assert_eq!(*v, data[src]);
            }
        }
        let (p5, _) = permute(&(0..32).map(f64::from).collect::<Vec<_>>(), &[2; 5], &[4, 3, 2, 1, 0]);
        assert_eq!(p5[1], 16.0);
    }

    #[test]
    fn matmul_nt_matches_definition() {
        let g: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut out = vec![0.0; 8];
        matmul_nt_acc(&g, &b, &mut out, 2, 4, 3);
        for i in 0..2 {
            for p in 0..4 {
                let want: f64 = (0..3).map(|j| g[i * 3 + j] * b[p * 3 + j]).sum();
                assert!((out[i * 4 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dispatched_matmul_matches_portable_loop() {
        let (m, k, n) = (7, 13, 11);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin() * 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 1.3).cos() / 7.0).collect();
        let mut fast = vec![0.25; m * n];
        let mut plain = fast.clone();
        matmul_acc(&a, &b, &mut fast, m, k, n);
        matmul_acc_body(&a, &b, &mut plain, m, k, n);
        assert!(fast.iter().zip(&plain).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tanh_matches_std() {
        for z in [-40.0, -3.0, -0.2, -1e-9, 0.0, 1e-9, 0.4, 5.0, 800.0] {
            assert!((tanh(z) - f64::tanh(z)).abs() < 1e-15, "{z}");
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // tanh-approximate GELU(1) ≈ 0.841192
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-6);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
