//! Dense row-major kernels shared by the tape and the no-grad inference path.
//!
//! Both paths must call the same kernel for the same quantity; the summation
//! order is then identical and re-evaluating a generated sequence on the tape
//! reproduces the sampled log-probabilities bit for bit.

/// `out = a (m×k) · b (k×n)`; zero entries of `a` are skipped.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out += a (m×n) · bᵀ` where `b` is (k×n); result is m×k.
pub(crate) fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out += aᵀ · c` where `a` is (m×k) and `c` is (m×n); result is k×n.
pub(crate) fn matmul_tn_acc(out: &mut [f64], a: &[f64], c: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax over the entries of `row` flagged visible; hidden entries become 0.
pub(crate) fn softmax_row(row: &[f64], visible: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > m {
            m = x;
        }
    }
    let mut z = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) {
            let e = (x - m).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = 0.0;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if visible(j) {
            *o /= z;
        }
    }
}

/// Log-softmax over visible entries; hidden entries become -inf.
pub(crate) fn log_softmax_row(row: &[f64], visible: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > m {
            m = x;
        }
    }
    let mut z = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) {
            z += (x - m).exp();
        }
    }
    let lz = m + z.ln();
    for (j, &x) in row.iter().enumerate() {
        out[j] = if visible(j) { x - lz } else { f64::NEG_INFINITY };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] · [[5],[6]]
        assert_eq!(matmul(&[1., 2., 3., 4.], &[5., 6.], 2, 2, 1), vec![17., 39.]);
    }

    #[test]
    fn transposed_products_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2×3
        let b = [1., 0., 2., -1., 3., 1.]; // 2×3
        let mut nt = vec![0.0; 4];
        matmul_nt_acc(&mut nt, &a, &b, 2, 3, 2);
        let bt = transpose(&b, 2, 3);
        assert_eq!(nt, matmul(&a, &bt, 2, 3, 2));
        let mut tn = vec![0.0; 9];
        matmul_tn_acc(&mut tn, &a, &b, 2, 3, 3);
        assert_eq!(tn, matmul(&transpose(&a, 2, 3), &b, 3, 2, 3));
    }

    #[test]
    fn masked_softmax_ignores_hidden() {
        let mut out = [0.0; 3];
        softmax_row(&[1.0, 1.0, 1e9], |j| j < 2, &mut out);
        assert_eq!(out, [0.5, 0.5, 0.0]);
    }
}
