//! Plain-slice numeric kernels shared by the tape ops.

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m×k` and `op(b)` of
/// shape `k×n`. A transposed operand is stored row-major in its untransposed
/// layout (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index dgemm touches given these
    // strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row/column strides of a matrix operand.
pub(crate) type Strides = (usize, usize);

fn max_index(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// `c = a · b + beta · c` on strided views, used to address one attention
/// head's columns inside a packed `L×d` matrix without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
    beta: f64,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(max_index(m, k, sa) < a.len());
    assert!(max_index(k, n, sb) < b.len());
    assert!(max_index(m, n, sc) < c.len());
    // SAFETY: the asserts above bound every element dgemm reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `(outer, n, inner)` such that element `(o, i, j)` sits at
/// `(o * n + i) * inner + j`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                // every entry masked: leave the slice at zero
                continue;
            }
            let mut total = 0.0;
            for i in 0..n {
                let e = (src[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..n {
                out[at(i)] /= total;
            }
        }
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let at = transpose(&a, 2, 3);
        let bt = transpose(&b, 3, 2);
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c, c2);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }

    #[test]
    fn sigmoid_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
