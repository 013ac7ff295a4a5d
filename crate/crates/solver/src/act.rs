use cgm_core::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Smooth gate x * sigmoid(x).
#[inline]
pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

/// d/dx silu(x) = s(x) * (1 + x * (1 - s(x))).
#[inline]
pub fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Row-wise softmax in place over a rows x cols matrix, with the usual
/// max subtraction for stability. Each row sums to one.
pub fn softmax_rows<T: Scalar>(m: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(m.len(), rows * cols);
    for r in 0..rows {
        let row = &mut m[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of row-wise softmax: given probabilities p and cotangent gp,
/// gs_ij = p_ij * (gp_ij - sum_k gp_ik p_ik).
pub fn softmax_rows_backward<T: Scalar>(p: &[T], gp: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut gs = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let pr = &p[r * cols..(r + 1) * cols];
        let gr = &gp[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (pv, gv) in pr.iter().zip(gr) {
            dot += *pv * *gv;
        }
        let out = &mut gs[r * cols..(r + 1) * cols];
        for ((o, pv), gv) in out.iter_mut().zip(pr).zip(gr) {
            *o = *pv * (*gv - dot);
        }
    }
    gs
}

#[cfg(test)]
mod tests {
    use super::*;
    use cgm_core::CounterRng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = CounterRng::new(3);
        let (rows, cols) = (7, 13);
        let mut m: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 3.0).collect();
        softmax_rows(&mut m, rows, cols);
        for r in 0..rows {
            let s: f64 = m[r * cols..(r + 1) * cols].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "row {r} sums to {s}");
            assert!(m[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn silu_grad_matches_finite_differences() {
        let h = 1e-6;
        for v in [-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let fd = (silu(v + h) - silu(v - h)) / (2.0 * h);
            assert!((silu_grad(v) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = CounterRng::new(5);
        let (rows, cols) = (2, 4);
        let s: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let gp: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let mut p = s.clone();
        softmax_rows(&mut p, rows, cols);
        let gs = softmax_rows_backward(&p, &gp, rows, cols);
        let h = 1e-6;
        for i in 0..s.len() {
            let mut sp = s.clone();
            sp[i] += h;
            softmax_rows(&mut sp, rows, cols);
            let mut sm = s.clone();
            sm[i] -= h;
            softmax_rows(&mut sm, rows, cols);
            let fd: f64 = sp
                .iter()
                .zip(&sm)
                .zip(&gp)
                .map(|((a, b), g)| (a - b) / (2.0 * h) * g)
                .sum();
            assert!((gs[i] - fd).abs() < 1e-7, "coord {i}: {} vs {}", gs[i], fd);
        }
    }
}
