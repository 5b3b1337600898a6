//! Small dense helpers over flat `f64` slices. Matrices are row-major.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += A x, with A of shape rows×cols.
pub fn matvec_add(a: &[f64], x: &[f64], y: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for (r, yr) in y.iter_mut().enumerate() {
        *yr += dot(&a[r * cols..(r + 1) * cols], x);
    }
}

/// y += Aᵀ x, with A of shape rows×cols (so y has len cols).
pub fn matvec_t_add(a: &[f64], x: &[f64], y: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    for (r, &xr) in x.iter().enumerate() {
        axpy(xr, &a[r * cols..(r + 1) * cols], y);
    }
}

/// A += alpha · x yᵀ, with A of shape x.len()×y.len().
pub fn outer_add(alpha: f64, x: &[f64], y: &[f64], a: &mut [f64]) {
    debug_assert_eq!(a.len(), x.len() * y.len());
    let cols = y.len();
    for (r, &xr) in x.iter().enumerate() {
        axpy(alpha * xr, y, &mut a[r * cols..(r + 1) * cols]);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place softmax; numerically shifted by the max.
pub fn softmax_inplace(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// log softmax(x)[target] without materializing the full distribution.
pub fn log_softmax_at(x: &[f64], target: usize) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x[target] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_against_hand_example() {
        // A = [[1,2],[3,4],[5,6]], x = [1,-1]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = [1.0, -1.0];
        let mut y = [0.0; 3];
        matvec_add(&a, &x, &mut y, 3, 2);
        assert_eq!(y, [-1.0, -1.0, -1.0]);

        let mut yt = [0.0; 2];
        matvec_t_add(&a, &[1.0, 0.0, -1.0], &mut yt, 3, 2);
        assert_eq!(yt, [-4.0, -4.0]);
    }

    #[test]
    fn softmax_normalizes() {
        let mut x = vec![0.3, -1.2, 2.0, 0.0];
        softmax_inplace(&mut x);
        let sum: f64 = x.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(x.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let x = vec![0.5, 1.5, -0.7];
        let mut p = x.clone();
        softmax_inplace(&mut p);
        for (i, pi) in p.iter().enumerate() {
            assert!((log_softmax_at(&x, i) - pi.ln()).abs() < 1e-12);
        }
    }
}
