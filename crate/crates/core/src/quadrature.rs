//! Small deterministic quadrature rules.

/// Composite Simpson rule on `[a, b]` with `n` subintervals (rounded up to
/// an even number).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = (n.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        acc += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    acc * h / 3.0
}

/// Nodes and trapezoid weights of a log-spaced grid on `[lo, hi]`, such that
/// `Σ w_i g(y_i) ≈ ∫_lo^hi g(y) dy`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (ulo, uhi) = (lo.ln(), hi.ln());
    let du = (uhi - ulo) / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n).map(|i| (ulo + du * i as f64).exp()).collect();
    let weights = nodes
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            end * du * y
        })
        .collect();
    (nodes, weights)
}

/// Trapezoid rule on the cube `[lo, hi]^dim` with `n` nodes per axis.
pub fn tensor_trapezoid(f: impl Fn(&[f64]) -> f64, lo: f64, hi: f64, n: usize, dim: usize) -> f64 {
    assert!(n >= 2 && dim >= 1);
    let h = (hi - lo) / (n - 1) as f64;
    let mut idx = vec![0usize; dim];
    let mut x = vec![lo; dim];
    let mut acc = 0.0;
    loop {
        let mut weight = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            x[k] = lo + h * i as f64;
            if i == 0 || i == n - 1 {
                weight *= 0.5;
            }
        }
        acc += weight * f(&x);
        let mut k = 0;
        loop {
            if k == dim {
                return acc * h.powi(dim as i32);
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// The nodes of an `n`-per-axis tensor grid on `[lo, hi]^dim`.
pub fn grid_points(lo: f64, hi: f64, n: usize, dim: usize) -> impl Iterator<Item = Vec<f64>> {
    assert!(n >= 2 && dim >= 1);
    let h = (hi - lo) / (n - 1) as f64;
    let total = n.pow(dim as u32);
    (0..total).map(move |mut k| {
        (0..dim)
            .map(|_| {
                let i = k % n;
                k /= n;
                lo + h * i as f64
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 4);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn log_grid_integrates_power() {
        let (y, w) = log_grid(1e-3, 10.0, 4001);
        let v: f64 = y.iter().zip(&w).map(|(y, w)| w * y * y).sum();
        let exact = (1000.0 - 1e-9) / 3.0;
        assert!((v - exact).abs() / exact < 1e-5);
    }

    #[test]
    fn grid_has_all_nodes() {
        let pts: Vec<Vec<f64>> = grid_points(-1.0, 1.0, 3, 2).collect();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], vec![-1.0, -1.0]);
        assert_eq!(pts[5], vec![1.0, 0.0]);
    }

    #[test]
    fn tensor_gaussian_mass() {
        let v = tensor_trapezoid(
            |x| (-x.iter().map(|a| a * a).sum::<f64>()).exp() / std::f64::consts::PI,
            -8.0,
            8.0,
            161,
            2,
        );
        assert!((v - 1.0).abs() < 1e-10);
    }
}
