//! Continuous-state branching processes: the cumulant semigroup
//! `v̇ = −ψ(v)`, extinction probabilities and a Feller-diffusion path
//! simulator for quadratic mechanisms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::harness::stats::{Moments, ZTest};
use crate::mechanism::{BranchingMechanism, MechanismError, ZPsi};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbError {
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("time grid must be nondecreasing and start at or after 0")]
    BadGrid,
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("ODE solver diverged at t = {t} (v = {v}, {steps} steps, step size {h})")]
    Divergence { t: f64, v: f64, steps: usize, h: f64 },
    #[error("Grey's condition fails: no finite-time extinction")]
    NoFiniteExtinction,
    #[error("z_ψ is infinite")]
    InfiniteRoot,
    #[error("path simulation needs a spatially constant mechanism without jumps")]
    NotQuadratic,
    #[error("at least one replica is required")]
    NoReplicas,
}

/// `v_t(λ)` on a time grid, with solver statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulantSolution {
    pub lambda0: f64,
    pub t_grid: Vec<f64>,
    pub v_values: Vec<f64>,
    pub steps: usize,
    pub rejected: usize,
    /// Largest accepted local error estimate (scaled by the tolerance).
    pub max_local_error: f64,
}

const RTOL: f64 = 1e-10;
const ATOL: f64 = 1e-14;
const MAX_STEPS: usize = 10_000_000;

// Dormand–Prince 5(4) tableau; the ODE is autonomous so the nodes are not needed
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration of the autonomous scalar ODE
/// `v̇ = rhs(v)`, `v(0) = v0`, reported on `grid`. The state is clamped at 0.
fn integrate(rhs: impl Fn(f64) -> f64, v0: f64, grid: &[f64]) -> Result<CumulantSolution, CbError> {
    if grid.first().is_some_and(|&t| t < 0.0) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(CbError::BadGrid);
    }
    let mut out = Vec::with_capacity(grid.len());
    let (mut t, mut v) = (0.0f64, v0);
    let mut h = {
        let slope = rhs(v).abs();
        if slope > 0.0 {
            (1e-3 * (v.abs() + 1e-3) / slope).min(0.1)
        } else {
            0.1
        }
    };
    let (mut steps, mut rejected) = (0usize, 0usize);
    let mut max_err: f64 = 0.0;
    let mut k = [0.0f64; 7];
    for &target in grid {
        while t < target {
            if steps + rejected > MAX_STEPS || !v.is_finite() || h < 1e-300 {
                return Err(CbError::Divergence { t, v, steps, h });
            }
            let step = h.min(target - t);
            k[0] = rhs(v);
            for s in 1..7 {
                let mut acc = v;
                for j in 0..s {
                    acc += step * A[s][j] * k[j];
                }
                k[s] = rhs(acc.max(0.0));
            }
            let v5 = v + step * (0..7).map(|s| B5[s] * k[s]).sum::<f64>();
            let v4 = v + step * (0..7).map(|s| B4[s] * k[s]).sum::<f64>();
            let scale = ATOL + RTOL * v.abs().max(v5.abs());
            let err = (v5 - v4).abs() / scale;
            if err <= 1.0 {
                t = if step == target - t { target } else { t + step };
                v = v5.max(0.0);
                steps += 1;
                max_err = max_err.max(err);
            } else {
                rejected += 1;
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * factor;
            if !h.is_finite() {
                h = step;
            }
        }
        out.push(v);
    }
    Ok(CumulantSolution {
        lambda0: v0,
        t_grid: grid.to_vec(),
        v_values: out,
        steps,
        rejected,
        max_local_error: max_err,
    })
}

fn check_lambda(lambda: f64) -> Result<(), CbError> {
    if lambda >= 0.0 {
        Ok(())
    } else {
        Err(MechanismError::NegativeLambda(lambda).into())
    }
}

/// `v_t(λ)` on a grid of times.
pub fn cumulant_path(mech: &BranchingMechanism, lambda: f64, t_grid: &[f64]) -> Result<CumulantSolution, CbError> {
    check_lambda(lambda)?;
    mech.constant_parts()?;
    integrate(|v| -mech.psi(&[], v.max(0.0)).unwrap_or(f64::NAN), lambda, t_grid)
}

/// `v_t(λ)`, the solution of `v_t = λ − ∫₀ᵗ ψ(v_s) ds`.
pub fn cumulant(mech: &BranchingMechanism, lambda: f64, t: f64) -> Result<f64, CbError> {
    if t < 0.0 {
        return Err(CbError::NegativeTime(t));
    }
    Ok(cumulant_path(mech, lambda, &[t])?.v_values[0])
}

/// `v_t(λ) = βλ / (αλ + (β − αλ)e^{−βt})` for `ψ = −βλ + αλ²`
/// (`λ / (1 + αλt)` when `β = 0`).
pub fn riccati_closed_form(beta: f64, alpha: f64, lambda: f64, t: f64) -> f64 {
    if beta == 0.0 {
        return lambda / (1.0 + alpha * lambda * t);
    }
    beta * lambda / (alpha * lambda + (beta - alpha * lambda) * (-beta * t).exp())
}

/// `v̄_t = lim_{λ→∞} v_t(λ)` and the extinction probability it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtinctionBy {
    pub t: f64,
    pub vbar: f64,
    /// `(λ, v_t(λ))` used for the extrapolation.
    pub samples: Vec<(f64, f64)>,
}

impl ExtinctionBy {
    /// `P(Y_t = 0 | Y_0 = y0) = e^{−y0 v̄_t}`.
    pub fn prob_zero(&self, y0: f64) -> f64 {
        if y0 == 0.0 {
            1.0
        } else {
            (-y0 * self.vbar).exp()
        }
    }
}

const EXTRAPOLATION_LAMBDAS: [f64; 3] = [1e2, 1e3, 1e4];

/// Neville extrapolation of `(x_i, y_i)` to `x = 0`.
fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for level in 1..n {
        for i in 0..n - level {
            let (xi, xj) = (xs[i], xs[i + level]);
            p[i] = (xj * p[i] - xi * p[i + 1]) / (xj - xi);
        }
    }
    p[0]
}

/// `v̄_t` by solving at `λ ∈ {10², 10³, 10⁴}` and extrapolating in `1/λ`.
pub fn extinction_by(mech: &BranchingMechanism, t: f64) -> Result<ExtinctionBy, CbError> {
    if !(t > 0.0) {
        return Err(CbError::NegativeTime(t));
    }
    if !mech.grey_check()?.holds {
        return Err(CbError::NoFiniteExtinction);
    }
    let samples = EXTRAPOLATION_LAMBDAS
        .iter()
        .map(|&l| Ok((l, cumulant(mech, l, t)?)))
        .collect::<Result<Vec<_>, CbError>>()?;
    let xs: Vec<f64> = samples.iter().map(|s| 1.0 / s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    Ok(ExtinctionBy {
        t,
        vbar: neville_at_zero(&xs, &ys),
        samples,
    })
}

/// Ultimate extinction probability `e^{−y0 z_ψ}`.
pub fn extinction_prob(mech: &BranchingMechanism, y0: f64) -> Result<f64, CbError> {
    match mech.root_zpsi()? {
        ZPsi::Finite(z) => Ok(if y0 == 0.0 { 1.0 } else { (-y0 * z).exp() }),
        ZPsi::Infinite => Err(CbError::InfiniteRoot),
    }
}

/// `E[Y_t]` and `Var[Y_t]` for `ψ = −βλ + αλ²` started at `y0`.
pub fn quadratic_moments(beta: f64, alpha: f64, y0: f64, t: f64) -> (f64, f64) {
    let mean = y0 * (beta * t).exp();
    let var = if beta == 0.0 {
        2.0 * alpha * y0 * t
    } else {
        2.0 * alpha * y0 * (2.0 * beta * t).exp() * (-(-beta * t).exp_m1()) / beta
    };
    (mean, var)
}

fn quadratic_parts(mech: &BranchingMechanism) -> Result<(f64, f64), CbError> {
    let (b, a, eta) = mech.constant_parts()?;
    if !eta.is_zero() {
        return Err(CbError::NotQuadratic);
    }
    Ok((b, a))
}

/// An Euler path of the Feller diffusion recorded at multiples of `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct CbPath {
    pub dt: f64,
    pub values: Vec<f64>,
}

/// Euler–Maruyama for `dY = βY dt + √(2αY) dW`, clamped and absorbed at 0.
pub fn simulate_cb<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    y0: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<CbPath, CbError> {
    let (beta, alpha) = quadratic_parts(mech)?;
    if !(dt > 0.0) {
        return Err(CbError::BadStep(dt));
    }
    let n = (horizon / dt).round() as usize;
    let mut values = Vec::with_capacity(n + 1);
    let mut y = y0.max(0.0);
    values.push(y);
    for _ in 0..n {
        y = euler_step(y, beta, alpha, dt, rng);
        values.push(y);
    }
    Ok(CbPath { dt, values })
}

#[inline]
fn euler_step<R: Rng + ?Sized>(y: f64, beta: f64, alpha: f64, dt: f64, rng: &mut R) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    (y + beta * y * dt + (2.0 * alpha * y * dt).sqrt() * z).max(0.0)
}

/// Absorption time of one Euler path on `[0, horizon]`, or `None` if it
/// survives. A path that climbs above `escape` is stopped and counted as
/// surviving; for quadratic mechanisms its later extinction has probability
/// at most `e^{−escape·z_ψ}`.
pub fn euler_extinction_time<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    y0: f64,
    horizon: f64,
    dt: f64,
    escape: f64,
    rng: &mut R,
) -> Result<Option<f64>, CbError> {
    let (beta, alpha) = quadratic_parts(mech)?;
    if !(dt > 0.0) {
        return Err(CbError::BadStep(dt));
    }
    let n = (horizon / dt).round() as usize;
    let mut y = y0.max(0.0);
    if y == 0.0 {
        return Ok(Some(0.0));
    }
    for step in 1..=n {
        y = euler_step(y, beta, alpha, dt, rng);
        if y == 0.0 {
            return Ok(Some(step as f64 * dt));
        }
        if y > escape {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Values of one Euler path at selected times plus its absorption time.
#[derive(Clone, Debug, PartialEq)]
pub struct CbObservation {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub extinction_time: Option<f64>,
}

/// Streaming variant of [`simulate_cb`] that keeps only the values at
/// `observe` (rounded to the step grid) and stops once the path is absorbed.
pub fn simulate_cb_observed<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    y0: f64,
    observe: &[f64],
    dt: f64,
    rng: &mut R,
) -> Result<CbObservation, CbError> {
    let (beta, alpha) = quadratic_parts(mech)?;
    if !(dt > 0.0) {
        return Err(CbError::BadStep(dt));
    }
    if observe.windows(2).any(|w| w[1] < w[0]) || observe.first().is_some_and(|&t| t < 0.0) {
        return Err(CbError::BadGrid);
    }
    let mut values = Vec::with_capacity(observe.len());
    let mut y = y0.max(0.0);
    let mut step = 0usize;
    let mut extinction_time = if y == 0.0 { Some(0.0) } else { None };
    for &t in observe {
        let target = (t / dt).round() as usize;
        while step < target && y > 0.0 {
            y = euler_step(y, beta, alpha, dt, rng);
            step += 1;
            if y == 0.0 {
                extinction_time = Some(step as f64 * dt);
            }
        }
        values.push(y);
    }
    Ok(CbObservation {
        times: observe.to_vec(),
        values,
        extinction_time,
    })
}

/// Monte Carlo `E[e^{−λY_t}]` against `e^{−y0 v_t(λ)}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceCheck {
    pub empirical: f64,
    pub se: f64,
    pub analytic: f64,
    pub z: f64,
}

pub fn laplace_check<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    y0: f64,
    lambda: f64,
    t: f64,
    dt: f64,
    replicas: usize,
    rng: &mut R,
) -> Result<LaplaceCheck, CbError> {
    check_lambda(lambda)?;
    if replicas == 0 {
        return Err(CbError::NoReplicas);
    }
    let analytic = (-y0 * cumulant(mech, lambda, t)?).exp();
    let mut m = Moments::default();
    for _ in 0..replicas {
        let obs = simulate_cb_observed(mech, y0, &[t], dt, rng)?;
        m.push((-lambda * obs.values[0]).exp());
    }
    let test = ZTest::from_moments(&m, analytic);
    Ok(LaplaceCheck {
        empirical: test.mean,
        se: test.se,
        analytic,
        z: test.z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::JumpMeasure;
    use crate::rng::{stream, StreamTag};
    use proptest::prelude::*;

    fn quad(b: f64, a: f64) -> BranchingMechanism {
        BranchingMechanism::quadratic(b, a).unwrap()
    }

    #[test]
    fn riccati_form_solves_the_ode() {
        // dv/dt = βv − αv² checked by central differences
        for (b, a, l) in [(1.0, 1.0, 0.1), (1.0, 1.0, 100.0), (2.0, 0.5, 3.0), (-0.5, 1.0, 2.0)] {
            assert_eq!(riccati_closed_form(b, a, l, 0.0), l);
            for t in [0.1, 0.7, 2.0, 4.5] {
                let h = 1e-5;
                let v = riccati_closed_form(b, a, l, t);
                let dv = (riccati_closed_form(b, a, l, t + h) - riccati_closed_form(b, a, l, t - h)) / (2.0 * h);
                assert!((dv - (b * v - a * v * v)).abs() < 1e-5 * (1.0 + v * v), "b={b} a={a} λ={l} t={t}");
            }
        }
    }

    #[test]
    fn cumulant_examples() {
        let m = quad(1.0, 1.0);
        assert_eq!(cumulant(&m, 0.0, 3.0).unwrap(), 0.0);
        for t in [0.5, 2.0, 10.0] {
            assert!((cumulant(&m, 1.0, t).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(cumulant(&m, -1.0, 1.0).is_err());
        assert!(cumulant(&m, 1.0, -1.0).is_err());
    }

    #[test]
    fn cumulant_matches_riccati() {
        let m = quad(1.0, 1.0);
        let grid: Vec<f64> = (0..=100).map(|i| 0.05 * i as f64).collect();
        for l in [0.1, 1.0, 10.0, 100.0] {
            let sol = cumulant_path(&m, l, &grid).unwrap();
            assert_eq!(sol.v_values[0], l);
            for (t, v) in sol.t_grid.iter().zip(&sol.v_values) {
                let exact = riccati_closed_form(1.0, 1.0, l, *t);
                assert!(((v - exact) / exact).abs() < 1e-8, "λ={l} t={t}");
            }
        }
    }

    #[test]
    fn extinction_examples() {
        let m = quad(1.0, 1.0);
        let e1 = extinction_by(&m, 1.0).unwrap();
        let exact = 1.0 / (1.0 - (-1.0f64).exp());
        assert!((e1.vbar - exact).abs() < 1e-7, "{}", e1.vbar);
        assert!((e1.vbar - 1.5820).abs() < 1e-4);
        assert_eq!(e1.prob_zero(0.0), 1.0);
        assert!((extinction_by(&m, 30.0).unwrap().vbar - 1.0).abs() < 1e-8);
        assert!((extinction_prob(&m, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert!((extinction_prob(&quad(2.0, 1.0), 1.0).unwrap() - (-2.0f64).exp()).abs() < 1e-12);
        assert_eq!(extinction_prob(&m, 0.0).unwrap(), 1.0);
        let no_grey = BranchingMechanism::constant(0.5, 0.0, JumpMeasure::dirac(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(extinction_by(&no_grey, 1.0).unwrap_err(), CbError::NoFiniteExtinction);
    }

    #[test]
    fn jump_mechanism_fixed_point() {
        let m = BranchingMechanism::constant(1.0, 0.5, JumpMeasure::atoms(vec![(0.5, 1.0), (2.0, 0.2)]).unwrap())
            .unwrap();
        let z = m.root_zpsi().unwrap().finite().unwrap();
        assert!((cumulant(&m, z, 5.0).unwrap() - z).abs() < 1e-9);
        assert!((cumulant(&m, 3.0 * z, 40.0).unwrap() - z).abs() < 1e-8);
        assert!((cumulant(&m, 0.1 * z, 40.0).unwrap() - z).abs() < 1e-8);
    }

    #[test]
    fn zero_start_is_absorbed() {
        let mut rng = stream(1, 0, StreamTag::Cb);
        let p = simulate_cb(&quad(1.0, 1.0), 0.0, 1.0, 0.01, &mut rng).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
        assert_eq!(p.values.len(), 101);
        assert!(simulate_cb(&quad(1.0, 1.0), 1.0, 1.0, 0.0, &mut rng).is_err());
        let jumpy = BranchingMechanism::constant(1.0, 1.0, JumpMeasure::dirac(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(simulate_cb(&jumpy, 1.0, 1.0, 0.1, &mut rng).unwrap_err(), CbError::NotQuadratic);
    }

    #[test]
    fn euler_moments_match_ode() {
        let m = quad(1.0, 1.0);
        let mut rng = stream(2, 0, StreamTag::Cb);
        let (t, dt) = (1.0, 1e-3);
        let mut mom = Moments::default();
        let mut sq = Moments::default();
        for _ in 0..20_000 {
            let y = simulate_cb_observed(&m, 1.0, &[t], dt, &mut rng).unwrap().values[0];
            mom.push(y);
            sq.push(y * y);
        }
        let (mean, var) = quadratic_moments(1.0, 1.0, 1.0, t);
        assert!(ZTest::from_moments(&mom, mean).within(3.0, 0.0), "{:?}", ZTest::from_moments(&mom, mean));
        // second moment, with an O(dt) band
        let second = var + mean * mean;
        let zt = ZTest::from_moments(&sq, second);
        assert!(zt.within(3.0, 10.0 * dt * second), "{zt:?}");
    }

    #[test]
    fn laplace_examples() {
        let m = quad(1.0, 1.0);
        let mut rng = stream(3, 0, StreamTag::Cb);
        let c0 = laplace_check(&m, 1.0, 0.0, 2.0, 1e-3, 10, &mut rng).unwrap();
        assert_eq!((c0.empirical, c0.analytic), (1.0, 1.0));
        let cz = laplace_check(&m, 1.0, 1.0, 0.5, 1e-3, 10, &mut rng).unwrap();
        let cz2 = laplace_check(&m, 1.0, 1.0, 3.0, 1e-3, 10, &mut rng).unwrap();
        assert!((cz.analytic - cz2.analytic).abs() < 1e-12);
        let c = laplace_check(&m, 1.0, 1.0, 2.0, 1e-3, 10_000, &mut rng).unwrap();
        assert!(c.z.abs() < 3.0, "{c:?}");
        assert_eq!(laplace_check(&m, 1.0, 1.0, 2.0, 1e-3, 0, &mut rng).unwrap_err(), CbError::NoReplicas);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn semigroup_property(s in 0.0..2.0f64, t in 0.0..2.0f64, l in 0.01..50.0f64, b in 0.1..2.0f64, a in 0.1..2.0f64) {
            let m = quad(b, a);
            let direct = cumulant(&m, l, s + t).unwrap();
            let composed = cumulant(&m, cumulant(&m, l, s).unwrap(), t).unwrap();
            prop_assert!((direct - composed).abs() <= 1e-8 * direct.max(1e-12));
        }

        #[test]
        fn monotone_in_lambda(l1 in 0.0..20.0f64, dl in 0.0..20.0f64, t in 0.0..5.0f64) {
            let m = BranchingMechanism::constant(1.0, 0.3, JumpMeasure::dirac(1.0, 0.8).unwrap()).unwrap();
            prop_assert!(cumulant(&m, l1, t).unwrap() <= cumulant(&m, l1 + dl, t).unwrap() + 1e-12);
        }
    }
}
