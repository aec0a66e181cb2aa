//! Spatial motions, spectral data of the example models, and the `h`/`w`
//! transforms.
//!
//! Both shipped motions are Ornstein–Uhlenbeck processes with unit
//! diffusion coefficient, generator `½Δ ∓ c x·∇`, and are sampled exactly:
//!
//! ```text
//! inward:  ξ_{t+Δ} ~ N(e^{−cΔ} x, (1 − e^{−2cΔ}) / (2c) · I)
//! outward: ξ_{t+Δ} ~ N(e^{+cΔ} x, (e^{2cΔ} − 1) / (2c) · I)
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{BranchingMechanism, Coefficient, JumpKernel, MechanismError, PositionFn};
use crate::quadrature;
use crate::testfn::TestFunction;
use crate::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("OU rate c must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("not supercritical: {0}")]
    NotSupercritical(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    InwardOu,
    OutwardOu,
}

/// An exactly sampleable OU motion, optionally killed at rate `γ(x)`.
#[derive(Clone)]
pub struct MotionModel {
    kind: MotionKind,
    c: f64,
    dim: usize,
    killing: Option<Coefficient>,
}

impl fmt::Debug for MotionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MotionModel")
            .field("kind", &self.kind)
            .field("c", &self.c)
            .field("dim", &self.dim)
            .field("killing", &self.killing)
            .finish()
    }
}

impl PartialEq for MotionModel {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.c == other.c
            && self.dim == other.dim
            && match (&self.killing, &other.killing) {
                (None, None) => true,
                (Some(Coefficient::Constant(a)), Some(Coefficient::Constant(b))) => a == b,
                _ => false,
            }
    }
}

pub fn inward_ou(c: f64, dim: usize) -> Result<MotionModel, MotionError> {
    MotionModel::new(MotionKind::InwardOu, c, dim)
}

pub fn outward_ou(c: f64, dim: usize) -> Result<MotionModel, MotionError> {
    MotionModel::new(MotionKind::OutwardOu, c, dim)
}

impl MotionModel {
    pub fn new(kind: MotionKind, c: f64, dim: usize) -> Result<Self, MotionError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(MotionError::NonPositiveRate(c));
        }
        if dim == 0 {
            return Err(MotionError::ZeroDimension);
        }
        Ok(Self {
            kind,
            c,
            dim,
            killing: None,
        })
    }

    /// The same motion killed at rate `γ(x) ≥ 0`.
    pub fn with_killing(mut self, gamma: Coefficient) -> Result<Self, MotionError> {
        let (lo, hi) = gamma.bounds();
        if !(lo >= 0.0 && hi.is_finite()) {
            return Err(MotionError::Unsupported(format!(
                "killing rate must be nonnegative and bounded, bounds [{lo}, {hi}]"
            )));
        }
        self.killing = if hi == 0.0 { None } else { Some(gamma) };
        Ok(self)
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn rate(&self) -> f64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn killing(&self) -> Option<&Coefficient> {
        self.killing.as_ref()
    }

    pub fn name(&self) -> String {
        let kind = match self.kind {
            MotionKind::InwardOu => "inward_ou",
            MotionKind::OutwardOu => "outward_ou",
        };
        match &self.killing {
            None => format!("{kind}(c={}, d={})", self.c, self.dim),
            Some(k) => format!("{kind}(c={}, d={}) killed at {k:?}", self.c, self.dim),
        }
    }

    /// Mean scale and per-coordinate variance of a step of length `dt`.
    #[inline]
    pub fn step_coefficients(&self, dt: f64) -> (f64, f64) {
        let c = self.c;
        match self.kind {
            MotionKind::InwardOu => ((-c * dt).exp(), -(-2.0 * c * dt).exp_m1() / (2.0 * c)),
            MotionKind::OutwardOu => ((c * dt).exp(), (2.0 * c * dt).exp_m1() / (2.0 * c)),
        }
    }

    /// Exact transition step of length `dt ≥ 0`, ignoring killing.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, x: &mut [f64], dt: f64, rng: &mut R) {
        if dt <= 0.0 {
            return;
        }
        let (scale, var) = self.step_coefficients(dt);
        let sd = var.sqrt();
        for xi in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *xi = scale * *xi + sd * z;
        }
    }

    /// Moves `x` forward by `dt` and applies killing. Returns `false` when
    /// the particle was killed during the step (its position is then the
    /// killing position).
    pub fn advance<R: Rng + ?Sized>(&self, x: &mut [f64], dt: f64, rng: &mut R) -> bool {
        match &self.killing {
            None => {
                self.step(x, dt, rng);
                true
            }
            Some(Coefficient::Constant(g)) => {
                let clock: f64 = Exp1.sample(rng);
                if clock < g * dt {
                    self.step(x, clock / g, rng);
                    false
                } else {
                    self.step(x, dt, rng);
                    true
                }
            }
            Some(k @ Coefficient::Varying { upper, .. }) => {
                let mut remaining = dt;
                loop {
                    let e: f64 = Exp1.sample(rng);
                    let e = e / upper;
                    if e >= remaining {
                        self.step(x, remaining, rng);
                        return true;
                    }
                    self.step(x, e, rng);
                    remaining -= e;
                    if rng.random::<f64>() * upper < k.eval(x) {
                        return false;
                    }
                }
            }
        }
    }

    pub fn kill_rate(&self, x: &[f64]) -> f64 {
        self.killing.as_ref().map_or(0.0, |k| k.eval(x))
    }

    /// Density of the reference measure `m` with respect to Lebesgue measure.
    pub fn reference_density(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let norm = (self.c / PI).powf(self.dim as f64 / 2.0);
        match self.kind {
            MotionKind::InwardOu => norm * (-self.c * r2).exp(),
            MotionKind::OutwardOu => (-self.c * r2).exp().recip() / norm,
        }
    }

    /// Transition density `p(t, x, y)` with respect to `m(dy)`.
    pub fn transition_density(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64, MotionError> {
        let (prefactor, exponent) = self.density_parts(t, x, y)?;
        Ok(prefactor * exponent.exp())
    }

    /// `p(t, x, y) m(y)`, the transition density with respect to Lebesgue
    /// measure. The exponents are combined first, so the far tail of the
    /// outward motion gives 0 rather than `0 · ∞`.
    pub fn lebesgue_density(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64, MotionError> {
        let (prefactor, exponent) = self.density_parts(t, x, y)?;
        let y2: f64 = y.iter().map(|v| v * v).sum();
        let norm = (self.c / PI).powf(self.dim as f64 / 2.0);
        Ok(match self.kind {
            MotionKind::InwardOu => prefactor * norm * (exponent - self.c * y2).exp(),
            MotionKind::OutwardOu => prefactor / norm * (exponent + self.c * y2).exp(),
        })
    }

    /// `p(t, x, y) = prefactor · e^{exponent}`.
    fn density_parts(&self, t: f64, x: &[f64], y: &[f64]) -> Result<(f64, f64), MotionError> {
        if !(t > 0.0) {
            return Err(MotionError::NonPositiveTime(t));
        }
        let c = self.c;
        let d = self.dim as f64;
        let (x2, y2, xy) = dot3(x, y);
        Ok(match self.kind {
            MotionKind::InwardOu => (
                (-(-2.0 * c * t).exp_m1()).powf(-d / 2.0),
                -c / (2.0 * c * t).exp_m1() * (x2 + y2 - 2.0 * (c * t).exp() * xy),
            ),
            MotionKind::OutwardOu => (
                (c / PI).powf(d) * (2.0 * c * t).exp_m1().powf(-d / 2.0),
                -c / (-(-2.0 * c * t).exp_m1()) * (x2 + y2 - 2.0 * (-c * t).exp() * xy),
            ),
        })
    }

    /// `E_x f(ξ_t)` in closed form, including survival under constant killing.
    pub fn expect(&self, f: &TestFunction, x: &[f64], t: f64) -> Result<f64, MotionError> {
        let survival = match &self.killing {
            None => 1.0,
            Some(Coefficient::Constant(g)) => (-g * t).exp(),
            Some(Coefficient::Varying { .. }) => {
                return Err(MotionError::Unsupported(
                    "closed-form expectation under state-dependent killing".into(),
                ))
            }
        };
        let (scale, var) = self.step_coefficients(t);
        let mean: Point = x.iter().map(|v| scale * v).collect();
        Ok(survival * f.gaussian_expectation(&mean, var))
    }
}

fn dot3(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let x2 = x.iter().map(|v| v * v).sum();
    let y2 = y.iter().map(|v| v * v).sum();
    let xy = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (x2, y2, xy)
}

/// `P^β_t f(x) = e^{βt} E_x f(ξ_t)` for a constant `β`.
pub fn feynman_kac(
    mech: &BranchingMechanism,
    motion: &MotionModel,
    f: &TestFunction,
    x: &[f64],
    t: f64,
) -> Result<f64, MotionError> {
    let beta = mech
        .beta()
        .as_constant()
        .ok_or_else(|| MotionError::Unsupported("closed-form P^β_t needs constant β".into()))?;
    Ok((beta * t).exp() * motion.expect(f, x, t)?)
}

/// The analytic example models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExampleId {
    /// Inward OU motion, `λ₁ = −β`, `h ≡ 1`.
    #[serde(rename = "8.1")]
    InwardOu,
    /// Outward OU motion, `λ₁ = cd − β`, Gaussian `h`.
    #[serde(rename = "8.2")]
    OutwardOu,
}

impl ExampleId {
    pub fn motion_kind(self) -> MotionKind {
        match self {
            ExampleId::InwardOu => MotionKind::InwardOu,
            ExampleId::OutwardOu => MotionKind::OutwardOu,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExampleId::InwardOu => "8.1",
            ExampleId::OutwardOu => "8.2",
        }
    }
}

/// Principal eigenvalue `λ₁`, eigenfunction `h`, spectral gap `λ_h`,
/// martingale function `w ≡ z_ψ` and reference measure of an example model.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralData {
    pub example: ExampleId,
    pub c: f64,
    dim: usize,
    pub lambda1: f64,
    pub lambda_h: f64,
    pub w: f64,
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn gaussian_kernel(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (self.c / PI).powf(self.dim as f64 / 2.0) * (-self.c * r2).exp()
    }

    pub fn h(&self, x: &[f64]) -> f64 {
        match self.example {
            ExampleId::InwardOu => 1.0,
            ExampleId::OutwardOu => self.gaussian_kernel(x),
        }
    }

    pub fn w(&self, _x: &[f64]) -> f64 {
        self.w
    }

    pub fn m_density(&self, x: &[f64]) -> f64 {
        match self.example {
            ExampleId::InwardOu => self.gaussian_kernel(x),
            ExampleId::OutwardOu => self.gaussian_kernel(x).recip(),
        }
    }

    /// Density of `h² m`, the stationary law `N(0, I/(2c))` of `ξ^h`.
    pub fn h2m_density(&self, x: &[f64]) -> f64 {
        self.gaussian_kernel(x)
    }

    /// Per-coordinate variance of `h² m`.
    pub fn stationary_variance(&self) -> f64 {
        1.0 / (2.0 * self.c)
    }

    /// `⟨h, h⟩_m` by quadrature.
    pub fn h_norm_squared(&self, nodes: usize) -> f64 {
        let half = 12.0 * self.stationary_variance().sqrt();
        quadrature::tensor_trapezoid(|x| self.h(x).powi(2) * self.m_density(x), -half, half, nodes, self.dim)
    }

    /// `⟨φ, h²⟩` in closed form (Gaussian expectation under `h² m`).
    pub fn h2_average(&self, phi: &TestFunction) -> f64 {
        phi.gaussian_expectation(&crate::origin(self.dim), self.stationary_variance())
    }

    /// `⟨φ, h²⟩ = ∫ φ h² m` by tensor trapezoid quadrature on the
    /// product of `h` and `m` as implemented (independent of the Gaussian
    /// identity used by [`Self::h2_average`]).
    pub fn h2_average_quadrature(&self, phi: &TestFunction, nodes: usize) -> f64 {
        let half = 12.0 * self.stationary_variance().sqrt();
        quadrature::tensor_trapezoid(
            |x| phi.eval(x) * self.h(x).powi(2) * self.m_density(x),
            -half,
            half,
            nodes,
            self.dim,
        )
    }
}

/// Analytic spectral data for the example models with a spatially constant
/// mechanism; `w ≡ z_ψ`.
pub fn spectral_for_example(
    example: ExampleId,
    c: f64,
    dim: usize,
    mech: &BranchingMechanism,
) -> Result<SpectralData, MotionError> {
    if !(c > 0.0) {
        return Err(MotionError::NonPositiveRate(c));
    }
    if dim == 0 {
        return Err(MotionError::ZeroDimension);
    }
    let (beta, _, _) = mech.constant_parts()?;
    let lambda1 = match example {
        ExampleId::InwardOu => -beta,
        ExampleId::OutwardOu => c * dim as f64 - beta,
    };
    if !(lambda1 < 0.0) {
        return Err(MotionError::NotSupercritical(format!(
            "λ₁ = {lambda1} is not negative (β = {beta}, c = {c}, d = {dim})"
        )));
    }
    let w = match mech.root_zpsi()?.finite() {
        Some(z) if z > 0.0 => z,
        other => {
            return Err(MotionError::NotSupercritical(format!(
                "z_ψ = {other:?} is not in (0, ∞)"
            )))
        }
    };
    Ok(SpectralData {
        example,
        c,
        dim,
        lambda1,
        lambda_h: c,
        w,
    })
}

/// Density of `ξ^h` with respect to `h² m` (both examples share it).
pub fn ph_density(spectral: &SpectralData, t: f64, x: &[f64], y: &[f64]) -> Result<f64, MotionError> {
    inward_ou(spectral.c, spectral.dim)?.transition_density(t, x, y)
}

/// `ã_t(x) = p^h(t, x, x)`.
pub fn a_tilde(spectral: &SpectralData, t: f64, x: &[f64]) -> Result<f64, MotionError> {
    ph_density(spectral, t, x, x)
}

/// `ξ^h` either as an exactly sampleable motion or as the base motion with
/// Feynman–Kac importance weights.
#[derive(Clone, Debug)]
pub enum HTransform {
    Exact(MotionModel),
    Reweighted(ReweightedMotion),
}

impl HTransform {
    pub fn exact(&self) -> Option<&MotionModel> {
        match self {
            HTransform::Exact(m) => Some(m),
            HTransform::Reweighted(_) => None,
        }
    }
}

/// `P^h_t f(x) = Π_x[e^{λ₁t + ∫β(ξ_s)ds} h(ξ_t)/h(x) f(ξ_t)]` by simulation.
#[derive(Clone)]
pub struct ReweightedMotion {
    base: MotionModel,
    lambda1: f64,
    beta: Coefficient,
    h: PositionFn,
}

impl fmt::Debug for ReweightedMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReweightedMotion")
            .field("base", &self.base)
            .field("lambda1", &self.lambda1)
            .finish()
    }
}

/// Weighted Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedEstimate {
    pub mean: f64,
    pub se: f64,
    /// Sample variance of the importance weights.
    pub weight_variance: f64,
}

impl ReweightedMotion {
    pub fn new(base: MotionModel, mech: &BranchingMechanism, spectral: &SpectralData) -> Self {
        let s = spectral.clone();
        Self {
            base,
            lambda1: spectral.lambda1,
            beta: mech.beta().clone(),
            h: Arc::new(move |x| s.h(x)),
        }
    }

    /// Estimates `P^h_t f(x)` from `paths` simulated paths of `steps` exact
    /// steps each; `∫β` uses the trapezoid rule on the step grid.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        f: impl Fn(&[f64]) -> f64,
        x: &[f64],
        t: f64,
        steps: usize,
        paths: usize,
        rng: &mut R,
    ) -> WeightedEstimate {
        let dt = t / steps.max(1) as f64;
        let hx = (self.h)(x);
        let (mut sum, mut sum2, mut wsum, mut wsum2) = (0.0, 0.0, 0.0, 0.0);
        let mut y: Point = Point::from_slice(x);
        for _ in 0..paths {
            y.copy_from_slice(x);
            let mut integral = 0.0;
            let mut prev = self.beta.eval(&y);
            let mut alive = true;
            for _ in 0..steps.max(1) {
                alive &= self.base.advance(&mut y, dt, rng);
                let cur = self.beta.eval(&y);
                integral += 0.5 * (prev + cur) * dt;
                prev = cur;
            }
            let weight = if alive {
                (self.lambda1 * t + integral).exp() * (self.h)(&y) / hx
            } else {
                0.0
            };
            let v = weight * f(&y);
            sum += v;
            sum2 += v * v;
            wsum += weight;
            wsum2 += weight * weight;
        }
        let n = paths as f64;
        let mean = sum / n;
        let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
        let wmean = wsum / n;
        WeightedEstimate {
            mean,
            se: (var / n).sqrt(),
            weight_variance: (wsum2 / n - wmean * wmean).max(0.0),
        }
    }
}

/// The `h`-transformed motion. The example models are transformed in closed
/// form: 8.1 maps to itself, 8.2 (outward OU) to the inward OU with the same
/// `c` and `d`. Anything else is returned as a reweighted motion.
pub fn h_transform(motion: &MotionModel, mech: &BranchingMechanism, spectral: &SpectralData) -> HTransform {
    let matches = motion.killing.is_none()
        && motion.c == spectral.c
        && motion.dim == spectral.dim
        && motion.kind == spectral.example.motion_kind()
        && mech.beta().as_constant().is_some();
    if matches {
        let inward = MotionModel {
            kind: MotionKind::InwardOu,
            c: motion.c,
            dim: motion.dim,
            killing: None,
        };
        HTransform::Exact(inward)
    } else {
        HTransform::Reweighted(ReweightedMotion::new(motion.clone(), mech, spectral))
    }
}

/// The `w`-transformed motion `ξ^w`: the base motion killed at rate
/// `γ(x) = ψ_β(x, w(x)) / w(x)`. A negative `γ` anywhere is rejected.
pub fn w_transform(
    motion: &MotionModel,
    mech: &BranchingMechanism,
    w: &Coefficient,
) -> Result<MotionModel, MotionError> {
    let (w_lo, w_hi) = w.bounds();
    if !(w_lo > 0.0) {
        return Err(MechanismError::NonPositiveW(w_lo).into());
    }
    if let (Some(wc), true) = (w.as_constant(), mech.is_spatially_constant()) {
        let gamma = mech.psi(&[], wc)? / wc;
        if gamma.abs() <= 1e-12 * (1.0 + wc) {
            return Ok(motion.clone());
        }
        if gamma < 0.0 {
            return Err(MotionError::Unsupported(format!(
                "kill rate ψ(w)/w = {gamma} is negative"
            )));
        }
        return motion.clone().with_killing(Coefficient::Constant(gamma));
    }
    // γ ≤ −β_lo + α_hi w_hi + ∫ y π(dy), since e^{−wy} − 1 + wy ≤ wy
    let jump_mean = match mech.pi() {
        JumpKernel::Constant(m) => m.integrate(|y| y),
        JumpKernel::Varying(_) => {
            return Err(MotionError::Unsupported(
                "w-transform with a position-dependent jump kernel".into(),
            ))
        }
    };
    let upper = -mech.beta().bounds().0 + mech.alpha().bounds().1 * w_hi + jump_mean;
    // sign check on a probe grid covering ±6 stationary standard deviations
    let half = 6.0 / (2.0 * motion.c).sqrt();
    let probe_nodes = if motion.dim <= 2 { 41 } else { 9 };
    let mut min_gamma = f64::INFINITY;
    for x in quadrature::grid_points(-half, half, probe_nodes, motion.dim) {
        let wx = w.eval(&x);
        min_gamma = min_gamma.min(mech.psi(&x, wx)? / wx);
    }
    if min_gamma < -1e-12 {
        return Err(MotionError::Unsupported(format!(
            "kill rate ψ(x, w)/w takes the negative value {min_gamma}; sign-indefinite w-transforms are not supported"
        )));
    }
    let (mech, w) = (mech.clone(), w.clone());
    motion.clone().with_killing(Coefficient::varying(
        move |x| {
            let wx = w.eval(x);
            (mech.psi(x, wx).unwrap_or(0.0) / wx).max(0.0)
        },
        0.0,
        upper.max(0.0),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stats::ks_one_sample;
    use crate::rng::{stream, StreamTag};
    use statrs::function::erf::erf;

    fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
        0.5 * (1.0 + erf((x - mean) / (2.0 * var).sqrt()))
    }

    #[test]
    fn zero_step_is_identity() {
        let mut rng = stream(1, 0, StreamTag::Motion);
        for m in [inward_ou(1.0, 2).unwrap(), outward_ou(0.5, 2).unwrap()] {
            let mut x = [0.3, -1.2];
            m.step(&mut x, 0.0, &mut rng);
            assert_eq!(x, [0.3, -1.2]);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(inward_ou(0.0, 1).unwrap_err(), MotionError::NonPositiveRate(0.0));
        assert!(outward_ou(-1.0, 1).is_err());
        assert_eq!(inward_ou(1.0, 0).unwrap_err(), MotionError::ZeroDimension);
        assert!(inward_ou(1.0, 1).unwrap().transition_density(0.0, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn long_step_reaches_stationary_law() {
        let m = inward_ou(1.0, 1).unwrap();
        let (scale, var) = m.step_coefficients(50.0);
        assert!(scale < 1e-20);
        assert!((var - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inward_variance_at_unit_step() {
        let m = inward_ou(1.0, 1).unwrap();
        let mut rng = stream(2, 0, StreamTag::Motion);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = [0.0];
                m.step(&mut x, 1.0, &mut rng);
                x[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = (1.0 - (-2.0f64).exp()) / 2.0;
        // SE of the sample variance of a Gaussian: σ² √(2/(n−1))
        let se = target * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - target).abs() < 3.0 * se, "{var} vs {target}");
    }

    #[test]
    fn outward_step_mean() {
        let m = outward_ou(0.5, 1).unwrap();
        let mut rng = stream(3, 0, StreamTag::Motion);
        let n = 50_000;
        let x0 = 0.8;
        let mean = (0..n)
            .map(|_| {
                let mut x = [x0];
                m.step(&mut x, 0.7, &mut rng);
                x[0]
            })
            .sum::<f64>()
            / n as f64;
        let (scale, var) = m.step_coefficients(0.7);
        assert!((scale - (0.35f64).exp()).abs() < 1e-15);
        assert!((mean - scale * x0).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn exact_samplers_pass_ks() {
        for (m, x0, dt) in [
            (inward_ou(1.0, 1).unwrap(), 1.5, 0.4),
            (outward_ou(0.5, 1).unwrap(), -0.5, 1.0),
        ] {
            let mut rng = stream(4, 0, StreamTag::Motion);
            let samples: Vec<f64> = (0..100_000)
                .map(|_| {
                    let mut x = [x0];
                    m.step(&mut x, dt, &mut rng);
                    x[0]
                })
                .collect();
            let (scale, var) = m.step_coefficients(dt);
            let ks = ks_one_sample(&samples, |x| normal_cdf(x, scale * x0, var));
            assert!(ks.p_value > 0.01, "{}: {ks:?}", m.name());
        }
    }

    #[test]
    fn densities_are_normalised_and_match_gaussians() {
        for m in [inward_ou(1.0, 1).unwrap(), outward_ou(0.5, 1).unwrap()] {
            for (x, t) in [(0.0, 0.3), (1.0, 1.0), (-2.0, 2.5)] {
                let (scale, var) = m.step_coefficients(t);
                let mean = scale * x;
                let mass = quadrature::simpson(
                    |y| m.transition_density(t, &[x], &[y]).unwrap() * m.reference_density(&[y]),
                    mean - 8.0 * var.sqrt(),
                    mean + 8.0 * var.sqrt(),
                    4000,
                );
                assert!((mass - 1.0).abs() < 1e-9, "{} x={x} t={t}: {mass}", m.name());
                for y in [mean - 1.0, mean, mean + 0.5] {
                    let leb = (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
                    let via_m = m.transition_density(t, &[x], &[y]).unwrap() * m.reference_density(&[y]);
                    assert!((leb - via_m).abs() < 1e-12 * leb.max(1.0));
                }
            }
        }
    }

    #[test]
    fn lebesgue_density_is_gaussian_in_the_far_tail() {
        let m = outward_ou(0.25, 1).unwrap();
        let (t, x) = (8.0, 1.0);
        let (scale, var) = m.step_coefficients(t);
        let mean = scale * x;
        for y in [mean, mean + 3.0, -80.0, 90.0] {
            let leb = (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            let got = m.lebesgue_density(t, &[x], &[y]).unwrap();
            assert!((got - leb).abs() <= 1e-12 * leb.max(1e-300), "y={y}: {got} vs {leb}");
        }
        let mass = quadrature::simpson(
            |y| m.lebesgue_density(t, &[x], &[y]).unwrap(),
            mean - 8.0 * var.sqrt(),
            mean + 8.0 * var.sqrt(),
            4000,
        );
        assert!((mass - 1.0).abs() < 1e-9);
        let inward = inward_ou(1.0, 1).unwrap();
        let product = inward.transition_density(1.0, &[0.5], &[0.2]).unwrap() * inward.reference_density(&[0.2]);
        assert!((inward.lebesgue_density(1.0, &[0.5], &[0.2]).unwrap() - product).abs() < 1e-14);
    }

    #[test]
    fn density_is_symmetric_and_chapman_kolmogorov_holds() {
        for m in [inward_ou(1.0, 1).unwrap(), outward_ou(0.5, 1).unwrap()] {
            let (s, t) = (0.4, 0.7);
            for (x, y) in [(0.0, 0.5), (1.0, -0.3)] {
                let pxy = m.transition_density(t, &[x], &[y]).unwrap();
                let pyx = m.transition_density(t, &[y], &[x]).unwrap();
                assert!((pxy - pyx).abs() < 1e-12 * pxy);
                let ck = quadrature::simpson(
                    |z| {
                        m.transition_density(s, &[x], &[z]).unwrap()
                            * m.transition_density(t, &[z], &[y]).unwrap()
                            * m.reference_density(&[z])
                    },
                    -15.0,
                    15.0,
                    6000,
                );
                let direct = m.transition_density(s + t, &[x], &[y]).unwrap();
                assert!((ck - direct).abs() < 1e-8 * direct, "{}: {ck} vs {direct}", m.name());
            }
        }
    }

    #[test]
    fn spectral_examples() {
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::InwardOu, 1.0, 1, &mech).unwrap();
        assert_eq!(s.lambda1, -1.0);
        assert_eq!(s.h(&[3.0]), 1.0);
        assert!((s.w - 1.0).abs() < 1e-12);
        let mech2 = BranchingMechanism::quadratic(2.0, 1.0).unwrap();
        let s2 = spectral_for_example(ExampleId::OutwardOu, 1.0, 1, &mech2).unwrap();
        assert_eq!(s2.lambda1, -1.0);
        assert_eq!(s2.lambda_h, 1.0);
        for s in [&s, &s2] {
            assert!((s.h_norm_squared(2001) - 1.0).abs() < 1e-9);
        }
        let s3 = spectral_for_example(ExampleId::OutwardOu, 0.5, 2, &mech2).unwrap();
        assert!((s3.h_norm_squared(401) - 1.0).abs() < 1e-9);
        assert!(matches!(
            spectral_for_example(ExampleId::OutwardOu, 1.0, 2, &mech2),
            Err(MotionError::NotSupercritical(_))
        ));
    }

    #[test]
    fn h2_average_closed_form_matches_quadrature() {
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::OutwardOu, 0.5, 1, &mech).unwrap();
        let phi = TestFunction::Gaussian { a: 0.8 };
        let closed = s.h2_average(&phi);
        let quad = s.h2_average_quadrature(&phi, 2401);
        assert!((closed - quad).abs() < 1e-9, "{closed} vs {quad}");
        // the box edge costs O(h) under the trapezoid rule
        let phi = TestFunction::Box { r: 1.0 };
        let (closed, quad) = (s.h2_average(&phi), s.h2_average_quadrature(&phi, 2401));
        assert!((closed - quad).abs() < 1e-2, "{closed} vs {quad}");
    }

    #[test]
    fn h_transform_examples() {
        let mech = BranchingMechanism::quadratic(2.0, 1.0).unwrap();
        let s1 = spectral_for_example(ExampleId::InwardOu, 1.0, 1, &mech).unwrap();
        let ou = inward_ou(1.0, 1).unwrap();
        assert_eq!(h_transform(&ou, &mech, &s1).exact(), Some(&ou));
        let s2 = spectral_for_example(ExampleId::OutwardOu, 1.0, 1, &mech).unwrap();
        let out = outward_ou(1.0, 1).unwrap();
        assert_eq!(h_transform(&out, &mech, &s2).exact(), Some(&inward_ou(1.0, 1).unwrap()));
        // mismatched c falls back to reweighting
        assert!(h_transform(&outward_ou(0.7, 1).unwrap(), &mech, &s2).exact().is_none());
    }

    #[test]
    fn reweighted_h_transform_matches_inward_ou() {
        // outward OU reweighted by e^{λ₁t+βt} h(ξ_t)/h(x) is the inward OU
        let mech = BranchingMechanism::quadratic(2.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::OutwardOu, 0.5, 1, &mech).unwrap();
        let rw = ReweightedMotion::new(outward_ou(0.5, 1).unwrap(), &mech, &s);
        let mut rng = stream(5, 0, StreamTag::Motion);
        let f = TestFunction::Gaussian { a: 0.5 };
        for x in [0.0, 0.8] {
            let est = rw.estimate(|y| f.eval(y), &[x], 1.0, 1, 200_000, &mut rng);
            let exact = inward_ou(0.5, 1).unwrap().expect(&f, &[x], 1.0).unwrap();
            assert!((est.mean - exact).abs() < 3.0 * est.se, "x={x}: {est:?} vs {exact}");
            let one = rw.estimate(|_| 1.0, &[x], 1.0, 1, 200_000, &mut rng);
            assert!((one.mean - 1.0).abs() < 3.0 * one.se, "P^h 1: {one:?}");
        }
    }

    #[test]
    fn eigen_identity_monte_carlo() {
        // e^{λ₁t} E_x[e^{βt} h(ξ_t)] = h(x) for Example 8.2
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::OutwardOu, 0.5, 1, &mech).unwrap();
        let m = outward_ou(0.5, 1).unwrap();
        let mut rng = stream(6, 0, StreamTag::Motion);
        let n = 200_000;
        for t in [0.5, 1.0, 2.0] {
            for x in [0.0, 0.7] {
                let vals: Vec<f64> = (0..n)
                    .map(|_| {
                        let mut y = [x];
                        m.step(&mut y, t, &mut rng);
                        ((s.lambda1 + 1.0) * t).exp() * s.h(&y)
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                assert!((mean - s.h(&[x])).abs() < 3.0 * se, "t={t} x={x}: {mean} vs {}", s.h(&[x]));
            }
        }
    }

    #[test]
    fn ph_density_examples() {
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::InwardOu, 1.0, 2, &mech).unwrap();
        for t in [0.1, 1.0, 3.0] {
            let v = ph_density(&s, t, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
            assert!((v - (1.0 - (-2.0 * t).exp()).powf(-1.0)).abs() < 1e-12);
            assert_eq!(a_tilde(&s, t, &[0.0, 0.0]).unwrap(), v);
            let a = ph_density(&s, t, &[0.3, -1.0], &[1.2, 0.4]).unwrap();
            let b = ph_density(&s, t, &[1.2, 0.4], &[0.3, -1.0]).unwrap();
            assert!((a - b).abs() < 1e-14 * a);
        }
        assert!((ph_density(&s, 40.0, &[1.0, 0.5], &[-0.5, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(ph_density(&s, 0.0, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn mixing_rate_matches_gap() {
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::InwardOu, 1.0, 1, &mech).unwrap();
        let rate = fitted_mixing_rate(&s);
        assert!((rate - s.lambda_h).abs() < 0.15 * s.lambda_h, "{rate}");
    }

    fn fitted_mixing_rate(s: &SpectralData) -> f64 {
        let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
        let ts: Vec<f64> = (0..=10).map(|i| 3.0 + 0.5 * i as f64).collect();
        let logs: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let mut sup: f64 = 0.0;
                for &x in &grid {
                    for &y in &grid {
                        sup = sup.max((ph_density(s, t, &[x], &[y]).unwrap() - 1.0).abs());
                    }
                }
                sup.ln()
            })
            .collect();
        let n = ts.len() as f64;
        let (mt, ml) = (ts.iter().sum::<f64>() / n, logs.iter().sum::<f64>() / n);
        let cov: f64 = ts.iter().zip(&logs).map(|(t, l)| (t - mt) * (l - ml)).sum();
        let var: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
        -cov / var
    }

    #[test]
    fn ph_contraction_toward_equilibrium() {
        let mech = BranchingMechanism::quadratic(2.0, 1.0).unwrap();
        let s = spectral_for_example(ExampleId::OutwardOu, 1.0, 1, &mech).unwrap();
        let ph = inward_ou(1.0, 1).unwrap();
        let g = TestFunction::Box { r: 0.5 };
        let eq = s.h2_average(&g);
        let mut prev = f64::INFINITY;
        for t in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let dev = (ph.expect(&g, &[1.5], t).unwrap() - eq).abs();
            assert!(dev < prev, "t={t}");
            prev = dev;
        }
    }

    #[test]
    fn w_transform_examples() {
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        let ou = inward_ou(1.0, 1).unwrap();
        let z = mech.root_zpsi().unwrap().finite().unwrap();
        assert_eq!(w_transform(&ou, &mech, &Coefficient::Constant(z)).unwrap(), ou);
        // w = 2: ψ(2)/2 = (−2 + 4)/2 = 1 ≥ 0 → killed at rate 1
        let killed = w_transform(&ou, &mech, &Coefficient::Constant(2.0)).unwrap();
        assert_eq!(killed.kill_rate(&[0.0]), 1.0);
        // w = 0.5: ψ < 0 → rejected
        assert!(matches!(
            w_transform(&ou, &mech, &Coefficient::Constant(0.5)),
            Err(MotionError::Unsupported(_))
        ));
        assert!(w_transform(&ou, &mech, &Coefficient::Constant(0.0)).is_err());
        // spatially varying w with ψ(x, w(x)) ≥ 0 everywhere
        let w = Coefficient::varying(|x| 1.0 + 0.5 / (1.0 + x[0] * x[0]), 1.0, 1.5);
        let k = w_transform(&ou, &mech, &w).unwrap();
        assert!((k.kill_rate(&[0.0]) - 0.5).abs() < 1e-12);
        let sign_indefinite = Coefficient::varying(|x| if x[0] > 0.0 { 2.0 } else { 0.5 }, 0.5, 2.0);
        assert!(w_transform(&ou, &mech, &sign_indefinite).is_err());
    }

    #[test]
    fn constant_killing_survival() {
        let m = inward_ou(1.0, 1).unwrap().with_killing(Coefficient::Constant(0.5)).unwrap();
        let mut rng = stream(7, 0, StreamTag::Motion);
        let n = 100_000;
        for t in [0.5, 2.0] {
            let alive = (0..n).filter(|_| m.advance(&mut [0.0], t, &mut rng)).count() as f64 / n as f64;
            let p = (-0.5 * t).exp();
            assert!((alive - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "t={t}");
        }
    }

    #[test]
    fn varying_killing_by_thinning() {
        // γ(x) = 0.5 everywhere but expressed as a varying coefficient
        let m = inward_ou(1.0, 1)
            .unwrap()
            .with_killing(Coefficient::varying(|_| 0.5, 0.5, 2.0))
            .unwrap();
        let mut rng = stream(8, 0, StreamTag::Motion);
        let n = 100_000;
        let alive = (0..n).filter(|_| m.advance(&mut [0.0], 1.0, &mut rng)).count() as f64 / n as f64;
        let p = (-0.5f64).exp();
        assert!((alive - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }
}
