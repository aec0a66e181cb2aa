//! Branching mechanisms
//!
//! ```text
//! ψ_β(x, λ) = −β(x)λ + α(x)λ² + ∫_(0,∞) (e^{−λy} − 1 + λy) π(x, dy)
//! ```
//!
//! together with the quantities derived from them: the root `z_ψ`, Grey's
//! condition, the tilt by a martingale function `w`, and the skeleton's
//! branching rate `q` and offspring law `{p_k}`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::motion::SpectralData;
use crate::quadrature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("λ must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("operation requires a spatially constant mechanism")]
    NotSpatiallyConstant,
    #[error("invalid jump measure: {0}")]
    InvalidJumpMeasure(String),
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("mechanism is trivial: α + π(0,∞) vanishes identically")]
    Trivial,
    #[error("w must be strictly positive (got {0})")]
    NonPositiveW(f64),
    #[error("ψ ≤ 0 on the whole scanned range: no finite-time extinction can be tested")]
    NotExtinguishable,
}

pub type PositionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A position-dependent jump measure.
pub type KernelFn = Arc<dyn Fn(&[f64]) -> JumpMeasure + Send + Sync>;

/// A bounded function of position: either a constant or a closure with
/// user-supplied bounds `lower ≤ f ≤ upper` (used for thinning).
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Varying {
        f: PositionFn,
        lower: f64,
        upper: f64,
    },
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Varying { lower, upper, .. } => {
                write!(f, "Varying {{ lower: {lower}, upper: {upper} }}")
            }
        }
    }
}

impl Coefficient {
    pub fn varying(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, lower: f64, upper: f64) -> Self {
        Coefficient::Varying {
            f: Arc::new(f),
            lower,
            upper,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Varying { f, .. } => f(x),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Coefficient::Constant(c) => (*c, *c),
            Coefficient::Varying { lower, upper, .. } => (*lower, *upper),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coefficient::Constant(c) => Some(*c),
            Coefficient::Varying { .. } => None,
        }
    }

    fn validate(&self, what: &str) -> Result<(), MechanismError> {
        let (lo, hi) = self.bounds();
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(MechanismError::InvalidCoefficient(format!(
                "{what}: bounds [{lo}, {hi}] are not a finite interval"
            )));
        }
        Ok(())
    }
}

/// Tabulated jump density on a log-spaced (or user-supplied) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<f64>,
}

impl DensityTable {
    /// Tabulates `density` on `n` log-spaced nodes of `[lo, hi]`.
    pub fn tabulate(density: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Self {
        let (nodes, weights) = quadrature::log_grid(lo, hi, n);
        let values = nodes.iter().map(|&y| density(y)).collect();
        Self {
            nodes,
            weights,
            values,
        }
    }

    /// A density given by its values on an increasing grid of positive
    /// nodes; trapezoid weights are derived from the grid.
    pub fn from_table(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self, MechanismError> {
        if nodes.len() != values.len() || nodes.len() < 2 {
            return Err(MechanismError::InvalidJumpMeasure(
                "density table needs at least two nodes and matching values".into(),
            ));
        }
        if nodes[0] <= 0.0 || nodes.windows(2).any(|p| p[1] <= p[0]) {
            return Err(MechanismError::InvalidJumpMeasure(
                "density nodes must be positive and strictly increasing".into(),
            ));
        }
        let n = nodes.len();
        let weights = (0..n)
            .map(|i| {
                let left = if i > 0 { nodes[i] - nodes[i - 1] } else { 0.0 };
                let right = if i + 1 < n { nodes[i + 1] - nodes[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect();
        Ok(Self {
            nodes,
            weights,
            values,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights already multiplied by the density values.
    fn masses(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes
            .iter()
            .zip(self.weights.iter().zip(&self.values))
            .map(|(&y, (&w, &v))| (y, w * v))
    }
}

/// A jump measure on `(0, ∞)`: finitely many atoms plus an optional
/// tabulated density.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct JumpMeasure {
    atoms: Vec<(f64, f64)>,
    density: Option<DensityTable>,
}

impl JumpMeasure {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(atoms: Vec<(f64, f64)>, density: Option<DensityTable>) -> Result<Self, MechanismError> {
        for &(y, m) in &atoms {
            if !(y > 0.0 && y.is_finite()) {
                return Err(MechanismError::InvalidJumpMeasure(format!(
                    "atom location {y} is not strictly positive and finite"
                )));
            }
            if !(m >= 0.0 && m.is_finite()) {
                return Err(MechanismError::InvalidJumpMeasure(format!(
                    "atom mass {m} is not nonnegative and finite"
                )));
            }
        }
        if let Some(d) = &density {
            if d.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(MechanismError::InvalidJumpMeasure(
                    "density values must be finite and nonnegative".into(),
                ));
            }
        }
        let jm = Self { atoms, density };
        let moment = jm.integrate(|y| y.min(y * y));
        if !moment.is_finite() {
            return Err(MechanismError::InvalidJumpMeasure(
                "∫ (y ∧ y²) π(dy) is not finite".into(),
            ));
        }
        Ok(jm)
    }

    pub fn atoms(atoms: Vec<(f64, f64)>) -> Result<Self, MechanismError> {
        Self::new(atoms, None)
    }

    pub fn dirac(y: f64, mass: f64) -> Result<Self, MechanismError> {
        Self::atoms(vec![(y, mass)])
    }

    pub fn atom_list(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn density(&self) -> Option<&DensityTable> {
        self.density.as_ref()
    }

    pub fn is_atomic(&self) -> bool {
        self.density.is_none()
    }

    pub fn is_zero(&self) -> bool {
        self.total_mass() == 0.0
    }

    /// `∫ g(y) π(dy)`.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        let mut acc: f64 = self.atoms.iter().map(|&(y, m)| m * g(y)).sum();
        if let Some(d) = &self.density {
            acc += d.masses().map(|(y, m)| m * g(y)).sum::<f64>();
        }
        acc
    }

    /// `π((0, ∞))`.
    pub fn total_mass(&self) -> f64 {
        self.integrate(|_| 1.0)
    }

    /// `e^{−w y} π(dy)`.
    pub fn tilt(&self, w: f64) -> Self {
        let atoms = self.atoms.iter().map(|&(y, m)| (y, m * (-w * y).exp())).collect();
        let density = self.density.as_ref().map(|d| DensityTable {
            nodes: d.nodes.clone(),
            weights: d.weights.clone(),
            values: d.nodes.iter().zip(&d.values).map(|(y, v)| v * (-w * y).exp()).collect(),
        });
        Self { atoms, density }
    }

    /// `g(y) π(dy)` restricted to the support points, as a weighted atom list
    /// (density nodes carry their quadrature mass).
    pub fn weighted_atoms(&self, g: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self.atoms.iter().map(|&(y, m)| (y, m * g(y))).collect();
        if let Some(d) = &self.density {
            out.extend(d.masses().map(|(y, m)| (y, m * g(y))));
        }
        out
    }
}

/// Position-indexed jump measure.
#[derive(Clone)]
pub enum JumpKernel {
    Constant(JumpMeasure),
    Varying(KernelFn),
}

impl fmt::Debug for JumpKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JumpKernel::Constant(m) => write!(f, "Constant({m:?})"),
            JumpKernel::Varying(_) => write!(f, "Varying(..)"),
        }
    }
}

impl JumpKernel {
    pub fn at(&self, x: &[f64]) -> JumpMeasure {
        match self {
            JumpKernel::Constant(m) => m.clone(),
            JumpKernel::Varying(k) => k(x),
        }
    }

    fn with<R>(&self, x: &[f64], f: impl FnOnce(&JumpMeasure) -> R) -> R {
        match self {
            JumpKernel::Constant(m) => f(m),
            JumpKernel::Varying(k) => f(&k(x)),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, JumpKernel::Constant(m) if m.is_zero())
    }
}

/// `e^{−u} − 1 + u`, accurate for small `u`.
#[inline]
fn compensated_exp(u: f64) -> f64 {
    if u < 1e-3 {
        u * u * (0.5 - u * (1.0 / 6.0 - u * (1.0 / 24.0 - u / 120.0)))
    } else {
        (-u).exp_m1() + u
    }
}

/// `1 − e^{−u} − u e^{−u}`, accurate for small `u`.
#[cfg(test)]
#[inline]
fn two_or_more(u: f64) -> f64 {
    if u < 1e-3 {
        u * u * (0.5 - u * (1.0 / 3.0 - u * (1.0 / 8.0 - u / 30.0)))
    } else {
        -(-u).exp_m1() - u * (-u).exp()
    }
}

/// A branching mechanism `(β, α, π)`.
#[derive(Clone, Debug)]
pub struct BranchingMechanism {
    beta: Coefficient,
    alpha: Coefficient,
    pi: JumpKernel,
}

/// The root `z_ψ = sup{λ ≥ 0 : ψ(λ) ≤ 0}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ZPsi {
    Finite(f64),
    Infinite,
}

impl ZPsi {
    pub fn finite(self) -> Option<f64> {
        match self {
            ZPsi::Finite(z) => Some(z),
            ZPsi::Infinite => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GreyConfidence {
    /// Decided in closed form (quadratic part present, or ψ linear).
    Analytic,
    /// Decided from the decay of `∫ dλ/ψ` over successive decades.
    Numeric {
        /// Ratio of the last two decade increments of `∫ dλ/ψ`.
        decade_ratio: f64,
        /// Geometric tail estimate beyond the last cutoff (∞ if diverging).
        tail_estimate: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreyResult {
    pub holds: bool,
    pub confidence: GreyConfidence,
}

/// Relative bracket width at which the `z_ψ` bisection stops.
const ZPSI_TOL: f64 = 4.0 * f64::EPSILON;
const ZPSI_SCAN_MAX: f64 = 1e12;

impl BranchingMechanism {
    pub fn new(beta: Coefficient, alpha: Coefficient, pi: JumpKernel) -> Result<Self, MechanismError> {
        beta.validate("beta")?;
        alpha.validate("alpha")?;
        if alpha.bounds().0 < 0.0 {
            return Err(MechanismError::InvalidCoefficient("alpha must be nonnegative".into()));
        }
        let mech = Self { beta, alpha, pi };
        let trivial = match (&mech.alpha, &mech.pi) {
            (Coefficient::Constant(a), JumpKernel::Constant(m)) => *a == 0.0 && m.is_zero(),
            (Coefficient::Varying { upper, .. }, JumpKernel::Constant(m)) => *upper == 0.0 && m.is_zero(),
            _ => false,
        };
        if trivial {
            return Err(MechanismError::Trivial);
        }
        Ok(mech)
    }

    /// Spatially constant mechanism `−bλ + aλ² + ∫(e^{−λy}−1+λy)η(dy)`.
    pub fn constant(b: f64, a: f64, eta: JumpMeasure) -> Result<Self, MechanismError> {
        Self::new(Coefficient::Constant(b), Coefficient::Constant(a), JumpKernel::Constant(eta))
    }

    /// `−βλ + αλ²`.
    pub fn quadratic(beta: f64, alpha: f64) -> Result<Self, MechanismError> {
        Self::constant(beta, alpha, JumpMeasure::zero())
    }

    /// The linear mechanism `−βλ`. This is the trivial (deterministic) case
    /// excluded from simulation; it exists for the analytic checks only.
    pub fn linear(beta: f64) -> Self {
        Self {
            beta: Coefficient::Constant(beta),
            alpha: Coefficient::Constant(0.0),
            pi: JumpKernel::Constant(JumpMeasure::zero()),
        }
    }

    pub fn beta(&self) -> &Coefficient {
        &self.beta
    }

    pub fn alpha(&self) -> &Coefficient {
        &self.alpha
    }

    pub fn pi(&self) -> &JumpKernel {
        &self.pi
    }

    pub fn is_spatially_constant(&self) -> bool {
        matches!(
            (&self.beta, &self.alpha, &self.pi),
            (Coefficient::Constant(_), Coefficient::Constant(_), JumpKernel::Constant(_))
        )
    }

    /// No jump part anywhere.
    pub fn is_quadratic(&self) -> bool {
        self.pi.is_zero()
    }

    /// `(b, a, η)` of a spatially constant mechanism.
    pub fn constant_parts(&self) -> Result<(f64, f64, &JumpMeasure), MechanismError> {
        match (&self.beta, &self.alpha, &self.pi) {
            (Coefficient::Constant(b), Coefficient::Constant(a), JumpKernel::Constant(m)) => Ok((*b, *a, m)),
            _ => Err(MechanismError::NotSpatiallyConstant),
        }
    }

    fn check_lambda(lambda: f64) -> Result<(), MechanismError> {
        if lambda >= 0.0 {
            Ok(())
        } else {
            Err(MechanismError::NegativeLambda(lambda))
        }
    }

    fn psi0_unchecked(&self, x: &[f64], lambda: f64) -> f64 {
        let jump = self.pi.with(x, |m| m.integrate(|y| compensated_exp(lambda * y)));
        self.alpha.eval(x) * lambda * lambda + jump
    }

    fn psi0_prime_unchecked(&self, x: &[f64], lambda: f64) -> f64 {
        let jump = self.pi.with(x, |m| m.integrate(|y| -y * (-lambda * y).exp_m1()));
        2.0 * self.alpha.eval(x) * lambda + jump
    }

    /// `ψ_β(x, λ)`.
    pub fn psi(&self, x: &[f64], lambda: f64) -> Result<f64, MechanismError> {
        Self::check_lambda(lambda)?;
        Ok(-self.beta.eval(x) * lambda + self.psi0_unchecked(x, lambda))
    }

    /// `ψ₀(x, λ) = ψ_β(x, λ) + β(x)λ`.
    pub fn psi0(&self, x: &[f64], lambda: f64) -> Result<f64, MechanismError> {
        Self::check_lambda(lambda)?;
        Ok(self.psi0_unchecked(x, lambda))
    }

    /// `∂ψ₀/∂λ (x, λ)`.
    pub fn psi0_prime(&self, x: &[f64], lambda: f64) -> Result<f64, MechanismError> {
        Self::check_lambda(lambda)?;
        Ok(self.psi0_prime_unchecked(x, lambda))
    }

    /// `∂ψ_β/∂λ (x, λ)`.
    pub fn psi_prime(&self, x: &[f64], lambda: f64) -> Result<f64, MechanismError> {
        Ok(self.psi0_prime(x, lambda)? - self.beta.eval(x))
    }

    /// ψ of a spatially constant mechanism.
    pub fn psi_const(&self, lambda: f64) -> Result<f64, MechanismError> {
        self.constant_parts()?;
        self.psi(&[], lambda)
    }

    /// `z_ψ = sup{λ ≥ 0 : ψ(λ) ≤ 0}` by doubling scan and bisection.
    pub fn root_zpsi(&self) -> Result<ZPsi, MechanismError> {
        let (b, a, eta) = self.constant_parts()?;
        let psi = |l: f64| -b * l + a * l * l + eta.integrate(|y| compensated_exp(l * y));
        // ψ is convex with ψ(0) = 0 and ψ'(0+) = −b.
        if b <= 0.0 {
            return Ok(if a == 0.0 && eta.is_zero() && b == 0.0 {
                ZPsi::Infinite
            } else {
                ZPsi::Finite(0.0)
            });
        }
        let mut hi = 1.0;
        while psi(hi) <= 0.0 {
            hi *= 2.0;
            if hi > ZPSI_SCAN_MAX {
                return Ok(ZPsi::Infinite);
            }
        }
        let mut lo = 0.0;
        while hi - lo > ZPSI_TOL * hi {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if psi(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(ZPsi::Finite(0.5 * (lo + hi)))
    }

    /// Grey's condition `ψ(∞) = ∞, ∫^∞ dλ/ψ(λ) < ∞`.
    pub fn grey_check(&self) -> Result<GreyResult, MechanismError> {
        let (b, a, eta) = self.constant_parts()?;
        let analytic = |holds| GreyResult {
            holds,
            confidence: GreyConfidence::Analytic,
        };
        let z = match self.root_zpsi()? {
            ZPsi::Finite(z) => z,
            ZPsi::Infinite => return Err(MechanismError::NotExtinguishable),
        };
        if a > 0.0 {
            return Ok(analytic(true));
        }
        if eta.is_zero() {
            // ψ = −bλ with b < 0: ∫ dλ/λ diverges.
            return Ok(analytic(false));
        }
        let psi = |l: f64| -b * l + eta.integrate(|y| compensated_exp(l * y));
        let start = 2.0 * z + 1.0;
        // Integrate in u = ln λ, one decade at a time.
        let decade = |lo: f64| {
            quadrature::simpson(
                |u| {
                    let l = u.exp();
                    l / psi(l)
                },
                lo.ln(),
                (10.0 * lo).ln(),
                400,
            )
        };
        let decades = 10;
        let increments: Vec<f64> = (0..decades).map(|k| decade(start * 10f64.powi(k))).collect();
        let last = increments[decades as usize - 1];
        let prev = increments[decades as usize - 2];
        let ratio = last / prev;
        let converges = ratio < 0.95;
        let tail = if converges {
            last * ratio / (1.0 - ratio)
        } else {
            f64::INFINITY
        };
        Ok(GreyResult {
            holds: converges,
            confidence: GreyConfidence::Numeric {
                decade_ratio: ratio,
                tail_estimate: tail,
            },
        })
    }

    /// The mechanism tilted by `w`: `β* = β − 2αw − ∫(1 − e^{−wy}) y π(dy)`,
    /// same `α`, `π*(dy) = e^{−wy} π(dy)`, so that
    /// `ψ*_{β*}(x, λ) = ψ_β(x, λ + w(x)) − ψ_β(x, w(x))`.
    pub fn tilt_at_w(&self, w: &Coefficient) -> Result<Self, MechanismError> {
        let (w_lo, _) = w.bounds();
        if !(w_lo > 0.0) {
            return Err(MechanismError::NonPositiveW(w_lo));
        }
        let jump_drift = |m: &JumpMeasure, w: f64| m.integrate(|y| -(-w * y).exp_m1() * y);
        if let (Some(wc), Ok((b, a, eta))) = (w.as_constant(), self.constant_parts()) {
            let beta_star = b - 2.0 * a * wc - jump_drift(eta, wc);
            return Ok(Self {
                beta: Coefficient::Constant(beta_star),
                alpha: Coefficient::Constant(a),
                pi: JumpKernel::Constant(eta.tilt(wc)),
            });
        }
        let (beta, alpha, pi, wf) = (self.beta.clone(), self.alpha.clone(), self.pi.clone(), w.clone());
        let (b_lo, b_hi) = beta.bounds();
        let (a_lo, a_hi) = alpha.bounds();
        let (w_lo, w_hi) = w.bounds();
        let jump_free = pi.is_zero();
        // the jump drift is increasing in w; a varying kernel has no known bound
        let (drift_lo, drift_hi) = match &pi {
            JumpKernel::Constant(m) => (jump_drift(m, w_lo), jump_drift(m, w_hi)),
            JumpKernel::Varying(_) => (0.0, f64::INFINITY),
        };
        let lower = b_lo - 2.0 * a_hi * w_hi - drift_hi;
        let upper = b_hi - 2.0 * a_lo * w_lo - drift_lo;
        let beta_star = {
            let (pi, wf) = (pi.clone(), wf.clone());
            Coefficient::varying(
                move |x| {
                    let wx = wf.eval(x);
                    beta.eval(x) - 2.0 * alpha.eval(x) * wx - pi.with(x, |m| jump_drift(m, wx))
                },
                lower,
                upper,
            )
        };
        let pi_star = if jump_free {
            JumpKernel::Constant(JumpMeasure::zero())
        } else {
            JumpKernel::Varying(Arc::new(move |x| pi.at(x).tilt(wf.eval(x))))
        };
        Ok(Self {
            beta: beta_star,
            alpha: self.alpha.clone(),
            pi: pi_star,
        })
    }

    /// The skeleton's branching rate, offspring law and branch-point mass law
    /// at `x`, for the martingale function value `w = w(x)`.
    pub fn skeleton_law(&self, w: f64, x: &[f64], k_max: usize) -> Result<SkeletonLaw, MechanismError> {
        if !(w > 0.0) {
            return Err(MechanismError::NonPositiveW(w));
        }
        let k_max = k_max.max(2);
        let alpha = self.alpha.eval(x);
        let pi = self.pi.at(x);
        let q = self.psi0_prime_unchecked(x, w) - self.psi0_unchecked(x, w) / w;
        let eta_star = pi.tilt(w);
        if !(q > 0.0) {
            return Ok(SkeletonLaw {
                q: 0.0,
                w,
                alpha,
                pmf: Vec::new(),
                tail_mass: 0.0,
                degenerate: true,
                jumps: eta_star,
            });
        }
        let mut ln_fact = vec![0.0f64; k_max + 1];
        for k in 1..=k_max {
            ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
        }
        let qw = q * w;
        let mut pmf = vec![0.0; k_max + 1];
        for (k, slot) in pmf.iter_mut().enumerate().skip(2) {
            // w^k ∫ y^k/k! π*(dy) = ∫ Poisson(k; wy) π(dy)
            let poisson = pi.integrate(|y| {
                let u = w * y;
                (k as f64 * u.ln() - u - ln_fact[k]).exp()
            });
            let quad = if k == 2 { alpha * w * w } else { 0.0 };
            *slot = (quad + poisson) / qw;
        }
        let total: f64 = pmf.iter().sum();
        Ok(SkeletonLaw {
            q,
            w,
            alpha,
            pmf,
            tail_mass: (1.0 - total).max(0.0),
            degenerate: false,
            jumps: eta_star,
        })
    }

    /// `(2α(x), y π*(x, dy))`: the rates of continuous and discontinuous
    /// immigration along a skeleton particle at `x`.
    pub fn immigration_rates(&self, w: f64, x: &[f64]) -> ImmigrationRates {
        let kernel = self.pi.with(x, |m| m.weighted_atoms(|y| y * (-w * y).exp()));
        ImmigrationRates {
            continuous_rate: 2.0 * self.alpha.eval(x),
            discontinuous_kernel: kernel.into_iter().filter(|&(_, m)| m > 0.0).collect(),
        }
    }

    /// `⟨α log⁺h, h²⟩ + ⟨∫ r log*(r h) π(·, dr), h²⟩` by tensor trapezoid
    /// quadrature against `h² m`.
    pub fn llogl_value(&self, spectral: &SpectralData, grid: &QuadratureGrid) -> LlogLValue {
        let integrand = |x: &[f64]| {
            let h = spectral.h(x);
            let first = self.alpha.eval(x) * h.ln().max(0.0);
            let second = self.pi.with(x, |m| m.integrate(|r| r * log_star(r * h)));
            (first + second) * h * h * spectral.m_density(x)
        };
        let half = grid.half_width;
        let value = quadrature::tensor_trapezoid(integrand, -half, half, grid.nodes, spectral.dim());
        let coarse = quadrature::tensor_trapezoid(integrand, -half, half, grid.nodes.div_ceil(2), spectral.dim());
        let converged = value.is_finite() && (value - coarse).abs() <= 1e-4 * value.abs().max(1e-12);
        LlogLValue {
            value,
            finite: value.is_finite(),
            converged,
        }
    }
}

/// `log* x = x/e` for `x ≤ e`, `ln x` otherwise.
pub fn log_star(x: f64) -> f64 {
    if x <= std::f64::consts::E {
        x / std::f64::consts::E
    } else {
        x.ln()
    }
}

/// Cube `[−half_width, half_width]^d` with `nodes` points per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub half_width: f64,
    pub nodes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlogLValue {
    pub value: f64,
    pub finite: bool,
    /// Halving the grid changed the value by less than 1e−4 relative.
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImmigrationRates {
    pub continuous_rate: f64,
    /// `(y, weight)` atoms of `y e^{−w y} π(dy)`.
    pub discontinuous_kernel: Vec<(f64, f64)>,
}

/// Law of the skeleton at one position: branching rate `q`, offspring
/// probabilities `p_k` (`pmf[k]`, zero for `k < 2`, truncated at `k_max`)
/// and the branch-point mass law.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonLaw {
    pub q: f64,
    pub w: f64,
    alpha: f64,
    pub pmf: Vec<f64>,
    /// `1 − Σ_{k ≤ k_max} p_k`.
    pub tail_mass: f64,
    /// No branching at this position (`q = 0`).
    pub degenerate: bool,
    jumps: JumpMeasure,
}

impl SkeletonLaw {
    /// A binary law with constant rate, as produced by quadratic mechanisms.
    pub fn binary(q: f64) -> Self {
        Self {
            q,
            w: 1.0,
            alpha: 0.0,
            pmf: vec![0.0, 0.0, 1.0],
            tail_mass: 0.0,
            degenerate: q <= 0.0,
            jumps: JumpMeasure::zero(),
        }
    }

    pub fn k_max(&self) -> usize {
        self.pmf.len().saturating_sub(1)
    }

    /// `Σ k p_k` over the truncated support.
    pub fn mean_offspring(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// Samples an offspring count. Truncated tail mass is assigned to `k_max`.
    pub fn sample_offspring<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u: f64 = rng.random();
        for (k, p) in self.pmf.iter().enumerate() {
            if u < *p {
                return k;
            }
            u -= p;
        }
        self.k_max()
    }

    /// Law of the branch-point mass `Y_u` given `k` offspring, as weighted
    /// atoms `(y, probability)`; `y = 0` carries the quadratic part.
    pub fn branch_point_mass_law(&self, k: usize) -> Vec<(f64, f64)> {
        if self.degenerate || k < 2 || k >= self.pmf.len() || self.pmf[k] == 0.0 {
            return Vec::new();
        }
        let norm = self.q * self.w * self.pmf[k];
        let mut out = Vec::new();
        if k == 2 && self.alpha > 0.0 {
            out.push((0.0, self.alpha * self.w * self.w / norm));
        }
        let w = self.w;
        let mut ln_fact = 0.0;
        for i in 1..=k {
            ln_fact += (i as f64).ln();
        }
        out.extend(
            self.jumps
                .weighted_atoms(|y| (k as f64 * (w * y).ln() - ln_fact).exp() / norm)
                .into_iter()
                .filter(|&(_, p)| p > 0.0),
        );
        out
    }
}
