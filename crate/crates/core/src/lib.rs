//! Simulation and statistical verification of skeleton and spine
//! decompositions for supercritical superprocesses.
//!
//! The crate is organised bottom-up:
//!
//! * [`mechanism`] evaluates branching mechanisms `ψ_β(x, λ)`, finds the
//!   root `z_ψ`, tilts mechanisms by a martingale function `w` and extracts
//!   the skeleton's branching rate and offspring law.
//! * [`cbprocess`] covers the continuous-state branching (total mass)
//!   process: cumulant ODE, extinction probabilities and a Feller-diffusion
//!   path simulator.
//! * [`motion`] ships the two Ornstein–Uhlenbeck motions with exact
//!   transition samplers and densities, the spectral data of the analytic
//!   example models and the `h`/`w` transforms.
//! * [`skeleton`] simulates the skeleton branching Markov process with
//!   Ulam–Harris bookkeeping.
//! * [`superfield`] is the ε-mass particle approximation of the
//!   measure-valued process.
//! * [`decompositions`] assembles the spine decomposition and the skeleton
//!   dressing `X* + I`.
//! * [`harness`] holds configuration, replica farming, statistics and the
//!   acceptance presets.

// `!(x > 0.0)` guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbprocess;
pub mod decompositions;
pub mod harness;
pub mod mechanism;
pub mod motion;
pub mod quadrature;
pub mod rng;
pub mod skeleton;
pub mod superfield;
pub mod testfn;

use smallvec::SmallVec;

/// A point of `R^d`. Dimensions up to four are stored inline.
pub type Point = SmallVec<[f64; 4]>;

/// The origin of `R^d`.
pub fn origin(dim: usize) -> Point {
    SmallVec::from_elem(0.0, dim)
}

/// A finite measure given as weighted atoms `Σ m_i δ_{x_i}`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AtomicMeasure {
    pub atoms: Vec<(Point, f64)>,
}

impl AtomicMeasure {
    pub fn dirac(x: Point, mass: f64) -> Self {
        Self {
            atoms: vec![(x, mass)],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|(_, m)| m).sum()
    }

    /// `⟨f, μ⟩`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|(x, m)| m * f(x)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|(_, m)| *m == 0.0)
    }
}
