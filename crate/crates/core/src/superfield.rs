//! ε-mass particle approximation of the `(ξ, ψ_β)`-superprocess.
//!
//! The measure-valued state is carried by atoms of equal mass `ε`. Each
//! atom moves with the exact motion sampler and, independently,
//!
//! * branches critically (0 or 2 copies, probability ½ each) at rate `2α(x)/ε`,
//! * splits at rate `β⁺(x)` and dies at rate `β⁻(x)`,
//! * dies at the motion's killing rate, if any.
//!
//! The total mass then has mean growth `β` and variance rate `(2α + βε)`
//! per unit mass, so moments carry an `O(ε)` bias.
//!
//! Atomic jump measures are supported by the engine: an atom at `x` jumps
//! at rate `ε π({y})` and gains `y/ε` copies (stochastically rounded), with
//! compensating death rate `∫ y π(dy)`. The public superprocess entry points
//! accept only `π = 0`; the decompositions use jumps for mass immigrants.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;
use thiserror::Error;

use crate::harness::stats::wilson_interval;
use crate::mechanism::{BranchingMechanism, Coefficient, JumpKernel, MechanismError};
use crate::motion::MotionModel;
use crate::rng::{stream, StreamTag};
use crate::{AtomicMeasure, Point};

pub const DEFAULT_ATOM_CAP: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum SuperfieldError {
    #[error("ε must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("jump measures are not supported here: {0}")]
    JumpsUnsupported(String),
    #[error("atom cap of {cap} exceeded at t = {time}")]
    AtomCap {
        cap: usize,
        time: f64,
        partial: Box<EnsemblePath>,
    },
    #[error("record times must be nondecreasing and lie in [0, horizon]")]
    BadRecordTimes,
    #[error("injection times must be nondecreasing and lie in [0, horizon]")]
    BadInjections,
    #[error("at least one replica is required")]
    NoReplicas,
    #[error("Grey's condition fails, so extinction is not observable in finite time")]
    NotGrey,
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// The state at one time: atom positions, each carrying mass `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct MassEnsemble {
    pub time: f64,
    pub epsilon: f64,
    pub atoms: Vec<Point>,
}

impl MassEnsemble {
    pub fn count(&self) -> usize {
        self.atoms.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.epsilon * self.atoms.len() as f64
    }

    /// `⟨f, X_t⟩`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.epsilon * self.atoms.iter().map(|x| f(x)).sum::<f64>()
    }
}

/// Snapshots at the requested record times. If the run was stopped early
/// (mass threshold) the snapshots after the stop are missing.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePath {
    pub epsilon: f64,
    pub snapshots: Vec<MassEnsemble>,
    pub extinction_time: Option<f64>,
    pub stopped_at: Option<f64>,
    pub events: u64,
}

impl EnsemblePath {
    pub fn extinct_by(&self, t: f64) -> bool {
        self.extinction_time.is_some_and(|e| e <= t)
    }

    pub fn snapshot(&self, record: usize) -> Option<&MassEnsemble> {
        self.snapshots.get(record)
    }
}

/// Atoms added to the ensemble at a given time (immigration).
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub time: f64,
    pub position: Point,
    pub atoms: usize,
}

#[derive(Clone, Debug)]
pub struct EnsembleOptions {
    pub epsilon: f64,
    pub horizon: f64,
    pub record_times: Vec<f64>,
    pub atom_cap: usize,
    /// Stop once the total mass exceeds this value.
    pub stop_mass: Option<f64>,
}

impl EnsembleOptions {
    pub fn new(epsilon: f64, horizon: f64, record_times: Vec<f64>) -> Self {
        Self {
            epsilon,
            horizon,
            record_times,
            atom_cap: DEFAULT_ATOM_CAP,
            stop_mass: None,
        }
    }
}

/// Per-atom event rates derived from a mechanism and a motion.
#[derive(Clone, Debug)]
pub struct ParticleDynamics {
    beta: Coefficient,
    alpha: Coefficient,
    jumps: Vec<(f64, f64)>,
    jump_compensator: f64,
    motion: MotionModel,
}

impl ParticleDynamics {
    /// Accepts quadratic mechanisms and spatially constant atomic jump measures.
    pub fn new(mech: &BranchingMechanism, motion: &MotionModel) -> Result<Self, SuperfieldError> {
        let (jumps, jump_compensator) = match mech.pi() {
            JumpKernel::Constant(m) if m.is_zero() => (Vec::new(), 0.0),
            JumpKernel::Constant(m) if m.is_atomic() => {
                let atoms: Vec<(f64, f64)> = m.atom_list().iter().copied().filter(|&(_, w)| w > 0.0).collect();
                let comp = atoms.iter().map(|&(y, w)| y * w).sum();
                (atoms, comp)
            }
            JumpKernel::Constant(_) => {
                return Err(SuperfieldError::JumpsUnsupported("jump measure with a density part".into()))
            }
            JumpKernel::Varying(_) => {
                return Err(SuperfieldError::JumpsUnsupported("state-dependent jump kernel".into()))
            }
        };
        Ok(Self {
            beta: mech.beta().clone(),
            alpha: mech.alpha().clone(),
            jumps,
            jump_compensator,
            motion: motion.clone(),
        })
    }

    /// Atoms that only move: no branching, birth, death or jumps.
    pub fn motion_only(motion: &MotionModel) -> Self {
        Self {
            beta: Coefficient::Constant(0.0),
            alpha: Coefficient::Constant(0.0),
            jumps: Vec::new(),
            jump_compensator: 0.0,
            motion: motion.clone(),
        }
    }

    pub fn motion(&self) -> &MotionModel {
        &self.motion
    }

    fn rate_bound(&self, eps: f64) -> f64 {
        let (b_lo, b_hi) = self.beta.bounds();
        let (_, a_hi) = self.alpha.bounds();
        let kill = self.motion.killing().map_or(0.0, |k| k.bounds().1);
        2.0 * a_hi / eps
            + b_hi.max(0.0)
            + (-b_lo).max(0.0)
            + kill
            + self.jump_compensator
            + eps * self.jumps.iter().map(|&(_, w)| w).sum::<f64>()
    }
}

/// Deterministic rounding of `μ` into atoms of mass `ε` at its atom locations.
pub fn round_initial(mu: &AtomicMeasure, epsilon: f64) -> Vec<Point> {
    let mut out = Vec::new();
    for (x, m) in &mu.atoms {
        let n = (m / epsilon).round().max(0.0) as usize;
        out.extend(std::iter::repeat_n(x.clone(), n));
    }
    out
}

fn stochastic_round<R: Rng + ?Sized>(v: f64, rng: &mut R) -> usize {
    let fl = v.floor();
    fl as usize + usize::from(rng.random::<f64>() < v - fl)
}

enum Outcome {
    Remove,
    Copies(usize),
    Nothing,
}

/// Runs the particle scheme on `[0, horizon]` from `init`, adding the
/// `injections` at their times.
pub fn evolve<R: Rng + ?Sized>(
    dynamics: &ParticleDynamics,
    init: Vec<Point>,
    injections: &[Injection],
    opts: &EnsembleOptions,
    rng: &mut R,
) -> Result<EnsemblePath, SuperfieldError> {
    let eps = opts.epsilon;
    if !(eps > 0.0) {
        return Err(SuperfieldError::NonPositiveEpsilon(eps));
    }
    let rec = &opts.record_times;
    let ordered = |v: Vec<f64>| {
        v.first().is_none_or(|&t| t >= 0.0)
            && v.last().is_none_or(|&t| t <= opts.horizon)
            && v.windows(2).all(|p| p[0] <= p[1])
    };
    if !ordered(rec.clone()) {
        return Err(SuperfieldError::BadRecordTimes);
    }
    if !ordered(injections.iter().map(|i| i.time).collect()) {
        return Err(SuperfieldError::BadInjections);
    }
    let bound = dynamics.rate_bound(eps);
    let motion = &dynamics.motion;
    let mut pos: Vec<Point> = init;
    let mut last: Vec<f64> = vec![0.0; pos.len()];
    let mut path = EnsemblePath {
        epsilon: eps,
        snapshots: Vec::with_capacity(rec.len()),
        extinction_time: None,
        stopped_at: None,
        events: 0,
    };
    let mut t = 0.0;
    let mut r = 0usize;
    let mut k = 0usize;

    let sync_all = |pos: &mut Vec<Point>, last: &mut Vec<f64>, t: f64, rng: &mut R| {
        for (x, s) in pos.iter_mut().zip(last.iter_mut()) {
            motion.step(x, t - *s, rng);
            *s = t;
        }
    };

    loop {
        let next_inj = injections.get(k).map_or(f64::INFINITY, |i| i.time);
        let next_rec = rec.get(r).copied().unwrap_or(f64::INFINITY);
        let stop = next_inj.min(next_rec).min(opts.horizon);
        let n = pos.len();
        if n == 0 && next_inj == f64::INFINITY {
            path.extinction_time.get_or_insert(t);
            while r < rec.len() {
                path.snapshots.push(MassEnsemble {
                    time: rec[r],
                    epsilon: eps,
                    atoms: Vec::new(),
                });
                r += 1;
            }
            return Ok(path);
        }
        let tn = if n > 0 && bound > 0.0 {
            let e: f64 = Exp1.sample(rng);
            t + e / (bound * n as f64)
        } else {
            f64::INFINITY
        };
        if tn >= stop {
            t = stop;
            if stop == next_inj {
                let inj = &injections[k];
                pos.extend(std::iter::repeat_n(inj.position.clone(), inj.atoms));
                last.extend(std::iter::repeat_n(t, inj.atoms));
                k += 1;
                if n == 0 && inj.atoms > 0 {
                    path.extinction_time = None;
                }
            } else if stop == next_rec {
                sync_all(&mut pos, &mut last, t, rng);
                path.snapshots.push(MassEnsemble {
                    time: t,
                    epsilon: eps,
                    atoms: pos.clone(),
                });
                r += 1;
            } else {
                return Ok(path);
            }
        } else {
            t = tn;
            path.events += 1;
            let i = rng.random_range(0..n);
            motion.step(&mut pos[i], t - last[i], rng);
            last[i] = t;
            let x = &pos[i];
            let mut u = rng.random::<f64>() * bound;
            let outcome = 'pick: {
                let branch = 2.0 * dynamics.alpha.eval(x) / eps;
                if u < branch {
                    break 'pick if rng.random::<bool>() { Outcome::Copies(1) } else { Outcome::Remove };
                }
                u -= branch;
                let beta = dynamics.beta.eval(x);
                let death = (-beta).max(0.0) + motion.kill_rate(x) + dynamics.jump_compensator;
                if u < beta.max(0.0) {
                    break 'pick Outcome::Copies(1);
                }
                u -= beta.max(0.0);
                if u < death {
                    break 'pick Outcome::Remove;
                }
                u -= death;
                for &(y, w) in &dynamics.jumps {
                    if u < eps * w {
                        break 'pick Outcome::Copies(stochastic_round(y / eps, rng));
                    }
                    u -= eps * w;
                }
                Outcome::Nothing
            };
            match outcome {
                Outcome::Remove => {
                    pos.swap_remove(i);
                    last.swap_remove(i);
                    if pos.is_empty() && injections.get(k).is_none() {
                        path.extinction_time = Some(t);
                    }
                }
                Outcome::Copies(c) => {
                    let x = pos[i].clone();
                    pos.extend(std::iter::repeat_n(x, c));
                    last.extend(std::iter::repeat_n(t, c));
                    if pos.len() > opts.atom_cap {
                        sync_all(&mut pos, &mut last, t, rng);
                        return Err(SuperfieldError::AtomCap {
                            cap: opts.atom_cap,
                            time: t,
                            partial: Box::new(path),
                        });
                    }
                    if opts.stop_mass.is_some_and(|m| pos.len() as f64 * eps > m) {
                        path.stopped_at = Some(t);
                        return Ok(path);
                    }
                }
                Outcome::Nothing => {}
            }
        }
    }
}

fn check_quadratic(mech: &BranchingMechanism, epsilon: f64) -> Result<(), SuperfieldError> {
    if !(epsilon > 0.0) {
        return Err(SuperfieldError::NonPositiveEpsilon(epsilon));
    }
    if !mech.pi().is_zero() {
        return Err(SuperfieldError::JumpsUnsupported(
            "the superprocess simulator requires π = 0".into(),
        ));
    }
    Ok(())
}

/// One ε-scheme path of the `(ξ, ψ_β)`-superprocess from `μ`, with `π = 0`.
pub fn simulate_superprocess<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    motion: &MotionModel,
    mu: &AtomicMeasure,
    epsilon: f64,
    horizon: f64,
    record_times: &[f64],
    rng: &mut R,
) -> Result<EnsemblePath, SuperfieldError> {
    check_quadratic(mech, epsilon)?;
    let dynamics = ParticleDynamics::new(mech, motion)?;
    let opts = EnsembleOptions::new(epsilon, horizon, record_times.to_vec());
    evolve(&dynamics, round_initial(mu, epsilon), &[], &opts, rng)
}

/// One ε-scheme path of the tilted superprocess `X*` with mechanism
/// `ψ*_{β*}` obtained from `tilt_at_w`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_tilted<R: Rng + ?Sized>(
    mech: &BranchingMechanism,
    w: &Coefficient,
    motion: &MotionModel,
    mu: &AtomicMeasure,
    epsilon: f64,
    horizon: f64,
    record_times: &[f64],
    rng: &mut R,
) -> Result<EnsemblePath, SuperfieldError> {
    check_quadratic(mech, epsilon)?;
    let tilted = mech.tilt_at_w(w)?;
    simulate_superprocess(&tilted, motion, mu, epsilon, horizon, record_times, rng)
}

/// `ŵ` at one horizon from the extinct-by-`T` fraction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WEstimate {
    pub horizon: f64,
    pub replicas: usize,
    pub extinct: usize,
    pub fraction: f64,
    /// `−ln(fraction)`; infinite when no replica went extinct.
    pub w_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// No extinctions observed, so only `ci_low` is informative.
    pub lower_bound: bool,
    /// Every replica went extinct, so `ŵ = 0` and only `ci_high` is informative.
    pub all_extinct: bool,
}

/// Mass above which a replica is treated as surviving; extinction from
/// there has probability at most `e^{−stop_mass · ŵ}`.
pub const W_STOP_MASS: f64 = 40.0;

/// Estimates `w(x) = −ln P_{δ_x}(extinction)` at each horizon in
/// `horizons` from `replicas` runs started at `δ_x` (that is `1/ε` atoms at
/// `x`). Replica `i` uses the stream `(seed, i)`; each run is stopped once
/// its mass exceeds [`W_STOP_MASS`].
#[allow(clippy::too_many_arguments)]
pub fn estimate_w(
    mech: &BranchingMechanism,
    motion: &MotionModel,
    x: &[f64],
    horizons: &[f64],
    epsilon: f64,
    replicas: usize,
    seed: u64,
    z: f64,
) -> Result<Vec<WEstimate>, SuperfieldError> {
    check_quadratic(mech, epsilon)?;
    if replicas == 0 {
        return Err(SuperfieldError::NoReplicas);
    }
    if !mech.grey_check()?.holds {
        return Err(SuperfieldError::NotGrey);
    }
    let mut sorted = horizons.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t_max = sorted.last().copied().unwrap_or(0.0);
    let dynamics = ParticleDynamics::new(mech, motion)?;
    let mut opts = EnsembleOptions::new(epsilon, t_max, Vec::new());
    opts.stop_mass = Some(W_STOP_MASS);
    let mu = AtomicMeasure::dirac(x.iter().copied().collect(), 1.0);
    let times = (0..replicas)
        .map(|i| {
            let mut rng = stream(seed, i as u64, StreamTag::Superfield);
            evolve(&dynamics, round_initial(&mu, epsilon), &[], &opts, &mut rng).map(|p| p.extinction_time)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(horizons
        .iter()
        .map(|&t| {
            let extinct = times.iter().filter(|e| e.is_some_and(|e| e <= t)).count();
            w_estimate(t, extinct, replicas, z)
        })
        .collect())
}

/// `ŵ = −ln(extinct / replicas)` with a Wilson interval transported through `−ln`.
pub fn w_estimate(horizon: f64, extinct: usize, replicas: usize, z: f64) -> WEstimate {
    let fraction = extinct as f64 / replicas as f64;
    let (lo, hi) = wilson_interval(extinct as u64, replicas as u64, z);
    WEstimate {
        horizon,
        replicas,
        extinct,
        fraction,
        w_hat: -fraction.ln() + 0.0,
        ci_low: -hi.ln() + 0.0,
        ci_high: -lo.ln() + 0.0,
        lower_bound: extinct == 0,
        all_extinct: extinct == replicas,
    }
}

/// `Var⟨1, X_t⟩` per unit initial mass for constant `β`, `α`, using the
/// ε-scheme's fluctuation coefficient `2α + |β|ε` (the continuum value at
/// `epsilon = 0`).
pub fn total_mass_variance(beta: f64, alpha: f64, epsilon: f64, t: f64) -> f64 {
    let sigma2 = 2.0 * alpha + beta.abs() * epsilon;
    if beta.abs() < 1e-12 {
        return sigma2 * t;
    }
    sigma2 * (2.0 * beta * t).exp() * (-(-beta * t).exp_m1()) / beta
}

/// Exact `E[e^{−λ⟨1, X_t⟩}]` of the ε-scheme for constant `β`, `α` and no
/// motion killing, started from `round(mass/ε)` atoms. The atom count is a
/// linear birth–death process with rates `α/ε + β⁺` and `α/ε + β⁻`.
pub fn total_mass_laplace(beta: f64, alpha: f64, epsilon: f64, mass: f64, lambda: f64, t: f64) -> f64 {
    let birth = alpha / epsilon + beta.max(0.0);
    let death = alpha / epsilon + (-beta).max(0.0);
    let s = (-lambda * epsilon).exp();
    let g = if beta == 0.0 {
        let bt = birth * t * (1.0 - s);
        (bt + s) / (bt + 1.0)
    } else {
        let decay = (-beta * t).exp();
        (death * (1.0 - s) - (death - birth * s) * decay) / (birth * (1.0 - s) - (death - birth * s) * decay)
    };
    g.powf((mass / epsilon).round())
}
