//! Spine decomposition under the size-biased measure and the skeleton
//! dressing `X̂ = X* + I`, together with their structural checks.
//!
//! Excursion measures are approximated by ε-seeding: an immigration stream
//! of rate `2α` is realized as single ε-atoms arriving at rate `2α/ε`, each
//! then evolved by the particle scheme of [`crate::superfield`].
//!
//! Every realization draws from disjoint streams derived from
//! `(seed, replica)`: the spine or skeleton, the initial mass and the
//! immigrant ensemble never share a generator.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;
use thiserror::Error;

use crate::harness::stats::{bootstrap_ci, ols, wilson_interval, OlsFit, ZTest};
use crate::mechanism::{BranchingMechanism, Coefficient, JumpKernel, MechanismError};
use crate::motion::{feynman_kac, HTransform, MotionError, MotionModel, SpectralData};
use crate::rng::{stream, StreamTag};
use crate::skeleton::{
    init_poisson, simulate_skeleton, BranchingLaw, SkeletonError, SkeletonOptions, SkeletonTree,
};
use crate::superfield::{
    evolve, round_initial, EnsembleOptions, EnsemblePath, Injection, ParticleDynamics, SuperfieldError,
};
use crate::testfn::TestFunction;
use crate::{AtomicMeasure, Point};

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("the spine needs an exactly sampleable h-transformed motion")]
    ReweightedSpine,
    #[error("unsupported jump kernel for the spine: {0}")]
    UnsupportedKernel(String),
    #[error("the dressing is implemented for π = 0 only")]
    JumpsInDressing,
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Superfield(#[from] SuperfieldError),
}

/// Shared run parameters.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub epsilon: f64,
    pub horizon: f64,
    pub record_times: Vec<f64>,
    pub seed: u64,
    pub replica: u64,
}

/// An ensemble approximating one unit of the excursion measure from `x`:
/// a single ε-atom evolved under `mech`. Scaling `⟨f, ·⟩` by `1/ε` gives the
/// approximation of `ℕ_x⟨f, X_t⟩`.
pub fn sample_excursion_approx<R: Rng + ?Sized>(
    x: &[f64],
    mech: &BranchingMechanism,
    motion: &MotionModel,
    epsilon: f64,
    horizon: f64,
    record_times: &[f64],
    rng: &mut R,
) -> Result<EnsemblePath, DecompositionError> {
    let dynamics = ParticleDynamics::new(mech, motion)?;
    let opts = EnsembleOptions::new(epsilon, horizon, record_times.to_vec());
    Ok(evolve(&dynamics, vec![x.iter().copied().collect()], &[], &opts, rng)?)
}

/// One discontinuous immigration event on the spine.
#[derive(Clone, Debug, PartialEq)]
pub struct MassImmigrant {
    pub time: f64,
    pub position: Point,
    /// The jump size `y` drawn from `y π(dy)`.
    pub mass: f64,
    /// Number of ε-atoms it enters with (`y` rounded to the ε grid).
    pub atoms: usize,
}

/// A sample of the spine decomposition `Γ` under the size-biased measure.
#[derive(Clone, Debug)]
pub struct SpineRealization {
    pub epsilon: f64,
    /// `(time, position)` of the spine at every event and record time.
    pub path: Vec<(f64, Point)>,
    /// Continuous immigration: times and spine positions of ε-seeds.
    pub continuous: Vec<(f64, Point)>,
    pub discontinuous: Vec<MassImmigrant>,
    /// All immigrant ensembles, merged (they are independent given the spine).
    pub immigrants: EnsemblePath,
    /// The independent copy of `X` started from `μ`.
    pub independent: EnsemblePath,
    pub initial: Vec<Point>,
}

impl SpineRealization {
    /// `⟨f, Γ_t⟩` at a record index.
    pub fn integrate(&self, record: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let part = |p: &EnsemblePath| p.snapshot(record).map_or(0.0, |s| s.integrate(&f));
        part(&self.immigrants) + part(&self.independent)
    }

    /// Conditional mean of `⟨f, Γ_t⟩` given the spine and the immigration
    /// times: `⟨P^β_t f, μ_ε⟩ + Σ ε P^β_{t−s} f(ξ_s) + Σ y_ε P^β_{t−s} f(ξ_s)`.
    pub fn predictor(
        &self,
        mech: &BranchingMechanism,
        motion: &MotionModel,
        f: &TestFunction,
        t: f64,
    ) -> Result<f64, DecompositionError> {
        let pb = |x: &[f64], s: f64| feynman_kac(mech, motion, f, x, s);
        let mut total = 0.0;
        for x in &self.initial {
            total += self.epsilon * pb(x, t)?;
        }
        for (s, x) in self.continuous.iter().filter(|(s, _)| *s <= t) {
            total += self.epsilon * pb(x, t - s)?;
        }
        for m in self.discontinuous.iter().filter(|m| m.time <= t) {
            total += self.epsilon * m.atoms as f64 * pb(&m.position, t - m.time)?;
        }
        Ok(total)
    }
}

/// Samples the spine start from `h μ / ⟨h, μ⟩`.
pub fn spine_start<R: Rng + ?Sized>(mu: &AtomicMeasure, spectral: &SpectralData, rng: &mut R) -> Point {
    let weights: Vec<f64> = mu.atoms.iter().map(|(x, m)| spectral.h(x) * m).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for ((x, _), w) in mu.atoms.iter().zip(&weights) {
        if u < *w {
            return x.clone();
        }
        u -= w;
    }
    mu.atoms.last().map(|(x, _)| x.clone()).unwrap_or_default()
}

/// One realization of the spine decomposition from `μ` with the spine
/// started at `x`. The spine moves as `ξ^h`; ε-seeds arrive at rate
/// `2α(ξ_t)/ε`, mass immigrants at rate `y π(dy)`; immigrants and the
/// independent copy evolve under the original mechanism and motion.
pub fn spine_sample(
    mech: &BranchingMechanism,
    motion: &MotionModel,
    spine_motion: &HTransform,
    x: &[f64],
    mu: &AtomicMeasure,
    run: &RunSpec,
) -> Result<SpineRealization, DecompositionError> {
    let xi_h = spine_motion.exact().ok_or(DecompositionError::ReweightedSpine)?;
    let jumps: Vec<(f64, f64)> = match mech.pi() {
        JumpKernel::Constant(m) if m.is_atomic() || m.is_zero() => m.weighted_atoms(|y| y),
        JumpKernel::Constant(_) => {
            return Err(DecompositionError::UnsupportedKernel("jump measure with a density part".into()))
        }
        JumpKernel::Varying(_) => {
            return Err(DecompositionError::UnsupportedKernel("state-dependent jump kernel".into()))
        }
    };
    let eps = run.epsilon;
    let jump_rate: f64 = jumps.iter().map(|&(_, w)| w).sum();
    let alpha_hi = mech.alpha().bounds().1;
    let seed_bound = 2.0 * alpha_hi / eps;
    let bound = seed_bound + jump_rate;

    let mut rng = stream(run.seed, run.replica, StreamTag::Spine);
    let mut pos: Point = x.iter().copied().collect();
    let mut t = 0.0;
    let mut path = vec![(0.0, pos.clone())];
    let mut continuous = Vec::new();
    let mut discontinuous = Vec::new();
    let mut injections = Vec::new();
    let mut records = run.record_times.iter().copied().peekable();
    loop {
        let next = if bound > 0.0 {
            let e: f64 = Exp1.sample(&mut rng);
            t + e / bound
        } else {
            f64::INFINITY
        };
        while let Some(&r) = records.peek() {
            if r > next.min(run.horizon) {
                break;
            }
            xi_h.step(&mut pos, r - t, &mut rng);
            t = r;
            path.push((t, pos.clone()));
            records.next();
        }
        if next >= run.horizon {
            break;
        }
        xi_h.step(&mut pos, next - t, &mut rng);
        t = next;
        let u = rng.random::<f64>() * bound;
        if u < seed_bound {
            if u * alpha_hi < seed_bound * mech.alpha().eval(&pos) {
                continuous.push((t, pos.clone()));
                injections.push(Injection {
                    time: t,
                    position: pos.clone(),
                    atoms: 1,
                });
                path.push((t, pos.clone()));
            }
        } else {
            let mut v = u - seed_bound;
            let &(y, _) = jumps
                .iter()
                .find(|&&(_, w)| {
                    let hit = v < w;
                    v -= w;
                    hit
                })
                .unwrap_or(jumps.last().expect("jump rate is positive"));
            let atoms = (y / eps).round() as usize;
            discontinuous.push(MassImmigrant {
                time: t,
                position: pos.clone(),
                mass: y,
                atoms,
            });
            if atoms > 0 {
                injections.push(Injection {
                    time: t,
                    position: pos.clone(),
                    atoms,
                });
            }
            path.push((t, pos.clone()));
        }
    }
    let dynamics = ParticleDynamics::new(mech, motion)?;
    let opts = EnsembleOptions::new(eps, run.horizon, run.record_times.clone());
    let mut imm_rng = stream(run.seed, run.replica, StreamTag::Immigrants);
    let immigrants = evolve(&dynamics, Vec::new(), &injections, &opts, &mut imm_rng)?;
    let initial = round_initial(mu, eps);
    let mut x_rng = stream(run.seed, run.replica, StreamTag::InitialMass);
    let independent = evolve(&dynamics, initial.clone(), &[], &opts, &mut x_rng)?;
    Ok(SpineRealization {
        epsilon: eps,
        path,
        continuous,
        discontinuous,
        immigrants,
        independent,
        initial,
    })
}

/// Skeleton `Z`, initial-mass process `X*` and immigration `I`, with
/// `X̂ = X* + I` available at the record times.
#[derive(Clone, Debug)]
pub struct DressedState {
    pub tree: SkeletonTree,
    pub initial_mass: EnsemblePath,
    pub immigrants: EnsemblePath,
}

impl DressedState {
    /// `⟨f, X̂_t⟩` at a record index.
    pub fn integrate(&self, record: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        let part = |p: &EnsemblePath| p.snapshot(record).map_or(0.0, |s| s.integrate(&f));
        part(&self.initial_mass) + part(&self.immigrants)
    }

    pub fn total_mass(&self, record: usize) -> f64 {
        self.integrate(record, |_| 1.0)
    }

    /// `⟨f, Z_t⟩` at a record index.
    pub fn skeleton_integrate(&self, record: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.tree.snapshot(record).integrate(f)
    }

    pub fn skeleton_count(&self, record: usize) -> usize {
        self.tree.snapshot(record).count()
    }

    /// `W^h_t(X̂) = e^{λ₁t}⟨h, X̂_t⟩`.
    pub fn martingale(&self, record: usize, spectral: &SpectralData) -> f64 {
        let t = self.tree.record_times[record];
        (spectral.lambda1 * t).exp() * self.integrate(record, |x| spectral.h(x))
    }
}

/// Dresses `tree` (simulated with immigration marks at rate `2α/ε`): `X*`
/// is started from `μ` under the tilted mechanism and every mark seeds an
/// ε-atom evolved under the tilted mechanism. Branch-point immigration is
/// empty since `π = 0`.
pub fn dress_skeleton(
    tree: SkeletonTree,
    mech: &BranchingMechanism,
    w: &Coefficient,
    motion: &MotionModel,
    mu: &AtomicMeasure,
    run: &RunSpec,
) -> Result<DressedState, DecompositionError> {
    if !mech.pi().is_zero() {
        return Err(DecompositionError::JumpsInDressing);
    }
    let tilted = mech.tilt_at_w(w)?;
    let dynamics = ParticleDynamics::new(&tilted, motion)?;
    let opts = EnsembleOptions::new(run.epsilon, run.horizon, run.record_times.clone());
    let mut marks: Vec<Injection> = tree
        .marks
        .iter()
        .map(|m| Injection {
            time: m.time,
            position: m.position.clone(),
            atoms: 1,
        })
        .collect();
    marks.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut x_rng = stream(run.seed, run.replica, StreamTag::InitialMass);
    let initial_mass = evolve(&dynamics, round_initial(mu, run.epsilon), &[], &opts, &mut x_rng)?;
    let mut imm_rng = stream(run.seed, run.replica, StreamTag::Immigrants);
    let immigrants = evolve(&dynamics, Vec::new(), &marks, &opts, &mut imm_rng)?;
    Ok(DressedState {
        tree,
        initial_mass,
        immigrants,
    })
}

/// Simulates the skeleton from `Poisson(w μ)` with marks at rate `2α/ε`
/// and dresses it. `skeleton_motion` is `ξ^w`.
#[allow(clippy::too_many_arguments)]
pub fn dressed_replica(
    mech: &BranchingMechanism,
    w: &Coefficient,
    motion: &MotionModel,
    skeleton_motion: &MotionModel,
    law: &BranchingLaw,
    mu: &AtomicMeasure,
    population_cap: usize,
    run: &RunSpec,
) -> Result<DressedState, DecompositionError> {
    let (a_lo, a_hi) = mech.alpha().bounds();
    let mark_rate = match mech.alpha().as_constant() {
        Some(a) => Coefficient::Constant(2.0 * a / run.epsilon),
        None => {
            let alpha = mech.alpha().clone();
            let eps = run.epsilon;
            Coefficient::varying(move |x| 2.0 * alpha.eval(x) / eps, 2.0 * a_lo / eps, 2.0 * a_hi / eps)
        }
    };
    let mut opts = SkeletonOptions::new(run.horizon, run.record_times.clone());
    opts.population_cap = population_cap;
    opts.mark_rate = Some(mark_rate);
    let mut init_rng = stream(run.seed, run.replica, StreamTag::InitialPoisson);
    let init = init_poisson(mu, w, &mut init_rng);
    let mut sk_rng = stream(run.seed, run.replica, StreamTag::Skeleton);
    let tree = simulate_skeleton(skeleton_motion, law, &init, &opts, &mut sk_rng)?;
    dress_skeleton(tree, mech, w, motion, mu, run)
}

/// Realized `⟨f, X̂_{t+s}⟩` against the predictor
/// `⟨P^{β*}_s f, X̂_t⟩ + ⟨(P^β_s f − P^{β*}_s f)/w, Z_t⟩` (constant `w`).
pub fn conditional_mean_pairs(
    states: &[DressedState],
    from: usize,
    to: usize,
    mech: &BranchingMechanism,
    w: f64,
    motion: &MotionModel,
    f: &TestFunction,
) -> Result<(Vec<f64>, Vec<f64>), DecompositionError> {
    let tilted = mech.tilt_at_w(&Coefficient::Constant(w))?;
    let origin = crate::origin(motion.dim());
    feynman_kac(mech, motion, f, &origin, 0.0)?;
    feynman_kac(&tilted, motion, f, &origin, 0.0)?;
    let mut predicted = Vec::with_capacity(states.len());
    let mut realized = Vec::with_capacity(states.len());
    for st in states {
        let s = st.tree.record_times[to] - st.tree.record_times[from];
        // both calls were validated above, so failures cannot occur here
        let pb = |m: &BranchingMechanism, x: &[f64]| feynman_kac(m, motion, f, x, s).unwrap_or(f64::NAN);
        let star = st.integrate(from, |x| pb(&tilted, x));
        let skel = st.skeleton_integrate(from, |x| (pb(mech, x) - pb(&tilted, x)) / w);
        predicted.push(star + skel);
        realized.push(st.integrate(to, |x| f.eval(x)));
    }
    Ok((predicted, realized))
}

/// Regression of realized on predicted values; the slope should be 1.
pub fn conditional_mean_fit(predicted: &[f64], realized: &[f64]) -> OlsFit {
    ols(predicted, realized)
}

/// Dispersion of skeleton counts given the dressed mass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThinningReport {
    pub pairs: usize,
    /// `Σ (N − wM)² / Σ wM`; 1 for a Poisson count with mean `wM`.
    pub dispersion: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_count: f64,
    pub mean_intensity: f64,
    /// z-score of `mean(N − wM)` against 0.
    pub mean_z: f64,
    pub insufficient: bool,
}

/// Minimum number of replicas for a thinning test.
pub const MIN_THINNING_PAIRS: usize = 30;

/// Per replica and spatial bin, the skeleton count `N` and intensity `w·M`
/// of the dressed mass. `edges` splits the first coordinate into bins; an
/// empty slice means one bin covering everything.
pub fn thinning_pairs(states: &[DressedState], record: usize, w: f64, edges: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let bins = edges.len().saturating_sub(1).max(1);
    let bin_of = |x: &[f64]| -> Option<usize> {
        if edges.len() < 2 {
            return Some(0);
        }
        let v = x[0];
        if v < edges[0] || v >= edges[edges.len() - 1] {
            return None;
        }
        Some(edges.partition_point(|&e| e <= v) - 1)
    };
    states
        .iter()
        .map(|st| {
            let mut out = vec![(0.0, 0.0); bins];
            for (x, _) in &st.tree.snapshot(record).particles {
                if let Some(b) = bin_of(x) {
                    out[b].0 += 1.0;
                }
            }
            let eps_parts = [&st.initial_mass, &st.immigrants];
            for p in eps_parts {
                if let Some(s) = p.snapshot(record) {
                    for x in &s.atoms {
                        if let Some(b) = bin_of(x) {
                            out[b].1 += w * s.epsilon;
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Pooled dispersion statistic with a replica-level bootstrap interval.
pub fn thinning_test<R: Rng + ?Sized>(
    pairs: &[Vec<(f64, f64)>],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> ThinningReport {
    let stat = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in idx {
            for &(n, m) in &pairs[i] {
                num += (n - m) * (n - m);
                den += m;
            }
        }
        num / den
    };
    let dispersion = stat(&mut (0..pairs.len()));
    let (ci_low, ci_high) = bootstrap_ci(pairs.len(), |idx| stat(&mut idx.iter().copied()), resamples, level, rng);
    let diffs: Vec<f64> = pairs.iter().map(|p| p.iter().map(|(n, m)| n - m).sum()).collect();
    let counts: f64 = pairs.iter().flatten().map(|p| p.0).sum();
    let mass: f64 = pairs.iter().flatten().map(|p| p.1).sum();
    let n = pairs.len().max(1) as f64;
    ThinningReport {
        pairs: pairs.len(),
        dispersion,
        ci_low,
        ci_high,
        mean_count: counts / n,
        mean_intensity: mass / n,
        mean_z: ZTest::from_samples(&diffs, 0.0).z,
        insufficient: pairs.len() < MIN_THINNING_PAIRS,
    }
}

/// Fraction of replicas with `W^h_t > δ` and its target `1 − e^{−⟨w, μ⟩}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NondegeneracyReport {
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub target: f64,
}

pub fn nondegeneracy(
    states: &[DressedState],
    record: usize,
    spectral: &SpectralData,
    mu: &AtomicMeasure,
    delta: f64,
    z: f64,
) -> NondegeneracyReport {
    let hits = states.iter().filter(|s| s.martingale(record, spectral) > delta).count();
    let (ci_low, ci_high) = wilson_interval(hits as u64, states.len() as u64, z);
    NondegeneracyReport {
        fraction: hits as f64 / states.len().max(1) as f64,
        ci_low,
        ci_high,
        target: 1.0 - (-mu.integrate(|x| spectral.w(x))).exp(),
    }
}

/// `e^{λ₁t}⟨φh, X̂_t⟩ / W^h_t` over replicas with positive `W^h_t`.
pub fn lln_transfer(states: &[DressedState], record: usize, phi: &TestFunction, spectral: &SpectralData) -> Vec<f64> {
    states
        .iter()
        .filter_map(|s| {
            let den = s.integrate(record, |x| spectral.h(x));
            (den > 0.0).then(|| s.integrate(record, |x| phi.eval(x) * spectral.h(x)) / den)
        })
        .collect()
}

/// Two-sample z-test of the size-bias identity `E_Q[W] = E_P[W²]/⟨h, μ⟩`.
pub fn size_bias_test(spine_w: &[f64], plain_w: &[f64], h_mu: f64) -> ZTest {
    let q = ZTest::from_samples(spine_w, 0.0);
    let sq: Vec<f64> = plain_w.iter().map(|w| w * w / h_mu).collect();
    let p = ZTest::from_samples(&sq, 0.0);
    ZTest::new(q.mean, (q.se * q.se + p.se * p.se).sqrt(), p.mean)
}
