//! Event-driven simulation of the skeleton branching Markov process `Z`.
//!
//! Particles are stored in a flat arena; a particle's Ulam–Harris label is
//! recovered from its parent pointer and its index among its siblings.
//! Each particle is simulated from birth to death in one pass (depth
//! first): competing exponential clocks for branching, killing and
//! immigration marks are raced against the record times, and the motion is
//! advanced with exact transition steps between consecutive events.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use thiserror::Error;

use crate::harness::stats::ZTest;
use crate::mechanism::{BranchingMechanism, Coefficient, MechanismError, SkeletonLaw};
use crate::motion::{feynman_kac, MotionError, MotionModel, SpectralData};
use crate::testfn::TestFunction;
use crate::{AtomicMeasure, Point};

pub const DEFAULT_POPULATION_CAP: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("population cap of {cap} particles exceeded at t = {time}")]
    PopulationCap {
        cap: usize,
        time: f64,
        partial: Box<SkeletonTree>,
    },
    #[error("record times must be nondecreasing and lie in [0, horizon]")]
    BadRecordTimes,
    #[error("branching rate {q} exceeds the thinning bound {bound}")]
    RateBoundExceeded { q: f64, bound: f64 },
    #[error("a state-dependent branching rate needs an explicit bound q̄")]
    MissingRateBound,
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Branching rate and offspring law of the skeleton, either the same at
/// every position or evaluated from the mechanism and `w` at the branching
/// position (with thinning against `q_bar`).
#[derive(Clone, Debug)]
pub enum BranchingLaw {
    Constant(SkeletonLaw),
    Varying {
        mech: BranchingMechanism,
        w: Coefficient,
        q_bar: f64,
        k_max: usize,
    },
}

impl BranchingLaw {
    pub fn from_mechanism(
        mech: &BranchingMechanism,
        w: &Coefficient,
        k_max: usize,
        q_bar: Option<f64>,
    ) -> Result<Self, SkeletonError> {
        match (w.as_constant(), mech.is_spatially_constant()) {
            (Some(wc), true) => Ok(BranchingLaw::Constant(mech.skeleton_law(wc, &[], k_max)?)),
            _ => Ok(BranchingLaw::Varying {
                mech: mech.clone(),
                w: w.clone(),
                q_bar: q_bar.ok_or(SkeletonError::MissingRateBound)?,
                k_max,
            }),
        }
    }

    fn rate_bound(&self) -> f64 {
        match self {
            BranchingLaw::Constant(l) => {
                if l.degenerate {
                    0.0
                } else {
                    l.q
                }
            }
            BranchingLaw::Varying { q_bar, .. } => *q_bar,
        }
    }

    /// Offspring count if the candidate branching event at `x` is accepted.
    fn try_branch<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Option<usize>, SkeletonError> {
        match self {
            BranchingLaw::Constant(l) => Ok(Some(l.sample_offspring(rng))),
            BranchingLaw::Varying { mech, w, q_bar, k_max } => {
                let law = mech.skeleton_law(w.eval(x), x, *k_max)?;
                if law.degenerate {
                    return Ok(None);
                }
                if law.q > q_bar * (1.0 + 1e-12) {
                    return Err(SkeletonError::RateBoundExceeded {
                        q: law.q,
                        bound: *q_bar,
                    });
                }
                if rng.random::<f64>() * q_bar < law.q {
                    Ok(Some(law.sample_offspring(rng)))
                } else {
                    Ok(None)
                }
            }
        }
    }
}

/// One skeleton particle.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonParticle {
    pub parent: Option<usize>,
    /// 1-based index among its siblings (among the roots for a root).
    pub child_index: u32,
    pub birth: f64,
    /// `None` while alive at the horizon.
    pub death: Option<f64>,
    pub birth_position: Point,
    /// Position at death, or at the horizon for survivors.
    pub end_position: Point,
    pub offspring: u32,
    /// Arena index of the first child; children are contiguous.
    pub first_child: usize,
    pub killed: bool,
}

impl SkeletonParticle {
    pub fn is_alive_at(&self, t: f64) -> bool {
        self.birth <= t && self.death.is_none_or(|d| t < d)
    }
}

/// A point of the immigration stream attached to a skeleton branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImmigrationMark {
    pub particle: usize,
    pub time: f64,
    pub position: Point,
}

/// Alive particles at one record time.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PopulationSnapshot {
    pub time: f64,
    /// `(position, arena index)`.
    pub particles: Vec<(Point, usize)>,
}

impl PopulationSnapshot {
    pub fn count(&self) -> usize {
        self.particles.len()
    }

    /// `⟨f, Z_t⟩`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.particles.iter().map(|(x, _)| f(x)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTree {
    pub particles: Vec<SkeletonParticle>,
    pub roots: usize,
    pub record_times: Vec<f64>,
    pub snapshots: Vec<PopulationSnapshot>,
    pub marks: Vec<ImmigrationMark>,
    pub horizon: f64,
}

impl SkeletonTree {
    /// Ulam–Harris label of a particle (root `i` is `[i]`, its second child
    /// `[i, 2]`, and so on).
    pub fn label(&self, idx: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let mut cur = Some(idx);
        while let Some(i) = cur {
            out.push(self.particles[i].child_index);
            cur = self.particles[i].parent;
        }
        out.reverse();
        out
    }

    pub fn children(&self, idx: usize) -> std::ops::Range<usize> {
        let p = &self.particles[idx];
        p.first_child..p.first_child + p.offspring as usize
    }

    pub fn snapshot(&self, record: usize) -> &PopulationSnapshot {
        &self.snapshots[record]
    }

    /// Every particle that died by branching has exactly two children.
    pub fn is_binary(&self) -> bool {
        self.particles
            .iter()
            .all(|p| p.death.is_none() || p.killed || p.offspring == 2)
    }

    /// Checks labels, birth/death continuity and the alive sets at record
    /// times.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, p) in self.particles.iter().enumerate() {
            if let Some(d) = p.death {
                if d < p.birth {
                    return Err(format!("particle {i} dies before it is born"));
                }
            }
            for (j, c) in self.children(i).enumerate() {
                let child = &self.particles[c];
                if child.parent != Some(i) || child.child_index as usize != j + 1 {
                    return Err(format!("child {c} of {i} is mislabelled"));
                }
                if Some(child.birth) != p.death {
                    return Err(format!("child {c} is not born at the death of {i}"));
                }
                if child.birth_position != p.end_position {
                    return Err(format!("child {c} does not start where {i} died"));
                }
                let mut label = self.label(i);
                label.push(j as u32 + 1);
                if self.label(c) != label {
                    return Err(format!("label of {c} is not an extension of its parent's"));
                }
            }
        }
        for snap in &self.snapshots {
            let mut seen: Vec<usize> = snap.particles.iter().map(|(_, i)| *i).collect();
            seen.sort_unstable();
            let expected: Vec<usize> = (0..self.particles.len())
                .filter(|&i| self.particles[i].is_alive_at(snap.time))
                .collect();
            if seen != expected {
                return Err(format!("alive set at t = {} is inconsistent", snap.time));
            }
        }
        for m in &self.marks {
            let p = &self.particles[m.particle];
            if !(p.birth <= m.time && p.death.is_none_or(|d| m.time <= d)) {
                return Err(format!("mark at {} lies outside its branch", m.time));
            }
        }
        Ok(())
    }
}

/// Record times, horizon, population cap and an optional immigration-mark
/// rate (used by the dressing).
#[derive(Clone, Debug)]
pub struct SkeletonOptions {
    pub horizon: f64,
    pub record_times: Vec<f64>,
    pub population_cap: usize,
    pub mark_rate: Option<Coefficient>,
}

impl SkeletonOptions {
    pub fn new(horizon: f64, record_times: Vec<f64>) -> Self {
        Self {
            horizon,
            record_times,
            population_cap: DEFAULT_POPULATION_CAP,
            mark_rate: None,
        }
    }
}

/// Initial skeleton particles: a Poisson random measure with intensity
/// `w(x)μ(dx)`.
pub fn init_poisson<R: Rng + ?Sized>(mu: &AtomicMeasure, w: &Coefficient, rng: &mut R) -> Vec<Point> {
    let mut out = Vec::new();
    for (x, m) in &mu.atoms {
        let intensity = w.eval(x) * m;
        if intensity > 0.0 {
            let n = Poisson::new(intensity).expect("finite positive intensity").sample(rng) as usize;
            out.extend(std::iter::repeat_n(x.clone(), n));
        }
    }
    out
}

#[inline]
fn clock<R: Rng + ?Sized>(t: f64, rate: f64, rng: &mut R) -> f64 {
    if rate > 0.0 {
        let e: f64 = Exp1.sample(rng);
        t + e / rate
    } else {
        f64::INFINITY
    }
}

/// Simulates `Z` on `[0, horizon]` from the given initial particles.
/// `motion` is the skeleton motion `ξ^w` (killing, if any, removes a
/// particle without offspring).
pub fn simulate_skeleton<R: Rng + ?Sized>(
    motion: &MotionModel,
    law: &BranchingLaw,
    init: &[Point],
    opts: &SkeletonOptions,
    rng: &mut R,
) -> Result<SkeletonTree, SkeletonError> {
    let records = &opts.record_times;
    if records.windows(2).any(|w| w[1] < w[0])
        || records.first().is_some_and(|&t| t < 0.0)
        || records.last().is_some_and(|&t| t > opts.horizon)
    {
        return Err(SkeletonError::BadRecordTimes);
    }
    let mut tree = SkeletonTree {
        particles: Vec::with_capacity(init.len() * 4),
        roots: init.len(),
        record_times: records.clone(),
        snapshots: records
            .iter()
            .map(|&t| PopulationSnapshot {
                time: t,
                particles: Vec::new(),
            })
            .collect(),
        marks: Vec::new(),
        horizon: opts.horizon,
    };
    for (i, x) in init.iter().enumerate() {
        tree.particles.push(SkeletonParticle {
            parent: None,
            child_index: i as u32 + 1,
            birth: 0.0,
            death: None,
            birth_position: x.clone(),
            end_position: x.clone(),
            offspring: 0,
            first_child: 0,
            killed: false,
        });
    }
    if tree.particles.len() > opts.population_cap {
        return Err(SkeletonError::PopulationCap {
            cap: opts.population_cap,
            time: 0.0,
            partial: Box::new(tree),
        });
    }
    let branch_bound = law.rate_bound();
    let (mark_bound, mark_rate) = match &opts.mark_rate {
        Some(r) => (r.bounds().1, Some(r)),
        None => (0.0, None),
    };
    let kill = motion.killing().cloned();
    let kill_bound = kill.as_ref().map_or(0.0, |k| k.bounds().1);

    let mut stack: Vec<usize> = (0..init.len()).rev().collect();
    while let Some(i) = stack.pop() {
        let birth = tree.particles[i].birth;
        let mut pos = tree.particles[i].birth_position.clone();
        let mut t = birth;
        let mut r = records.partition_point(|&x| x < birth);
        let mut next_branch = clock(t, branch_bound, rng);
        let mut next_mark = clock(t, mark_bound, rng);
        let mut next_kill = clock(t, kill_bound, rng);
        let mut children = 0usize;
        let mut death = None;
        let mut killed = false;
        loop {
            let next_rec = records.get(r).copied().unwrap_or(f64::INFINITY);
            let tn = next_branch
                .min(next_mark)
                .min(next_kill)
                .min(next_rec)
                .min(opts.horizon);
            motion.step(&mut pos, tn - t, rng);
            t = tn;
            if tn == next_rec {
                tree.snapshots[r].particles.push((pos.clone(), i));
                r += 1;
                continue;
            }
            if tn >= opts.horizon {
                break;
            }
            if tn == next_mark {
                let rate = mark_rate.expect("mark clock only runs with a rate");
                if rng.random::<f64>() * mark_bound < rate.eval(&pos) {
                    tree.marks.push(ImmigrationMark {
                        particle: i,
                        time: t,
                        position: pos.clone(),
                    });
                }
                next_mark = clock(t, mark_bound, rng);
            } else if tn == next_kill {
                let gamma = kill.as_ref().expect("kill clock only runs with a rate");
                if rng.random::<f64>() * kill_bound < gamma.eval(&pos) {
                    death = Some(t);
                    killed = true;
                    break;
                }
                next_kill = clock(t, kill_bound, rng);
            } else {
                if let Some(k) = law.try_branch(&pos, rng)? {
                    death = Some(t);
                    children = k;
                    break;
                }
                next_branch = clock(t, branch_bound, rng);
            }
        }
        let first_child = tree.particles.len();
        {
            let p = &mut tree.particles[i];
            p.death = death;
            p.end_position = pos.clone();
            p.killed = killed;
            p.offspring = children as u32;
            p.first_child = first_child;
        }
        if first_child + children > opts.population_cap {
            return Err(SkeletonError::PopulationCap {
                cap: opts.population_cap,
                time: t,
                partial: Box::new(tree),
            });
        }
        for j in 0..children {
            tree.particles.push(SkeletonParticle {
                parent: Some(i),
                child_index: j as u32 + 1,
                birth: t,
                death: None,
                birth_position: pos.clone(),
                end_position: pos.clone(),
                offspring: 0,
                first_child: 0,
                killed: false,
            });
        }
        stack.extend((first_child..first_child + children).rev());
    }
    Ok(tree)
}

/// `(1/w) P^β_t(w f)(x)` for constant `w`, i.e. `E_x⟨f, Z_t⟩` from one
/// particle at `x`.
pub fn many_to_one_oracle(
    mech: &BranchingMechanism,
    motion: &MotionModel,
    f: &TestFunction,
    x: &[f64],
    t: f64,
) -> Result<f64, SkeletonError> {
    Ok(feynman_kac(mech, motion, f, x, t)?)
}

/// Monte Carlo `⟨f, Z_t⟩` over trees each started from one particle, against
/// the analytic mean.
pub fn many_to_one_estimate(trees: &[SkeletonTree], record: usize, f: &TestFunction, analytic: f64) -> ZTest {
    let samples: Vec<f64> = trees
        .iter()
        .map(|tr| tr.snapshot(record).integrate(|x| f.eval(x)))
        .collect();
    ZTest::from_samples(&samples, analytic)
}

/// `W^{h/w}_t(Z) = e^{λ₁t}⟨h/w, Z_t⟩`.
pub fn martingale_w(snapshot: &PopulationSnapshot, spectral: &SpectralData) -> f64 {
    (spectral.lambda1 * snapshot.time).exp() * snapshot.integrate(|x| spectral.h(x) / spectral.w(x))
}

/// `⟨φh/w, Z_t⟩ / ⟨h/w, Z_t⟩`; `None` for an empty population.
pub fn lln_statistic(snapshot: &PopulationSnapshot, phi: &TestFunction, spectral: &SpectralData) -> Option<f64> {
    let den = snapshot.integrate(|x| spectral.h(x) / spectral.w(x));
    if snapshot.count() == 0 || den <= 0.0 {
        return None;
    }
    Some(snapshot.integrate(|x| phi.eval(x) * spectral.h(x) / spectral.w(x)) / den)
}
