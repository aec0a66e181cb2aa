//! Replica farming and the generic experiments behind `run_experiment`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig, Start};
use super::report::{replicas_csv, Aggregate, RecordRow, ReplicaReport};
use crate::cbprocess::CbError;
use crate::decompositions::{dressed_replica, DressedState, spine_sample, spine_start, DecompositionError, RunSpec};
use crate::mechanism::{BranchingMechanism, Coefficient, MechanismError};
use crate::motion::{feynman_kac, h_transform, w_transform, MotionError, MotionModel, SpectralData};
use crate::rng::{stream, StreamTag};
use crate::skeleton::{
    init_poisson, lln_statistic, martingale_w, simulate_skeleton, BranchingLaw, SkeletonError, SkeletonOptions,
};
use crate::superfield::{evolve, round_initial, EnsembleOptions, ParticleDynamics, SuperfieldError};
use crate::testfn::TestFunction;
use crate::AtomicMeasure;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Cb(#[from] CbError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Superfield(#[from] SuperfieldError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Runs `task(i)` for `i in 0..replicas` on `workers` threads. Results come
/// back in replica order regardless of scheduling.
pub fn farm<T, F>(replicas: usize, workers: usize, label: &str, task: F) -> Result<Vec<T>, HarnessError>
where
    T: Send,
    F: Fn(u64) -> Result<T, HarnessError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let done = AtomicUsize::new(0);
    let step = (replicas / 10).max(1);
    pool.install(|| {
        (0..replicas as u64)
            .into_par_iter()
            .map(|i| {
                let out = task(i);
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if n.is_multiple_of(step) || n == replicas {
                    info!("{label}: {n}/{replicas} replicas");
                }
                out
            })
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Skeleton,
    Superprocess,
    Dressing,
    Spine,
}

/// Reports, their aggregate and the analytic targets of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub record_times: Vec<f64>,
    pub labels: Vec<String>,
    pub reports: Vec<ReplicaReport>,
    pub aggregate: Aggregate,
    pub targets: Vec<Vec<Option<f64>>>,
    pub martingale_target: Option<f64>,
}

impl ExperimentOutput {
    pub fn aggregate_csv(&self) -> String {
        self.aggregate.to_csv(&self.targets, self.martingale_target)
    }

    pub fn replicas_csv(&self) -> String {
        replicas_csv(&self.labels, &self.reports)
    }

    /// Values of functional `k` at record `r` across replicas, in replica order.
    pub fn column(&self, r: usize, k: usize) -> Vec<f64> {
        self.reports.iter().map(|rep| rep.rows[r].functionals[k]).collect()
    }

    pub fn lln_column(&self, r: usize) -> Vec<f64> {
        self.reports.iter().filter_map(|rep| rep.rows[r].lln).collect()
    }

    pub fn martingale_column(&self, r: usize) -> Vec<f64> {
        self.reports.iter().map(|rep| rep.rows[r].martingale).collect()
    }
}

/// Everything an experiment needs, built once from the configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub mech: BranchingMechanism,
    pub motion: MotionModel,
    pub spectral: SpectralData,
    pub w: Coefficient,
    pub mu: AtomicMeasure,
}

impl Model {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let spectral = cfg.spectral()?;
        Ok(Self {
            mech: cfg.mechanism()?,
            motion: cfg.motion()?,
            w: Coefficient::Constant(spectral.w),
            spectral,
            mu: cfg.initial_measure(),
        })
    }

    fn h_mu(&self, mu: &AtomicMeasure) -> f64 {
        mu.integrate(|x| self.spectral.h(x))
    }

    /// `⟨P^β_t f, ν⟩`.
    fn mean_functional(&self, f: &TestFunction, nu: &AtomicMeasure, t: f64) -> Result<f64, HarnessError> {
        let mut total = 0.0;
        for (x, m) in &nu.atoms {
            total += m * feynman_kac(&self.mech, &self.motion, f, x, t)?;
        }
        Ok(total)
    }
}

fn epsilon_measure(mu: &AtomicMeasure, eps: f64) -> AtomicMeasure {
    AtomicMeasure {
        atoms: mu
            .atoms
            .iter()
            .map(|(x, m)| (x.clone(), eps * (m / eps).round().max(0.0)))
            .collect(),
    }
}

/// Runs the configured experiment over all replicas.
pub fn run_experiment(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentOutput, HarnessError> {
    let model = Model::from_config(cfg)?;
    let sim = &cfg.simulation;
    let times = sim.record_times.clone();
    let functions = &cfg.test.functions;
    let phi = cfg.test.lln_phi.clone();
    let mut labels: Vec<String> = functions.iter().map(|f| f.label()).collect();
    if kind == ExperimentKind::Spine {
        labels.extend(functions.iter().map(|f| format!("sd2_resid_{}", f.label())));
    }
    let lambda1 = model.spectral.lambda1;
    let h = |x: &[f64]| model.spectral.h(x);
    let run_spec = |i: u64| RunSpec {
        epsilon: sim.epsilon,
        horizon: sim.horizon,
        record_times: times.clone(),
        seed: cfg.seed,
        replica: i,
    };
    let eps_mu = epsilon_measure(&model.mu, sim.epsilon);

    let (targets, martingale_target): (Vec<Vec<Option<f64>>>, Option<f64>) = match kind {
        ExperimentKind::Skeleton => {
            let w = model.spectral.w;
            let (start, scale, mt) = match sim.start {
                Start::Poisson => (model.mu.clone(), w, model.h_mu(&model.mu)),
                Start::Single => {
                    let x = model.mu.atoms.first().map(|(x, _)| x.clone()).unwrap_or_default();
                    let mt = model.spectral.h(&x) / w;
                    (AtomicMeasure::dirac(x, 1.0), 1.0, mt)
                }
            };
            let t = times
                .iter()
                .map(|&t| {
                    functions
                        .iter()
                        .map(|f| model.mean_functional(f, &start, t).ok().map(|v| v * scale))
                        .collect()
                })
                .collect();
            (t, Some(mt))
        }
        ExperimentKind::Superprocess | ExperimentKind::Dressing => {
            let t = times
                .iter()
                .map(|&t| functions.iter().map(|f| model.mean_functional(f, &eps_mu, t).ok()).collect())
                .collect();
            (t, Some(model.h_mu(&eps_mu)))
        }
        ExperimentKind::Spine => {
            let t = times
                .iter()
                .map(|_| {
                    let mut row = vec![None; functions.len()];
                    row.extend(std::iter::repeat_n(Some(0.0), functions.len()));
                    row
                })
                .collect();
            (t, None)
        }
    };

    let skeleton_motion = w_transform(&model.motion, &model.mech, &model.w)?;
    let law = BranchingLaw::from_mechanism(&model.mech, &model.w, sim.k_max, None)?;
    let dynamics = ParticleDynamics::new(&model.mech, &model.motion)?;
    let spine_motion = h_transform(&model.motion, &model.mech, &model.spectral);

    let ensemble_lln = |fphi: f64, fh: f64| (fh > 0.0).then(|| fphi / fh);
    let task = |i: u64| -> Result<ReplicaReport, HarnessError> {
        let started = Instant::now();
        let rows: Vec<RecordRow> = match kind {
            ExperimentKind::Skeleton => {
                let mut rng = stream(cfg.seed, i, StreamTag::InitialPoisson);
                let init = match sim.start {
                    Start::Poisson => init_poisson(&model.mu, &model.w, &mut rng),
                    Start::Single => model.mu.atoms.first().map(|(x, _)| vec![x.clone()]).unwrap_or_default(),
                };
                let mut opts = SkeletonOptions::new(sim.horizon, times.clone());
                opts.population_cap = sim.population_cap;
                let mut rng = stream(cfg.seed, i, StreamTag::Skeleton);
                let tree = simulate_skeleton(&skeleton_motion, &law, &init, &opts, &mut rng).inspect_err(|e| {
                    if let SkeletonError::PopulationCap { .. } = e {
                        warn!("replica {i}: {e}");
                    }
                })?;
                tree.snapshots
                    .iter()
                    .map(|s| RecordRow {
                        time: s.time,
                        count: s.count() as f64,
                        martingale: martingale_w(s, &model.spectral),
                        functionals: functions.iter().map(|f| s.integrate(|x| f.eval(x))).collect(),
                        lln: phi.as_ref().and_then(|p| lln_statistic(s, p, &model.spectral)),
                        extinct: s.count() == 0,
                    })
                    .collect()
            }
            ExperimentKind::Superprocess => {
                let mut opts = EnsembleOptions::new(sim.epsilon, sim.horizon, times.clone());
                opts.atom_cap = sim.atom_cap;
                let mut rng = stream(cfg.seed, i, StreamTag::Superfield);
                let path = evolve(&dynamics, round_initial(&model.mu, sim.epsilon), &[], &opts, &mut rng)
                    .inspect_err(|e| warn!("replica {i}: {e}"))?;
                path.snapshots
                    .iter()
                    .map(|s| {
                        let fh = s.integrate(h);
                        RecordRow {
                            time: s.time,
                            count: s.count() as f64,
                            martingale: (lambda1 * s.time).exp() * fh,
                            functionals: functions.iter().map(|f| s.integrate(|x| f.eval(x))).collect(),
                            lln: phi
                                .as_ref()
                                .and_then(|p| ensemble_lln(s.integrate(|x| p.eval(x) * h(x)), fh)),
                            extinct: s.count() == 0,
                        }
                    })
                    .collect()
            }
            ExperimentKind::Dressing => {
                let st = dressed_replica(
                    &model.mech,
                    &model.w,
                    &model.motion,
                    &skeleton_motion,
                    &law,
                    &model.mu,
                    sim.population_cap,
                    &run_spec(i),
                )
                .inspect_err(|e| warn!("replica {i}: {e}"))?;
                times
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| {
                        let fh = st.integrate(r, h);
                        RecordRow {
                            time: t,
                            count: st.skeleton_count(r) as f64,
                            martingale: st.martingale(r, &model.spectral),
                            functionals: functions.iter().map(|f| st.integrate(r, |x| f.eval(x))).collect(),
                            lln: phi
                                .as_ref()
                                .and_then(|p| ensemble_lln(st.integrate(r, |x| p.eval(x) * h(x)), fh)),
                            extinct: st.total_mass(r) == 0.0,
                        }
                    })
                    .collect()
            }
            ExperimentKind::Spine => {
                let mut rng = stream(cfg.seed, i, StreamTag::Custom(1));
                let x = spine_start(&model.mu, &model.spectral, &mut rng);
                let real = spine_sample(&model.mech, &model.motion, &spine_motion, &x, &model.mu, &run_spec(i))?;
                times
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| {
                        let mut functionals: Vec<f64> =
                            functions.iter().map(|f| real.integrate(r, |x| f.eval(x))).collect();
                        for (k, f) in functions.iter().enumerate() {
                            functionals.push(functionals[k] - real.predictor(&model.mech, &model.motion, f, t)?);
                        }
                        let fh = real.integrate(r, h);
                        Ok(RecordRow {
                            time: t,
                            count: real.continuous.iter().filter(|(s, _)| *s <= t).count() as f64,
                            martingale: (lambda1 * t).exp() * fh,
                            functionals,
                            lln: phi
                                .as_ref()
                                .and_then(|p| ensemble_lln(real.integrate(r, |x| p.eval(x) * h(x)), fh)),
                            extinct: false,
                        })
                    })
                    .collect::<Result<_, HarnessError>>()?
            }
        };
        Ok(ReplicaReport {
            replica: i,
            rows,
            runtime: started.elapsed(),
        })
    };
    let label = format!("{kind:?}");
    let reports = farm(sim.replicas, sim.workers, &label, task)?;
    let aggregate = Aggregate::from_reports(&times, labels.clone(), &reports);
    Ok(ExperimentOutput {
        kind,
        record_times: times,
        labels,
        reports,
        aggregate,
        targets,
        martingale_target,
    })
}

/// Dressed states for every replica of a configuration, in replica order.
pub fn dressed_states(cfg: &ExperimentConfig) -> Result<Vec<DressedState>, HarnessError> {
    let model = Model::from_config(cfg)?;
    let sim = &cfg.simulation;
    let skeleton_motion = w_transform(&model.motion, &model.mech, &model.w)?;
    let law = BranchingLaw::from_mechanism(&model.mech, &model.w, sim.k_max, None)?;
    farm(sim.replicas, sim.workers, "dressing", |i| {
        let run = RunSpec {
            epsilon: sim.epsilon,
            horizon: sim.horizon,
            record_times: sim.record_times.clone(),
            seed: cfg.seed,
            replica: i,
        };
        Ok(dressed_replica(
            &model.mech,
            &model.w,
            &model.motion,
            &skeleton_motion,
            &law,
            &model.mu,
            sim.population_cap,
            &run,
        )?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind_block: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
seed = 11
[mechanism]
beta = 1.0
alpha = 1.0
[motion]
kind = "inward_ou"
c = 1.0
[spectral]
example = "8.1"
[simulation]
T = 1.0
record_times = [0.5, 1.0]
replicas = 40
epsilon = 0.1
{kind_block}
[test]
functions = [{{ name = "one" }}, {{ name = "gaussian", a = 1.0 }}]
lln_phi = {{ name = "box", r = 1.0 }}
"#
        ))
        .unwrap()
    }

    #[test]
    fn deterministic_across_worker_counts() {
        for kind in [
            ExperimentKind::Skeleton,
            ExperimentKind::Superprocess,
            ExperimentKind::Dressing,
            ExperimentKind::Spine,
        ] {
            let one = run_experiment(&config("workers = 1"), kind).unwrap();
            let three = run_experiment(&config("workers = 3"), kind).unwrap();
            assert_eq!(one.aggregate_csv(), three.aggregate_csv(), "{kind:?}");
            assert_eq!(one.replicas_csv(), three.replicas_csv(), "{kind:?}");
        }
    }

    #[test]
    fn single_replica_aggregate_matches_report() {
        let mut cfg = config("start = \"single\"");
        cfg.simulation.replicas = 1;
        let out = run_experiment(&cfg, ExperimentKind::Skeleton).unwrap();
        let row = &out.reports[0].rows[1];
        assert_eq!(out.aggregate.records[1].count.mean(), row.count);
        assert_eq!(out.aggregate.records[1].functionals[1].mean(), row.functionals[1]);
    }

    #[test]
    fn targets_are_reported() {
        let out = run_experiment(&config(""), ExperimentKind::Superprocess).unwrap();
        let csv = out.aggregate_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.contains("gauss_1_target") && header.contains("W_z"));
        assert!((out.targets[1][0].unwrap() - 1f64.exp()).abs() < 1e-12);
    }
}
