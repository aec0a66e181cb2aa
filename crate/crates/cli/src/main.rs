//! `superskel`: run experiments and the acceptance presets from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use superskel::cbprocess::{cumulant_path, euler_extinction_time, extinction_by, riccati_closed_form};
use superskel::decompositions::{thinning_pairs, thinning_test};
use superskel::harness::config::ExperimentConfig;
use superskel::harness::experiment::{dressed_states, farm, run_experiment, ExperimentKind, ExperimentOutput};
use superskel::harness::report::num;
use superskel::harness::stats::{binomial_se, bonferroni_z, variance_se, ZTest};
use superskel::harness::verify::{checks_csv, dat, experiment_checks, verify, CheckResult, Preset, VerifyOptions};
use superskel::quadrature::simpson;
use superskel::rng::{stream, StreamTag};
use superskel::superfield::estimate_w;

#[derive(Parser)]
#[command(name = "superskel", version, about = "Skeleton and spine decompositions of superprocesses")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replica count; overrides the configuration or preset.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory. Without it, the main table goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Branching mechanism diagnostics.
    Mechanism {
        #[command(subcommand)]
        cmd: MechanismCmd,
    },
    /// Total-mass (continuous-state branching) process.
    Cb {
        #[command(subcommand)]
        cmd: CbCmd,
    },
    /// Exact OU samplers.
    Motion {
        #[command(subcommand)]
        cmd: MotionCmd,
    },
    /// Skeleton branching particle system.
    Skeleton {
        #[command(subcommand)]
        cmd: SkeletonCmd,
    },
    /// ε-particle superprocess.
    Super {
        #[command(subcommand)]
        cmd: SuperCmd,
    },
    /// Spine decomposition.
    Spine {
        #[command(subcommand)]
        cmd: SpineCmd,
    },
    /// Skeleton dressing `X* + I`.
    Dress {
        #[command(subcommand)]
        cmd: DressCmd,
    },
    /// Acceptance presets.
    Verify {
        #[arg(long, default_value = "all")]
        preset: Preset,
    },
}

#[derive(Subcommand)]
enum MechanismCmd {
    /// Root, Grey condition, tilt and skeleton offspring law.
    Inspect,
}

#[derive(Subcommand)]
enum CbCmd {
    /// Cumulant `v_t(λ)` on a time grid.
    Solve {
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Euler paths from unit mass: extinct-by-t fractions.
    Simulate,
}

#[derive(Subcommand)]
enum MotionCmd {
    /// Sampled step moments and density normalisation.
    Check,
}

#[derive(Subcommand)]
enum SkeletonCmd {
    Run,
}

#[derive(Subcommand)]
enum SuperCmd {
    Run,
    /// Extinction-based estimate of `w` from the first atom of `μ`.
    EstimateW {
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        horizons: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum SpineCmd {
    /// Spine realisations against their conditional-mean predictor.
    Check,
}

#[derive(Subcommand)]
enum DressCmd {
    Run,
    /// Dispersion of skeleton counts given the dressed mass.
    ThinningTest {
        /// Bin edges on the first coordinate; empty means one bin.
        #[arg(long, value_delimiter = ',')]
        bins: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        resamples: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let Some(path) = &g.config else {
        bail!("--config is required for this command");
    };
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = g.replicas {
        cfg.simulation.replicas = r;
    }
    if let Some(w) = g.workers {
        cfg.simulation.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `files` into `--out`, or prints the first one to stdout.
fn emit(g: &Global, files: &[(String, String)]) -> Result<()> {
    match &g.out {
        Some(dir) => write_all(dir, files),
        None => {
            if let Some((_, contents)) = files.first() {
                print!("{contents}");
            }
            Ok(())
        }
    }
}

fn write_all(dir: &Path, files: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, contents) in files {
        let path = dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

/// Prints one line per check to stderr and reports whether all passed.
fn summarize(checks: &[CheckResult]) -> bool {
    for c in checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        let criterion = c.criterion.map_or_else(|| "aux".into(), |k| format!("#{k}"));
        eprintln!(
            "{tag} [{} {criterion}] {}: {} vs {} {}",
            c.preset,
            c.name,
            num(c.statistic),
            num(c.threshold),
            c.detail
        );
    }
    checks.iter().all(|c| c.pass)
}

fn check(name: impl Into<String>, group: &str, statistic: f64, threshold: f64, pass: bool) -> CheckResult {
    CheckResult {
        preset: group.into(),
        criterion: None,
        name: name.into(),
        statistic,
        threshold,
        pass,
        detail: String::new(),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let g = &cli.global;
    match &cli.command {
        Command::Verify { preset } => {
            let opts = VerifyOptions {
                seed: g.seed.unwrap_or(7),
                replicas: g.replicas,
                workers: g
                    .workers
                    .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
            };
            let report = verify(*preset, &opts)?;
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("verify-out"));
            report.write(&dir)?;
            let checks: Vec<CheckResult> = report.checks().cloned().collect();
            let ok = summarize(&checks);
            println!("{}", report.checks_csv());
            Ok(ok)
        }
        Command::Mechanism { cmd: MechanismCmd::Inspect } => mechanism_inspect(g),
        Command::Cb { cmd } => match cmd {
            CbCmd::Solve { lambda, steps } => cb_solve(g, *lambda, *steps),
            CbCmd::Simulate => cb_simulate(g),
        },
        Command::Motion { cmd: MotionCmd::Check } => motion_check(g),
        Command::Skeleton { cmd: SkeletonCmd::Run } => experiment(g, ExperimentKind::Skeleton, "skeleton"),
        Command::Super { cmd } => match cmd {
            SuperCmd::Run => experiment(g, ExperimentKind::Superprocess, "super"),
            SuperCmd::EstimateW { horizons } => super_estimate_w(g, horizons),
        },
        Command::Spine { cmd: SpineCmd::Check } => experiment(g, ExperimentKind::Spine, "spine"),
        Command::Dress { cmd } => match cmd {
            DressCmd::Run => experiment(g, ExperimentKind::Dressing, "dress"),
            DressCmd::ThinningTest { bins, resamples } => dress_thinning(g, bins, *resamples),
        },
    }
}

fn experiment_files(stem: &str, out: &ExperimentOutput, checks: &[CheckResult]) -> Vec<(String, String)> {
    vec![
        (format!("{stem}.csv"), out.aggregate_csv()),
        (format!("{stem}_replicas.csv"), out.replicas_csv()),
        (format!("{stem}_checks.csv"), checks_csv(checks)),
    ]
}

fn experiment(g: &Global, kind: ExperimentKind, stem: &str) -> Result<bool> {
    let cfg = load_config(g)?;
    let out = run_experiment(&cfg, kind)?;
    let checks = experiment_checks(&out, cfg.test.significance);
    emit(g, &experiment_files(stem, &out, &checks))?;
    Ok(summarize(&checks))
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn mechanism_inspect(g: &Global) -> Result<bool> {
    let cfg = load_config(g)?;
    let mech = cfg.mechanism()?;
    let mut rows = vec![
        vec!["beta".to_string(), num(cfg.mechanism.beta)],
        vec!["alpha".into(), num(cfg.mechanism.alpha)],
    ];
    for lambda in [0.5, 1.0, 2.0] {
        rows.push(vec![format!("psi({lambda})"), num(mech.psi_const(lambda)?)]);
    }
    let z = mech.root_zpsi()?;
    rows.push(vec!["z_psi".into(), z.finite().map_or_else(|| "inf".into(), num)]);
    let grey = mech.grey_check()?;
    rows.push(vec!["grey".into(), grey.holds.to_string()]);
    rows.push(vec!["grey_confidence".into(), format!("{:?}", grey.confidence)]);
    if let Some(w) = z.finite().filter(|w| *w > 0.0) {
        let tilted = mech.tilt_at_w(&superskel::mechanism::Coefficient::Constant(w))?;
        rows.push(vec!["tilted_beta".into(), num(tilted.beta().bounds().0)]);
        let origin = superskel::origin(cfg.motion.d);
        let law = mech.skeleton_law(w, &origin, cfg.simulation.k_max)?;
        rows.push(vec!["skeleton_rate".into(), num(law.q)]);
        rows.push(vec!["skeleton_tail_mass".into(), num(law.tail_mass)]);
        for (k, p) in law.pmf.iter().enumerate().filter(|(_, p)| **p > 0.0) {
            rows.push(vec![format!("p_{k}"), num(*p)]);
        }
    }
    emit(g, &[("mechanism.csv".into(), table(&["quantity", "value"], &rows))])?;
    Ok(true)
}

fn cb_solve(g: &Global, lambda: f64, steps: usize) -> Result<bool> {
    let cfg = load_config(g)?;
    let mech = cfg.mechanism()?;
    let horizon = cfg.simulation.horizon;
    let grid: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
    let sol = cumulant_path(&mech, lambda, &grid)?;
    let quadratic = mech.is_quadratic();
    let (beta, alpha) = (cfg.mechanism.beta, cfg.mechanism.alpha);
    let mut worst: f64 = 0.0;
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .zip(&sol.v_values)
        .map(|(&t, &v)| {
            let exact = if quadratic {
                riccati_closed_form(beta, alpha, lambda, t)
            } else {
                f64::NAN
            };
            if quadratic {
                worst = worst.max(((v - exact) / exact).abs());
            }
            vec![t, v, exact]
        })
        .collect();
    let mut files = vec![("cb_solve.dat".to_string(), dat(&["t", "v", "closed_form"], &rows))];
    let mut checks = Vec::new();
    if quadratic {
        checks.push(check("max_relative_error", "cb", worst, 1e-8, worst < 1e-8));
        files.push(("cb_solve_checks.csv".into(), checks_csv(&checks)));
    }
    emit(g, &files)?;
    Ok(summarize(&checks))
}

fn cb_simulate(g: &Global) -> Result<bool> {
    let cfg = load_config(g)?;
    let mech = cfg.mechanism()?;
    let sim = &cfg.simulation;
    let z = mech.root_zpsi()?.finite().unwrap_or(1.0).max(1e-3);
    // beyond this mass the extinction probability is below e^{-28}
    let escape = 28.0 / z;
    let horizon = sim.record_times.iter().copied().fold(0.0, f64::max);
    let times = farm(sim.replicas, sim.workers, "cb", |i| {
        let mut rng = stream(cfg.seed, i, StreamTag::Cb);
        Ok(euler_extinction_time(&mech, 1.0, horizon, sim.dt, escape, &mut rng)?)
    })?;
    let n = sim.replicas as f64;
    let gate = bonferroni_z(cfg.test.significance, sim.record_times.len());
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &t in &sim.record_times {
        let p = times.iter().filter(|s| s.is_some_and(|s| s <= t)).count() as f64 / n;
        let target = extinction_by(&mech, t)?.prob_zero(1.0);
        let se = binomial_se(target, sim.replicas as u64);
        let dev = (p - target).abs();
        checks.push(check(format!("extinct_by_t={t}"), "cb", dev, gate * se, dev <= gate * se));
        rows.push(vec![t, p, se, target]);
    }
    let files = vec![
        ("cb_simulate.dat".to_string(), dat(&["t", "extinct_fraction", "binomial_se", "oracle"], &rows)),
        ("cb_simulate_checks.csv".into(), checks_csv(&checks)),
    ];
    emit(g, &files)?;
    Ok(summarize(&checks))
}

fn motion_check(g: &Global) -> Result<bool> {
    let cfg = load_config(g)?;
    let motion = cfg.motion()?;
    let sim = &cfg.simulation;
    let d = motion.dim();
    let gate = bonferroni_z(cfg.test.significance, 2 * sim.record_times.len());
    let mut rng = stream(cfg.seed, 0, StreamTag::Motion);
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for &t in &sim.record_times {
        let (scale, var) = motion.step_coefficients(t);
        let xs: Vec<f64> = (0..sim.replicas)
            .map(|_| {
                let mut x = vec![1.0; d];
                motion.step(&mut x, t, &mut rng);
                x[0]
            })
            .collect();
        let mean = ZTest::from_samples(&xs, scale);
        let (v, v_se) = variance_se(&xs);
        checks.push(check(format!("mean_t={t}"), "motion", mean.z.abs(), gate, mean.z.abs() < gate));
        let vz = (v - var).abs() / v_se;
        checks.push(check(format!("variance_t={t}"), "motion", vz, gate, vz < gate));
        let mut row = vec![t, mean.mean, scale, v, var];
        if d == 1 {
            let sd = var.sqrt();
            let mass = simpson(
                |y| motion.lebesgue_density(t, &[1.0], &[y]).unwrap_or(f64::NAN),
                scale - 8.0 * sd,
                scale + 8.0 * sd,
                4000,
            );
            checks.push(check(
                format!("density_mass_t={t}"),
                "motion",
                (mass - 1.0).abs(),
                1e-6,
                (mass - 1.0).abs() < 1e-6,
            ));
            row.push(mass);
        }
        rows.push(row);
    }
    let mut header = vec!["t", "sample_mean", "mean", "sample_variance", "variance"];
    if d == 1 {
        header.push("density_mass");
    }
    let files = vec![
        ("motion_check.dat".to_string(), dat(&header, &rows)),
        ("motion_check_checks.csv".into(), checks_csv(&checks)),
    ];
    emit(g, &files)?;
    Ok(summarize(&checks))
}

fn super_estimate_w(g: &Global, horizons: &[f64]) -> Result<bool> {
    let cfg = load_config(g)?;
    let mech = cfg.mechanism()?;
    let motion = cfg.motion()?;
    let mu = cfg.initial_measure();
    let x = mu.atoms.first().map(|(x, _)| x.clone()).unwrap_or_default();
    let eps = cfg.simulation.epsilon;
    let z = bonferroni_z(cfg.test.significance, 1);
    let estimates = estimate_w(&mech, &motion, &x, horizons, eps, cfg.simulation.replicas, cfg.seed, z)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &estimates {
        w.serialize(e)?;
    }
    let csv_text = String::from_utf8(w.into_inner()?)?;
    let mut checks = Vec::new();
    if let Ok(spectral) = cfg.spectral() {
        for e in &estimates {
            let (lo, hi) = (e.ci_low - eps, e.ci_high + eps);
            let pass = lo <= spectral.w && spectral.w <= hi;
            let outside = (lo - spectral.w).max(spectral.w - hi).max(0.0);
            checks.push(check(format!("w_bracket_T={}", e.horizon), "super", outside, 0.0, pass));
        }
    }
    let files = vec![
        ("estimate_w.csv".to_string(), csv_text),
        ("estimate_w_checks.csv".into(), checks_csv(&checks)),
    ];
    emit(g, &files)?;
    Ok(summarize(&checks))
}

fn dress_thinning(g: &Global, bins: &[f64], resamples: usize) -> Result<bool> {
    let cfg = load_config(g)?;
    let w = cfg.spectral()?.w;
    let states = dressed_states(&cfg)?;
    let mut rng = stream(cfg.seed, 0, StreamTag::Bootstrap);
    let level = 1.0 - cfg.test.significance;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (r, &t) in cfg.simulation.record_times.iter().enumerate() {
        let pairs = thinning_pairs(&states, r, w, bins);
        let rep = thinning_test(&pairs, resamples, level, &mut rng);
        let pass = !rep.insufficient && rep.ci_low <= 1.0 && 1.0 <= rep.ci_high;
        let outside = (rep.ci_low - 1.0).max(1.0 - rep.ci_high).max(0.0);
        checks.push(check(format!("dispersion_t={t}"), "dress", outside, 0.0, pass));
        rows.push(vec![
            num(t),
            rep.pairs.to_string(),
            num(rep.dispersion),
            num(rep.ci_low),
            num(rep.ci_high),
            num(rep.mean_count),
            num(rep.mean_intensity),
            num(rep.mean_z),
            rep.insufficient.to_string(),
        ]);
    }
    let header = [
        "t",
        "pairs",
        "dispersion",
        "ci_low",
        "ci_high",
        "mean_count",
        "mean_intensity",
        "mean_z",
        "insufficient",
    ];
    let files = vec![
        ("thinning.csv".to_string(), table(&header, &rows)),
        ("thinning_checks.csv".into(), checks_csv(&checks)),
    ];
    emit(g, &files)?;
    Ok(summarize(&checks))
}
