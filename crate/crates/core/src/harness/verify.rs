//! Acceptance presets. Each preset runs its experiments at fixed seeds and
//! returns pass/fail checks together with CSV and gnuplot data files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiment::{farm, run_experiment, ExperimentKind, ExperimentOutput, HarnessError, Model};
use super::report::{num, replicas_csv, Aggregate, RecordRow, ReplicaReport};
use super::stats::{binomial_se, bonferroni_z, ks_two_sample, ols, variance_se, wilson_interval, Moments, ZTest};
use crate::cbprocess::{cumulant_path, euler_extinction_time, extinction_by, riccati_closed_form};
use crate::decompositions::{
    conditional_mean_fit, conditional_mean_pairs, dressed_replica, size_bias_test, thinning_pairs,
    thinning_test, RunSpec,
};
use crate::mechanism::BranchingMechanism;
use crate::motion::{ph_density, spectral_for_example, w_transform, ExampleId, SpectralData};
use crate::rng::{stream, StreamTag};
use crate::skeleton::BranchingLaw;
use crate::superfield::{estimate_w, total_mass_laplace, total_mass_variance};

const SKELETON_SINGLE: &str = include_str!("../../presets/skeleton_8_1_single.toml");
const SKELETON_POISSON: &str = include_str!("../../presets/skeleton_8_1_poisson.toml");
const LLN_INWARD: &str = include_str!("../../presets/lln_8_1.toml");
const LLN_OUTWARD: &str = include_str!("../../presets/lln_8_2.toml");
const SUPER_MOMENTS: &str = include_str!("../../presets/super_moments.toml");
const DRESSING: &str = include_str!("../../presets/dressing.toml");
const SPINE: &str = include_str!("../../presets/spine.toml");

/// z threshold shared by every mean test.
pub const Z_GATE: f64 = 3.0;
/// Two-sided 99% normal quantile.
const Z99: f64 = 2.5758293035489;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Cb,
    Skeleton81,
    Skeleton82,
    SuperMoments,
    Dressing,
    Lln81,
    All,
}

impl Preset {
    /// The individual presets in the order `all` runs them.
    pub const EACH: [Preset; 6] = [
        Preset::Cb,
        Preset::Skeleton81,
        Preset::Skeleton82,
        Preset::SuperMoments,
        Preset::Dressing,
        Preset::Lln81,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Cb => "cb",
            Preset::Skeleton81 => "skeleton-8.1",
            Preset::Skeleton82 => "skeleton-8.2",
            Preset::SuperMoments => "super-moments",
            Preset::Dressing => "dressing",
            Preset::Lln81 => "lln-8.1",
            Preset::All => "all",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::EACH
            .into_iter()
            .chain([Preset::All])
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::EACH.iter().map(|p| p.name()).collect();
                format!("unknown preset `{s}`; expected one of {}, all", names.join(", "))
            })
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Replaces every replica count of the presets.
    pub replicas: Option<usize>,
    pub workers: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            replicas: None,
            workers: 1,
        }
    }
}

impl VerifyOptions {
    fn replicas(&self, default: usize) -> usize {
        self.replicas.unwrap_or(default)
    }

    fn config(&self, text: &str) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::from_toml(text)?;
        cfg.seed = self.seed;
        cfg.simulation.workers = self.workers;
        if let Some(r) = self.replicas {
            cfg.simulation.replicas = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One gated statistic. `criterion` is the acceptance criterion number;
/// `None` marks an auxiliary consistency check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub preset: String,
    pub criterion: Option<u8>,
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

struct Checks {
    label: String,
    list: Vec<CheckResult>,
}

impl Checks {
    fn new(label: impl fmt::Display) -> Self {
        Self {
            label: label.to_string(),
            list: Vec::new(),
        }
    }

    fn push(&mut self, criterion: Option<u8>, name: String, statistic: f64, threshold: f64, pass: bool, detail: String) {
        let c = CheckResult {
            preset: self.label.clone(),
            criterion,
            name,
            statistic,
            threshold,
            pass,
            detail,
        };
        info!(
            "{} {}: {} ({} vs {})",
            c.preset,
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            num(c.statistic),
            num(c.threshold)
        );
        self.list.push(c);
    }

    /// `|value − target| ≤ tolerance`.
    fn within(&mut self, criterion: Option<u8>, name: impl Into<String>, value: f64, target: f64, tolerance: f64) {
        let dev = (value - target).abs();
        let detail = format!("value={} target={}", num(value), num(target));
        self.push(criterion, name.into(), dev, tolerance, dev <= tolerance, detail);
    }

    /// `|z| < Z_GATE`.
    fn z(&mut self, criterion: Option<u8>, name: impl Into<String>, t: ZTest) {
        let detail = format!("mean={} se={} target={}", num(t.mean), num(t.se), num(t.target));
        self.push(criterion, name.into(), t.z.abs(), Z_GATE, t.z.abs() < Z_GATE, detail);
    }

    fn below(&mut self, criterion: Option<u8>, name: impl Into<String>, value: f64, bound: f64) {
        self.push(criterion, name.into(), value, bound, value < bound, String::new());
    }

    fn above(&mut self, criterion: Option<u8>, name: impl Into<String>, value: f64, bound: f64) {
        self.push(criterion, name.into(), value, bound, value > bound, String::new());
    }

    /// `target ∈ [low, high]`; the statistic is the distance outside.
    fn contains(&mut self, criterion: Option<u8>, name: impl Into<String>, low: f64, high: f64, target: f64) {
        let outside = (low - target).max(target - high).max(0.0);
        let pass = low <= target && target <= high;
        let detail = format!("interval=[{}, {}] target={}", num(low), num(high), num(target));
        self.push(criterion, name.into(), outside, 0.0, pass, detail);
    }
}

/// z-tests of every analytic target in an experiment at a Bonferroni
/// threshold for the family-wise `significance`.
pub fn experiment_checks(out: &ExperimentOutput, significance: f64) -> Vec<CheckResult> {
    let mut tests = Vec::new();
    for (r, rec) in out.aggregate.records.iter().enumerate() {
        for (k, label) in out.labels.iter().enumerate() {
            if let Some(target) = out.targets.get(r).and_then(|t| t.get(k)).copied().flatten() {
                let name = format!("{label}_t={}", rec.time);
                tests.push((name, ZTest::from_moments(&rec.functionals[k], target)));
            }
        }
        if let Some(target) = out.martingale_target {
            tests.push((format!("W_t={}", rec.time), ZTest::from_moments(&rec.martingale, target)));
        }
    }
    let gate = bonferroni_z(significance, tests.len());
    let mut checks = Checks::new(format!("{:?}", out.kind).to_lowercase());
    for (name, t) in tests {
        let detail = format!("mean={} se={} target={}", num(t.mean), num(t.se), num(t.target));
        checks.push(None, name, t.z.abs(), gate, t.z.abs() < gate, detail);
    }
    checks.list
}

/// `checks.csv` contents for a list of checks.
pub fn checks_csv<'a>(checks: impl IntoIterator<Item = &'a CheckResult>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["preset", "criterion", "name", "statistic", "threshold", "pass", "detail"])
        .expect("in-memory write");
    for c in checks {
        let criterion = c.criterion.map_or_else(|| "aux".to_string(), |k| k.to_string());
        w.write_record([
            c.preset.as_str(),
            &criterion,
            &c.name,
            &num(c.statistic),
            &num(c.threshold),
            if c.pass { "pass" } else { "fail" },
            &c.detail,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Checks and output files of one preset.
#[derive(Clone, Debug)]
pub struct PresetOutput {
    pub preset: Preset,
    pub checks: Vec<CheckResult>,
    /// `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub outputs: Vec<PresetOutput>,
}

impl VerifyReport {
    pub fn checks(&self) -> impl Iterator<Item = &CheckResult> {
        self.outputs.iter().flat_map(|o| &o.checks)
    }

    pub fn passed(&self) -> bool {
        self.checks().all(|c| c.pass)
    }

    /// `checks.csv`: one row per gated statistic.
    pub fn checks_csv(&self) -> String {
        checks_csv(self.checks())
    }

    /// Writes `checks.csv` and every preset file into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("checks.csv"), self.checks_csv())?;
        for o in &self.outputs {
            for (name, contents) in &o.files {
                std::fs::write(dir.join(name), contents)?;
            }
        }
        Ok(())
    }
}

/// Runs a preset (`All` runs each in turn).
pub fn verify(preset: Preset, opts: &VerifyOptions) -> Result<VerifyReport, HarnessError> {
    let list: Vec<Preset> = match preset {
        Preset::All => Preset::EACH.to_vec(),
        p => vec![p],
    };
    let outputs = list
        .into_iter()
        .map(|p| {
            info!("preset {p}: start");
            match p {
                Preset::Cb => cb_preset(opts),
                Preset::Skeleton81 => skeleton_inward_preset(opts),
                Preset::Skeleton82 => skeleton_outward_preset(opts),
                Preset::SuperMoments => super_moments_preset(opts),
                Preset::Dressing => dressing_preset(opts),
                Preset::Lln81 => lln_inward_preset(opts),
                Preset::All => unreachable!("expanded above"),
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(VerifyReport { outputs })
}

/// gnuplot-ready whitespace table with a commented header.
pub fn dat(columns: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = format!("# {}\n", columns.join(" "));
    for r in rows {
        let line: Vec<String> = r.iter().map(|&v| num(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn experiment_files(stem: &str, out: &ExperimentOutput) -> Vec<(String, String)> {
    vec![
        (format!("{stem}.csv"), out.aggregate_csv()),
        (format!("{stem}_replicas.csv"), out.replicas_csv()),
    ]
}

fn quadratic_example() -> Result<BranchingMechanism, HarnessError> {
    Ok(BranchingMechanism::quadratic(1.0, 1.0)?)
}

// ---------------------------------------------------------------- cb

/// Extinction times of Euler Feller paths from unit mass; `None` for
/// survivors.
fn euler_extinction_times(
    mech: &BranchingMechanism,
    replicas: usize,
    dt: f64,
    opts: &VerifyOptions,
) -> Result<Vec<Option<f64>>, HarnessError> {
    const HORIZON: f64 = 50.0;
    const ESCAPE: f64 = 60.0;
    farm(replicas, opts.workers, &format!("cb dt={dt}"), |i| {
        let mut rng = stream(opts.seed, i, StreamTag::Cb);
        Ok(euler_extinction_time(mech, 1.0, HORIZON, dt, ESCAPE, &mut rng)?)
    })
}

fn cb_preset(opts: &VerifyOptions) -> Result<PresetOutput, HarnessError> {
    let preset = Preset::Cb;
    let mut checks = Checks::new(preset);
    let mech = quadratic_example()?;

    let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for lambda in [0.1, 1.0, 10.0, 100.0] {
        let sol = cumulant_path(&mech, lambda, &grid)?;
        for (&t, &v) in grid.iter().zip(&sol.v_values) {
            let exact = riccati_closed_form(1.0, 1.0, lambda, t);
            let rel = ((v - exact) / exact).abs();
            worst = worst.max(rel);
            rows.push(vec![lambda, t, v, exact, rel]);
        }
    }
    checks.below(Some(1), "cumulant_max_relative_error", worst, 1e-8);
    let mut files = vec![(
        "cb_cumulant.dat".to_string(),
        dat(&["lambda", "t", "v_ode", "v_closed_form", "relative_error"], &rows),
    )];

    let replicas = opts.replicas(10_000);
    let fine = euler_extinction_times(&mech, replicas, 1e-3, opts)?;
    let coarse = euler_extinction_times(&mech, replicas, 2e-3, opts)?;
    let n = replicas as f64;
    let fraction = |times: &[Option<f64>], horizon: f64| {
        times.iter().filter(|t| t.is_some_and(|s| s <= horizon)).count() as f64 / n
    };
    let mut rows = Vec::new();
    for horizon in [1.0, 2.0, 10.0] {
        let target = extinction_by(&mech, horizon)?.prob_zero(1.0);
        let p = fraction(&fine, horizon);
        let se = binomial_se(target, replicas as u64);
        checks.within(Some(2), format!("extinct_by_T={horizon}"), p, target, Z_GATE * se);
        rows.push(vec![horizon, p, se, target]);
    }
    let ultimate = (-1f64).exp();
    let p_fine = fraction(&fine, f64::INFINITY);
    let p_coarse = fraction(&coarse, f64::INFINITY);
    let band = (p_coarse - p_fine).abs();
    let se = binomial_se(ultimate, replicas as u64);
    checks.within(Some(2), "ultimate_extinction", p_fine, ultimate, Z_GATE * se + band);
    rows.push(vec![f64::INFINITY, p_fine, se, ultimate]);
    files.push((
        "cb_extinction.dat".into(),
        dat(&["T", "extinct_fraction", "binomial_se", "oracle"], &rows),
    ));
    Ok(PresetOutput {
        preset,
        checks: checks.list,
        files,
    })
}

// ---------------------------------------------------------- skeleton

fn skeleton_inward_preset(opts: &VerifyOptions) -> Result<PresetOutput, HarnessError> {
    let preset = Preset::Skeleton81;
    let mut checks = Checks::new(preset);
    let mut files = Vec::new();

    let single = run_experiment(&opts.config(SKELETON_SINGLE)?, ExperimentKind::Skeleton)?;
    for (r, rec) in single.aggregate.records.iter().enumerate() {
        for (k, label) in single.labels.iter().enumerate() {
            let target = single.targets[r][k].expect("analytic target");
            let t = ZTest::from_moments(&rec.functionals[k], target);
            checks.z(Some(3), format!("many_to_one_{label}_t={}", rec.time), t);
        }
    }
    files.extend(experiment_files("skeleton_8_1_single", &single));

    let poisson = run_experiment(&opts.config(SKELETON_POISSON)?, ExperimentKind::Skeleton)?;
    let h_mu = poisson.martingale_target.expect("martingale target");
    let mut rows = Vec::new();
    for rec in &poisson.aggregate.records {
        let t = ZTest::from_moments(&rec.martingale, h_mu);
        checks.z(Some(4), format!("martingale_t={}", rec.time), t);
        rows.push(vec![rec.time, t.mean, t.se, h_mu, rec.count.mean()]);
    }
    files.extend(experiment_files("skeleton_8_1_poisson", &poisson));
    files.push((
        "skeleton_8_1_martingale.dat".into(),
        dat(&["t", "W_mean", "W_se", "target", "count_mean"], &rows),
    ));
    Ok(PresetOutput {
        preset,
        checks: checks.list,
        files,
    })
}

/// LLN suite: mean at the last record against `target`, variance decreasing
/// from the first to the last record.
fn lln_checks(checks: &mut Checks, out: &ExperimentOutput, target: f64) -> Vec<Vec<f64>> {
    let records = &out.aggregate.records;
    let (first, last) = (&records[0], &records[records.len() - 1]);
    checks.z(
        Some(5),
        format!("lln_mean_t={}", last.time),
        ZTest::from_moments(&last.lln, target),
    );
    checks.below(
        Some(5),
        format!("lln_variance_t={}_below_t={}", last.time, first.time),
        last.lln.variance(),
        first.lln.variance(),
    );
    records
        .iter()
        .map(|r| vec![r.time, r.lln.n as f64, r.lln.mean(), r.lln.se(), r.lln.variance(), target])
        .collect()
}

const LLN_COLUMNS: [&str; 6] = ["t", "survivors", "mean", "se", "variance", "target"];

fn lln_inward_preset(opts: &VerifyOptions) -> Result<PresetOutput, HarnessError> {
    let preset = Preset::Lln81;
    let mut checks = Checks::new(preset);
    let cfg = opts.config(LLN_INWARD)?;
    let spectral = cfg.spectral()?;
    let phi = cfg.test.lln_phi.clone().expect("preset sets φ");
    let target = spectral.h2_average(&phi);
    let out = run_experiment(&cfg, ExperimentKind::Skeleton)?;
    let rows = lln_checks(&mut checks, &out, target);
    let mut files = experiment_files("lln_8_1", &out);
    files.push(("lln_8_1.dat".into(), dat(&LLN_COLUMNS, &rows)));
    Ok(PresetOutput {
        preset,
        checks: checks.list,
        files,
    })
}

/// `sup |p^h(t, x, y) − 1|` over a grid of ±3 stationary standard deviations.
pub fn mixing_sup(spectral: &SpectralData, t: f64, nodes: usize) -> Result<f64, HarnessError> {
    let half = 3.0 * spectral.stationary_variance().sqrt();
    let step = 2.0 * half / (nodes - 1) as f64;
    let mut sup: f64 = 0.0;
    for i in 0..nodes {
        for j in 0..nodes {
            let x = [-half + i as f64 * step];
            let y = [-half + j as f64 * step];
            sup = sup.max((ph_density(spectral, t, &x, &y)? - 1.0).abs());
        }
    }
    Ok(sup)
}

/// Decay rate of [`mixing_sup`] fitted over `t ∈ [4/c, 10/c]`.
pub fn mixing_rate(spectral: &SpectralData) -> Result<(f64, Vec<Vec<f64>>), HarnessError> {
    let c = spectral.c;
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    let mut rows = Vec::new();
    for k in 0..9 {
        let t = (4.0 + 0.75 * k as f64) / c;
        let sup = mixing_sup(spectral, t, 61)?;
        ts.push(t);
        logs.push(sup.ln());
        rows.push(vec![c, t, sup]);
    }
    Ok((-ols(&ts, &logs).slope, rows))
}

fn skeleton_outward_preset(opts: &VerifyOptions) -> Result<PresetOutput, HarnessError> {
    let preset = Preset::Skeleton82;
    let mut checks = Checks::new(preset);
    let cfg = opts.config(LLN_OUTWARD)?;
    let spectral = cfg.spectral()?;
    let phi = cfg.test.lln_phi.clone().expect("preset sets φ");
    let target = spectral.h2_average_quadrature(&phi, 400_001);
    let out = run_experiment(&cfg, ExperimentKind::Skeleton)?;
    let rows = lln_checks(&mut checks, &out, target);
    let mut files = experiment_files("lln_8_2", &out);
    files.push(("lln_8_2.dat".into(), dat(&LLN_COLUMNS, &rows)));

    let mech = quadratic_example()?;
    let mut mixing_rows = Vec::new();
    for c in [0.25, 0.5, 1.0, 2.0] {
        let s = spectral_for_example(ExampleId::InwardOu, c, 1, &mech)?;
        let (rate, rows) = mixing_rate(&s)?;
        checks.below(Some(11), format!("mixing_rate_relative_error_c={c}"), (rate / c - 1.0).abs(), 0.15);
        mixing_rows.extend(rows);
    }
    files.push(("mixing.dat".into(), dat(&["c", "t", "sup_abs_ph_minus_1"], &mixing_rows)));
    Ok(PresetOutput {
        preset,
        checks: checks.list,
        files,
    })
}

// ---------------------------------------------------------- superfield

fn super_moments_preset(opts: &VerifyOptions) -> Result<PresetOutput, HarnessError> {
    let preset = Preset::SuperMoments;
    let mut checks = Checks::new(preset);
    let cfg = opts.config(SUPER_MOMENTS)?;
    let eps = cfg.simulation.epsilon;
    let (beta, alpha) = (cfg.mechanism.beta, cfg.mechanism.alpha);
    let out = run_experiment(&cfg, ExperimentKind::Superprocess)?;
    let mass = out.targets[0][0].expect("target") / (beta * out.record_times[0]).exp();
    let mut rows = Vec::new();
    for (r, rec) in out.aggregate.records.iter().enumerate() {
        let t = rec.time;
        let mean = ZTest::from_moments(&rec.functionals[0], mass * (beta * t).exp());
        checks.within(Some(6), format!("mass_mean_t={t}"), mean.mean, mean.target, Z_GATE * mean.se + 2.0 * eps);
        let (var, var_se) = variance_se(&out.column(r, 0));
        let limit = mass * 2.0 * alpha * (2.0 * beta * t).exp() * (1.0 - (-beta * t).exp()) / beta;
        checks.within(Some(6), format!("mass_variance_t={t}"), var, limit, Z_GATE * var_se + 5.0 * eps);
        let scheme = mass * total_mass_variance(beta, alpha, eps, t);
        checks.within(None, format!("mass_variance_scheme_t={t}"), var, scheme, Z_GATE * var_se);
        let laplace: Moments = out.column(r, 0).iter().map(|m| (-m).exp()).collect();
        let scheme_laplace = total_mass_laplace(beta, alpha, eps, mass, 1.0, t);
        let limit_laplace = (-mass * riccati_closed_form(beta, alpha, 1.0, t)).exp();
        checks.z(None, format!("laplace_scheme_t={t}"), ZTest::from_moments(&laplace, scheme_laplace));
        checks.within(
            None,
            format!("laplace_limit_t={t}"),
            laplace.mean(),
            limit_laplace,
            Z_GATE * laplace.se() + (scheme_laplace - limit_laplace).abs(),
        );
        for (k, label) in out.labels.iter().enumerate().skip(1) {
            let target = out.targets[r][k].expect("target");
            checks.z(None, format!("mean_{label}_t={t}"), ZTest::from_moments(&rec.functionals[k], target));
        }
        rows.push(vec![t, mean.mean, mean.se, mean.target, var, var_se, limit, scheme]);
    }
    let mut files = experiment_files("super_moments", &out);
    files.push((
        "super_moments.dat".into(),
        dat(
            &["t", "mass_mean", "mass_se", "mean_target", "variance", "variance_se", "variance_limit", "variance_scheme"],
            &rows,
        ),
    ));

    let mech = cfg.mechanism()?;
    let motion = cfg.motion()?;
    let origin = crate::origin(cfg.motion.d);
    let estimates = estimate_w(&mech, &motion, &origin, &[5.0, 10.0], eps, opts.replicas(2000), opts.seed, Z99)?;
    let z_psi = mech.root_zpsi()?.finite().unwrap_or(f64::NAN);
    let mut w_rows = Vec::new();
    for e in &estimates {
        checks.contains(
            Some(7),
            format!("w_bracket_T={}", e.horizon),
            e.ci_low - eps,
            e.ci_high + eps,
            z_psi,
        );
        w_rows.push(vec![e.horizon, e.fraction, e.w_hat, e.ci_low, e.ci_high, z_psi]);
    }
    files.push((
        "estimate_w.dat".into(),
        dat(&["T", "extinct_fraction", "w_hat", "ci_low", "ci_high", "z_psi"], &w_rows),
    ));
    Ok(PresetOutput {
        preset,
        checks: checks.list,
        files,
    })
}

// ------------------------------------------------------------ dressing

/// Per-replica summaries of a dressed state; the state itself is dropped.
struct DressedSummary {
    report: ReplicaReport,
    /// `(skeleton count, w · dressed mass)` per record.
    thinning: Vec<(f64, f64)>,
    /// `(predicted, realized)` per test function, first to second record.
    conditional: Vec<(f64, f64)>,
}

fn dressing_preset(opts: &VerifyOptions) -> Result<PresetOutput, HarnessError> {
    let preset = Preset::Dressing;
    let mut checks = Checks::new(preset);
    let mut files = Vec::new();
    let cfg = opts.config(DRESSING)?;
    let model = Model::from_config(&cfg)?;
    let sim = &cfg.simulation;
    let w = model.spectral.w;
    let functions = cfg.test.functions.clone();
    let phi = cfg.test.lln_phi.clone().expect("preset sets φ");
    let skeleton_motion = w_transform(&model.motion, &model.mech, &model.w)?;
    let law = BranchingLaw::from_mechanism(&model.mech, &model.w, sim.k_max, None)?;

    let summaries = farm(sim.replicas, sim.workers, "dressing", |i| {
        let run = RunSpec {
            epsilon: sim.epsilon,
            horizon: sim.horizon,
            record_times: sim.record_times.clone(),
            seed: cfg.seed,
            replica: i,
        };
        let st = dressed_replica(
            &model.mech,
            &model.w,
            &model.motion,
            &skeleton_motion,
            &law,
            &model.mu,
            sim.population_cap,
            &run,
        )?;
        let one = std::slice::from_ref(&st);
        let rows = (0..sim.record_times.len())
            .map(|r| {
                let fh = st.integrate(r, |x| model.spectral.h(x));
                RecordRow {
                    time: sim.record_times[r],
                    count: st.skeleton_count(r) as f64,
                    martingale: st.martingale(r, &model.spectral),
                    functionals: functions.iter().map(|f| st.integrate(r, |x| f.eval(x))).collect(),
                    lln: (fh > 0.0).then(|| st.integrate(r, |x| phi.eval(x) * model.spectral.h(x)) / fh),
                    extinct: st.total_mass(r) == 0.0,
                }
            })
            .collect();
        let thinning = (0..sim.record_times.len())
            .map(|r| thinning_pairs(one, r, w, &[])[0][0])
            .collect();
        let mut conditional = Vec::new();
        for f in &functions {
            let (p, q) = conditional_mean_pairs(one, 0, 1, &model.mech, w, &model.motion, f)?;
            conditional.push((p[0], q[0]));
        }
        Ok(DressedSummary {
            report: ReplicaReport {
                replica: i,
                rows,
                runtime: std::time::Duration::ZERO,
            },
            thinning,
            conditional,
        })
    })?;
    let reports: Vec<ReplicaReport> = summaries.iter().map(|s| s.report.clone()).collect();
    let labels: Vec<String> = functions.iter().map(|f| f.label()).collect();
    let aggregate = Aggregate::from_reports(&sim.record_times, labels.clone(), &reports);
    let eps_mass = (model.mu.total_mass() / sim.epsilon).round() * sim.epsilon;
    let h_mu = model.mu.integrate(|x| model.spectral.h(x)) * eps_mass / model.mu.total_mass();
    files.push(("dressing.csv".into(), aggregate.to_csv(&[], Some(h_mu))));
    files.push(("dressing_replicas.csv".into(), replicas_csv(&labels, &reports)));

    // plain ε-superprocess with the same mechanism and start
    let mut plain_cfg = cfg.clone();
    plain_cfg.simulation.horizon = 2.0;
    plain_cfg.simulation.record_times = vec![1.0, 2.0];
    let plain = run_experiment(&plain_cfg, ExperimentKind::Superprocess)?;
    files.extend(experiment_files("dressing_plain", &plain));

    let dressed_mass: Vec<f64> = reports.iter().map(|r| r.rows[0].functionals[0]).collect();
    let plain_mass = plain.column(0, 0);
    let ks = ks_two_sample(&dressed_mass, &plain_mass);
    checks.above(Some(8), "ks_total_mass_t=1", ks.p_value, 0.01);

    let mut boot = stream(opts.seed, 0, StreamTag::Bootstrap);
    let mut thin_rows = Vec::new();
    for (r, &t) in sim.record_times.iter().enumerate() {
        let pairs: Vec<Vec<(f64, f64)>> = summaries.iter().map(|s| vec![s.thinning[r]]).collect();
        let rep = thinning_test(&pairs, 2000, 0.99, &mut boot);
        let criterion = (t <= 2.0).then_some(9);
        checks.contains(criterion, format!("thinning_dispersion_t={t}"), rep.ci_low, rep.ci_high, 1.0);
        checks.below(None, format!("thinning_mean_abs_z_t={t}"), rep.mean_z.abs(), Z_GATE);
        thin_rows.push(vec![t, rep.dispersion, rep.ci_low, rep.ci_high, rep.mean_count, rep.mean_intensity]);
    }
    files.push((
        "thinning.dat".into(),
        dat(&["t", "dispersion", "ci_low", "ci_high", "mean_count", "mean_intensity"], &thin_rows),
    ));

    let spine = run_experiment(&opts.config(SPINE)?, ExperimentKind::Spine)?;
    let n_f = spine.labels.len() / 2;
    for rec in &spine.aggregate.records {
        for k in 0..n_f {
            let t = ZTest::from_moments(&rec.functionals[n_f + k], 0.0);
            checks.z(Some(10), format!("spine_sd2_{}_t={}", spine.labels[k], rec.time), t);
        }
    }
    files.extend(experiment_files("spine", &spine));

    // auxiliary consistency checks
    for rec in &aggregate.records {
        checks.z(None, format!("dressed_martingale_t={}", rec.time), ZTest::from_moments(&rec.martingale, h_mu));
    }
    for (k, label) in labels.iter().enumerate() {
        let (p, q): (Vec<f64>, Vec<f64>) = summaries.iter().map(|s| s.conditional[k]).unzip();
        let fit = conditional_mean_fit(&p, &q);
        checks.within(None, format!("sd1_slope_{label}"), fit.slope, 1.0, Z_GATE * fit.se_slope);
    }
    let spine_w = spine.martingale_column(0);
    let plain_w = plain.martingale_column(0);
    checks.z(None, "size_bias_t=1", size_bias_test(&spine_w, &plain_w, h_mu));

    let last = sim.record_times.len() - 1;
    let mut hits = 0u64;
    for s in &summaries {
        hits += u64::from(s.report.rows[last].martingale > 0.01);
    }
    let (lo, hi) = wilson_interval(hits, summaries.len() as u64, Z99);
    // X dies iff the initial Poisson field of skeleton particles is empty
    let target = 1.0 - (-model.mu.integrate(|x| model.spectral.w(x))).exp();
    checks.contains(None, format!("nondegeneracy_t={}", sim.record_times[last]), lo, hi, target);
    let lln_first = &aggregate.records[0].lln;
    let lln_last = &aggregate.records[last].lln;
    checks.below(
        None,
        format!("lln_transfer_variance_t={}_below_t={}", sim.record_times[last], sim.record_times[0]),
        lln_last.variance(),
        lln_first.variance(),
    );
    let lln_rows: Vec<Vec<f64>> = aggregate
        .records
        .iter()
        .map(|r| vec![r.time, r.lln.n as f64, r.lln.mean(), r.lln.se(), r.lln.variance()])
        .collect();
    files.push((
        "dressing_lln.dat".into(),
        dat(&["t", "survivors", "mean", "se", "variance"], &lln_rows),
    ));
    Ok(PresetOutput {
        preset,
        checks: checks.list,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::EACH.into_iter().chain([Preset::All]) {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("skeleton".parse::<Preset>().unwrap_err().contains("skeleton-8.1"));
    }

    #[test]
    fn preset_configs_are_valid() {
        let opts = VerifyOptions::default();
        for text in [SKELETON_SINGLE, SKELETON_POISSON, LLN_INWARD, LLN_OUTWARD, SUPER_MOMENTS, DRESSING, SPINE] {
            let cfg = opts.config(text).unwrap();
            cfg.spectral().unwrap();
        }
    }

    #[test]
    fn mixing_rate_is_close_to_c() {
        let mech = BranchingMechanism::quadratic(1.0, 1.0).unwrap();
        for c in [0.5, 2.0] {
            let s = spectral_for_example(ExampleId::InwardOu, c, 1, &mech).unwrap();
            let (rate, _) = mixing_rate(&s).unwrap();
            assert!((rate / c - 1.0).abs() < 0.05, "c = {c}: rate {rate}");
        }
    }

    #[test]
    fn check_helpers_gate_correctly() {
        let mut c = Checks::new(Preset::Cb);
        c.within(None, "a", 1.0, 1.1, 0.2);
        c.within(None, "b", 1.0, 1.5, 0.2);
        c.contains(None, "c", 0.0, 1.0, 0.5);
        c.contains(None, "d", 0.0, 1.0, 1.5);
        c.z(None, "e", ZTest::new(0.0, 0.0, 0.0));
        let pass: Vec<bool> = c.list.iter().map(|r| r.pass).collect();
        assert_eq!(pass, [true, false, true, false, true]);
        assert_eq!(c.list[3].statistic, 0.5);
    }

    #[test]
    fn dat_has_header_and_rows() {
        let s = dat(&["t", "x"], &[vec![1.0, 2.0]]);
        assert_eq!(s, "# t x\n1.000000000000e0 2.000000000000e0\n");
    }

    #[test]
    fn small_cb_preset_is_deterministic() {
        let opts = VerifyOptions {
            replicas: Some(200),
            ..Default::default()
        };
        let a = verify(Preset::Cb, &opts).unwrap();
        let b = verify(Preset::Cb, &VerifyOptions { workers: 2, ..opts }).unwrap();
        assert_eq!(a.checks_csv(), b.checks_csv());
        assert!(a.checks().any(|c| c.criterion == Some(1) && c.pass));
    }
}
