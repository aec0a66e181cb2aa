use superskel::harness::config::ExperimentConfig;
use superskel::harness::experiment::{run_experiment, ExperimentKind};
use superskel::harness::verify::{verify, Preset, VerifyOptions};

fn small(preset: &str, replicas: usize, seed: u64, workers: usize) -> ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(preset);
    let mut cfg = ExperimentConfig::from_file(&path).unwrap();
    cfg.seed = seed;
    cfg.simulation.replicas = replicas;
    cfg.simulation.workers = workers;
    cfg
}

const CASES: [(&str, ExperimentKind); 4] = [
    ("skeleton_8_1_poisson.toml", ExperimentKind::Skeleton),
    ("super_moments.toml", ExperimentKind::Superprocess),
    ("dressing.toml", ExperimentKind::Dressing),
    ("spine.toml", ExperimentKind::Spine),
];

#[test]
fn same_seed_gives_identical_bytes() {
    for (file, kind) in CASES {
        let a = run_experiment(&small(file, 12, 3, 1), kind).unwrap();
        let b = run_experiment(&small(file, 12, 3, 1), kind).unwrap();
        assert_eq!(a.aggregate_csv(), b.aggregate_csv(), "{file}");
        assert_eq!(a.replicas_csv(), b.replicas_csv(), "{file}");
    }
}

#[test]
fn worker_count_does_not_change_output() {
    for (file, kind) in CASES {
        let one = run_experiment(&small(file, 9, 5, 1), kind).unwrap();
        let four = run_experiment(&small(file, 9, 5, 4), kind).unwrap();
        assert_eq!(one.replicas_csv(), four.replicas_csv(), "{file}");
        assert_eq!(one.aggregate_csv(), four.aggregate_csv(), "{file}");
    }
}

#[test]
fn different_seeds_give_different_paths() {
    for (file, kind) in CASES {
        let a = run_experiment(&small(file, 8, 1, 1), kind).unwrap();
        let b = run_experiment(&small(file, 8, 2, 1), kind).unwrap();
        assert_ne!(a.replicas_csv(), b.replicas_csv(), "{file}");
    }
}

#[test]
fn replica_streams_do_not_depend_on_replica_count() {
    let short = run_experiment(&small("spine.toml", 3, 9, 1), ExperimentKind::Spine).unwrap();
    let long = run_experiment(&small("spine.toml", 6, 9, 1), ExperimentKind::Spine).unwrap();
    for (a, b) in short.reports.iter().zip(&long.reports) {
        assert_eq!(a.replica, b.replica);
        assert_eq!(a.rows, b.rows);
    }
}

#[test]
fn verify_output_is_reproducible() {
    let opts = VerifyOptions {
        seed: 7,
        replicas: Some(200),
        workers: 1,
    };
    let a = verify(Preset::Cb, &opts).unwrap();
    let b = verify(Preset::Cb, &opts).unwrap();
    assert_eq!(a.checks_csv(), b.checks_csv());
    let files = |r: &superskel::harness::verify::VerifyReport| {
        r.outputs.iter().flat_map(|o| o.files.clone()).collect::<Vec<_>>()
    };
    assert_eq!(files(&a), files(&b));
    assert!(!files(&a).is_empty());
}
