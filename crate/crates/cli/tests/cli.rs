use std::path::PathBuf;
use std::process::{Command, Output};

fn superskel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superskel"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn superskel")
}

fn preset(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/presets")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("superskel-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_lists_subcommands() {
    let out = superskel(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["mechanism", "cb", "motion", "skeleton", "super", "spine", "dress", "verify"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = superskel(&["skeleton", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unknown_key_names_its_path() {
    let dir = scratch("badkey");
    let path = dir.join("bad.toml");
    let text = std::fs::read_to_string(preset("spine.toml")).unwrap().replace("epsilon", "epsilom");
    std::fs::write(&path, text).unwrap();
    let out = superskel(&["spine", "check", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilom"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_preset_is_rejected() {
    let out = superskel(&["verify", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn skeleton_run_prints_the_aggregate_table() {
    let cfg = preset("skeleton_8_1_single.toml");
    let out = superskel(&["skeleton", "run", "--config", &cfg, "--replicas", "20", "--seed", "3"]);
    assert!(matches!(out.status.code(), Some(0) | Some(1)), "{out:?}");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("t,replicas,count_mean"), "{text}");
    assert_eq!(text.lines().count(), 3);
    let again = superskel(&["skeleton", "run", "--config", &cfg, "--replicas", "20", "--seed", "3"]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn out_directory_receives_files() {
    let dir = scratch("out");
    let cfg = preset("super_moments.toml");
    let out = superskel(&[
        "super", "run", "--config", &cfg, "--replicas", "10", "--out", dir.to_str().unwrap(),
    ]);
    assert!(matches!(out.status.code(), Some(0) | Some(1)), "{out:?}");
    let names: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| n.ends_with(".csv")), "{names:?}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn cb_solve_prints_the_cumulant_table() {
    let cfg = preset("super_moments.toml");
    let out = superskel(&["cb", "solve", "--config", &cfg, "--lambda", "2", "--steps", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).lines().count() >= 11);
}
