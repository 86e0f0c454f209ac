use std::fs;
use std::path::Path;

use obsattack::harness::{run_sweep, ExperimentConfig, CSV_HEADER};
use obsattack::mdp::evaluate_policy;
use obsattack::Error;

fn config(out: &Path, extra_top: &str, extra_attacks: &str) -> String {
    format!(
        r#"
name = "small"
env = "fig3"
budget_mode = "discrete_set"
norm = "linf"
epsilons = [0.0, 0.25, 0.5]
seeds = [0, 1]
output_dir = "{}"
{extra_top}

[victim]
source = "exact_greedy"

[deceptive]
steps = 4000
ensemble = 1
temperature = 0.05

[[attacks]]
name = "random"
space = "random"

[[attacks]]
name = "mad"
space = "h1_full_untargeted"

[[attacks]]
name = "two_stage"
space = "h3_two_stage"
{extra_attacks}
"#,
        out.display()
    )
}

fn load(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text, Path::new(".")).unwrap()
}

#[test]
fn csv_has_documented_header_and_control_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = load(&config(&out, "", ""));
    let result = run_sweep(&cfg).unwrap();
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    // identity control + 3 attacks, 3 epsilons, 2 seeds
    assert_eq!(result.rows.len(), 4 * 3 * 2);
    assert_eq!(csv.lines().count(), 1 + result.rows.len());

    let exp = obsattack::harness::prepare(&cfg).unwrap();
    let clean = evaluate_policy(&exp.world.mdp, &exp.victim.induced_table(&exp.world.embedding).unwrap())
        .unwrap()
        .return_value;
    for eps in &cfg.epsilons {
        for seed in &cfg.seeds {
            let row = result.row("identity", *eps, *seed).expect("control row");
            assert_eq!(row.ret, clean);
        }
    }
    for row in result.rows.iter().filter(|r| r.epsilon == 0.0) {
        assert_eq!(row.ret, clean, "{} at zero budget", row.attack);
    }
    for file in ["config.toml", "manifest.toml", "timing.txt"] {
        assert!(out.join(file).exists(), "{file}");
    }
    assert!(!fs::read_to_string(out.join("manifest.toml")).unwrap().contains("wall"));
}

#[test]
fn rerun_is_byte_identical_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = load(&config(&out, "chart = true", ""));
    let first = run_sweep(&cfg).unwrap();
    let csv = fs::read(out.join("results.csv")).unwrap();
    let manifest = fs::read(out.join("manifest.toml")).unwrap();
    let svg = fs::read_to_string(out.join("returns.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));

    let second = run_sweep(&cfg).unwrap();
    assert_eq!(second.computed, 0);
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), csv);
    assert_eq!(fs::read(out.join("manifest.toml")).unwrap(), manifest);

    // a lost cell is recomputed to the same bytes
    fs::remove_file(out.join("cells").join("mad_eps0.25_seed1.toml")).unwrap();
    let third = run_sweep(&cfg).unwrap();
    assert_eq!(third.computed, 1);
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), csv);
    assert_eq!(first.to_csv(), third.to_csv());
}

#[test]
fn changed_config_does_not_reuse_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_sweep(&load(&config(&out, "", ""))).unwrap();
    let changed = load(&config(&out, "", "").replace("temperature = 0.05", "temperature = 0.1"));
    let result = run_sweep(&changed).unwrap();
    assert_eq!(result.computed, result.rows.len());
}

#[test]
fn configuration_errors_surface_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    // strategic attack without a timer
    let text = config(&out, "", "\n[[attacks]]\nname = \"h2\"\nspace = \"h2_strategic_untargeted\"\n");
    assert!(matches!(ExperimentConfig::from_toml_str(&text, Path::new(".")), Err(Error::Config(_))));

    let missing = dir.path().join("nope.toml");
    let text = config(&out, "", "").replace(
        "[victim]\nsource = \"exact_greedy\"",
        &format!("[victim]\nsource = \"checkpoint\"\ncheckpoint = \"{}\"", missing.display()),
    );
    match run_sweep(&load(&text)) {
        Err(Error::Io { path, .. }) => assert!(path.contains("nope.toml")),
        other => panic!("expected an I/O error, got {other:?}"),
    }
    assert!(!out.exists());
}

#[test]
fn sampled_returns_track_exact_ones() {
    let dir = tempfile::tempdir().unwrap();
    let exact = run_sweep(&load(&config(&dir.path().join("a"), "", ""))).unwrap();
    let sampled = run_sweep(&load(&config(&dir.path().join("b"), "exact = false\nepisodes = 4000", ""))).unwrap();
    for (e, s) in exact.rows.iter().zip(&sampled.rows) {
        assert_eq!((&e.attack, e.epsilon, e.seed), (&s.attack, s.epsilon, s.seed));
        assert!((e.ret - s.ret).abs() < 0.05, "{}: {} vs {}", e.attack, e.ret, s.ret);
    }
}

#[test]
fn output_root_override_applies_to_relative_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let text = config(Path::new("relative_run"), "", "");
    std::env::set_var(obsattack::harness::OUTPUT_ROOT_ENV, dir.path());
    let result = run_sweep(&load(&text));
    std::env::remove_var(obsattack::harness::OUTPUT_ROOT_ENV);
    let result = result.unwrap();
    assert_eq!(result.output_dir, dir.path().join("relative_run"));
    assert!(dir.path().join("relative_run/results.csv").exists());
}
