use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obsattack"))
        .args(args)
        .current_dir(dir)
        .env("OBSATTACK_OUTPUT_ROOT", dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_works_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    for sub in [
        "train-victim",
        "train-deceptive",
        "attack",
        "sweep",
        "verify-props",
        "check-bounds",
        "render-env",
    ] {
        let o = run(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["attack", "--env", "fig3"]).status.code(), Some(2));
    let o = run(dir.path(), &["sweep", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn render_env_prints_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["render-env", "--env", "fig4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().take(4).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == 4));
    assert!(text.contains('G'));
}

#[test]
fn verify_props_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = run(dir.path(), &["verify-props", "--env", "fig3", "--out", "a"]);
    let second = run(dir.path(), &["verify-props", "--env", "fig3", "--out", "b"]);
    assert_eq!(first.status.code(), Some(0), "{}", stdout(&first));
    let checks = |o: &Output| -> Vec<String> {
        stdout(o).lines().filter(|l| l.contains("PASS") || l.contains("FAIL")).map(String::from).collect()
    };
    assert_eq!(checks(&first).len(), 3);
    assert!(checks(&first).iter().all(|l| l.starts_with("PASS")));
    assert_eq!(checks(&first), checks(&second));
    let a = fs::read(dir.path().join("a/certificates.toml")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/certificates.toml")).unwrap());
}

#[test]
fn training_and_attacking_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let victim = ["train-victim", "--env", "fig3", "--steps", "500", "--seed", "3", "--out"];
    let deceptive = [
        "train-deceptive", "--env", "fig3", "--steps", "2000", "--ensemble", "1", "--temperature", "0.05", "--out",
    ];
    for name in ["1", "2"] {
        let v = format!("v{name}.toml");
        let e = format!("d{name}.toml");
        assert!(run(d, &[&victim[..], &[v.as_str()]].concat()).status.success());
        assert!(run(d, &[&deceptive[..], &[e.as_str()]].concat()).status.success());
    }
    assert_eq!(fs::read(d.join("v1.toml")).unwrap(), fs::read(d.join("v2.toml")).unwrap());
    assert_eq!(fs::read(d.join("d1.toml")).unwrap(), fs::read(d.join("d2.toml")).unwrap());

    let attack = |v: &str, e: &str| {
        let o = run(d, &["attack", "--env", "fig3", "--victim", v, "--deceptive", e, "--epsilon", "0.3", "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
    };
    let out = attack("v1.toml", "d1.toml");
    assert!(out.starts_with("clean_return = "));
    assert!(out.contains("attacked_return = "));
    assert_eq!(out, attack("v2.toml", "d2.toml"));
}

#[test]
fn sweep_writes_under_the_output_root_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("small.toml"),
        r#"
name = "small"
env = "fig3"
budget_mode = "discrete_set"
norm = "linf"
epsilons = [0.0, 0.5]
seeds = [0]
output_dir = "runs/small"

[victim]
source = "exact_greedy"

[deceptive]
steps = 2000
ensemble = 1
temperature = 0.05

[[attacks]]
name = "two_stage"
space = "h3_two_stage"
"#,
    )
    .unwrap();
    assert_eq!(run(d, &["sweep", "--config", "small.toml"]).status.code(), Some(0));
    let csv = fs::read(d.join("runs/small/results.csv")).unwrap();
    fs::remove_dir_all(d.join("runs")).unwrap();
    assert_eq!(run(d, &["sweep", "--config", "small.toml"]).status.code(), Some(0));
    assert_eq!(fs::read(d.join("runs/small/results.csv")).unwrap(), csv);

    let o = run(d, &["check-bounds", "--config", "small.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
}
