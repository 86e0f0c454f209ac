//! The `obsattack` command line.
//!
//! Exit codes: 0 on success, 1 when a verification or bound check fails (or
//! a computation errors), 2 on usage, configuration and I/O errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use obsattack::analysis::compute_bound_report;
use obsattack::attacks::{induced_tabular_policy, AttackSpace, MadVariant, OptimizerMethod, StrategicTimer, TimingRule};
use obsattack::envs::{build_named, BudgetMode, EmbeddingKind, GridWorld, GridworldLayout, Norm};
use obsattack::harness::{
    check_sweep_bounds, resolve_output_path, run_sweep, verify_props, AttackSpec, DeceptiveSpec, Experiment,
    ExperimentConfig, VictimSource, VictimSpec,
};
use obsattack::mdp::{evaluate_policy, solve_optimal};
use obsattack::policy::{distill_feedforward, save_checkpoint, train_policy, DistillConfig, TrainAlgorithm, TrainConfig};
use obsattack::Error;

#[derive(Parser, Debug)]
#[command(name = "obsattack", version, about = "Observation attacks on gridworld agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a victim policy and write a checkpoint.
    TrainVictim(TrainVictimArgs),
    /// Train a reward-minimizing policy on the flipped MDP.
    TrainDeceptive(TrainDeceptiveArgs),
    /// Attack a victim at one budget and print the return and bound report.
    Attack(AttackArgs),
    /// Run an epsilon sweep from a config file.
    Sweep(SweepArgs),
    /// Enumerate attacked-policy sets and check the policy-set claims.
    VerifyProps(VerifyArgs),
    /// Run a sweep and check the performance bounds on every row.
    CheckBounds(SweepArgs),
    /// Print a gridworld as ASCII.
    RenderEnv(RenderArgs),
}

#[derive(Args, Debug)]
struct EnvArgs {
    /// Shipped world: fig3, fig4, fig4_up_down, fig4_left_down.
    #[arg(long, conflicts_with = "layout")]
    env: Option<String>,
    /// Gridworld layout file.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, default_value = "coordinate")]
    embedding: EmbeddingKind,
}

impl EnvArgs {
    fn world(&self) -> obsattack::Result<GridWorld> {
        let world = match (&self.env, &self.layout) {
            (Some(name), _) => build_named(name)?,
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                GridWorld::from_layout(GridworldLayout::from_toml(&text)?, self.embedding)?
            }
            (None, None) => return Err(Error::Config("give --env or --layout".into())),
        };
        Ok(world.with_embedding(self.embedding))
    }
}

#[derive(Args, Debug)]
struct TrainVictimArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// `distill` fits an MLP to the exact optimal policy; the others train a tabular policy.
    #[arg(long, default_value = "distill")]
    method: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainDeceptiveArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value = "q_learning")]
    algorithm: TrainAlgorithm,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 5)]
    ensemble: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Victim checkpoint; an MLP distilled from the optimal policy when absent.
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Deceptive checkpoint; trained with Q-learning when absent.
    #[arg(long)]
    deceptive: Option<PathBuf>,
    #[arg(long, default_value = "h3_two_stage")]
    space: AttackSpace,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value = "l2")]
    norm: Norm,
    #[arg(long, default_value = "continuous")]
    mode: String,
    #[arg(long, default_value = "pgd")]
    method: String,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    step_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    entropy_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    timer_threshold: f64,
    #[arg(long)]
    random_start: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// fig3, fig4 or random.
    #[arg(long)]
    env: String,
    /// Directory for the report; defaults to `props/<env>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    env: EnvArgs,
}

enum Failure {
    Usage(String),
    Check(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Run the CLI on `argv` (program name first) and return the exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::TrainVictim(a) => train_victim(a),
        Command::TrainDeceptive(a) => train_deceptive(a),
        Command::Attack(a) => attack(a),
        Command::Sweep(a) => sweep(a),
        Command::VerifyProps(a) => verify(a),
        Command::CheckBounds(a) => check_bounds(a),
        Command::RenderEnv(a) => render(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn train_victim(a: TrainVictimArgs) -> Outcome {
    let world = a.env.world()?;
    let policy = if a.method == "distill" {
        let optimal = solve_optimal(&world.mdp)?;
        let mut cfg = DistillConfig {
            seed: a.seed,
            ..DistillConfig::default()
        };
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        distill_feedforward(&optimal.greedy, world.mdp.num_actions(), &world.embedding, &cfg)?
    } else {
        let algorithm: TrainAlgorithm = a.method.parse()?;
        let mut cfg = TrainConfig::for_algorithm(algorithm);
        cfg.seed = a.seed;
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        train_policy(&world.mdp, &world.embedding, &cfg)?.policy
    };
    let ret = evaluate_policy(&world.mdp, &policy.induced_table(&world.embedding)?)?.return_value;
    let out = resolve_output_path(&a.out);
    save_checkpoint(&policy, &out)?;
    println!("return = {ret}");
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn train_deceptive(a: TrainDeceptiveArgs) -> Outcome {
    let world = a.env.world()?;
    let spec = DeceptiveSpec {
        checkpoint: None,
        algorithm: a.algorithm,
        steps: a.steps,
        learning_rate: None,
        temperature: a.temperature,
        seed: a.seed,
        ensemble: a.ensemble,
    };
    let outcome = obsattack::policy::train_deceptive(&world.mdp, &world.embedding, &spec.train_config(), a.ensemble)?;
    let out = resolve_output_path(&a.out);
    save_checkpoint(&outcome.policy, &out)?;
    println!("return = {}", outcome.exact_return);
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Outcome {
    let budget_mode = match a.mode.as_str() {
        "continuous" => BudgetMode::ContinuousBall,
        "discrete" => BudgetMode::DiscreteSet,
        other => return Err(Failure::Usage(format!("unknown mode `{other}` (continuous or discrete)"))),
    };
    let method = match a.method.as_str() {
        "pgd" => OptimizerMethod::Pgd,
        "fgsm" => OptimizerMethod::Fgsm,
        other => return Err(Failure::Usage(format!("unknown method `{other}` (pgd or fgsm)"))),
    };
    let mut spec = AttackSpec::identity();
    spec.name = a.space.name().into();
    spec.space = a.space;
    spec.method = method;
    spec.iterations = a.iterations;
    spec.step_ratio = a.step_ratio;
    spec.entropy_weight = a.entropy_weight;
    spec.random_start = a.random_start;
    spec.mad_variant = MadVariant::default();
    if a.space == AttackSpace::H2StrategicUntargeted {
        spec.timer = Some(StrategicTimer::new(TimingRule::PreferenceGap, a.timer_threshold)?);
    }
    let (env, env_file) = (a.env.env.clone(), a.env.layout.clone());
    let cfg = ExperimentConfig {
        name: "attack".into(),
        env,
        env_file,
        embedding: a.env.embedding,
        budget_mode,
        norm: a.norm,
        epsilons: vec![a.epsilon],
        seeds: vec![a.seed],
        exact: true,
        episodes: 1,
        bounds: true,
        chart: false,
        output_dir: PathBuf::from("."),
        victim: VictimSpec {
            source: if a.victim.is_some() { VictimSource::Checkpoint } else { VictimSource::Distill },
            checkpoint: a.victim,
            hidden: DistillConfig::default().hidden,
            steps: DistillConfig::default().steps,
            learning_rate: DistillConfig::default().learning_rate,
            seed: 0,
            sharpness: 30.0,
        },
        deceptive: Some(DeceptiveSpec {
            checkpoint: a.deceptive,
            algorithm: TrainAlgorithm::QLearning,
            steps: None,
            learning_rate: None,
            temperature: None,
            seed: 0,
            ensemble: 5,
        }),
        attacks: vec![spec.clone()],
    };
    cfg.validate()?;
    let exp: Experiment = obsattack::harness::prepare(&cfg)?;
    let attacker = exp.attacker(&spec, exp.budget(budget_mode, a.epsilon, a.norm)?, a.seed)?;
    let table = induced_tabular_policy(&exp.victim, &attacker, &exp.world.embedding)?;
    let deceptive = exp.deceptive.as_ref().expect("configured").induced_table(&exp.world.embedding)?;
    let report = compute_bound_report(&exp.world.mdp, &table, &deceptive, Some(exp.victim_return))?;
    println!("clean_return = {}", exp.victim_return);
    println!("attacked_return = {}", report.attacked_return);
    print!("{}", toml::to_string(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
    Ok(())
}

fn load_config(path: &Path) -> std::result::Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("config file not found: {}", path.display())));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn sweep(a: SweepArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let result = run_sweep(&cfg)?;
    println!("{} rows -> {}", result.rows.len(), result.output_dir.join("results.csv").display());
    eprintln!("{} cells computed, {} loaded", result.computed, result.rows.len() - result.computed);
    Ok(())
}

fn check_bounds(a: SweepArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let result = run_sweep(&cfg)?;
    if result.deceptive_table.is_none() || !cfg.bounds {
        return Err(Failure::Usage("bound checks need a [deceptive] section and bounds = true".into()));
    }
    let checks = check_sweep_bounds(&result);
    let mut failed = Vec::new();
    let mut text = String::new();
    for c in &checks {
        let line = format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    write_file(&result.output_dir.join("bound_checks.txt"), &text)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn verify(a: VerifyArgs) -> Outcome {
    let report = verify_props(&a.env)?;
    let dir = resolve_output_path(&a.out.unwrap_or_else(|| PathBuf::from("props").join(&a.env)));
    let path = dir.join("certificates.toml");
    write_file(&path, &report.to_toml())?;
    let mut failed = Vec::new();
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    println!("certificates = {}", path.display());
    eprintln!("elapsed {:.2} s", report.elapsed_seconds);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}

fn render(a: RenderArgs) -> Outcome {
    let world = a.env.world()?;
    print!("{}", world.layout.render_ascii());
    Ok(())
}
