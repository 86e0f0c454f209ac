//! Experiment configs and epsilon sweeps with on-disk, resumable results.
//!
//! An output directory holds
//!
//! * `config.toml`: the parsed config as it was run;
//! * `cells/`: one file per (attack, ε, seed) cell, written as it finishes;
//! * `results.csv`: all cells, sorted;
//! * `manifest.toml`: seeds, versions, reference returns;
//! * `timing.txt`: wall-clock time, the only non-reproducible file;
//! * `returns.svg` when `chart = true`.

mod chart;
mod props;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use chart::render_svg;
pub use props::{
    check_sweep_bounds, enumeration_budget, exact_victim, verify_fig3, verify_fig4, verify_props,
    verify_random_inclusion, Check, PropsReport,
};

use crate::analysis::{compute_bound_report, BoundReport};
use crate::attacks::{
    induced_tabular_policy, AttackSpace, Attacker, MadVariant, OptimizerConfig, OptimizerMethod, QTable,
    StrategicTimer,
};
use crate::envs::{
    build_named, discrete_budget_from_radius, BudgetMode, EmbeddingKind, GridWorld, GridworldLayout, Norm,
    PerturbationBudget,
};
use crate::error::{Error, Result};
use crate::mdp::{evaluate_policy, min_return, sample_trajectories, solve_optimal, ActionProbs, MdpSpec, DEFAULT_HORIZON};
use crate::policy::{
    distill_feedforward, load_checkpoint, train_deceptive, DistillConfig, Policy, PolicyKind, TrainAlgorithm,
    TrainConfig,
};

/// Overrides the root that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "OBSATTACK_OUTPUT_ROOT";
pub const CSV_HEADER: &str = "attack,epsilon,seed,return,beta0,beta1,C,alpha_hat,lemma1_rhs,lemma1_holds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimSource {
    /// MLP fitted to the exact optimal greedy policy.
    Distill,
    /// Sharpened tabular softmax of the exact optimal greedy policy.
    ExactGreedy,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSpec {
    pub source: VictimSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_distill_steps")]
    pub steps: usize,
    #[serde(default = "default_distill_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
}

fn default_hidden() -> Vec<usize> {
    DistillConfig::default().hidden
}
fn default_distill_steps() -> usize {
    DistillConfig::default().steps
}
fn default_distill_lr() -> f64 {
    DistillConfig::default().learning_rate
}
fn default_sharpness() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeceptiveSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_algorithm")]
    pub algorithm: TrainAlgorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Softmax temperature of the trained policy; the algorithm's preset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
}

fn default_algorithm() -> TrainAlgorithm {
    TrainAlgorithm::QLearning
}
fn default_ensemble() -> usize {
    5
}

impl DeceptiveSpec {
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::for_algorithm(self.algorithm);
        cfg.seed = self.seed;
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Label in the `attack` column.
    pub name: String,
    pub space: AttackSpace,
    #[serde(default = "default_method")]
    pub method: OptimizerMethod,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// PGD step size as a fraction of ε; ignored when `step_size` is set.
    #[serde(default = "default_step_ratio")]
    pub step_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub entropy_weight: f64,
    #[serde(default = "yes")]
    pub best_iterate_tracking: bool,
    #[serde(default = "yes")]
    pub fgsm_warm_start: bool,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub mad_variant: MadVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timer: Option<StrategicTimer>,
    /// Per-attack ε grid replacing the experiment's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
}

fn default_method() -> OptimizerMethod {
    OptimizerMethod::Pgd
}
fn default_iterations() -> usize {
    10
}
fn default_step_ratio() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

impl AttackSpec {
    pub fn identity() -> Self {
        AttackSpec {
            name: "identity".into(),
            space: AttackSpace::Identity,
            method: default_method(),
            iterations: 1,
            step_ratio: default_step_ratio(),
            step_size: None,
            entropy_weight: 0.0,
            best_iterate_tracking: true,
            fgsm_warm_start: true,
            random_start: false,
            mad_variant: MadVariant::default(),
            timer: None,
            epsilons: None,
        }
    }

    pub fn optimizer(&self, epsilon: f64) -> OptimizerConfig {
        let step = self.step_size.unwrap_or(self.step_ratio * epsilon);
        OptimizerConfig {
            method: self.method,
            iterations: if self.method == OptimizerMethod::Fgsm { 1 } else { self.iterations },
            // a zero budget never steps, but the config must stay valid
            step_size: if step > 0.0 { step } else { f64::MIN_POSITIVE },
            entropy_weight: self.entropy_weight,
            best_iterate_tracking: self.best_iterate_tracking,
            fgsm_warm_start: self.fgsm_warm_start,
            random_start: self.random_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// A shipped world (`fig3`, `fig4`, ...); exclusive with `env_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    /// A gridworld layout file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_file: Option<PathBuf>,
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingKind,
    #[serde(default = "default_mode")]
    pub budget_mode: BudgetMode,
    pub norm: Norm,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Exact evaluation; when false returns are Monte-Carlo means.
    #[serde(default = "yes")]
    pub exact: bool,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "yes")]
    pub bounds: bool,
    #[serde(default)]
    pub chart: bool,
    pub output_dir: PathBuf,
    pub victim: VictimSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deceptive: Option<DeceptiveSpec>,
    pub attacks: Vec<AttackSpec>,
}

fn default_embedding() -> EmbeddingKind {
    EmbeddingKind::Coordinate
}
fn default_mode() -> BudgetMode {
    BudgetMode::ContinuousBall
}
fn default_episodes() -> usize {
    10_000
}

fn strictly_increasing(grid: &[f64]) -> bool {
    grid.iter().all(|e| e.is_finite() && *e >= 0.0) && grid.windows(2).all(|w| w[0] < w[1])
}

impl ExperimentConfig {
    /// Parse a config; relative paths inside it resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        };
        rebase(&mut cfg.env_file);
        rebase(&mut cfg.victim.checkpoint);
        if let Some(d) = cfg.deceptive.as_mut() {
            rebase(&mut d.checkpoint);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.env, &self.env_file) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("give exactly one of `env` and `env_file`".into())),
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one attack is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.epsilons.is_empty() || !strictly_increasing(&self.epsilons) {
            return Err(Error::Config("epsilons must be a nonempty, strictly increasing list of values >= 0".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attacks {
            if !names.insert(a.name.as_str()) {
                return Err(Error::Config(format!("duplicate attack name `{}`", a.name)));
            }
            if a.name.contains(',') || a.name.contains('/') {
                return Err(Error::Config(format!("attack name `{}` may not contain ',' or '/'", a.name)));
            }
            if let Some(grid) = &a.epsilons {
                if grid.is_empty() || !strictly_increasing(grid) {
                    return Err(Error::Config(format!("epsilons of `{}` must be strictly increasing", a.name)));
                }
            }
            if a.space == AttackSpace::H3TwoStage && self.deceptive.is_none() {
                return Err(Error::Config(format!("`{}` needs a [deceptive] section", a.name)));
            }
            if a.space == AttackSpace::H2StrategicUntargeted && a.timer.is_none() {
                return Err(Error::Config(format!("`{}` needs a timer", a.name)));
            }
            let needs_gradient = !matches!(a.space, AttackSpace::Identity | AttackSpace::Random);
            if needs_gradient
                && self.budget_mode == BudgetMode::ContinuousBall
                && self.victim.source == VictimSource::ExactGreedy
            {
                return Err(Error::Config(format!(
                    "`{}` needs input gradients, which a tabular victim lacks in continuous mode",
                    a.name
                )));
            }
        }
        if !self.exact && self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1 when exact = false".into()));
        }
        if self.victim.source == VictimSource::Checkpoint && self.victim.checkpoint.is_none() {
            return Err(Error::Config("victim source `checkpoint` needs a checkpoint path".into()));
        }
        Ok(())
    }

    /// Attacks as run: an identity control first unless one is configured.
    pub fn effective_attacks(&self) -> Vec<AttackSpec> {
        let mut out = Vec::with_capacity(self.attacks.len() + 1);
        if !self.attacks.iter().any(|a| a.space == AttackSpace::Identity) {
            out.push(AttackSpec::identity());
        }
        out.extend(self.attacks.iter().cloned());
        out
    }

    /// Output directory, under [`OUTPUT_ROOT_ENV`] when set and relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output_path(&self.output_dir)
    }

    /// Hash of everything that affects results; the output location is left
    /// out so a moved or copied run directory still resumes.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        format!("{:016x}", fnv64(c.to_toml().as_bytes()))
    }
}

/// `path` under [`OUTPUT_ROOT_ENV`] when that is set and `path` is relative.
pub fn resolve_output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Everything a sweep needs besides the attacks.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub world: GridWorld,
    pub victim: Policy,
    pub deceptive: Option<Policy>,
    pub victim_q: QTable,
    pub optimal_return: f64,
    pub min_return: f64,
    pub victim_return: f64,
    pub deceptive_return: Option<f64>,
}

fn load_world(cfg: &ExperimentConfig) -> Result<GridWorld> {
    let world = match (&cfg.env, &cfg.env_file) {
        (Some(name), _) => build_named(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            GridWorld::from_layout(GridworldLayout::from_toml(&text)?, cfg.embedding)?
        }
        (None, None) => return Err(Error::Config("no environment given".into())),
    };
    Ok(world.with_embedding(cfg.embedding))
}

/// Build the world, victim and deceptive policy of a config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let world = load_world(cfg)?;
    let optimal = solve_optimal(&world.mdp)?;
    let v = &cfg.victim;
    let victim = match v.source {
        VictimSource::Checkpoint => load_checkpoint(v.checkpoint.as_deref().expect("validated"))?,
        VictimSource::ExactGreedy => exact_victim_with(&world, v.sharpness)?,
        VictimSource::Distill => distill_feedforward(
            &optimal.greedy,
            world.mdp.num_actions(),
            &world.embedding,
            &DistillConfig {
                hidden: v.hidden.clone(),
                steps: v.steps,
                learning_rate: v.learning_rate,
                seed: v.seed,
            },
        )?,
    };
    if victim.input_dim() != world.embedding.dim() {
        return Err(Error::Config(format!(
            "victim expects observations of dimension {}, the embedding has {}",
            victim.input_dim(),
            world.embedding.dim()
        )));
    }
    if victim.kind() == PolicyKind::TabularSoftmax
        && cfg.budget_mode == BudgetMode::ContinuousBall
        && cfg
            .attacks
            .iter()
            .any(|a| !matches!(a.space, AttackSpace::Identity | AttackSpace::Random))
    {
        return Err(Error::Config(
            "gradient attacks in continuous mode need a feedforward victim".into(),
        ));
    }
    let victim_eval = evaluate_policy(&world.mdp, &victim.induced_table(&world.embedding)?)?;
    let deceptive = match &cfg.deceptive {
        None => None,
        Some(d) => Some(match &d.checkpoint {
            Some(path) => load_checkpoint(path)?,
            None => train_deceptive(&world.mdp, &world.embedding, &d.train_config(), d.ensemble)?.policy,
        }),
    };
    let deceptive_return = match &deceptive {
        Some(p) => Some(evaluate_policy(&world.mdp, &p.induced_table(&world.embedding)?)?.return_value),
        None => None,
    };
    Ok(Experiment {
        victim_q: QTable::new(victim_eval.q_values.clone(), world.embedding.clone())?,
        optimal_return: optimal.return_value,
        min_return: min_return(&world.mdp)?,
        victim_return: victim_eval.return_value,
        deceptive_return,
        world,
        victim,
        deceptive,
    })
}

pub(crate) fn exact_victim_with(world: &GridWorld, sharpness: f64) -> Result<Policy> {
    let optimal = solve_optimal(&world.mdp)?;
    Policy::tabular_greedy(&optimal.greedy, world.mdp.num_actions(), world.embedding.clone(), sharpness)
}

impl Experiment {
    pub fn budget(&self, mode: BudgetMode, epsilon: f64, norm: Norm) -> Result<PerturbationBudget> {
        match mode {
            BudgetMode::ContinuousBall => PerturbationBudget::continuous(epsilon, norm),
            BudgetMode::DiscreteSet => discrete_budget_from_radius(&self.world.embedding, epsilon, norm),
        }
    }

    pub fn attacker(&self, spec: &AttackSpec, budget: PerturbationBudget, seed: u64) -> Result<Attacker> {
        let eps = budget.epsilon;
        let mut a = Attacker::new(spec.space, budget)
            .with_optimizer(spec.optimizer(eps))
            .with_mad_variant(spec.mad_variant)
            .with_embedding(self.world.embedding.clone())
            .with_seed(seed);
        match spec.space {
            AttackSpace::H3TwoStage => {
                let target = self
                    .deceptive
                    .clone()
                    .ok_or_else(|| Error::Config(format!("`{}` needs a deceptive policy", spec.name)))?;
                a = a.with_target(target);
            }
            AttackSpace::H3CriticTargeted => a = a.with_q(self.victim_q.clone()),
            AttackSpace::H2StrategicUntargeted => {
                let timer = spec
                    .timer
                    .ok_or_else(|| Error::Config(format!("`{}` needs a timer", spec.name)))?;
                a = a.with_timer(timer);
            }
            _ => {}
        }
        a.validate()?;
        Ok(a)
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: String,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<BoundReport>,
    /// The attacked policy `π_h`.
    pub policy: ActionProbs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellFile {
    fingerprint: String,
    row: SweepRow,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub output_dir: PathBuf,
    pub mdp: MdpSpec,
    pub deceptive_table: Option<ActionProbs>,
    pub victim_return: f64,
    pub optimal_return: f64,
    pub deceptive_return: Option<f64>,
    /// Cells computed by this call (the rest were loaded from disk).
    pub computed: usize,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let b = match &r.report {
                Some(b) => format!(
                    "{},{},{},{},{},{}",
                    b.beta0, b.beta1, b.c, b.alpha_hat, b.lemma1_rhs, b.lemma1_holds
                ),
                None => ",,,,,".into(),
            };
            out.push_str(&format!("{},{},{},{},{b}\n", r.attack, r.epsilon, r.seed, r.ret));
        }
        out
    }

    pub fn rows_for<'a>(&'a self, attack: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows.iter().filter(move |r| r.attack == attack)
    }

    pub fn row(&self, attack: &str, epsilon: f64, seed: u64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.epsilon == epsilon && r.seed == seed)
    }
}

fn cell_path(dir: &Path, attack: &str, epsilon: f64, seed: u64) -> PathBuf {
    dir.join("cells").join(format!("{attack}_eps{epsilon}_seed{seed}.toml"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Run every (attack, ε, seed) cell, skipping cells already on disk for the
/// same config, and write the output directory.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let started = Instant::now();
    let attacks = cfg.effective_attacks();
    let exp = prepare(cfg)?;
    // surface configuration errors before any cell is computed
    let largest = cfg.epsilons.iter().cloned().fold(0.0, f64::max);
    for spec in &attacks {
        exp.attacker(spec, exp.budget(cfg.budget_mode, largest, cfg.norm)?, cfg.seeds[0])?;
    }

    let dir = cfg.resolved_output_dir();
    let fingerprint = cfg.fingerprint();
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let deceptive_table = match &exp.deceptive {
        Some(p) => Some(p.induced_table(&exp.world.embedding)?),
        None => None,
    };

    let mut rows = Vec::new();
    let mut computed = 0;
    for spec in &attacks {
        let grid = spec.epsilons.as_ref().unwrap_or(&cfg.epsilons);
        for &epsilon in grid {
            for &seed in &cfg.seeds {
                let path = cell_path(&dir, &spec.name, epsilon, seed);
                if let Some(row) = read_cell(&path, &fingerprint) {
                    rows.push(row);
                    continue;
                }
                let attacker = exp.attacker(spec, exp.budget(cfg.budget_mode, epsilon, cfg.norm)?, seed)?;
                let table = induced_tabular_policy(&exp.victim, &attacker, &exp.world.embedding)?;
                let ret = if cfg.exact {
                    evaluate_policy(&exp.world.mdp, &table)?.return_value
                } else {
                    let batch = sample_trajectories(&exp.world.mdp, &table, cfg.episodes, DEFAULT_HORIZON, seed)?;
                    let returns = batch.discounted_returns(exp.world.mdp.gamma());
                    returns.iter().sum::<f64>() / returns.len() as f64
                };
                let report = match (&deceptive_table, cfg.bounds) {
                    (Some(d), true) => Some(compute_bound_report(&exp.world.mdp, &table, d, None)?),
                    _ => None,
                };
                let row = SweepRow {
                    attack: spec.name.clone(),
                    epsilon,
                    seed,
                    ret,
                    report,
                    policy: table,
                };
                let cell = CellFile {
                    fingerprint: fingerprint.clone(),
                    row: row.clone(),
                };
                write(&path, &toml::to_string(&cell).expect("cell serializes"))?;
                rows.push(row);
                computed += 1;
            }
        }
    }
    let order: BTreeMap<&str, usize> = attacks.iter().enumerate().map(|(i, a)| (a.name.as_str(), i)).collect();
    rows.sort_by(|a, b| {
        order[a.attack.as_str()]
            .cmp(&order[b.attack.as_str()])
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.seed.cmp(&b.seed))
    });

    let result = SweepResult {
        rows,
        output_dir: dir.clone(),
        mdp: exp.world.mdp.clone(),
        deceptive_table,
        victim_return: exp.victim_return,
        optimal_return: exp.optimal_return,
        deceptive_return: exp.deceptive_return,
        computed,
    };
    write(&dir.join("results.csv"), &result.to_csv())?;
    write(&dir.join("manifest.toml"), &manifest(cfg, &exp, &result))?;
    if cfg.chart {
        write(&dir.join("returns.svg"), &render_svg(&result, &cfg.name))?;
    }
    write(
        &dir.join("timing.txt"),
        &format!(
            "wall_seconds = {:.3}\ncells_computed = {computed}\n",
            started.elapsed().as_secs_f64()
        ),
    )?;
    Ok(result)
}

fn read_cell(path: &Path, fingerprint: &str) -> Option<SweepRow> {
    let text = fs::read_to_string(path).ok()?;
    let cell: CellFile = toml::from_str(&text).ok()?;
    (cell.fingerprint == fingerprint).then_some(cell.row)
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    crate_version: &'a str,
    config_fingerprint: String,
    seeds: &'a [u64],
    epsilons: &'a [f64],
    attacks: Vec<&'a str>,
    rows: usize,
    optimal_return: f64,
    min_return: f64,
    victim_return: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    deceptive_return: Option<f64>,
}

fn manifest(cfg: &ExperimentConfig, exp: &Experiment, result: &SweepResult) -> String {
    let attacks = cfg.effective_attacks();
    let m = Manifest {
        name: &cfg.name,
        crate_version: env!("CARGO_PKG_VERSION"),
        config_fingerprint: cfg.fingerprint(),
        seeds: &cfg.seeds,
        epsilons: &cfg.epsilons,
        attacks: attacks.iter().map(|a| a.name.as_str()).collect(),
        rows: result.rows.len(),
        optimal_return: exp.optimal_return,
        min_return: exp.min_return,
        victim_return: exp.victim_return,
        deceptive_return: exp.deceptive_return,
    };
    toml::to_string(&m).expect("manifest serializes")
}
