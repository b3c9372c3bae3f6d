//! Batch runner behind the `jump-bsde` binary.
//!
//! An experiment is described by a TOML file:
//!
//! ```toml
//! # or: model = "two_state.toml" (relative to this file)
//! [model]
//! states = ["up", "down"]
//! rates = [[0.0, 1.0], [1.0, 0.0]]   # jumps per unit time
//! horizon = 1.0                      # terminal time T
//!
//! [driver]
//! name = "linear"                    # zero | const | linear | osc_sqrtlog | finance_discount
//! a = -0.5
//! c = 0.2
//!
//! [terminal]
//! values = [1.0, 0.0]                # h(x), one per state
//!
//! [grid]
//! steps = 2000                       # number of time steps N
//! t0 = 0.0
//!
//! [start]
//! state = "up"
//!
//! [solver]
//! kind = "picard"                    # picard | direct | local
//! tol = 1e-12                        # squared solution-space distance
//! ```
//!
//! Optional sections: `[monte_carlo]` (`paths`, `seed`, `residual_tol`),
//! `[verify]` (`field`, a value-field CSV to check instead of solving),
//! `[stability]` (`ns`, `zero`, `tol`, `ball_samples`) and `[finance]`
//! (`sigma`, a scalar or a `K x K` matrix). Every output file carries the
//! SHA-256 fingerprint of the canonical JSON form of the effective
//! configuration: a `# fingerprint=<hex>` first line in CSV files and a
//! `fingerprint` field in JSON files.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{Driver, TerminalCondition, ValueField};
use crate::drivers::DriverSpec;
use crate::error::{Error, Result};
use crate::estimates::{
    additive_perturbations, check_apriori, stability_experiment, AprioriConstants, Perturbation,
    StabilityOptions,
};
use crate::finance::{feasibility_check, price_claim, MarketSpec, Volatility};
use crate::grid::TimeGrid;
use crate::markov::{write_trajectories_csv, MarginalLaw, MarkovModel, ModelConfig};
use crate::montecarlo::verify_pathwise;
use crate::solver::{
    solve_direct, solve_local, solve_picard, LocalOptions, PicardOptions, SolverChoice, TruncationSchedule,
};

/// Exit status: everything checked passed.
pub const EXIT_PASS: i32 = 0;
/// Exit status: the configuration or an input file is invalid.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status: a check failed.
pub const EXIT_CHECK: i32 = 2;
/// Exit status: the command line could not be parsed.
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Verify,
    Stability,
    Price,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Stability => "stability",
            Command::Price => "price",
        })
    }
}

/// Either an inline model table or a path to a file holding one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(String),
    Inline(ModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub steps: usize,
    pub t0: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { steps: 1000, t0: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StartSpec {
    /// Label of the starting state; the first state when absent.
    pub state: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Picard,
    Direct,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Picard stopping threshold on the squared distance between iterates.
    pub tol: f64,
    pub max_iter: usize,
    /// Threshold on the last Cauchy distance of the truncation cascade.
    pub cascade_tol: f64,
    /// Truncation radii, strictly increasing.
    pub radii: Vec<f64>,
    /// Subinterval length; `0.9 (1 - alpha) / 4` when absent.
    pub delta: Option<f64>,
    /// Picard threshold on each subinterval of the cascade.
    pub inner_tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            kind: SolverKind::Picard,
            tol: crate::solver::lipschitz::DEFAULT_TOL,
            max_iter: crate::solver::lipschitz::DEFAULT_MAX_ITER,
            cascade_tol: 1e-2,
            radii: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            delta: None,
            inner_tol: LocalOptions::default().picard.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSpec {
    pub paths: usize,
    pub seed: u64,
    /// Largest acceptable pathwise residual.
    pub residual_tol: f64,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        Self {
            paths: 10_000,
            seed: 0,
            residual_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    /// Value-field CSV to verify; the field is solved when absent.
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySpec {
    /// Perturbation indices `n`; the perturbed data are `f + 1/n`, `h + 1/n`.
    pub ns: Vec<f64>,
    /// Use unperturbed copies instead.
    pub zero: bool,
    pub tol: f64,
    pub ball_samples: usize,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self {
            ns: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            zero: false,
            tol: 1e-3,
            ball_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinanceSpec {
    pub sigma: Volatility,
}

impl Default for FinanceSpec {
    fn default() -> Self {
        Self {
            sigma: Volatility::Scalar(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub driver: DriverSpec,
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub start: StartSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub monte_carlo: MonteCarloSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub stability: StabilitySpec,
    #[serde(default)]
    pub finance: FinanceSpec,
}

/// Command-line overrides of configuration values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub grid: Option<usize>,
    /// The tolerance the command judges by: the solver tolerance for `solve`
    /// and `price`, the residual tolerance for `verify` and the final-distance
    /// tolerance for `stability`.
    pub tol: Option<f64>,
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub files: Vec<PathBuf>,
    /// One line per finding.
    pub messages: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// Reads a configuration and inlines a referenced model file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let ModelRef::Path(p) = &cfg.model {
            let model_path = base.join(p);
            let text = fs::read_to_string(&model_path)
                .map_err(|e| config_err(format!("cannot read model file {}: {e}", model_path.display())))?;
            let inline: ModelConfig =
                toml::from_str(&text).map_err(|e| config_err(format!("model file {}: {e}", model_path.display())))?;
            cfg.model = ModelRef::Inline(inline);
        }
        if let Some(f) = &cfg.verify.field {
            cfg.verify.field = Some(base.join(f).to_string_lossy().into_owned());
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, command: Command, o: &Overrides) {
        if let Some(s) = o.seed {
            self.monte_carlo.seed = s;
        }
        if let Some(p) = o.paths {
            self.monte_carlo.paths = p;
        }
        if let Some(n) = o.grid {
            self.grid.steps = n;
        }
        if let Some(t) = o.tol {
            match command {
                Command::Solve | Command::Price => self.solver.tol = t,
                Command::Verify => self.monte_carlo.residual_tol = t,
                Command::Stability => self.stability.tol = t,
                Command::Simulate => {}
            }
        }
    }

    /// SHA-256 of the canonical JSON form. For `verify`, a referenced field
    /// file enters through its content hash rather than its path.
    pub fn fingerprint(&self, command: Command) -> Result<String> {
        let mut value = serde_json::to_value(self).map_err(|e| config_err(e.to_string()))?;
        if let (Command::Verify, Some(path)) = (command, &self.verify.field) {
            let bytes = fs::read(path).map_err(|e| config_err(format!("cannot read field file {path}: {e}")))?;
            value["verify"]["field"] = serde_json::Value::String(hex(&Sha256::digest(&bytes)));
        }
        // serde_json maps keep their keys sorted
        let canonical = serde_json::to_string(&value).map_err(|e| config_err(e.to_string()))?;
        Ok(hex(&Sha256::digest(canonical.as_bytes())))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Validated objects built from a configuration.
struct Setup {
    model: MarkovModel,
    driver: Driver,
    h: TerminalCondition,
    law: MarginalLaw,
    x0: usize,
    solver: SolverChoice,
}

impl Setup {
    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let ModelRef::Inline(mc) = &cfg.model else {
            return Err(config_err("model file reference was not resolved"));
        };
        let model = mc.build().map_err(|e| config_err(format!("model: {e}")))?;
        let driver = cfg.driver.build().map_err(|e| config_err(format!("driver: {e}")))?;
        let h = TerminalCondition::new(cfg.terminal.values.clone()).map_err(|e| config_err(format!("terminal: {e}")))?;
        if h.len() != model.num_states() {
            return Err(config_err(format!(
                "terminal: {} values for {} states",
                h.len(),
                model.num_states()
            )));
        }
        if cfg.grid.steps < 2 {
            return Err(config_err("grid.steps must be at least 2"));
        }
        if !(cfg.grid.t0 >= 0.0 && cfg.grid.t0 < model.horizon()) {
            return Err(config_err(format!(
                "grid.t0 = {} must lie in [0, horizon = {})",
                cfg.grid.t0,
                model.horizon()
            )));
        }
        let grid = TimeGrid::uniform(cfg.grid.t0, model.horizon(), cfg.grid.steps)
            .map_err(|e| config_err(format!("grid: {e}")))?;
        let x0 = match &cfg.start.state {
            Some(label) => model.state_index(label).map_err(|e| config_err(format!("start.state: {e}")))?,
            None => 0,
        };
        let law = model.marginal_law(x0, &grid).map_err(|e| config_err(format!("grid: {e}")))?;
        let s = &cfg.solver;
        if !(s.tol > 0.0) || !(s.inner_tol > 0.0) || !(s.cascade_tol > 0.0) {
            return Err(config_err("solver tolerances must be positive"));
        }
        if s.max_iter == 0 {
            return Err(config_err("solver.max_iter must be positive"));
        }
        let picard = PicardOptions {
            tol: s.tol,
            max_iter: s.max_iter,
        };
        let solver = match s.kind {
            SolverKind::Picard => {
                if driver.global_lipschitz().is_none() {
                    return Err(config_err(format!(
                        "solver.kind = picard needs a globally Lipschitz driver; {} is not",
                        driver.name()
                    )));
                }
                SolverChoice::Picard(picard)
            }
            SolverKind::Direct => SolverChoice::Direct,
            SolverKind::Local => {
                let alpha = driver.alpha();
                let delta = s.delta.unwrap_or_else(|| TruncationSchedule::default_delta(alpha));
                let schedule = TruncationSchedule::new(s.radii.clone(), delta, alpha)
                    .map_err(|e| config_err(format!("solver: {e}")))?;
                SolverChoice::Local(
                    schedule,
                    LocalOptions {
                        picard: PicardOptions {
                            tol: s.inner_tol,
                            max_iter: s.max_iter,
                        },
                        cascade_tol: s.cascade_tol,
                        ..LocalOptions::default()
                    },
                )
            }
        };
        let mcs = &cfg.monte_carlo;
        if mcs.paths == 0 {
            return Err(config_err("monte_carlo.paths must be positive"));
        }
        if !(mcs.residual_tol > 0.0) {
            return Err(config_err("monte_carlo.residual_tol must be positive"));
        }
        let st = &cfg.stability;
        if !(st.tol > 0.0) {
            return Err(config_err("stability.tol must be positive"));
        }
        if st.ns.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(config_err("stability.ns must be positive"));
        }
        if st.ball_samples < 1000 {
            return Err(config_err("stability.ball_samples must be at least 1000"));
        }
        Ok(Self {
            model,
            driver,
            h,
            law,
            x0,
            solver,
        })
    }
}

/// Writes `body` to `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, body: &[u8]) -> Result<PathBuf> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(body)?;
    tmp.flush()?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

fn csv_with_fingerprint(fingerprint: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = format!("# fingerprint={fingerprint}\n").into_bytes();
    write(&mut buf)?;
    Ok(buf)
}

fn json_with_fingerprint(fingerprint: &str, body: impl Serialize) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(body).map_err(|e| Error::Config(e.to_string()))?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("fingerprint".into(), serde_json::Value::String(fingerprint.to_string()));
    }
    let mut out = serde_json::to_vec_pretty(&value).map_err(|e| Error::Config(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

struct Writer<'a> {
    dir: &'a Path,
    fingerprint: String,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let body = csv_with_fingerprint(&self.fingerprint, write)?;
        self.files.push(write_atomic(self.dir, name, &body)?);
        Ok(())
    }

    fn json(&mut self, name: &str, body: impl Serialize) -> Result<()> {
        let body = json_with_fingerprint(&self.fingerprint, body)?;
        self.files.push(write_atomic(self.dir, name, &body)?);
        Ok(())
    }
}

/// Loads the configuration at `config`, applies the overrides and runs
/// `command`, writing reports into `out`.
pub fn run(command: Command, config: &Path, out: &Path, overrides: &Overrides) -> Outcome {
    let cfg = match ExperimentConfig::load(config) {
        Ok(mut c) => {
            c.apply(command, overrides);
            c
        }
        Err(e) => return failure(EXIT_CONFIG, e),
    };
    run_config(command, &cfg, out)
}

fn failure(code: i32, e: Error) -> Outcome {
    Outcome {
        code,
        files: Vec::new(),
        messages: vec![e.to_string()],
    }
}

/// Runs `command` on an already loaded configuration.
pub fn run_config(command: Command, cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let setup = match Setup::build(cfg) {
        Ok(s) => s,
        Err(e) => return failure(EXIT_CONFIG, e),
    };
    let fingerprint = match cfg.fingerprint(command) {
        Ok(f) => f,
        Err(e) => return failure(EXIT_CONFIG, e),
    };
    if let Err(e) = fs::create_dir_all(out) {
        return failure(EXIT_CONFIG, config_err(format!("cannot create {}: {e}", out.display())));
    }
    let mut w = Writer {
        dir: out,
        fingerprint,
        files: Vec::new(),
    };
    let mut messages = Vec::new();
    let result = match command {
        Command::Solve => cmd_solve(&setup, &mut w, &mut messages),
        Command::Simulate => cmd_simulate(cfg, &setup, &mut w, &mut messages),
        Command::Verify => cmd_verify(cfg, &setup, &mut w, &mut messages),
        Command::Stability => cmd_stability(cfg, &setup, &mut w, &mut messages),
        Command::Price => cmd_price(cfg, &setup, &mut w, &mut messages),
    };
    match result {
        Ok(pass) => Outcome {
            code: if pass { EXIT_PASS } else { EXIT_CHECK },
            files: w.files,
            messages,
        },
        Err(e) => {
            let code = match e {
                Error::Config(_) | Error::Io(_) => EXIT_CONFIG,
                _ => EXIT_CHECK,
            };
            messages.push(e.to_string());
            Outcome {
                code,
                files: w.files,
                messages,
            }
        }
    }
}

fn cmd_solve(s: &Setup, w: &mut Writer<'_>, msgs: &mut Vec<String>) -> Result<bool> {
    let (u, pass) = match &s.solver {
        SolverChoice::Picard(opts) => {
            let (u, diag) = solve_picard(&s.model, &s.law, &s.driver, &s.h, *opts)?;
            w.csv("diagnostics.csv", |b| diag.write_csv(b))?;
            msgs.push(format!(
                "picard: {} iterations, last squared distance {:e}, converged = {}",
                diag.iterates,
                diag.distances.last().copied().unwrap_or(0.0),
                diag.converged
            ));
            (u, diag.converged)
        }
        SolverChoice::Direct => {
            let u = solve_direct(&s.model, &s.driver, &s.h, s.law.grid())?;
            msgs.push("direct: integrated".into());
            (u, true)
        }
        SolverChoice::Local(schedule, opts) => {
            let (u, diag) = solve_local(&s.model, &s.law, &s.driver, &s.h, schedule, *opts)?;
            w.csv("cascade.csv", |b| diag.write_csv(b))?;
            msgs.push(format!(
                "local: cascade distances {:?}, converged = {}",
                diag.cauchy_distances, diag.converged
            ));
            (u, diag.converged)
        }
    };
    w.csv("u.csv", |b| u.write_csv(b, &s.model))?;
    Ok(pass)
}

fn cmd_simulate(cfg: &ExperimentConfig, s: &Setup, w: &mut Writer<'_>, msgs: &mut Vec<String>) -> Result<bool> {
    let mc = &cfg.monte_carlo;
    let t0 = s.law.grid().start();
    let paths = (0..mc.paths as u64)
        .map(|i| Ok((i, s.model.simulate(t0, s.x0, crate::markov::PathSeed::new(mc.seed, i))?)))
        .collect::<Result<Vec<_>>>()?;
    let jumps: usize = paths.iter().map(|(_, p)| p.num_jumps()).sum();
    w.csv("trajectories.csv", |b| write_trajectories_csv(b, &s.model, &paths))?;
    msgs.push(format!("simulate: {} paths, {jumps} jumps", mc.paths));
    Ok(true)
}

fn load_or_solve(cfg: &ExperimentConfig, s: &Setup) -> Result<ValueField> {
    match &cfg.verify.field {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| config_err(format!("cannot open field file {path}: {e}")))?;
            let u = ValueField::read_csv(std::io::BufReader::new(file), &s.model)
                .map_err(|e| config_err(format!("field file {path}: {e}")))?;
            if !u.grid().same_as(s.law.grid()) {
                return Err(config_err(format!(
                    "field file {path} does not live on the configured grid"
                )));
            }
            Ok(u)
        }
        None => s.solver.solve(&s.model, &s.law, &s.driver, &s.h),
    }
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    stats: &'a crate::montecarlo::ResidualStats,
    residual_tol: f64,
    flagged_checkpoints: Vec<usize>,
    martingale_within_3_stderr: bool,
    pass: bool,
}

fn cmd_verify(cfg: &ExperimentConfig, s: &Setup, w: &mut Writer<'_>, msgs: &mut Vec<String>) -> Result<bool> {
    let u = load_or_solve(cfg, s)?;
    let mc = &cfg.monte_carlo;
    let t0 = s.law.grid().start();
    let stats = verify_pathwise(&s.model, &s.driver, &u, &s.h, t0, s.x0, mc.paths, mc.seed)?;
    let flagged = stats.flagged(mc.residual_tol);
    let residual_pass = flagged.is_empty();
    w.json(
        "residuals.json",
        VerifyReport {
            stats: &stats,
            residual_tol: mc.residual_tol,
            flagged_checkpoints: flagged.clone(),
            martingale_within_3_stderr: stats.martingale_within(3.0),
            pass: residual_pass,
        },
    )?;
    let constants = AprioriConstants::for_problem(&s.law, &s.driver, &s.h)?;
    let apriori = check_apriori(&s.model, &s.law, &u, &constants)?;
    w.csv("apriori.csv", |b| apriori.write_csv(b))?;
    msgs.push(format!(
        "verify: max residual {:e} (tol {:e}), martingale mean {:e} +- {:e}",
        stats.max_abs_residual, mc.residual_tol, stats.martingale_mean, stats.martingale_stderr
    ));
    for j in &flagged {
        msgs.push(format!(
            "verify: checkpoint {j} at t = {} has residual {:e}",
            stats.checkpoint_times[*j], stats.checkpoint_max[*j]
        ));
    }
    for r in apriori.rows.iter().filter(|r| !r.pass) {
        msgs.push(format!("verify: {} violated ({} > {})", r.bound_name, r.measured_value, r.bound_value));
    }
    Ok(residual_pass && apriori.passes())
}

fn cmd_stability(cfg: &ExperimentConfig, s: &Setup, w: &mut Writer<'_>, msgs: &mut Vec<String>) -> Result<bool> {
    let st = &cfg.stability;
    let perturbations = if st.zero {
        st.ns
            .iter()
            .map(|&n| Perturbation {
                n,
                driver: s.driver.shifted(0.0),
                terminal: s.h.clone(),
            })
            .collect()
    } else {
        additive_perturbations(&s.driver, &s.h, &st.ns)?
    };
    let opts = StabilityOptions {
        tol: st.tol,
        ball_samples: st.ball_samples,
        bound_radii: match &s.solver {
            SolverChoice::Local(schedule, _) => schedule.radii().to_vec(),
            _ => StabilityOptions::default().bound_radii,
        },
        ..StabilityOptions::default()
    };
    let report = stability_experiment(&s.model, &s.law, &s.driver, &s.h, &perturbations, &s.solver, &opts)?;
    w.csv("stability.csv", |b| report.write_csv(b))?;
    w.csv("stability_bounds.csv", |b| report.bound_rows().write_csv(b))?;
    msgs.push(format!("stability: distances {:?}", report.distances()));
    Ok(report.passes())
}

fn cmd_price(cfg: &ExperimentConfig, s: &Setup, w: &mut Writer<'_>, msgs: &mut Vec<String>) -> Result<bool> {
    let spec = MarketSpec::new(s.model.clone(), cfg.finance.sigma.clone(), s.driver.clone(), s.h.clone())?;
    let result = price_claim(&spec, &s.law, &s.solver)?;
    w.csv("pricing.csv", |b| result.write_csv(b, &s.model))?;
    let report = feasibility_check(&spec, &result);
    w.json("feasibility.json", &report)?;
    msgs.push(format!(
        "price: u(t0, start) = {}, min u = {:e}",
        result.price.value(0, s.x0),
        result.feasibility_min
    ));
    Ok(report.pass)
}
