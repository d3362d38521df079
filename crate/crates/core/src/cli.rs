//! The `hitdp` command line: argument parsing, subcommands, output files and
//! the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ControlSpec, EvaluateConfig, Problem, RunConfig};
use crate::density;
use crate::error::{Error, Result};
use crate::evaluate::{
    convergence_sweep, label_index, mc_value, merton_oracle, q_slack, ConstantControl, Control, McEstimate, RolloutSpec,
    StageArgmaxControl, TreePolicyControl,
};
use crate::io::fmt_f64;
use crate::kernel::{discretize_kernel, kernel_prob, KernelQuery};
use crate::rng::derive_seed;
use crate::skeleton::{default_steps, sample_skeleton, SkeletonConfig};
use crate::solver::{backward_dp, build_tree, certify, hjb_residual, leaf_values, Certificate, HjbResidual, Solution, SolveConfig, Tree};
use crate::structures::{FbmStructure, Payoff, PdSdeStructure, PortfolioStructure, StateStructure};

#[derive(Debug, Parser)]
#[command(name = "hitdp", version, about = "Near-optimal controls on Brownian hitting-time skeletons")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving outputs and the manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Total optimality budget; overrides `solve.epsilon_total`.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Tabulate the exit-time density, both series, the truncation bound and the CDF.
    Density {
        /// Evaluation points; defaults to a 40-point grid on (0, 3].
        #[arg(long)]
        x: Vec<f64>,
        /// Series terms.
        #[arg(long, default_value_t = 25)]
        terms: usize,
    },
    /// Sample skeleton paths and report step statistics.
    Skeleton,
    /// Discretize the one-step kernel and check its mass.
    Kernel,
    /// Solve the dynamic program on the tree.
    Solve,
    /// Monte Carlo evaluation of a policy table or a simple control.
    Evaluate {
        /// Solution CSV written by `solve`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Solve across a list of skeleton scales.
    Sweep,
    /// End-to-end portfolio run against the Merton reference.
    Portfolio,
}

const DEFAULT_SEED: u64 = 1;

/// Entry point used by `main`; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(message) => {
            if !cli.common.quiet {
                println!("{message}");
            }
            0
        }
        Err(e) => {
            eprintln!("hitdp: {e}");
            e.exit_code()
        }
    }
}

/// Runs the parsed command inside a pool of the requested size and writes
/// the manifest. Returns a one-line summary.
pub fn execute(cli: &Cli) -> Result<String> {
    let start = Instant::now();
    let (mut cfg, raw) = match &cli.common.config {
        Some(p) => {
            let (c, b) = RunConfig::load(p)?;
            (c, Some(b))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(e) = cli.common.epsilon {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::config(format!("--epsilon must be positive, got {e}")));
        }
        if let Some(s) = cfg.solve.as_mut() {
            s.epsilon_total = e;
        }
    }
    let seed = cli.common.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    cfg.seed = Some(seed);
    let threads = match cli.common.threads {
        Some(0) => return Err(Error::config("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    std::fs::create_dir_all(&cli.common.out_dir)
        .map_err(|e| Error::Io { path: cli.common.out_dir.display().to_string(), source: e })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start {threads} worker threads: {e}")))?;
    let mut out = Outputs { dir: cli.common.out_dir.clone(), files: Vec::new() };
    let message = pool.install(|| dispatch(cli, &cfg, seed, &mut out))?;

    let manifest = json!({
        "tool": "hitdp",
        "versions": { "hitdp": env!("CARGO_PKG_VERSION"), "manifest": 1 },
        "subcommand": subcommand_name(&cli.command),
        "arguments": arguments(&cli.command),
        "config_path": cli.common.config.as_ref().map(|p| p.display().to_string()),
        "config_sha256": raw.as_ref().map(|b| hex::encode(Sha256::digest(b))),
        "effective_config": cfg,
        "seed": seed,
        "epsilon_override": cli.common.epsilon,
        "threads": threads,
        "outputs": out.files,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    out.json_untracked("manifest.json", &manifest)?;
    Ok(message)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Density { .. } => "density",
        Command::Skeleton => "skeleton",
        Command::Kernel => "kernel",
        Command::Solve => "solve",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep => "sweep",
        Command::Portfolio => "portfolio",
    }
}

fn arguments(c: &Command) -> serde_json::Value {
    match c {
        Command::Density { x, terms } => json!({ "x": x, "terms": terms }),
        Command::Evaluate { policy } => json!({ "policy": policy.as_ref().map(|p| p.display().to_string()) }),
        _ => json!({}),
    }
}

#[derive(Debug, Serialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let io = |e| Error::Io { path: path.display().to_string(), source: e };
        let mut f = BufWriter::new(File::create(&path).map_err(io)?);
        f.write_all(bytes).map_err(io)?;
        f.flush().map_err(io)
    }

    fn record(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write_bytes(name, bytes)?;
        self.files.push(OutputFile { file: name.into(), sha256: hex::encode(Sha256::digest(bytes)) });
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let err = |e: csv::Error| Error::Io { path: name.into(), source: e.into() };
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io { path: name.into(), source: e.into_error() })?;
        self.record(name, &bytes)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let bytes = json_bytes(v)?;
        self.record(name, &bytes)
    }

    fn json_untracked<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        self.write_bytes(name, &json_bytes(v)?)
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::numerical(format!("cannot serialize output: {e}")))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn dispatch(cli: &Cli, cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<String> {
    match &cli.command {
        Command::Density { x, terms } => run_density(x, *terms, out),
        Command::Skeleton => run_skeleton(cfg, seed, out),
        Command::Kernel => run_kernel(cfg, out),
        Command::Solve => with_problem(cfg, |p| p.solve(cfg, out)),
        Command::Evaluate { policy } => with_problem(cfg, |p| p.evaluate(cfg, policy.as_deref(), seed, out)),
        Command::Sweep => run_sweep(cfg, out),
        Command::Portfolio => run_portfolio(cfg, seed, out),
    }
}

fn run_density(xs: &[f64], terms: usize, out: &mut Outputs) -> Result<String> {
    if terms == 0 {
        return Err(Error::config("--terms must be at least 1"));
    }
    let grid: Vec<f64> = if xs.is_empty() { (1..=40).map(|i| 0.075 * i as f64).collect() } else { xs.to_vec() };
    let mut rows = Vec::with_capacity(grid.len());
    for &x in &grid {
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::config(format!("--x must be positive and finite, got {x}")));
        }
        rows.push(vec![
            fmt_f64(x),
            terms.to_string(),
            fmt_f64(density::density(x)),
            fmt_f64(density::small_time_series(x, terms)),
            fmt_f64(density::large_time_series(x, terms)),
            fmt_f64(density::truncation_bound(x, terms)?),
            fmt_f64(density::cdf(x)),
        ]);
    }
    out.csv("density.csv", &["x", "terms", "density", "small_time_series", "large_time_series", "truncation_bound", "cdf"], &rows)?;
    Ok(format!("density: {} rows", rows.len()))
}

fn run_skeleton(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<String> {
    let sk = cfg.skeleton.clone().unwrap_or_default();
    let steps = sk.steps.unwrap_or_else(|| default_steps(sk.epsilon_k, sk.dim, sk.horizon));
    let scfg = SkeletonConfig::new(sk.epsilon_k, sk.dim, sk.horizon)?.with_steps(steps)?;
    if sk.paths == 0 {
        return Err(Error::config("skeleton.paths must be at least 1"));
    }
    let paths: Vec<_> = (0..sk.paths as u64).into_par_iter().map(|i| sample_skeleton(&scfg, derive_seed(seed, i))).collect::<Result<_>>()?;
    let e2 = sk.epsilon_k * sk.epsilon_k;
    // Each coordinate's first hit time is a copy of ε²τ. Later gaps are
    // length-biased for d > 1 because the path stops at a fixed step count.
    let mut scaled = Vec::new();
    let mut plus = Vec::new();
    let mut terminal = Vec::new();
    for p in &paths {
        for times in p.per_coordinate_times() {
            if let Some(&t) = times.first() {
                scaled.push(t / e2);
            }
        }
        plus.extend(p.steps().iter().map(|s| if s.sign.sign() > 0 { 1.0 } else { 0.0 }));
        terminal.push(p.time(p.len()));
    }
    let dt = crate::evaluate::summarize(&scaled);
    let up = crate::evaluate::summarize(&plus);
    let tt = crate::evaluate::summarize(&terminal);
    let mut buf = Vec::new();
    paths[0].write_csv(&mut buf)?;
    out.record("skeleton.csv", &buf)?;
    out.json(
        "skeleton_stats.json",
        &json!({
            "paths": sk.paths,
            "steps_per_path": steps,
            "epsilon_k": sk.epsilon_k,
            "dim": sk.dim,
            "mean_scaled_first_hit": dt.mean,
            "mean_scaled_first_hit_se": dt.std_error,
            "first_hits": dt.samples,
            "plus_fraction": up.mean,
            "plus_fraction_se": up.std_error,
            "mean_terminal_time": tt.mean,
            "mean_terminal_time_se": tt.std_error,
        }),
    )?;
    Ok(format!("skeleton: {} paths of {steps} steps, mean first hit/ε² = {:.6} ± {:.6}", sk.paths, dt.mean, dt.std_error))
}

fn run_kernel(cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
    let k = cfg.kernel.clone().unwrap_or_default();
    if k.lags.is_empty() {
        return Err(Error::config("kernel.lags needs one entry per coordinate"));
    }
    let ker = discretize_kernel(&k.lags, k.epsilon_k, k.q, k.rule)?;
    let rows: Vec<Vec<String>> = ker
        .atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| vec![i.to_string(), fmt_f64(a.delta_t), a.sign.coord().to_string(), a.sign.sign().to_string(), fmt_f64(a.weight)])
        .collect();
    out.csv("kernel.csv", &["atom", "delta_t", "coord", "sign", "weight"], &rows)?;
    let mut exact = Vec::new();
    for j in 0..k.lags.len() {
        for sign in [1i8, -1] {
            let q = KernelQuery { lags: k.lags.clone(), coord: j, sign, interval: (0.0, f64::INFINITY) };
            let p = kernel_prob(&q, k.epsilon_k)?;
            let discrete: f64 = ker.atoms().iter().filter(|a| a.sign.coord() == j && a.sign.sign() == sign).map(|a| a.weight).sum();
            exact.push(json!({ "coord": j, "sign": sign, "exact": p, "discretized": discrete }));
        }
    }
    let exact_mass: f64 = exact.iter().map(|e| e["exact"].as_f64().unwrap_or(0.0)).sum();
    out.json(
        "kernel_summary.json",
        &json!({
            "epsilon_k": k.epsilon_k,
            "lags": k.lags,
            "q": k.q,
            "rule": k.rule,
            "atoms": ker.len(),
            "discretized_mass": ker.mass(),
            "exact_mass": exact_mass,
            "per_event": exact,
        }),
    )?;
    Ok(format!("kernel: {} atoms, exact mass {exact_mass:.12}", ker.len()))
}

/// A problem bound to its structure type.
struct Bound<'a, S> {
    s: S,
    problem: &'a Problem,
}

fn with_problem<F>(cfg: &RunConfig, f: F) -> Result<String>
where
    F: FnOnce(&dyn ProblemRun) -> Result<String>,
{
    let problem = cfg.problem()?;
    let eps = problem.epsilon_k();
    match problem {
        Problem::PdSde { model, .. } => f(&Bound { s: PdSdeStructure::new(model.clone(), eps)?, problem }),
        Problem::Fbm { model, .. } => f(&Bound { s: FbmStructure::new(model.clone(), eps)?, problem }),
        Problem::Portfolio { model, stage_terms, .. } => {
            f(&Bound { s: PortfolioStructure::new(model.clone(), eps)?.with_stage_terms(*stage_terms), problem })
        }
    }
}

trait ProblemRun {
    fn solve(&self, cfg: &RunConfig, out: &mut Outputs) -> Result<String>;
    fn evaluate(&self, cfg: &RunConfig, policy: Option<&Path>, seed: u64, out: &mut Outputs) -> Result<String>;
}

struct Solved<T> {
    depth: usize,
    tree: Tree<T>,
    solution: Solution,
    certificate: Certificate,
    hjb: HjbResidual,
}

fn solve_on<S: StateStructure>(s: &S, problem: &Problem, scfg: &SolveConfig) -> Result<Solved<S::State>> {
    let depth = scfg.depth_for(s.epsilon(), s.noise_dim(), problem.horizon());
    let payoff = problem.payoff();
    let tree = build_tree(s, scfg, depth)?;
    let solution = backward_dp(s, &tree, &payoff)?;
    let certificate = certify(scfg, depth, tree.grid(), &payoff);
    let hjb = hjb_residual(&tree, &solution);
    Ok(Solved { depth, tree, solution, certificate, hjb })
}

fn root_action<T>(sv: &Solved<T>) -> Vec<f64> {
    if sv.depth == 0 {
        Vec::new()
    } else {
        sv.tree.action(0, 0, sv.solution.policy[0][0]).to_vec()
    }
}

const SOLUTION_HEADER: &[&str] = &["layer", "node", "key", "value", "action_index", "action"];

fn solution_rows<T>(sv: &Solved<T>) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(sv.tree.node_count());
    for n in 0..=sv.depth {
        for i in 0..sv.tree.layer(n).len() {
            let (idx, act) = if n < sv.depth {
                let a = sv.solution.policy[n][i];
                let text = sv.tree.action(n, i, a).iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ");
                (a.to_string(), text)
            } else {
                (String::new(), String::new())
            };
            rows.push(vec![n.to_string(), i.to_string(), sv.tree.node_label(n, i), fmt_f64(sv.solution.values[n][i]), idx, act]);
        }
    }
    rows
}

fn solve_summary<T>(kind: &str, problem: &Problem, scfg: &SolveConfig, sv: &Solved<T>) -> serde_json::Value {
    json!({
        "problem": kind,
        "epsilon_k": problem.epsilon_k(),
        "depth": sv.depth,
        "q": scfg.q,
        "rule": scfg.rule,
        "actions": sv.tree.grid().len(),
        "refine": scfg.refine,
        "collapsed": sv.tree.collapsed(),
        "root_value": sv.solution.value(),
        "root_action": root_action(sv),
        "certificate": sv.certificate,
        "hjb_residual": sv.hjb,
        "layer_sizes": sv.tree.layer_sizes(),
        "node_count": sv.tree.node_count(),
    })
}

fn problem_kind(p: &Problem) -> &'static str {
    match p {
        Problem::PdSde { .. } => "pd_sde",
        Problem::Fbm { .. } => "fbm",
        Problem::Portfolio { .. } => "portfolio",
    }
}

/// Loads a solution table onto a freshly built tree of the same config.
fn load_policy<T>(tree: &Tree<T>, path: &Path) -> Result<(Solution, f64)> {
    let io = |e: csv::Error| Error::config(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.display().to_string(), source },
        other => Error::config(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r.headers().map_err(io)?.clone();
    if headers.iter().collect::<Vec<_>>() != SOLUTION_HEADER {
        return Err(Error::config(format!("{}: expected columns {}", path.display(), SOLUTION_HEADER.join(","))));
    }
    let depth = tree.depth();
    let mut policy: Vec<Vec<Option<usize>>> = (0..depth).map(|n| vec![None; tree.layer(n).len()]).collect();
    let labels: Vec<_> = (0..depth).map(|n| label_index(tree, n)).collect();
    let mut root = None;
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let bad = |what: &str| Error::config(format!("{}: bad {what} in row {:?}", path.display(), rec.position().map(|p| p.line())));
        let layer: usize = rec[0].parse().map_err(|_| bad("layer"))?;
        if layer == 0 {
            root = Some(rec[3].parse::<f64>().map_err(|_| bad("value"))?);
        }
        if layer >= depth {
            continue;
        }
        let i = *labels[layer].get(&rec[2]).ok_or_else(|| {
            Error::config(format!("{}: node {} at layer {layer} is not in the configured tree", path.display(), &rec[2]))
        })?;
        let a: usize = rec[4].parse().map_err(|_| bad("action_index"))?;
        if a >= tree.n_actions(layer, i) {
            return Err(bad("action_index"));
        }
        policy[layer][i] = Some(a);
    }
    let policy = policy
        .into_iter()
        .enumerate()
        .map(|(n, layer)| {
            layer
                .into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::config(format!("{}: layer {n} has nodes without an action", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let root = root.ok_or_else(|| Error::config(format!("{}: no root row", path.display())))?;
    Ok((Solution { values: Vec::new(), policy }, root))
}

fn mc_json(m: &McEstimate) -> serde_json::Value {
    json!({ "mean": m.mean, "std_error": m.std_error, "ci_low": m.ci_low, "ci_high": m.ci_high, "samples": m.samples })
}

impl<S: StateStructure> ProblemRun for Bound<'_, S> {
    fn solve(&self, cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
        let scfg = cfg.solve()?;
        let sv = solve_on(&self.s, self.problem, scfg)?;
        out.csv("solution.csv", SOLUTION_HEADER, &solution_rows(&sv))?;
        out.json("summary.json", &solve_summary(problem_kind(self.problem), self.problem, scfg, &sv))?;
        Ok(format!(
            "solve: root value {} with action {:?}, certified ε {}, {} nodes",
            fmt_f64(sv.solution.value()),
            root_action(&sv),
            fmt_f64(sv.certificate.certified),
            sv.tree.node_count()
        ))
    }

    fn evaluate(&self, cfg: &RunConfig, policy: Option<&Path>, seed: u64, out: &mut Outputs) -> Result<String> {
        let scfg = cfg.solve()?;
        let ecfg = cfg.evaluate.clone().unwrap_or_default();
        let payoff = self.problem.payoff();
        let depth = scfg.depth_for(self.s.epsilon(), self.s.noise_dim(), self.problem.horizon());
        let spec = RolloutSpec { steps: ecfg.steps.unwrap_or(depth).max(1), horizon: self.problem.horizon() };
        let (mc, root_value, grid_cert) = match (&ecfg.control, policy) {
            (ControlSpec::Policy, None) => {
                return Err(Error::config("evaluate.control is `policy` but no --policy table was given"))
            }
            (ControlSpec::Policy, Some(path)) => {
                let tree = build_tree(&self.s, scfg, depth)?;
                let (solution, root) = load_policy(&tree, path)?;
                let ctl = TreePolicyControl { tree: &tree, solution: &solution };
                let cert = certify(scfg, depth, tree.grid(), &payoff);
                (mc_value(&self.s, &ctl, &payoff, spec, ecfg.paths, seed, ecfg.antithetic)?, Some(root), Some(cert))
            }
            (other, _) => (evaluate_simple(&self.s, other, &payoff, spec, &ecfg, scfg, seed)?, None, None),
        };
        let slack = match (ecfg.q_slack, root_value) {
            (true, Some(v)) => Some(q_slack(&self.s, scfg, depth, &payoff, v)?),
            _ => None,
        };
        let eps = scfg.epsilon_total;
        let band = eps + 3.0 * mc.std_error + slack.unwrap_or(0.0);
        out.json(
            "metrics.json",
            &json!({
                "control": ecfg.control,
                "paths": ecfg.paths,
                "antithetic": ecfg.antithetic,
                "steps": spec.steps,
                "mc": mc_json(&mc),
                "root_value": root_value,
                "certificate": grid_cert,
                "q_slack": slack,
                "certified_band": root_value.map(|_| band),
                "within_band": root_value.map(|v| mc.mean >= v - band),
            }),
        )?;
        Ok(format!("evaluate: mean {} ± {} over {} samples", fmt_f64(mc.mean), fmt_f64(1.96 * mc.std_error), mc.samples))
    }
}

fn evaluate_simple<S: StateStructure>(
    s: &S,
    control: &ControlSpec,
    payoff: &Payoff,
    spec: RolloutSpec,
    ecfg: &EvaluateConfig,
    scfg: &SolveConfig,
    seed: u64,
) -> Result<McEstimate> {
    let ctl: Box<dyn Control<S>> = match control {
        ControlSpec::Constant { value } => Box::new(ConstantControl(value.clone())),
        ControlSpec::StageArgmax { refine } => Box::new(StageArgmaxControl::new(scfg.actions.build()?, *refine)),
        ControlSpec::Policy => unreachable!("handled by the caller"),
    };
    mc_value(s, ctl.as_ref(), payoff, spec, ecfg.paths, seed, ecfg.antithetic)
}

fn run_sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
    let problem = cfg.problem()?;
    let scfg = cfg.solve()?;
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::config("config needs a `sweep` section"))?;
    if sweep.epsilons.is_empty() || sweep.epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::config("sweep.epsilons must be a nonempty list of positive numbers"));
    }
    let payoff = problem.payoff();
    let horizon = problem.horizon();
    let report = match problem {
        Problem::PdSde { model, .. } => {
            convergence_sweep(|e| PdSdeStructure::new(model.clone(), e), &sweep.epsilons, scfg, horizon, &payoff)?
        }
        Problem::Fbm { model, .. } => convergence_sweep(|e| FbmStructure::new(model.clone(), e), &sweep.epsilons, scfg, horizon, &payoff)?,
        Problem::Portfolio { model, stage_terms, .. } => convergence_sweep(
            |e| Ok(PortfolioStructure::new(model.clone(), e)?.with_stage_terms(*stage_terms)),
            &sweep.epsilons,
            scfg,
            horizon,
            &payoff,
        )?,
    };
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.epsilon),
                r.depth.to_string(),
                r.nodes.to_string(),
                fmt_f64(r.root_value),
                fmt_f64(r.certified),
                r.root_action.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "),
            ]
        })
        .collect();
    out.csv("sweep.csv", &["epsilon_k", "depth", "nodes", "root_value", "certified_epsilon", "root_action"], &rows)?;
    out.json("summary.json", &report)?;
    Ok(format!("sweep: {} scales, stabilizing = {}", report.rows.len(), report.stabilizing))
}

fn run_portfolio(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<String> {
    let problem = cfg.problem()?;
    let Problem::Portfolio { model, stage_terms, .. } = problem else {
        return Err(Error::config("the portfolio subcommand needs problem.kind = \"portfolio\""));
    };
    let scfg = cfg.solve()?;
    let ecfg = cfg.evaluate.clone().unwrap_or_default();
    let s = PortfolioStructure::new(model.clone(), problem.epsilon_k())?.with_stage_terms(*stage_terms);
    let payoff = problem.payoff();
    let sv = solve_on(&s, problem, scfg)?;
    let leaves = leaf_values(&s, &sv.tree, &payoff)?;
    let merton = merton_oracle(model, &sv.tree, &leaves)?;
    let fraction = root_action(&sv).first().copied().unwrap_or(0.0);
    let spec = RolloutSpec { steps: ecfg.steps.unwrap_or(sv.depth).max(1), horizon: problem.horizon() };
    let policy = TreePolicyControl { tree: &sv.tree, solution: &sv.solution };
    let mc_policy = mc_value(&s, &policy, &payoff, spec, ecfg.paths, seed, ecfg.antithetic)?;
    let greedy = StageArgmaxControl::new(scfg.actions.build()?, true);
    let greedy_root = Control::<PortfolioStructure>::action(&greedy, &s, 0, &[], &s.initial_state())?[0];
    let mc_greedy = mc_value(&s, &greedy, &payoff, spec, ecfg.paths, derive_seed(seed, u64::MAX), ecfg.antithetic)?;
    let slack = if ecfg.q_slack { Some(q_slack(&s, scfg, sv.depth, &payoff, sv.solution.value())?) } else { None };
    let band = scfg.epsilon_total + 3.0 * mc_policy.std_error + slack.unwrap_or(0.0);
    out.csv("solution.csv", SOLUTION_HEADER, &solution_rows(&sv))?;
    out.json(
        "summary.json",
        &json!({
            "solve": solve_summary("portfolio", problem, scfg, &sv),
            "root_value": sv.solution.value(),
            "extracted_fraction": fraction,
            "merton_fraction": merton.fraction,
            "gap": (fraction - merton.fraction).abs(),
            "best_constant_action": merton.best_constant,
            "best_constant_value": merton.best_constant_value,
            "stage_argmax_fraction": greedy_root,
            "mc_policy": mc_json(&mc_policy),
            "mc_stage_argmax": mc_json(&mc_greedy),
            "q_slack": slack,
            "certified_band": band,
            "within_band": mc_policy.mean >= sv.solution.value() - band,
        }),
    )?;
    Ok(format!(
        "portfolio: root value {}, extracted fraction {}, Merton fraction {}, gap {}",
        fmt_f64(sv.solution.value()),
        fmt_f64(fraction),
        fmt_f64(merton.fraction),
        fmt_f64((fraction - merton.fraction).abs())
    ))
}
