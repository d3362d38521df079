//! Acceptance checks, one PASS/FAIL line per criterion. Tolerances and
//! runtime budgets are pinned below; the process exits nonzero on any FAIL.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hitdp::density::{self, QuantRule, SeriesTruncation, CROSSOVER};
use hitdp::evaluate::enumerate_oracle;
use hitdp::kernel::{kernel_prob, KernelQuery};
use hitdp::quadrature::{integrate_pieces, Tolerance};
use hitdp::rng::{derive_seed, stream_rng};
use hitdp::skeleton::crossing::{skeleton_from_grid, BrownianGrid};
use hitdp::skeleton::{sample_skeleton, SkeletonConfig};
use hitdp::solver::{backward_dp, build_tree, hjb_residual, ActionGridConfig, SolveConfig};
use hitdp::structures::portfolio::TimeCoef;
use hitdp::structures::{Coefficient, FbmKernel, Payoff, PdSdeSpec, PdSdeStructure, PortfolioSpec, PortfolioStructure, StateStructure};

type Outcome = Result<String, String>;

const DENSITY_MASS_TOL: f64 = 1e-8;
const DENSITY_MEAN_TOL: f64 = 1e-6;
const SERIES_AGREEMENT_TOL: f64 = 1e-10;
/// Rounding allowance when comparing a partial-sum error to its bound.
const BOUND_ROUNDING: f64 = 1e-15;
const STEP_SE_BAND: f64 = 3.0;
const GRID_TOL: f64 = 1e-12;
const KERNEL_MASS_TOL: f64 = 1e-6;
const KERNEL_SE_BAND: f64 = 4.0;
const ENUMERATION_TOL: f64 = 1e-12;
const HJB_TOL: f64 = 1e-10;
const MERTON_ACTION_TOL: f64 = 0.15;
const CERTIFICATE_EPSILON: f64 = 0.01;
const CERTIFICATE_PATHS: f64 = 1e5;
const TRUNCATION_SLOPE: f64 = -0.4;

fn gauge(s: &mut String, ok: bool, msg: String) -> bool {
    if !ok {
        if !s.is_empty() {
            s.push_str("; ");
        }
        s.push_str(&msg);
    }
    ok
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn run(&mut self, id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let res = match res {
            Ok(m) if took > budget => Err(format!("{m}; took {:.1}s over the {}s budget", took.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        match res {
            Ok(m) => println!("PASS {id} {name}: {m} [{:.1}s]", took.as_secs_f64()),
            Err(m) => {
                self.failures += 1;
                println!("FAIL {id} {name}: {m} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
}

fn verdict(detail: String, problems: String) -> Outcome {
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{problems} ({detail})"))
    }
}

fn density_grid() -> Vec<f64> {
    (1..=40).map(|i| 3.0 * i as f64 / 40.0).collect()
}

fn criterion_density() -> Outcome {
    let tol = Tolerance::new(1e-16, 1e-13);
    let pts = [0.0, 0.05, 0.2, CROSSOVER, 2.0, 5.0, 15.0, 40.0];
    let mass = integrate_pieces(density::density, &pts, tol).map_err(|e| e.to_string())?;
    let mean = integrate_pieces(|x| x * density::density(x), &pts, tol).map_err(|e| e.to_string())?;
    let small = density::small_time_series(CROSSOVER, 25);
    let large = density::large_time_series(CROSSOVER, 25);
    let mut excess: f64 = 0.0;
    let mut violations = Vec::new();
    for x in density_grid() {
        let reference = density::f_tau(x, SeriesTruncation::new(50).unwrap()).unwrap();
        for n in 1..=10 {
            let partial = density::f_tau(x, SeriesTruncation::new(n).unwrap()).unwrap();
            let err = (reference - partial).abs();
            let bound = density::truncation_bound(x, n).unwrap();
            if err > bound + BOUND_ROUNDING * reference.abs().max(1.0) {
                violations.push(format!("x={x} n={n}: {err:e} > {bound:e}"));
            }
            excess = excess.max(err - bound);
        }
    }
    let mut p = String::new();
    gauge(&mut p, (mass - 1.0).abs() <= DENSITY_MASS_TOL, format!("mass {mass}"));
    gauge(&mut p, (mean - 1.0).abs() <= DENSITY_MEAN_TOL, format!("mean {mean}"));
    gauge(&mut p, (small - large).abs() <= SERIES_AGREEMENT_TOL, format!("series differ by {:e}", small - large));
    gauge(&mut p, violations.is_empty(), format!("bound violated: {}", violations.join(", ")));
    verdict(
        format!(
            "mass-1 {:.1e}, mean-1 {:.1e}, series gap {:.1e}, max error above bound {:.1e} (rounding allowance {BOUND_ROUNDING:e})",
            mass - 1.0,
            mean - 1.0,
            (small - large).abs(),
            excess
        ),
        p,
    )
}

fn criterion_skeleton() -> Outcome {
    let n = 1_000_000;
    let cfg = SkeletonConfig::new(1.0, 1, 1.0).unwrap().with_steps(n).unwrap();
    let path = sample_skeleton(&cfg, 20240611).map_err(|e| e.to_string())?;
    let dts: Vec<f64> = path.steps().iter().map(|s| s.delta_t).collect();
    let mean = dts.iter().sum::<f64>() / n as f64;
    let var = dts.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let plus = path.steps().iter().filter(|s| s.sign.sign() > 0).count() as f64 / n as f64;
    let plus_se = (plus * (1.0 - plus) / n as f64).sqrt();

    let eps = 0.2;
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = stream_rng(derive_seed(99, i), 0);
        let g = BrownianGrid::simulate(1 + (i % 2) as usize, 1e-4, 10_000, &mut rng);
        let sk = skeleton_from_grid(&g, eps, None).map_err(|e| e.to_string())?;
        for j in 0..g.values.len() {
            for k in 0..g.len() {
                let t = g.time(k);
                let a = sk.reconstruct_a(j, t).map_err(|e| e.to_string())?;
                worst = worst.max((a - g.values[j][k]).abs());
            }
        }
    }
    let mut p = String::new();
    gauge(&mut p, (mean - 1.0).abs() <= STEP_SE_BAND * se, format!("mean Δt {mean} ± {se}"));
    gauge(&mut p, (plus - 0.5).abs() <= STEP_SE_BAND * plus_se, format!("plus fraction {plus} ± {plus_se}"));
    gauge(&mut p, worst <= eps + GRID_TOL, format!("sup|A-B| {worst} > ε"));
    verdict(
        format!("mean Δt {mean:.5} (SE {se:.1e}), plus {plus:.5} (SE {plus_se:.1e}), sup|A-B| {worst:.4} vs ε {eps}"),
        p,
    )
}

fn criterion_kernel() -> Outcome {
    let eps: f64 = 0.5;
    let e2 = eps * eps;
    let lag_sets = [[0.0, 0.0], [0.0, 0.3], [0.5, 0.0], [1.0, 2.0], [0.1, 3.0]];
    let edges = [0.0, 0.25, 0.5, 1.0, 2.0, f64::INFINITY];
    let samples = 100_000usize;
    let mut p = String::new();
    let mut worst_mass: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    for (c, unit_lags) in lag_sets.iter().enumerate() {
        let lags: Vec<f64> = unit_lags.iter().map(|l| l * e2).collect();
        let mut probs = BTreeMap::new();
        let mut mass = 0.0;
        for coord in 0..2 {
            for sign in [-1i8, 1] {
                for w in edges.windows(2) {
                    let q = KernelQuery { lags: lags.clone(), coord, sign, interval: (w[0] * e2, w[1] * e2) };
                    let pr = kernel_prob(&q, eps).map_err(|e| e.to_string())?;
                    mass += pr;
                    probs.insert((coord, sign, (w[0] * 100.0) as i64), (pr, 0usize));
                }
            }
        }
        worst_mass = worst_mass.max((mass - 1.0).abs());
        gauge(&mut p, (mass - 1.0).abs() <= KERNEL_MASS_TOL, format!("lags {lags:?}: mass {mass}"));

        // Residual clocks: τ_j conditioned on τ_j > δ_j, first to ring wins.
        let surv: Vec<f64> = unit_lags.iter().map(|&d| density::survival(d)).collect();
        let mut rng = stream_rng(derive_seed(4242, c as u64), 0);
        for _ in 0..samples {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..2 {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                let residual = density::inverse_survival(u * surv[j]).unwrap() - unit_lags[j];
                if residual < best.0 {
                    best = (residual, j);
                }
            }
            let sign = if rng.gen::<bool>() { 1i8 } else { -1 };
            let bin = edges.windows(2).position(|w| best.0 >= w[0] && best.0 < w[1]).unwrap_or(edges.len() - 2);
            probs.get_mut(&(best.1, sign, (edges[bin] * 100.0) as i64)).unwrap().1 += 1;
        }
        for ((coord, sign, lo), (pr, count)) in &probs {
            let freq = *count as f64 / samples as f64;
            let se = (pr * (1.0 - pr) / samples as f64).sqrt();
            let z = if se > 0.0 { (freq - pr).abs() / se } else if freq == *pr { 0.0 } else { f64::INFINITY };
            worst_z = worst_z.max(z);
            gauge(
                &mut p,
                z <= KERNEL_SE_BAND,
                format!("lags {lags:?} coord {coord} sign {sign} bin {lo}: freq {freq} vs {pr} ({z:.2} SE)"),
            );
        }
    }
    verdict(format!("5 lag sets, max |mass-1| {worst_mass:.1e}, max MC deviation {worst_z:.2} SE"), p)
}

fn solve_config(q: usize, points: usize) -> SolveConfig {
    SolveConfig {
        depth: None,
        q,
        rule: QuantRule::Quantile,
        actions: ActionGridConfig { bound: 1.0, points: Some(points), dim: 1, values: None },
        epsilon_total: 0.01,
        collapse: false,
        state_bin: 1e-3,
        time_bin: None,
        refine: false,
        max_nodes: 5_000_000,
    }
}

struct Instance {
    structure: PdSdeStructure,
    cfg: SolveConfig,
    depth: usize,
    payoff: Payoff,
}

fn random_instance(i: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(31337, i));
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let drift = if i % 4 == 3 {
        Coefficient::RunningMaxDrift { strength: u(0.0, 1.0), action: u(-1.0, 1.0) }
    } else {
        Coefficient::Linear { state: u(-0.5, 0.5), action: u(-1.0, 1.0), time: u(-0.5, 0.5), constant: u(-0.5, 0.5) }
    };
    let diffusion = Coefficient::Linear { state: u(-0.3, 0.3), action: u(-0.3, 0.3), time: 0.0, constant: u(0.5, 1.5) };
    let payoff = Payoff::Holder { amplitude: u(0.5, 2.0), frequency: u(0.5, 3.0), phase: u(-1.0, 1.0), exponent: u(0.3, 1.0) };
    let eps = u(0.3, 0.8);
    let noise_dim = if i % 3 == 2 { 2 } else { 1 };
    let depth = 1 + (i % 3) as usize;
    let points = 2 + (i % 2) as usize;
    let spec = PdSdeSpec { x0: vec![u(-0.5, 0.5)], noise_dim, drift: vec![drift], diffusion: vec![diffusion], mixing: None };
    Instance { structure: PdSdeStructure::new(spec, eps).unwrap(), cfg: solve_config(2, points), depth, payoff }
}

fn criterion_enumeration() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut p = String::new();
    for i in 0..20 {
        let inst = random_instance(i);
        let tree = build_tree(&inst.structure, &inst.cfg, inst.depth).map_err(|e| e.to_string())?;
        let dp = backward_dp(&inst.structure, &tree, &inst.payoff).map_err(|e| e.to_string())?.value();
        let oracle = enumerate_oracle(&inst.structure, &inst.cfg, inst.depth, &inst.payoff).map_err(|e| e.to_string())?;
        let diff = (dp - oracle).abs();
        worst = worst.max(diff);
        gauge(&mut p, diff <= ENUMERATION_TOL, format!("instance {i}: DP {dp} vs enumeration {oracle}"));
    }
    verdict(format!("20 instances, max |DP - enumeration| {worst:.1e}"), p)
}

fn merton_spec() -> PortfolioSpec {
    PortfolioSpec { r: 0.03, alpha: TimeCoef::Constant(0.05), sigma: TimeCoef::Constant(0.3), gamma: 0.5, x0: 1.0, horizon: 1.0 }
}

fn criterion_hjb() -> Outcome {
    let mut p = String::new();
    let (mut sup_abs, mut max_any): (f64, f64) = (0.0, f64::NEG_INFINITY);
    let mut nodes = 0;
    let mut check = |label: String, r: hitdp::solver::HjbResidual, p: &mut String| {
        sup_abs = sup_abs.max(r.sup_abs);
        max_any = max_any.max(r.max_any);
        gauge(p, r.sup_abs <= HJB_TOL && r.max_any <= HJB_TOL, format!("{label}: sup|max U| {:e}, max U {:e}", r.sup_abs, r.max_any));
    };
    for i in 0..20 {
        let inst = random_instance(i);
        let tree = build_tree(&inst.structure, &inst.cfg, inst.depth).map_err(|e| e.to_string())?;
        let sol = backward_dp(&inst.structure, &tree, &inst.payoff).map_err(|e| e.to_string())?;
        nodes += tree.node_count();
        check(format!("instance {i}"), hjb_residual(&tree, &sol), &mut p);
    }
    let s = PortfolioStructure::new(merton_spec(), 0.5).unwrap();
    let mut cfg = solve_config(4, 41);
    cfg.collapse = true;
    cfg.refine = true;
    let tree = build_tree(&s, &cfg, 4).map_err(|e| e.to_string())?;
    let sol = backward_dp(&s, &tree, &Payoff::Power { gamma: 0.5 }).map_err(|e| e.to_string())?;
    nodes += tree.node_count();
    check("portfolio".into(), hjb_residual(&tree, &sol), &mut p);
    verdict(format!("{nodes} nodes, sup|max_a U| {sup_abs:.1e}, max_a,node U {max_any:.1e}"), p)
}

fn criterion_strong_convergence() -> Outcome {
    let (mu, b, x0) = (0.05, 0.2, 1.0);
    let spec = PdSdeSpec {
        x0: vec![x0],
        noise_dim: 1,
        drift: vec![Coefficient::Linear { state: mu, action: 0.0, time: 0.0, constant: 0.0 }],
        diffusion: vec![Coefficient::Linear { state: b, action: 0.0, time: 0.0, constant: 0.0 }],
        mixing: None,
    };
    let epsilons = [0.5, 0.35, 0.25];
    let structures: Vec<_> = epsilons.iter().map(|&e| PdSdeStructure::new(spec.clone(), e).unwrap()).collect();
    let (paths, n, dt) = (10_000u64, 4000usize, 1.0 / 4000.0);
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for i in 0..paths {
        let mut rng = stream_rng(derive_seed(8080, i), 0);
        let g = BrownianGrid::simulate(1, dt, n, &mut rng);
        let exact: Vec<f64> = (0..g.len()).map(|k| x0 * ((mu - 0.5 * b * b) * g.time(k) + b * g.values[0][k]).exp()).collect();
        for (e, s) in structures.iter().enumerate() {
            let sk = skeleton_from_grid(&g, epsilons[e], None).map_err(|e| e.to_string())?;
            let mut state = s.initial_state();
            for st in sk.steps() {
                state = s.step(&state, &[0.5], st.delta_t, st.sign).map_err(|e| e.to_string())?;
            }
            let path = s.path(&state);
            let err = (0..g.len()).map(|k| (path.value_at(g.time(k))[0] - exact[k]).abs()).fold(0.0, f64::max);
            sums[e] += err;
            sq[e] += err * err;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / paths as f64).collect();
    let ses: Vec<f64> = (0..3).map(|e| ((sq[e] / paths as f64 - means[e] * means[e]) / paths as f64).sqrt()).collect();
    let mut p = String::new();
    gauge(&mut p, means[0] > means[1] && means[1] > means[2], "errors not strictly decreasing".into());
    verdict(
        format!(
            "E sup|X^k - X| = {:.4} ± {:.4}, {:.4} ± {:.4}, {:.4} ± {:.4} at ε = 0.5, 0.35, 0.25",
            means[0], ses[0], means[1], ses[1], means[2], ses[2]
        ),
        p,
    )
}

fn criterion_fbm() -> Outcome {
    let kernel = FbmKernel::new(0.75, 1.0).map_err(|e| e.to_string())?;
    let (paths, n, dt) = (200u64, 8192usize, 1.0 / 8192.0);
    let stride = 64;
    let t_idx: Vec<usize> = (1..=n / stride).map(|i| i * stride).collect();
    let t_grid: Vec<f64> = t_idx.iter().map(|&i| i as f64 * dt).collect();
    let ks = [3, 4, 5];
    let mut sums = [0.0f64; 3];
    for i in 0..paths {
        let mut rng = stream_rng(derive_seed(7575, i), 0);
        let g = BrownianGrid::simulate(1, dt, n, &mut rng);
        let reference: Vec<f64> = t_idx.iter().map(|&m| kernel.apply_to_linear(&g.values[0], dt, m)).collect();
        for (e, k) in ks.iter().enumerate() {
            let eps = 0.5f64.powi(*k);
            let sk = skeleton_from_grid(&g, eps, None).map_err(|e| e.to_string())?;
            let w = kernel.fbm_from_skeleton(&sk, &t_grid);
            sums[e] += w.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / paths as f64).collect();
    let mut p = String::new();
    gauge(&mut p, means[0] > means[1] && means[1] > means[2], "errors not strictly decreasing".into());
    verdict(format!("E sup|W^k_H - B_H| = {:.4}, {:.4}, {:.4} at k = 3, 4, 5", means[0], means[1], means[2]), p)
}

fn criterion_truncation() -> Outcome {
    let s = PortfolioStructure::new(merton_spec(), 1.0 / 3.0).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut sups = Vec::new();
    for n in 1..=6usize {
        let mut sup: f64 = 0.0;
        for i in 0..=400 {
            let a = -1.0 + i as f64 / 200.0;
            sup = sup.max(s.stage_gap(a, 0.0, n, true).map_err(|e| e.to_string())?.abs());
        }
        sups.push(sup);
        xs.push(((2 * n + 1) as f64).powi(2));
        ys.push(sup.ln());
    }
    let mx = xs.iter().sum::<f64>() / 6.0;
    let my = ys.iter().sum::<f64>() / 6.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let mut p = String::new();
    gauge(&mut p, sups.windows(2).all(|w| w[1] < w[0]), format!("gaps not decreasing: {sups:?}"));
    gauge(&mut p, slope <= TRUNCATION_SLOPE, format!("slope {slope}"));
    let shown: Vec<String> = sups.iter().map(|v| format!("{v:.2e}")).collect();
    verdict(format!("sup gaps n=1..6 [{}], slope {slope:.3}", shown.join(", ")), p)
}

fn hitdp(args: &[&str], config: &Path, out: &Path, threads: usize) -> Result<Duration, String> {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_hitdp"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(["--threads", &threads.to_string(), "--quiet"])
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("hitdp {args:?} exited with {status}"));
    }
    Ok(start.elapsed())
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &serde_json::Value, key: &str) -> Result<f64, String> {
    key.split('.').try_fold(v, |v, k| v.get(k)).and_then(|v| v.as_f64()).ok_or_else(|| format!("summary lacks {key}"))
}

fn criterion_merton(summary: &serde_json::Value) -> Outcome {
    let fraction = num(summary, "extracted_fraction")?;
    let merton = num(summary, "merton_fraction")?;
    let root = num(summary, "root_value")?;
    let best = num(summary, "best_constant_value")?;
    let se = num(summary, "mc_policy.std_error")?;
    let slack = num(summary, "q_slack")?;
    let band = CERTIFICATE_EPSILON + 3.0 * se + slack;
    let mut p = String::new();
    gauge(&mut p, (fraction - merton).abs() <= MERTON_ACTION_TOL, format!("root action {fraction} vs {merton}"));
    gauge(&mut p, (root - best).abs() <= band, format!("root value {root} vs best constant {best}, band {band}"));
    verdict(
        format!("root action {fraction:.4} vs {merton:.4}, root value {root:.6} vs best constant {best:.6} (band {band:.4})"),
        p,
    )
}

fn criterion_certificate(summary: &serde_json::Value) -> Outcome {
    let root = num(summary, "root_value")?;
    let mc = num(summary, "mc_policy.mean")?;
    let se = num(summary, "mc_policy.std_error")?;
    let n = num(summary, "mc_policy.samples")?;
    let slack = num(summary, "q_slack")?;
    let floor = root - CERTIFICATE_EPSILON - 3.0 * se - slack;
    let mut p = String::new();
    gauge(&mut p, n >= CERTIFICATE_PATHS, format!("only {n} paths"));
    gauge(&mut p, mc >= floor, format!("MC {mc} below {floor}"));
    verdict(format!("MC {mc:.6} ± {se:.1e} ≥ {floor:.6} (root {root:.6}, Q-slack {slack:.1e})"), p)
}

/// Files of `a` and `b` must match byte for byte, except that the manifests
/// may differ in wall time and thread count.
fn compare_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let list = |d: &Path| -> Result<Vec<String>, String> {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        v.sort();
        Ok(v)
    };
    let (fa, fb) = (list(a)?, list(b)?);
    if fa != fb {
        return Err(format!("file sets differ: {fa:?} vs {fb:?}"));
    }
    for f in &fa {
        if f == "manifest.json" {
            let strip = |p: &Path| -> Result<serde_json::Value, String> {
                let mut v = read_json(p)?;
                let m = v.as_object_mut().ok_or("manifest is not an object")?;
                m.remove("wall_time_seconds");
                m.remove("threads");
                Ok(v)
            };
            if strip(&a.join(f))? != strip(&b.join(f))? {
                return Err(format!("{}: manifests differ", a.display()));
            }
        } else if std::fs::read(a.join(f)).map_err(|e| e.to_string())? != std::fs::read(b.join(f)).map_err(|e| e.to_string())? {
            return Err(format!("{f} differs between {} and {}", a.display(), b.display()));
        }
    }
    Ok(fa.len())
}

fn enumeration_runs(root: &Path, threads: usize) -> Result<(), String> {
    let cfg = configs().join("enumeration.json");
    let solve = root.join(format!("solve-{threads}"));
    let eval = root.join(format!("evaluate-{threads}"));
    hitdp(&["solve"], &cfg, &solve, threads)?;
    let policy = solve.join("solution.csv");
    hitdp(&["evaluate", "--policy", policy.to_str().unwrap()], &cfg, &eval, threads)?;
    Ok(())
}

fn criterion_determinism(root: &Path, merton_1: &Path) -> Outcome {
    let merton_8 = root.join("merton-8");
    hitdp(&["portfolio", "--epsilon", "0.01"], &configs().join("merton.json"), &merton_8, 8)?;
    enumeration_runs(root, 1)?;
    enumeration_runs(root, 8)?;
    let mut files = compare_dirs(merton_1, &merton_8)?;
    files += compare_dirs(&root.join("solve-1"), &root.join("solve-8"))?;
    // Evaluate manifests name the policy file, which lives in a per-run directory.
    let eval = |t: usize| -> Result<(Vec<u8>, serde_json::Value), String> {
        let d = root.join(format!("evaluate-{t}"));
        let mut m = read_json(&d.join("manifest.json"))?;
        let o = m.as_object_mut().ok_or("manifest is not an object")?;
        for k in ["wall_time_seconds", "threads", "arguments"] {
            o.remove(k);
        }
        Ok((std::fs::read(d.join("metrics.json")).map_err(|e| e.to_string())?, m))
    };
    if eval(1)? != eval(8)? {
        return Err("evaluate outputs differ between 1 and 8 threads".into());
    }
    files += 2;
    Ok(format!("{files} files identical across --threads 1 and --threads 8"))
}

fn main() {
    let mut r = Runner { failures: 0 };
    let secs = Duration::from_secs;
    r.run("1", "density", secs(5), criterion_density);
    r.run("2", "skeleton law", secs(30), criterion_skeleton);
    r.run("3", "kernel mass", secs(120), criterion_kernel);
    r.run("4", "DP vs enumeration", secs(60), criterion_enumeration);
    r.run("5", "HJB residual", secs(60), criterion_hjb);

    let work = tempfile::tempdir().expect("temporary directory");
    let merton_1 = work.path().join("merton-1");
    let run = hitdp(&["portfolio", "--epsilon", "0.01"], &configs().join("merton.json"), &merton_1, 1);
    let summary = run.clone().and_then(|_| read_json(&merton_1.join("summary.json")));
    let took = run.clone().unwrap_or_default();
    r.run("6", "Merton reproduction", secs(600), || {
        let s = summary.clone()?;
        if took > secs(600) {
            return Err(format!("CLI run took {:.1}s", took.as_secs_f64()));
        }
        criterion_merton(&s).map(|m| format!("{m}, CLI run {:.1}s", took.as_secs_f64()))
    });
    r.run("7", "MC certificate", secs(5), || criterion_certificate(&summary.clone()?));

    r.run("8", "strong convergence", secs(300), criterion_strong_convergence);
    r.run("9", "fBm driver", secs(600), criterion_fbm);
    r.run("10", "stage truncation", secs(60), criterion_truncation);
    r.run("11", "determinism", secs(900), || {
        run.clone()?;
        criterion_determinism(work.path(), &merton_1)
    });

    println!("{} of 11 criteria failed", r.failures);
    if r.failures > 0 {
        std::process::exit(1);
    }
}
