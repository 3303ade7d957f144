//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for each
//! and exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dcmg_core::admm::{
    scalar_box_minimizer, solve_abs_value_block, solve_coupled_nonneg_block, solve_simplex_block, solve_slot,
    AdmmOptions,
};
use dcmg_core::harness::{run, run_jobs, slot_problem_at, with_control, RunJob, RunOptions, RunReport};
use dcmg_core::model::ScenarioConfig;
use dcmg_core::oracle::{random_instance, solve_centralized, InstanceLimits};
use dcmg_core::par::{self, Execution};
use dcmg_core::scenario::{reference_config, reference_config_case2, synth_traces};
use dcmg_core::{compute_constants, PolicyKind, TraceSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRACE_SEED: u64 = 1;
const HORIZON: usize = 4320;
const REFERENCE_SLOT: usize = 14;
const W_SWEEP: [f64; 3] = [1e-12, 1e-10, 1e-5];
const THETA_SWEEP: [f64; 3] = [0.05, 0.1, 0.5];

type Criterion = fn(&mut Runs) -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("1 solver correctness", solver_correctness),
        ("2 block exactness", block_exactness),
        ("3 feasibility suite", feasibility_suite),
        ("4 storage thresholds", storage_thresholds),
        ("5 adjustment bound", adjustment_bound),
        ("6 policy ordering", policy_ordering),
        ("7 trend replications", trend_replications),
        ("8 convergence across penalties", convergence_across_penalties),
        ("9 determinism", determinism),
    ];
    let mut runs = Runs::default();
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut runs)))
            .unwrap_or_else(|p| Outcome::new(false, format!("panicked: {}", panic_text(&p))));
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        if !outcome.pass {
            failed += 1;
        }
        println!("acceptance {name}: {verdict} ({:.1}s) {}", started.elapsed().as_secs_f64(), outcome.detail);
    }
    println!("acceptance summary: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}

/// Long simulations shared between criteria, computed on first use.
#[derive(Default)]
struct Runs {
    traces: Option<TraceSet>,
    feasibility: Option<(Vec<RunReport>, Duration)>,
    sweeps: Option<Vec<RunReport>>,
}

impl Runs {
    fn traces(&mut self) -> &TraceSet {
        self.traces.get_or_insert_with(|| synth_traces(&reference_config(), TRACE_SEED, HORIZON))
    }

    /// Proposed policy at V = V_max on both delay cases.
    fn feasibility(&mut self) -> &(Vec<RunReport>, Duration) {
        if self.feasibility.is_none() {
            let traces = self.traces().clone();
            let jobs = [("case1", reference_config()), ("case2", reference_config_case2())].map(|(label, config)| {
                RunJob { label: label.into(), config, options: RunOptions::new(PolicyKind::Proposed) }
            });
            let started = Instant::now();
            let reports = collect(&jobs, run_jobs(&jobs, &traces, Execution::default()));
            self.feasibility = Some((reports, started.elapsed()));
        }
        self.feasibility.as_ref().unwrap()
    }

    /// Baselines and parameter sweeps, in the order of [`sweep_jobs`].
    fn sweeps(&mut self) -> &[RunReport] {
        if self.sweeps.is_none() {
            let traces = self.traces().clone();
            let (jobs, stressed_jobs) = sweep_jobs();
            let stressed_traces = synth_traces(&stressed_jobs[0].config, TRACE_SEED, HORIZON);
            let mut reports = collect(&jobs, run_jobs(&jobs, &traces, Execution::default()));
            reports.extend(collect(&stressed_jobs, run_jobs(&stressed_jobs, &stressed_traces, Execution::default())));
            self.sweeps = Some(reports);
        }
        self.sweeps.as_deref().unwrap()
    }
}

fn collect(jobs: &[RunJob], results: Vec<dcmg_core::Result<RunReport>>) -> Vec<RunReport> {
    jobs.iter().zip(results).map(|(job, r)| r.unwrap_or_else(|e| panic!("run `{}` failed: {e}", job.label))).collect()
}

fn with_drop_penalty(cfg: &ScenarioConfig, theta: f64) -> ScenarioConfig {
    let mut out = cfg.clone();
    out.sites.iter_mut().for_each(|s| s.drop_penalty = theta);
    out
}

/// Heavier interactive load and a larger w, so capacity binds and dropping
/// actually happens.
fn stressed_config() -> ScenarioConfig {
    let mut cfg = reference_config();
    cfg.synthetic.interactive_peak = 0.85;
    cfg.control.w = 1e-5;
    cfg
}

// Indices into the sweep reports.
const B2: usize = 0;
const B3: usize = 1;
const CASE2_PROPOSED: usize = 2;
const W_RUNS: usize = 3;
const THETA_RUNS: usize = W_RUNS + W_SWEEP.len();
const STRESSED_RUNS: usize = THETA_RUNS + THETA_SWEEP.len();

fn sweep_jobs() -> (Vec<RunJob>, Vec<RunJob>) {
    let reference = reference_config();
    let job =
        |label: String, config: ScenarioConfig, policy| RunJob { label, config, options: RunOptions::new(policy) };
    let mut jobs = vec![
        job("b2".into(), reference.clone(), PolicyKind::B2),
        job("b3".into(), reference.clone(), PolicyKind::B3),
        job("case2 w=1e-12".into(), with_control(&reference_config_case2(), None, Some(1e-12)), PolicyKind::Proposed),
    ];
    for w in W_SWEEP {
        jobs.push(job(format!("w={w:e}"), with_control(&reference, None, Some(w)), PolicyKind::Proposed));
    }
    for theta in THETA_SWEEP {
        jobs.push(job(format!("theta={theta}"), with_drop_penalty(&reference, theta), PolicyKind::Proposed));
    }
    let stressed = stressed_config();
    let stressed_jobs = THETA_SWEEP
        .iter()
        .map(|&theta| job(format!("stressed theta={theta}"), with_drop_penalty(&stressed, theta), PolicyKind::Proposed))
        .collect();
    (jobs, stressed_jobs)
}

fn solver_correctness(_: &mut Runs) -> Outcome {
    struct Row {
        seed: u64,
        rel: f64,
        ell_ok: bool,
        secs: f64,
        iterations: usize,
    }
    let seeds: Vec<u64> = (0..100).collect();
    let rows = par::map(Execution::default(), &seeds, |&seed| {
        let inst = random_instance(seed, InstanceLimits::default()).expect("instance");
        let reference = solve_centralized(&inst.problem).expect("oracle");
        let scale_tol = inst.problem.default_tolerance();
        let opts = AdmmOptions { rho: 1.0, tolerance: Some(0.1 * scale_tol), max_iters: 50_000 };
        let started = Instant::now();
        let sol = solve_slot(&inst.problem, &opts).expect("admm");
        let secs = started.elapsed().as_secs_f64();
        Row {
            seed,
            rel: (sol.objective - reference.objective).abs() / reference.objective.abs().max(1.0),
            ell_ok: sol.ell <= scale_tol,
            secs,
            iterations: sol.iterations,
        }
    });
    let bad: Vec<u64> = rows.iter().filter(|r| !(r.rel <= 1e-3 && r.ell_ok && r.secs <= 5.0)).map(|r| r.seed).collect();
    let worst = rows.iter().map(|r| r.rel).fold(0.0, f64::max);
    let slowest = rows.iter().map(|r| r.secs).fold(0.0, f64::max);
    let most = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
    Outcome::new(
        bad.is_empty(),
        format!(
            "instances=100 worst_rel_gap={worst:.2e} max_iterations={most} slowest={slowest:.3}s failing_seeds={bad:?}"
        ),
    )
}

/// Minimises `f` over a box by repeated grid refinement around the best point.
/// Points where `f` returns `None` are outside the domain. Returns the best
/// point and the final grid spacing per axis.
fn zoom_grid(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    lo: &[f64],
    hi: &[f64],
    points: usize,
    levels: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dims = lo.len();
    let (mut a, mut b) = (lo.to_vec(), hi.to_vec());
    let mut best = lo.to_vec();
    let mut spacing = vec![0.0; dims];
    for _ in 0..levels {
        for k in 0..dims {
            spacing[k] = (b[k] - a[k]) / (points - 1) as f64;
        }
        let mut best_val = f64::INFINITY;
        let mut idx = vec![0usize; dims];
        let mut y = vec![0.0; dims];
        loop {
            for k in 0..dims {
                y[k] = if idx[k] + 1 == points { b[k] } else { a[k] + spacing[k] * idx[k] as f64 };
            }
            if let Some(v) = f(&y) {
                if v < best_val {
                    best_val = v;
                    best.copy_from_slice(&y);
                }
            }
            let mut k = 0;
            while k < dims {
                idx[k] += 1;
                if idx[k] < points {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == dims {
                break;
            }
        }
        for k in 0..dims {
            a[k] = (best[k] - 2.0 * spacing[k]).max(lo[k]);
            b[k] = (best[k] + 2.0 * spacing[k]).min(hi[k]);
        }
    }
    (best, spacing)
}

/// The block answer must be no worse than the grid optimum and sit within a
/// few final grid cells of it.
fn agrees(f: &dyn Fn(&[f64]) -> Option<f64>, block: &[f64], grid: &[f64], spacing: &[f64]) -> bool {
    let (fb, fg) = match (f(block), f(grid)) {
        (Some(fb), Some(fg)) => (fb, fg),
        _ => return false,
    };
    let no_worse = fb <= fg + 1e-10 * (1.0 + fg.abs());
    let close = block.iter().zip(grid).zip(spacing).all(|((b, g), h)| (b - g).abs() <= 3.0 * h + 1e-9);
    no_worse && close
}

fn block_exactness(_: &mut Runs) -> Outcome {
    const DRAWS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = [0usize; 4];

    for _ in 0..DRAWS {
        let n = rng.gen_range(1..=3);
        let costs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let rho = rng.gen_range(0.1..10.0);
        let total = rng.gen_range(0.0..10.0);
        let block = solve_simplex_block(&costs, rho, total);
        // Free coordinates are all but the last, which takes the remainder.
        let full = |y: &[f64]| {
            let last = total - y.iter().sum::<f64>();
            (last >= -1e-12).then(|| {
                let mut d = y.to_vec();
                d.push(last.max(0.0));
                d
            })
        };
        let f = |y: &[f64]| full(y).map(|d| d.iter().zip(&costs).map(|(d, c)| c * d + 0.5 * rho * d * d).sum::<f64>());
        let ok = if n == 1 {
            (block[0] - total).abs() <= 1e-12 * (1.0 + total)
        } else {
            let (grid, h) = zoom_grid(&f, &vec![0.0; n - 1], &vec![total; n - 1], 101, 5);
            agrees(&f, &block[..n - 1], &grid, &h)
        };
        failures[0] += usize::from(!ok);
    }

    for _ in 0..DRAWS {
        let curvature = rng.gen_range(0.1..10.0);
        let linear = rng.gen_range(-20.0..20.0);
        let lo = rng.gen_range(-5.0..0.0);
        let hi = lo + rng.gen_range(0.0..10.0);
        let block = scalar_box_minimizer(curvature, linear, lo, hi);
        let f = |y: &[f64]| Some(0.5 * curvature * y[0] * y[0] + linear * y[0]);
        let (grid, h) = zoom_grid(&f, &[lo], &[hi], 201, 4);
        failures[1] += usize::from(!agrees(&f, &[block], &grid, &h));
    }

    for _ in 0..DRAWS {
        let n = rng.gen_range(1..=3);
        let costs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let rho = rng.gen_range(0.1..10.0);
        let kappa = rng.gen_range(0.5..4.0);
        let block = solve_coupled_nonneg_block(&costs, rho, kappa);
        let f = |y: &[f64]| {
            let sum: f64 = y.iter().sum();
            let sq: f64 = y.iter().map(|v| v * v).sum();
            Some(0.5 * rho * (kappa * sq + sum * sum) + y.iter().zip(&costs).map(|(y, c)| c * y).sum::<f64>())
        };
        // Each coordinate of the minimiser is at most -c/(rho*kappa).
        let hi: Vec<f64> = costs.iter().map(|c| (-c / (rho * kappa)).max(0.0) + 1e-3).collect();
        let (grid, h) = zoom_grid(&f, &vec![0.0; n], &hi, 41, 6);
        failures[2] += usize::from(!agrees(&f, &block, &grid, &h));
    }

    for _ in 0..DRAWS {
        let rho = rng.gen_range(0.1..10.0);
        let linear = rng.gen_range(-20.0..20.0);
        let buy = rng.gen_range(0.0..5.0);
        let sell = rng.gen_range(0.0..=buy);
        let lo = rng.gen_range(-10.0..0.0);
        let hi = rng.gen_range(0.0..10.0);
        let block = solve_abs_value_block(rho, linear, buy, sell, lo, hi);
        let f = |y: &[f64]| {
            let g = y[0];
            Some(0.5 * rho * g * g + linear * g + buy * g.max(0.0) - sell * (-g).max(0.0))
        };
        let (grid, h) = zoom_grid(&f, &[lo], &[hi], 201, 4);
        failures[3] += usize::from(!agrees(&f, &[block], &grid, &h));
    }

    Outcome::new(
        failures.iter().all(|&k| k == 0),
        format!(
            "draws={DRAWS} per block, mismatches simplex={} scalar_box={} coupled_nonneg={} abs_value={}",
            failures[0], failures[1], failures[2], failures[3]
        ),
    )
}

fn feasibility_suite(runs: &mut Runs) -> Outcome {
    let (reports, elapsed) = runs.feasibility();
    let mut pass = elapsed.as_secs_f64() <= 600.0;
    let mut parts = vec![format!("runtime={:.1}s", elapsed.as_secs_f64())];
    for (label, r) in ["case1", "case2"].iter().zip(reports) {
        let s = &r.summary;
        let b = &s.bounds;
        let at_vmax = s.constants.v == s.constants.v_max;
        let checks = [
            ("v_is_vmax", at_vmax),
            ("Q<=Qmax", b.queue_within_max),
            ("H<=Hmax", b.virtual_queue_within_max),
            ("delay<=T", b.delay_within_tolerance),
            ("D_window", b.energy_within_window),
            ("complementarity", b.complementarity),
            ("balance", b.power_balance),
        ];
        pass &= checks.iter().all(|c| c.1) && s.slots == HORIZON;
        let failing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        parts.push(format!(
            "{label}: max Q/Qmax={:.3e} max H/Hmax={:.3e} failing={failing:?}",
            b.max_queue_ratio, b.max_virtual_queue_ratio
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn storage_thresholds(runs: &mut Runs) -> Outcome {
    let (reports, _) = runs.feasibility();
    let violations: usize = reports.iter().map(|r| r.summary.bounds.threshold_violations).sum();
    let pass = reports.iter().all(|r| r.summary.bounds.storage_thresholds) && violations == 0;
    let converged: usize = reports.iter().map(|r| r.rows.iter().filter(|row| row.converged).count()).sum();
    Outcome::new(pass, format!("converged_slot_solves={converged} violations={violations}"))
}

fn adjustment_bound(runs: &mut Runs) -> Outcome {
    let (reports, _) = runs.feasibility();
    let pass = reports.iter().all(|r| r.summary.bounds.adjustment_within_omega2);
    let detail = reports
        .iter()
        .zip(["case1", "case2"])
        .map(|(r, label)| {
            format!(
                "{label}: max_increase={:.3e} omega2={:.4}",
                r.summary.bounds.max_adjustment_increase, r.summary.constants.omega2
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}

fn policy_ordering(runs: &mut Runs) -> Outcome {
    let r = runs.sweeps();
    let (b2, b3, proposed) = (r[B2].summary.total_cost, r[B3].summary.total_cost, r[CASE2_PROPOSED].summary.total_cost);
    Outcome::new(b2 <= b3 && proposed < b3, format!("B2={b2:.2} B3={b3:.2} proposed_case2={proposed:.2}"))
}

fn nonincreasing(values: &[Option<f64>]) -> bool {
    values.iter().all(Option::is_some) && values.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap())
}

fn trend_replications(runs: &mut Runs) -> Outcome {
    let r = runs.sweeps();
    let amqd: Vec<Option<f64>> = (0..W_SWEEP.len()).map(|k| r[W_RUNS + k].summary.amqd).collect();
    let drop: Vec<Option<f64>> = (0..THETA_SWEEP.len()).map(|k| r[THETA_RUNS + k].summary.dropping_ratio).collect();
    let stressed: Vec<Option<f64>> =
        (0..THETA_SWEEP.len()).map(|k| r[STRESSED_RUNS + k].summary.dropping_ratio).collect();
    // The stressed sweep must actually drop something, otherwise the trend is vacuous.
    let stressed_active = stressed.iter().all(|d| d.is_some_and(|d| d > 0.0));
    let fmt = |v: &[Option<f64>]| v.iter().map(|x| x.map_or("none".into(), |x| format!("{x:.4e}"))).collect::<Vec<_>>();
    Outcome::new(
        nonincreasing(&amqd) && nonincreasing(&drop) && nonincreasing(&stressed) && stressed_active,
        format!(
            "amqd over w {W_SWEEP:?} = {:?}; drop ratio over theta {THETA_SWEEP:?} = {:?}; stressed drop ratio = {:?}",
            fmt(&amqd),
            fmt(&drop),
            fmt(&stressed)
        ),
    )
}

fn convergence_across_penalties(runs: &mut Runs) -> Outcome {
    let cfg = reference_config();
    let consts = compute_constants(&cfg).expect("constants");
    let problem = slot_problem_at(&cfg, &consts, runs.traces(), REFERENCE_SLOT).expect("reference slot");
    let tol = problem.default_tolerance();
    let mut pass = true;
    let mut parts = Vec::new();
    for rho in [0.5, 1.0, 2.0] {
        let opts = AdmmOptions { rho, tolerance: None, max_iters: 2000 };
        let first = match solve_slot(&problem, &opts) {
            Ok(sol) => sol.trace.iter().find(|t| t.xi <= tol && t.ell <= tol).map(|t| t.iter),
            Err(_) => None,
        };
        pass &= first.is_some();
        parts.push(format!("rho={rho}: first_iter={}", first.map_or("none".into(), |i| i.to_string())));
    }
    Outcome::new(pass, format!("slot={REFERENCE_SLOT} {}", parts.join(" ")))
}

fn determinism(_: &mut Runs) -> Outcome {
    let cfg = reference_config();
    let consts = compute_constants(&cfg).expect("constants");
    let dir = tempfile::tempdir().expect("tempdir");
    let mut files = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let traces = synth_traces(&cfg, TRACE_SEED, HORIZON);
        run(&cfg, &consts, &traces, &RunOptions::new(PolicyKind::Proposed), Some(&out)).expect("run");
        files.push(std::fs::read(out.join("summary.json")).expect("summary.json"));
    }
    Outcome::new(
        files[0] == files[1],
        format!("summary.json bytes={} identical={}", files[0].len(), files[0] == files[1]),
    )
}
