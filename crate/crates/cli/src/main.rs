use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dcmg_core::admm::{parse_slot_problem, write_trace_csv};
use dcmg_core::harness::{slot_problem_at, with_control};
use dcmg_core::oracle::{emit_fixtures, solve_centralized, InstanceLimits};
use dcmg_core::scenario::{load_config, validate_config};
use dcmg_core::{
    compare, compute_constants, run, solve_slot, synth_traces, AdmmOptions, Error, Execution, PolicyKind, RunOptions,
    ScenarioConfig, SlotProblem, SolverChoice, TraceSet,
};
use serde_json::json;

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "dcmg", version, about = "Data-center microgrid energy management simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and print its derived constants.
    Validate { config: PathBuf },
    /// Write synthetic trace CSVs for a scenario.
    Synth {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4320)]
        slots: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one policy and write report.csv and summary.json.
    Run {
        config: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "proposed")]
        policy: PolicyKind,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write every slot's iteration trace to convergence.csv.
        #[arg(long)]
        convergence: bool,
    },
    /// Simulate several policies on the same traces and tabulate them.
    Compare {
        config: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_value = "proposed,b1,b2,b3")]
        policies: Vec<PolicyKind>,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long)]
        out: PathBuf,
        /// Run the policies one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Solve one slot problem and print the result with its iteration trace.
    SolveSlot {
        instance: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        /// Write the trace as CSV here instead of printing it.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also solve with the interior-point reference and report the gap.
        #[arg(long)]
        check: bool,
    },
    /// Write the slot problem the proposed policy faces at a given slot.
    ExportSlot {
        config: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        slot: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write random small instances with reference solutions as JSON.
    EmitFixtures {
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 10)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Directory of trace CSVs; synthetic traces are generated when absent.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Horizon; with --traces, truncates them.
    #[arg(long)]
    slots: Option<usize>,
    /// Overrides the configured V.
    #[arg(long)]
    v: Option<f64>,
    /// Overrides the configured w.
    #[arg(long)]
    w: Option<f64>,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Solve each slot with the interior-point reference instead of ADM-G.
    #[arg(long)]
    oracle: bool,
}

impl SolverArgs {
    fn choice(&self) -> SolverChoice {
        if self.oracle {
            SolverChoice::Oracle
        } else {
            SolverChoice::Admm(AdmmOptions { rho: self.rho, tolerance: self.tolerance, max_iters: self.max_iters })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(core) if core.is_validation() => EXIT_VALIDATION,
        Some(core) if core.is_solver_failure() => EXIT_SOLVER,
        _ => 1,
    }
}

/// Loads the config, applies overrides and produces the traces.
fn scenario(config: &Path, args: &ScenarioArgs) -> anyhow::Result<(ScenarioConfig, TraceSet)> {
    let cfg = load_config(config).with_context(|| format!("loading {}", config.display()))?;
    let cfg = with_control(&cfg, args.v, args.w);
    validate_config(&cfg)?;
    let traces = match &args.traces {
        Some(dir) => {
            let ts = TraceSet::read_dir(&cfg, dir).with_context(|| format!("reading traces from {}", dir.display()))?;
            match args.slots {
                Some(h) => ts.truncated(h),
                None => ts,
            }
        }
        None => synth_traces(&cfg, args.seed, args.slots.unwrap_or(4320)),
    };
    Ok((cfg, traces))
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let consts = compute_constants(&cfg)?;
            print_json(&json!({
                "valid": true,
                "sites": cfg.sites.len(),
                "frontends": cfg.frontends,
                "alpha_mw": cfg.sites.iter().map(|s| s.alpha()).collect::<Vec<_>>(),
                "beta_mw_per_server": cfg.sites.iter().map(|s| s.beta()).collect::<Vec<_>>(),
                "constants": consts,
            }))
        }
        Command::Synth { config, seed, slots, out } => {
            let cfg = load_config(&config)?;
            synth_traces(&cfg, seed, slots).write_dir(&cfg, &out)?;
            eprintln!("wrote {slots} slots to {}", out.display());
            Ok(())
        }
        Command::Run { config, scenario: args, policy, solver, out, convergence } => {
            let (cfg, traces) = scenario(&config, &args)?;
            let consts = compute_constants(&cfg)?;
            let opts = RunOptions { policy, solver: solver.choice(), record_convergence: convergence };
            let report = run(&cfg, &consts, &traces, &opts, Some(&out))?;
            let s = &report.summary;
            print_json(&json!({
                "policy": s.policy,
                "slots": s.slots,
                "total_cost": s.total_cost,
                "selling_profit": s.selling_profit,
                "amqd": s.amqd,
                "dropping_ratio": s.dropping_ratio,
                "bounds_pass": s.bounds.all_pass,
                "out": out,
            }))
        }
        Command::Compare { config, scenario: args, policies, solver, out, sequential } => {
            if policies.is_empty() {
                bail!("--policies needs at least one policy");
            }
            let (cfg, traces) = scenario(&config, &args)?;
            let consts = compute_constants(&cfg)?;
            let exec = if sequential { Execution::Sequential } else { Execution::default() };
            let table = compare(&cfg, &consts, &traces, &policies, &solver.choice(), exec, Some(&out))?;
            print_json(&serde_json::to_value(&table)?)
        }
        Command::SolveSlot { instance, rho, tolerance, max_iters, trace, check } => {
            let problem = read_instance(&instance)?;
            let sol = solve_slot(&problem, &AdmmOptions { rho, tolerance, max_iters })?;
            let reference = if check { Some(solve_centralized(&problem)?.objective) } else { None };
            match &trace {
                Some(path) => write_trace_csv(path, &sol.trace)?,
                None => {
                    println!("iter,objective,xi,ell,step");
                    for r in &sol.trace {
                        println!("{},{},{},{},{}", r.iter, r.objective, r.xi, r.ell, r.step);
                    }
                }
            }
            let summary = json!({
                "objective": sol.objective,
                "iterations": sol.iterations,
                "converged": sol.converged,
                "xi": sol.xi,
                "ell": sol.ell,
                "tolerance": sol.tolerance,
                "reference_objective": reference,
                "decision": sol.decision,
            });
            eprintln!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::ExportSlot { config, scenario: args, slot, out } => {
            let (cfg, traces) = scenario(&config, &args)?;
            let consts = compute_constants(&cfg)?;
            let problem = slot_problem_at(&cfg, &consts, &traces, slot)?;
            std::fs::write(&out, serde_json::to_string_pretty(&problem)?)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::EmitFixtures { first_seed, count, out } => {
            let seeds: Vec<u64> = (first_seed..first_seed + count).collect();
            let fixtures = emit_fixtures(&out, &seeds, InstanceLimits::default())?;
            eprintln!("wrote {} fixtures to {}", fixtures.len(), out.display());
            Ok(())
        }
    }
}

fn read_instance(path: &Path) -> anyhow::Result<SlotProblem> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_slot_problem(&text)?)
}
