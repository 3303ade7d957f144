//! Scenario runs, metrics and report files.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admm::{append_trace_rows, build_slot_problem, SlotProblem, TraceRow};
use crate::controller::{self, PolicyKind, SlotOutcome, SolverChoice};
use crate::error::{Error, Result, ValidationKind};
use crate::model::{
    check_feasibility, CostBreakdown, FeasibilityChecks, FeasibilityContext, ScenarioConfig, SlotInputs, Violation,
};
use crate::par::{self, Execution};
use crate::queues::{compute_constants, LyapunovConstants, SystemState};
use crate::scenario::{validate_config, TraceSet};

/// Slack allowed on the storage window, MWh.
pub const ENERGY_TOLERANCE_MWH: f64 = 1e-6;
/// A raw storage flow at or below this is treated as zero, MW.
pub const FLOW_ZERO_MW: f64 = 1e-6;
const ENERGY_QUANTILES: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub policy: PolicyKind,
    pub solver: SolverChoice,
    /// Keep every slot's iteration trace for `convergence.csv`.
    pub record_convergence: bool,
}

impl RunOptions {
    pub fn new(policy: PolicyKind) -> Self {
        RunOptions { policy, solver: SolverChoice::default(), record_convergence: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub slot: usize,
    pub cost: CostBreakdown,
    pub cost_before_adjust: f64,
    /// Grid exchange per site, MW.
    pub g: Vec<f64>,
    /// Stored energy per site after the slot, MWh.
    pub energy: Vec<f64>,
    pub q_max: f64,
    pub h_max: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStat {
    pub site: usize,
    pub btype: usize,
    pub tolerant_delay: u32,
    /// Longest completed delay; `None` if nothing of this type finished.
    pub max_delay: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCdf {
    pub site: usize,
    /// Stored energy at the 0%, 5%, ..., 100% points of the empirical CDF.
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundChecks {
    pub queue_within_max: bool,
    pub virtual_queue_within_max: bool,
    pub delay_within_tolerance: bool,
    pub energy_within_window: bool,
    pub complementarity: bool,
    pub power_balance: bool,
    pub adjustment_within_omega2: bool,
    /// Storage-threshold property on the raw solver output of converged slots.
    pub storage_thresholds: bool,
    pub max_queue_ratio: f64,
    pub max_virtual_queue_ratio: f64,
    pub max_adjustment_increase: f64,
    pub threshold_violations: usize,
    pub feasibility_violations: usize,
    pub all_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub unconverged_slots: usize,
    pub max_ell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: PolicyKind,
    pub slots: usize,
    pub total_cost: f64,
    pub costs: CostBreakdown,
    pub selling_profit: f64,
    /// Mean completion delay of resolved arrival batches, slots.
    pub amqd: Option<f64>,
    pub resolved_arrivals: usize,
    pub unresolved_arrivals: usize,
    pub unresolved_amount: f64,
    pub dropping_ratio: Option<f64>,
    pub max_delay: Vec<DelayStat>,
    pub energy_cdf: Vec<EnergyCdf>,
    pub constants: LyapunovConstants,
    pub bounds: BoundChecks,
    pub solver: SolverStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub site_names: Vec<String>,
    pub rows: Vec<SlotRow>,
    pub summary: Summary,
    /// `(slot, row)` pairs, only when requested.
    pub convergence: Vec<(usize, TraceRow)>,
}

struct Accumulator<'a> {
    cfg: &'a ScenarioConfig,
    consts: &'a LyapunovConstants,
    opts: &'a RunOptions,
    rows: Vec<SlotRow>,
    convergence: Vec<(usize, TraceRow)>,
    costs: CostBreakdown,
    selling_profit: f64,
    dropped: f64,
    arrived: f64,
    delay_sum: f64,
    resolved: usize,
    max_delay: Vec<Option<usize>>,
    energy: Vec<Vec<f64>>,
    bounds: BoundChecks,
    solver: SolverStats,
}

impl<'a> Accumulator<'a> {
    fn new(cfg: &'a ScenarioConfig, consts: &'a LyapunovConstants, opts: &'a RunOptions, start: &SystemState) -> Self {
        let layout = cfg.layout();
        let mut acc = Accumulator {
            cfg,
            consts,
            opts,
            rows: Vec::new(),
            convergence: Vec::new(),
            costs: CostBreakdown::default(),
            selling_profit: 0.0,
            dropped: 0.0,
            arrived: 0.0,
            delay_sum: 0.0,
            resolved: 0,
            max_delay: vec![None; layout.batch_len()],
            energy: vec![Vec::new(); layout.sites],
            bounds: BoundChecks {
                queue_within_max: true,
                virtual_queue_within_max: true,
                delay_within_tolerance: true,
                energy_within_window: true,
                complementarity: true,
                power_balance: true,
                adjustment_within_omega2: true,
                storage_thresholds: true,
                max_queue_ratio: 0.0,
                max_virtual_queue_ratio: 0.0,
                max_adjustment_increase: f64::NEG_INFINITY,
                threshold_violations: 0,
                feasibility_violations: 0,
                all_pass: true,
            },
            solver: SolverStats { total_iterations: 0, max_iterations: 0, unconverged_slots: 0, max_ell: 0.0 },
        };
        acc.observe_state(start);
        acc
    }

    fn observe_state(&mut self, s: &SystemState) {
        for (i, site) in self.cfg.sites.iter().enumerate() {
            let d = s.energy[i];
            self.energy[i].push(d);
            if d < site.energy_min_mwh - ENERGY_TOLERANCE_MWH || d > site.energy_max_mwh + ENERGY_TOLERANCE_MWH {
                self.bounds.energy_within_window = false;
            }
        }
        for (k, b) in self.consts.batch.iter().enumerate() {
            let q_ratio = if b.q_max > 0.0 { s.q[k] / b.q_max } else { 0.0 };
            let h_ratio = if b.h_max > 0.0 { s.h[k] / b.h_max } else { 0.0 };
            self.bounds.max_queue_ratio = self.bounds.max_queue_ratio.max(q_ratio);
            self.bounds.max_virtual_queue_ratio = self.bounds.max_virtual_queue_ratio.max(h_ratio);
            if s.q[k] > b.q_max * (1.0 + 1e-9) {
                self.bounds.queue_within_max = false;
            }
            if s.h[k] > b.h_max * (1.0 + 1e-9) {
                self.bounds.virtual_queue_within_max = false;
            }
        }
    }

    fn record(&mut self, inputs: &SlotInputs, before: &SystemState, out: &SlotOutcome) {
        let cfg = self.cfg;
        let layout = cfg.layout();
        let dec = &out.decision;

        let backlog: Vec<f64> = if self.opts.policy.is_baseline() {
            cfg.batch_types().map(|(i, q, b)| inputs.arrivals[layout.iq(i, q)].min(b.max_service)).collect()
        } else {
            before.q.clone()
        };
        let report = check_feasibility(
            cfg,
            inputs,
            FeasibilityContext { backlog: &backlog, c_prev: &before.c_prev },
            dec,
            FeasibilityChecks::ALL,
        );
        for v in &report {
            match v {
                Violation::Complementarity { .. } => self.bounds.complementarity = false,
                Violation::Balance { .. } => self.bounds.power_balance = false,
                _ => {}
            }
        }
        self.bounds.feasibility_violations += report.len();

        let diag = &out.diagnostics;
        let increase = diag.cost_after_adjust - diag.cost_before_adjust;
        self.bounds.max_adjustment_increase = self.bounds.max_adjustment_increase.max(increase);
        if increase > self.consts.omega2 + 1e-9 * (1.0 + self.consts.omega2) {
            self.bounds.adjustment_within_omega2 = false;
        }
        if diag.converged && matches!(self.opts.policy, PolicyKind::Proposed | PolicyKind::B1) {
            for (i, sc) in self.consts.sites.iter().enumerate() {
                let z = diag.z[i];
                let bad_discharge = z < sc.discharge_threshold && diag.raw_u_d[i] > FLOW_ZERO_MW;
                let bad_charge = z > sc.charge_threshold && diag.raw_u_c[i] > FLOW_ZERO_MW;
                if bad_discharge || bad_charge {
                    self.bounds.threshold_violations += 1;
                    self.bounds.storage_thresholds = false;
                }
            }
        }

        self.solver.total_iterations += diag.iterations;
        self.solver.max_iterations = self.solver.max_iterations.max(diag.iterations);
        self.solver.max_ell = self.solver.max_ell.max(diag.ell);
        if !diag.converged {
            self.solver.unconverged_slots += 1;
        }
        if self.opts.record_convergence {
            self.convergence.extend(diag.trace.iter().map(|r| (before.slot, *r)));
        }

        self.costs.accumulate(&out.cost);
        for i in 0..layout.sites {
            self.selling_profit += inputs.sell_price[i] * (-dec.g[i]).max(0.0);
        }
        self.dropped += dec.e.iter().sum::<f64>();
        self.arrived += inputs.arrivals.iter().sum::<f64>();
        for s in &out.delays {
            let k = layout.iq(s.site, s.btype);
            self.delay_sum += s.delay as f64;
            self.resolved += 1;
            self.max_delay[k] = Some(self.max_delay[k].map_or(s.delay, |m| m.max(s.delay)));
            if s.delay > cfg.sites[s.site].batch[s.btype].tolerant_delay as usize {
                self.bounds.delay_within_tolerance = false;
            }
        }

        self.observe_state(&out.state);
        self.rows.push(SlotRow {
            slot: before.slot,
            cost: out.cost,
            cost_before_adjust: diag.cost_before_adjust,
            g: dec.g.clone(),
            energy: out.state.energy.clone(),
            q_max: out.state.q.iter().copied().fold(0.0, f64::max),
            h_max: out.state.h.iter().copied().fold(0.0, f64::max),
            iterations: diag.iterations,
            converged: diag.converged,
        });
    }

    fn finish(mut self, last: &SystemState) -> RunReport {
        let cfg = self.cfg;
        let layout = cfg.layout();
        let mut unresolved = 0;
        let mut unresolved_amount = 0.0;
        for (k, fifo) in last.ledger.iter().enumerate() {
            let site = layout.site_of(k);
            let tolerant = cfg.sites[site].batch[k - layout.iq(site, 0)].tolerant_delay as usize;
            for entry in fifo {
                unresolved += 1;
                unresolved_amount += entry.remaining;
                // Still waiting at the horizon: its delay is at least this age.
                if last.slot - entry.arrival_slot > tolerant {
                    self.bounds.delay_within_tolerance = false;
                }
            }
        }
        if self.bounds.max_adjustment_increase == f64::NEG_INFINITY {
            self.bounds.max_adjustment_increase = 0.0;
        }
        let b = &mut self.bounds;
        b.all_pass = b.queue_within_max
            && b.virtual_queue_within_max
            && b.delay_within_tolerance
            && b.energy_within_window
            && b.complementarity
            && b.power_balance
            && b.adjustment_within_omega2
            && b.storage_thresholds;

        let max_delay = cfg
            .batch_types()
            .map(|(i, q, bt)| DelayStat {
                site: i,
                btype: q,
                tolerant_delay: bt.tolerant_delay,
                max_delay: self.max_delay[layout.iq(i, q)],
            })
            .collect();
        let energy_cdf = self
            .energy
            .iter_mut()
            .enumerate()
            .map(|(site, v)| {
                v.sort_by(f64::total_cmp);
                let quantiles = (0..ENERGY_QUANTILES)
                    .map(|j| {
                        let pos = j as f64 / (ENERGY_QUANTILES - 1) as f64 * (v.len() - 1) as f64;
                        v[pos.round() as usize]
                    })
                    .collect();
                EnergyCdf { site, quantiles }
            })
            .collect();

        let summary = Summary {
            policy: self.opts.policy,
            slots: self.rows.len(),
            total_cost: self.costs.total,
            costs: self.costs,
            selling_profit: self.selling_profit,
            amqd: (self.resolved > 0).then(|| self.delay_sum / self.resolved as f64),
            resolved_arrivals: self.resolved,
            unresolved_arrivals: unresolved,
            unresolved_amount,
            dropping_ratio: (self.arrived > 0.0).then(|| self.dropped / self.arrived),
            max_delay,
            energy_cdf,
            constants: self.consts.clone(),
            bounds: self.bounds,
            solver: self.solver,
        };
        RunReport {
            site_names: cfg.sites.iter().map(|s| s.name.clone()).collect(),
            rows: self.rows,
            summary,
            convergence: self.convergence,
        }
    }
}

/// Simulates every slot of `traces` under one policy. When `out` is given the
/// report files are written there; a slot failure still writes the partial
/// report before returning the error.
pub fn run(
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    traces: &TraceSet,
    opts: &RunOptions,
    out: Option<&Path>,
) -> Result<RunReport> {
    traces.validate(cfg)?;
    let mut state = SystemState::initial(cfg, consts)?;
    let mut acc = Accumulator::new(cfg, consts, opts, &state);
    for t in 0..traces.horizon {
        let inputs = traces.slot(t);
        match controller::step(opts.policy, cfg, consts, &state, &inputs, &opts.solver) {
            Ok(o) => {
                acc.record(&inputs, &state, &o);
                state = o.state;
            }
            Err(e) => {
                if let Some(dir) = out {
                    if let Err(w) = write_report(dir, &acc.finish(&state)) {
                        log::warn!("could not write partial report: {w}");
                    }
                }
                return Err(e);
            }
        }
    }
    let report = acc.finish(&state);
    log::info!(
        "{}: {} slots, total cost {:.2}, bounds pass {}",
        opts.policy,
        report.summary.slots,
        report.summary.total_cost,
        report.summary.bounds.all_pass
    );
    if let Some(dir) = out {
        write_report(dir, &report)?;
    }
    Ok(report)
}

/// The problem the proposed policy faces at `slot` after playing the earlier
/// slots of `traces` with the default solver.
pub fn slot_problem_at(
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    traces: &TraceSet,
    slot: usize,
) -> Result<SlotProblem> {
    if slot >= traces.horizon {
        return Err(Error::validation(
            ValidationKind::Trace,
            "slot".to_string(),
            format!("slot {slot} is beyond the trace horizon {}", traces.horizon),
        ));
    }
    traces.validate(cfg)?;
    let mut state = SystemState::initial(cfg, consts)?;
    let solver = SolverChoice::default();
    for t in 0..slot {
        state = controller::step(PolicyKind::Proposed, cfg, consts, &state, &traces.slot(t), &solver)?.state;
    }
    build_slot_problem(cfg, consts, &traces.slot(slot), &state)
}

/// Writes `report.csv`, `summary.json` and, if traces were kept,
/// `convergence.csv`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> =
        ["slot", "policy", "grid", "latency", "drop", "battery", "generation", "total", "total_before_adjust"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend(report.site_names.iter().map(|n| format!("g_{n}")));
    header.extend(report.site_names.iter().map(|n| format!("energy_{n}")));
    header.extend(["q_max", "h_max", "iterations", "converged"].iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    let policy = report.summary.policy.name();
    for r in &report.rows {
        let c = &r.cost;
        let mut rec = vec![r.slot.to_string(), policy.to_string()];
        rec.extend(
            [c.grid, c.latency, c.drop, c.battery, c.generation, c.total, r.cost_before_adjust]
                .iter()
                .map(|v| v.to_string()),
        );
        rec.extend(r.g.iter().map(|v| v.to_string()));
        rec.extend(r.energy.iter().map(|v| v.to_string()));
        rec.extend([r.q_max.to_string(), r.h_max.to_string(), r.iterations.to_string(), r.converged.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_summary(&dir.join("summary.json"), &report.summary)?;

    if !report.convergence.is_empty() {
        let path = dir.join("convergence.csv");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        writeln!(out, "slot,iter,objective,xi,ell,step").map_err(io)?;
        let mut start = 0;
        while start < report.convergence.len() {
            let slot = report.convergence[start].0;
            let end = start + report.convergence[start..].iter().take_while(|(s, _)| *s == slot).count();
            let rows: Vec<TraceRow> = report.convergence[start..end].iter().map(|(_, r)| *r).collect();
            append_trace_rows(&mut out, slot, &rows).map_err(io)?;
            start = end;
        }
        out.flush().map_err(io)?;
    }
    Ok(())
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    Ok(text)
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    std::fs::write(path, summary_json(summary)?).map_err(|e| Error::io(path, e))
}

/// Copy of `cfg` with the control knobs replaced where given.
pub fn with_control(cfg: &ScenarioConfig, v: Option<f64>, w: Option<f64>) -> ScenarioConfig {
    let mut out = cfg.clone();
    if v.is_some() {
        out.control.v = v;
    }
    if let Some(w) = w {
        out.control.w = w;
    }
    out
}

/// One independent simulation. Each job validates its own configuration.
#[derive(Debug, Clone)]
pub struct RunJob {
    pub label: String,
    pub config: ScenarioConfig,
    pub options: RunOptions,
}

/// Runs independent jobs on shared traces; results keep the job order.
pub fn run_jobs(jobs: &[RunJob], traces: &TraceSet, exec: Execution) -> Vec<Result<RunReport>> {
    par::map(exec, jobs, |job| {
        validate_config(&job.config)?;
        let consts = compute_constants(&job.config)?;
        run(&job.config, &consts, traces, &job.options, None)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: PolicyKind,
    pub total_cost: f64,
    pub selling_profit: f64,
    pub amqd: Option<f64>,
    pub dropping_ratio: Option<f64>,
    /// Percentage cost reduction of this policy relative to each other one.
    pub reduction_vs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, p: PolicyKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == p)
    }
}

/// Runs each policy on the same scenario and tabulates the aggregates. With
/// `out`, every run's files go to `out/<policy>/` and the table is written
/// as `comparison.csv` and `comparison.json`.
pub fn compare(
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    traces: &TraceSet,
    policies: &[PolicyKind],
    solver: &SolverChoice,
    exec: Execution,
    out: Option<&Path>,
) -> Result<Comparison> {
    let reports = par::map(exec, policies, |&p| {
        let opts = RunOptions { policy: p, solver: solver.clone(), record_convergence: false };
        let dir = out.map(|d| d.join(p.name()));
        run(cfg, consts, traces, &opts, dir.as_deref())
    });
    let reports: Vec<RunReport> = reports.into_iter().collect::<Result<_>>()?;
    let table = comparison_table(&reports);
    if let Some(dir) = out {
        write_comparison(dir, &table)?;
    }
    Ok(table)
}

pub fn comparison_table(reports: &[RunReport]) -> Comparison {
    let rows = reports
        .iter()
        .map(|r| {
            let s = &r.summary;
            let reduction_vs = reports
                .iter()
                .filter(|o| o.summary.policy != s.policy)
                .map(|o| {
                    let base = o.summary.total_cost;
                    let pct = if base != 0.0 { 100.0 * (base - s.total_cost) / base.abs() } else { 0.0 };
                    (o.summary.policy.name().to_string(), pct)
                })
                .collect();
            ComparisonRow {
                policy: s.policy,
                total_cost: s.total_cost,
                selling_profit: s.selling_profit,
                amqd: s.amqd,
                dropping_ratio: s.dropping_ratio,
                reduction_vs,
            }
        })
        .collect();
    Comparison { rows }
}

pub fn write_comparison(dir: &Path, table: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let others: Vec<String> = table.rows.iter().map(|r| r.policy.name().to_string()).collect();
    let mut header = vec!["policy", "total_cost", "selling_profit", "amqd", "dropping_ratio"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(others.iter().map(|o| format!("reduction_vs_{o}_pct")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &table.rows {
        let mut rec = vec![
            r.policy.name().to_string(),
            r.total_cost.to_string(),
            r.selling_profit.to_string(),
            opt(r.amqd),
            opt(r.dropping_ratio),
        ];
        rec.extend(others.iter().map(|o| opt(r.reduction_vs.get(o).copied())));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = serde_json::to_string_pretty(table)? + "\n";
    let path = dir.join("comparison.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{reference_config, synth_traces};

    fn quiet_config() -> ScenarioConfig {
        let mut cfg = reference_config();
        for s in &mut cfg.sites {
            s.idle_power_w = 0.0;
            s.peak_power_w = 0.0;
            s.charge_max_mw = 0.0;
            s.discharge_max_mw = 0.0;
        }
        cfg
    }

    fn zero_traces(cfg: &ScenarioConfig, horizon: usize) -> TraceSet {
        let mut ts = synth_traces(cfg, 0, horizon);
        for t in 0..horizon {
            ts.lambda[t].iter_mut().for_each(|v| *v = 0.0);
            ts.arrivals[t].iter_mut().for_each(|v| *v = 0.0);
            ts.renewable[t].iter_mut().for_each(|v| *v = 0.0);
        }
        ts
    }

    #[test]
    fn zero_trace_run_costs_nothing() {
        let cfg = quiet_config();
        let consts = compute_constants(&cfg).unwrap();
        let ts = zero_traces(&cfg, 12);
        let r = run(&cfg, &consts, &ts, &RunOptions::new(PolicyKind::Proposed), None).unwrap();
        assert!(r.summary.total_cost.abs() < 1e-6, "{}", r.summary.total_cost);
        assert_eq!(r.summary.amqd, None);
        assert_eq!(r.summary.dropping_ratio, None);
        assert!(r.summary.bounds.all_pass, "{:?}", r.summary.bounds);
    }

    #[test]
    fn total_cost_is_sum_of_slot_costs() {
        let cfg = reference_config();
        let consts = compute_constants(&cfg).unwrap();
        let ts = synth_traces(&cfg, 4, 24);
        let r = run(&cfg, &consts, &ts, &RunOptions::new(PolicyKind::Proposed), None).unwrap();
        let sum: f64 = r.rows.iter().map(|row| row.cost.total).sum();
        assert!((sum - r.summary.total_cost).abs() <= 1e-9 * sum.abs());
        let ratio = r.summary.dropping_ratio.unwrap();
        assert!((0.0..=1.0).contains(&ratio));
        let worst = cfg.sites.iter().flat_map(|s| s.batch.iter().map(|b| b.tolerant_delay)).max().unwrap();
        if let Some(a) = r.summary.amqd {
            assert!(a <= f64::from(worst));
        }
    }

    #[test]
    fn report_files_are_written() {
        let cfg = reference_config();
        let consts = compute_constants(&cfg).unwrap();
        let ts = synth_traces(&cfg, 4, 6);
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { record_convergence: true, ..RunOptions::new(PolicyKind::Proposed) };
        let r = run(&cfg, &consts, &ts, &opts, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("slot,policy,grid"));
        let conv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert_eq!(conv.lines().count(), 1 + r.convergence.len());
        let back: Summary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back.slots, 6);
    }

    #[test]
    fn single_policy_comparison_degenerates_to_run() {
        let cfg = reference_config();
        let consts = compute_constants(&cfg).unwrap();
        let ts = synth_traces(&cfg, 4, 6);
        let table =
            compare(&cfg, &consts, &ts, &[PolicyKind::B2], &SolverChoice::default(), Execution::Sequential, None)
                .unwrap();
        let run = run(&cfg, &consts, &ts, &RunOptions::new(PolicyKind::B2), None).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].total_cost, run.summary.total_cost);
        assert!(table.rows[0].reduction_vs.is_empty());
    }

    #[test]
    fn parallel_and_sequential_jobs_agree() {
        let cfg = reference_config();
        let ts = synth_traces(&cfg, 4, 6);
        let jobs: Vec<RunJob> = PolicyKind::ALL
            .iter()
            .map(|&p| RunJob { label: p.name().into(), config: cfg.clone(), options: RunOptions::new(p) })
            .collect();
        let a = run_jobs(&jobs, &ts, Execution::Sequential);
        let b = run_jobs(&jobs, &ts, Execution::Parallel);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_ref().unwrap().summary, y.as_ref().unwrap().summary);
        }
    }
}
