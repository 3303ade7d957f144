//! Online control loop: the Lyapunov policy and three baselines.

use serde::{Deserialize, Serialize};

use crate::admm::{build_slot_problem, restore_feasibility, solve_slot, AdmmOptions, SlotProblem, TraceRow};
use crate::error::{Error, Result};
use crate::model::{
    check_feasibility, compute_costs, ControlDecision, CostBreakdown, FeasibilityChecks, FeasibilityContext,
    ScenarioConfig, SlotInputs,
};
use crate::oracle::solve_centralized;
use crate::queues::{update_queues, DelaySample, LyapunovConstants, SystemState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Drift-plus-penalty with workload and energy queues.
    Proposed,
    /// Energy queue and storage kept, batch work served on arrival.
    B1,
    /// Per-slot greedy cost minimisation with selling, no storage.
    B2,
    /// B2 without selling.
    B3,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Proposed, PolicyKind::B1, PolicyKind::B2, PolicyKind::B3];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Proposed => "proposed",
            PolicyKind::B1 => "b1",
            PolicyKind::B2 => "b2",
            PolicyKind::B3 => "b3",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != PolicyKind::Proposed
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "proposed" => Ok(PolicyKind::Proposed),
            "b1" => Ok(PolicyKind::B1),
            "b2" => Ok(PolicyKind::B2),
            "b3" => Ok(PolicyKind::B3),
            other => Err(format!("unknown policy `{other}` (expected proposed, b1, b2 or b3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SolverChoice {
    Admm(AdmmOptions),
    Oracle,
}

impl Default for SolverChoice {
    fn default() -> Self {
        SolverChoice::Admm(AdmmOptions::default())
    }
}

/// What the slot solver reported before any post-processing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub xi: f64,
    pub ell: f64,
    /// Storage flows exactly as the solver returned them.
    pub raw_u_c: Vec<f64>,
    pub raw_u_d: Vec<f64>,
    /// Energy queue seen by the solver.
    pub z: Vec<f64>,
    /// Slot cost of the decision entering the complementarity adjustment.
    pub cost_before_adjust: f64,
    pub cost_after_adjust: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub decision: ControlDecision,
    pub state: SystemState,
    pub cost: CostBreakdown,
    pub delays: Vec<DelaySample>,
    pub diagnostics: SlotDiagnostics,
}

/// Makes storage flows complementary while keeping each site's net storage
/// contribution to the power balance. Generation absorbs the change and is
/// clamped to its window, with the grid taking any remainder.
pub fn adjust_solution(cfg: &ScenarioConfig, c_prev: &[f64], decision: &ControlDecision) -> Result<ControlDecision> {
    let mut out = decision.clone();
    for (i, s) in cfg.sites.iter().enumerate() {
        let (uc, ud) = (decision.u_c[i], decision.u_d[i]);
        let eta = s.charge_efficiency * s.discharge_efficiency;
        let uc_hat = (uc - ud / eta).max(0.0);
        let ud_hat = (ud - eta * uc).max(0.0);
        let c_hat = decision.c[i] + (uc_hat - uc) + (ud - ud_hat);
        out.u_c[i] = uc_hat;
        out.u_d[i] = ud_hat;

        let (lo, hi) = generator_window(cfg, i, c_prev[i]);
        let c_clamped = c_hat.clamp(lo, hi);
        out.c[i] = c_clamped;
        let g = decision.g[i] + (c_hat - c_clamped);
        if g < s.sell_limit_mw - 1e-9 || g > s.buy_limit_mw + 1e-9 {
            return Err(Error::Internal(format!(
                "site {i}: grid exchange {g} outside limits after storage adjustment"
            )));
        }
        out.g[i] = g;
    }
    Ok(out)
}

fn generator_window(cfg: &ScenarioConfig, i: usize, c_prev: f64) -> (f64, f64) {
    let s = &cfg.sites[i];
    if cfg.control.enforce_ramp {
        let step = s.ramp_coefficient * s.generator_max_mw;
        ((c_prev - step).max(0.0), (c_prev + step).min(s.generator_max_mw))
    } else {
        (0.0, s.generator_max_mw)
    }
}

/// Solution of one slot problem in physical units.
struct Solved {
    decision: ControlDecision,
    iterations: usize,
    converged: bool,
    xi: f64,
    ell: f64,
    trace: Vec<TraceRow>,
}

fn solve(problem: &SlotProblem, solver: &SolverChoice) -> Result<Solved> {
    match solver {
        SolverChoice::Admm(opts) => {
            let s = solve_slot(problem, opts)?;
            Ok(Solved {
                decision: s.decision,
                iterations: s.iterations,
                converged: s.converged,
                xi: s.xi,
                ell: s.ell,
                trace: s.trace,
            })
        }
        SolverChoice::Oracle => {
            let s = solve_centralized(problem)?;
            let ell = crate::admm::decision_ell(problem, &s.decision);
            Ok(Solved { decision: s.decision, iterations: 0, converged: true, xi: 0.0, ell, trace: Vec::new() })
        }
    }
}

fn verify(
    cfg: &ScenarioConfig,
    inputs: &SlotInputs,
    backlog: &[f64],
    c_prev: &[f64],
    dec: &ControlDecision,
) -> Result<()> {
    let report = check_feasibility(cfg, inputs, FeasibilityContext { backlog, c_prev }, dec, FeasibilityChecks::ALL);
    if report.is_empty() {
        Ok(())
    } else {
        Err(Error::Internal(format!("emitted decision is infeasible: {report:?}")))
    }
}

/// One slot of the drift-plus-penalty policy.
pub fn step_proposed(
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    state: &SystemState,
    inputs: &SlotInputs,
    solver: &SolverChoice,
) -> Result<SlotOutcome> {
    let problem = build_slot_problem(cfg, consts, inputs, state)?;
    let solved = solve(&problem, solver)?;
    let restored = restore_feasibility(&problem, &solved.decision)?;
    let adjusted = adjust_solution(cfg, &state.c_prev, &restored)?;
    verify(cfg, inputs, &state.q, &state.c_prev, &adjusted)?;

    let before = compute_costs(cfg, inputs, &restored);
    let cost = compute_costs(cfg, inputs, &adjusted);
    let (next, delays) = update_queues(cfg, consts, state, inputs, &adjusted);
    Ok(SlotOutcome {
        diagnostics: SlotDiagnostics {
            iterations: solved.iterations,
            converged: solved.converged,
            xi: solved.xi,
            ell: solved.ell,
            raw_u_c: solved.decision.u_c,
            raw_u_d: solved.decision.u_d,
            z: state.z.clone(),
            cost_before_adjust: before.total,
            cost_after_adjust: cost.total,
            trace: solved.trace,
        },
        decision: adjusted,
        state: next,
        cost,
        delays,
    })
}

/// Slot problem a baseline solves: batch arrivals fixed as service, no
/// workload-queue weights, and the policy's storage and selling rules.
pub fn baseline_problem(
    kind: PolicyKind,
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    state: &SystemState,
    inputs: &SlotInputs,
) -> Result<SlotProblem> {
    let layout = cfg.layout();
    let mut view = state.clone();
    view.q.iter_mut().for_each(|q| *q = 0.0);
    view.h.iter_mut().for_each(|h| *h = 0.0);
    let mut c = consts.clone();
    if matches!(kind, PolicyKind::B2 | PolicyKind::B3) {
        c.v = 1.0;
        view.z.iter_mut().for_each(|z| *z = 0.0);
    }
    let mut p = build_slot_problem(cfg, &c, inputs, &view)?;
    for (i, q, b) in cfg.batch_types() {
        let k = layout.iq(i, q);
        let x = inputs.arrivals[k].min(b.max_service);
        p.x_lo[k] = x;
        p.x_hi[k] = x;
        p.b_cost[k] = 0.0;
    }
    match kind {
        PolicyKind::Proposed => {
            return Err(Error::Internal("baseline_problem called for the proposed policy".into()));
        }
        PolicyKind::B1 => {}
        PolicyKind::B2 | PolicyKind::B3 => {
            p.uc_max.iter_mut().for_each(|u| *u = 0.0);
            p.ud_max.iter_mut().for_each(|u| *u = 0.0);
            if kind == PolicyKind::B3 {
                for i in 0..layout.sites {
                    // Exports are only possible as unpaid curtailment.
                    p.sell[i] = 0.0;
                    p.g_lo[i] = p.g_lo[i].max(-inputs.renewable[i]);
                }
            }
        }
    }
    p.validate()?;
    Ok(p)
}

/// One slot of a baseline policy. Batch work never waits, so the workload
/// queues stay empty and every delay sample is zero.
pub fn step_baseline(
    kind: PolicyKind,
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    state: &SystemState,
    inputs: &SlotInputs,
    solver: &SolverChoice,
) -> Result<SlotOutcome> {
    let layout = cfg.layout();
    let problem = baseline_problem(kind, cfg, consts, state, inputs)?;
    let solved = solve(&problem, solver)?;
    let restored = restore_feasibility(&problem, &solved.decision)?;
    let mut adjusted = adjust_solution(cfg, &state.c_prev, &restored)?;
    if kind == PolicyKind::B3 {
        for i in 0..layout.sites {
            adjusted.curtailed[i] = (-adjusted.g[i]).max(0.0);
            adjusted.g[i] = adjusted.g[i].max(0.0);
        }
    }
    verify(cfg, inputs, &problem.x_hi, &state.c_prev, &adjusted)?;

    let before = compute_costs(cfg, inputs, &restored);
    let cost = compute_costs(cfg, inputs, &adjusted);
    let mut next = state.clone();
    for (i, s) in cfg.sites.iter().enumerate() {
        let delta = s.charge_efficiency * adjusted.u_c[i] - adjusted.u_d[i] / s.discharge_efficiency;
        next.z[i] += delta;
        next.energy[i] += delta;
        next.c_prev[i] = adjusted.c[i];
    }
    next.slot += 1;
    let delays = cfg
        .batch_types()
        .filter(|&(i, q, _)| inputs.arrivals[layout.iq(i, q)] > 0.0)
        .map(|(i, q, _)| DelaySample {
            site: i,
            btype: q,
            arrival_slot: state.slot,
            amount: inputs.arrivals[layout.iq(i, q)],
            delay: 0,
        })
        .collect();
    Ok(SlotOutcome {
        diagnostics: SlotDiagnostics {
            iterations: solved.iterations,
            converged: solved.converged,
            xi: solved.xi,
            ell: solved.ell,
            raw_u_c: solved.decision.u_c,
            raw_u_d: solved.decision.u_d,
            z: state.z.clone(),
            cost_before_adjust: before.total,
            cost_after_adjust: cost.total,
            trace: solved.trace,
        },
        decision: adjusted,
        state: next,
        cost,
        delays,
    })
}

/// Dispatches one slot to the policy's step function.
pub fn step(
    kind: PolicyKind,
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    state: &SystemState,
    inputs: &SlotInputs,
    solver: &SolverChoice,
) -> Result<SlotOutcome> {
    let out = match kind {
        PolicyKind::Proposed => step_proposed(cfg, consts, state, inputs, solver),
        _ => step_baseline(kind, cfg, consts, state, inputs, solver),
    };
    out.map_err(|e| Error::Slot { slot: state.slot, source: Box::new(e) })
}
