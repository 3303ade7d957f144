//! Independent reference solvers for the slot problem, plus seeded random
//! instances and JSON fixtures for tests.
//!
//! [`solve_centralized`] hands the undecomposed problem (with the grid
//! exchange split into import and export parts) to an interior-point conic
//! solver. [`brute_force_grid`] enumerates tiny instances exhaustively.

use std::path::Path;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{build_slot_problem, Auxiliaries, SlotProblem};
use crate::error::{Error, Result};
use crate::model::{
    BatchTypeConfig, ControlDecision, ControlKnobs, GeneratorCost, ScenarioConfig, SiteConfig, SlotInputs,
};
use crate::queues::{compute_constants, z_offset, LyapunovConstants, SystemState};
use crate::scenario::SyntheticProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub decision: ControlDecision,
    pub auxiliary: Auxiliaries,
    pub objective: f64,
    /// Larger of the solver's primal and dual residuals.
    pub kkt_residual: f64,
    /// Power-balance multipliers, $ per MW.
    pub balance_multiplier: Vec<f64>,
}

/// Column layout of the oracle's variable vector.
struct Columns {
    d: usize,
    x: usize,
    e: usize,
    c: usize,
    uc: usize,
    ud: usize,
    gp: usize,
    gm: usize,
    total: usize,
}

impl Columns {
    fn new(p: &SlotProblem) -> Self {
        let l = &p.layout;
        let d = 0;
        let x = d + l.pair_len();
        let e = x + l.batch_len();
        let c = e + l.batch_len();
        let uc = c + l.sites;
        let ud = uc + l.sites;
        let gp = ud + l.sites;
        let gm = gp + l.sites;
        Columns { d, x, e, c, uc, ud, gp, gm, total: gm + l.sites }
    }
}

#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let row = self.b.len();
        for &(j, v) in terms {
            self.i.push(row);
            self.j.push(j);
            self.v.push(v);
        }
        self.b.push(rhs);
    }

    fn upper(&mut self, col: usize, hi: f64) {
        self.push(&[(col, 1.0)], hi);
    }

    fn lower(&mut self, col: usize, lo: f64) {
        self.push(&[(col, -1.0)], -lo);
    }
}

pub fn solve_centralized(problem: &SlotProblem) -> Result<OracleSolution> {
    problem.validate().map_err(|e| Error::Oracle(e.to_string()))?;
    let l = &problem.layout;
    let cols = Columns::new(problem);

    // Servers are measured in units of `s`; the objective in units of `k`.
    let beta_mean = problem.beta.iter().sum::<f64>() / l.sites as f64;
    let s = if beta_mean > 0.0 { 1.0 / beta_mean } else { 1.0 };
    let k = {
        let mut m = 0.0f64;
        for v in [&problem.buy, &problem.gen_lin, &problem.charge_lin, &problem.discharge_lin] {
            m = v.iter().fold(m, |a, x| a.max(x.abs()));
        }
        for v in [&problem.d_cost, &problem.b_cost, &problem.e_cost] {
            m = v.iter().fold(m, |a, x| a.max(s * x.abs()));
        }
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };

    let mut q = vec![0.0; cols.total];
    let mut pdiag = vec![0.0; cols.total];
    for idx in 0..l.pair_len() {
        q[cols.d + idx] = problem.d_cost[idx] * s / k;
    }
    for idx in 0..l.batch_len() {
        q[cols.x + idx] = problem.b_cost[idx] * s / k;
        q[cols.e + idx] = problem.e_cost[idx] * s / k;
    }
    for i in 0..l.sites {
        q[cols.c + i] = problem.gen_lin[i] / k;
        q[cols.uc + i] = problem.charge_lin[i] / k;
        q[cols.ud + i] = problem.discharge_lin[i] / k;
        q[cols.gp + i] = problem.buy[i] / k;
        q[cols.gm + i] = -problem.sell[i] / k;
        pdiag[cols.c + i] = 2.0 * problem.gen_quad[i] / k;
        pdiag[cols.uc + i] = 2.0 * problem.batt_quad[i] / k;
        pdiag[cols.ud + i] = 2.0 * problem.batt_quad[i] / k;
    }
    let pcols: Vec<usize> = (0..cols.total).filter(|&j| pdiag[j] != 0.0).collect();
    let p_mat = CscMatrix::new_from_triplets(
        cols.total,
        cols.total,
        pcols.clone(),
        pcols.clone(),
        pcols.iter().map(|&j| pdiag[j]).collect(),
    );

    let site_load = |i: usize, coef: f64| -> Vec<(usize, f64)> {
        let mut t: Vec<(usize, f64)> = (0..l.frontends).map(|f| (cols.d + l.fi(f, i), coef)).collect();
        for idx in l.site_batch(i) {
            t.push((cols.x + idx, coef));
            t.push((cols.e + idx, -coef));
        }
        t
    };

    let mut eq = Rows::default();
    for f in 0..l.frontends {
        let terms: Vec<_> = (0..l.sites).map(|i| (cols.d + l.fi(f, i), 1.0)).collect();
        eq.push(&terms, problem.lambda[f] / s);
    }
    for i in 0..l.sites {
        let mut terms = site_load(i, -problem.beta[i] * s);
        terms.extend([
            (cols.gp + i, 1.0),
            (cols.gm + i, -1.0),
            (cols.c + i, 1.0),
            (cols.ud + i, 1.0),
            (cols.uc + i, -1.0),
        ]);
        eq.push(&terms, problem.alpha[i] - problem.renewable[i]);
    }

    let mut ineq = Rows::default();
    for idx in 0..l.pair_len() {
        ineq.lower(cols.d + idx, 0.0);
    }
    for idx in 0..l.batch_len() {
        ineq.lower(cols.x + idx, problem.x_lo[idx] / s);
        ineq.upper(cols.x + idx, problem.x_hi[idx] / s);
        ineq.lower(cols.e + idx, 0.0);
        ineq.push(&[(cols.e + idx, 1.0), (cols.x + idx, -1.0)], 0.0);
    }
    for i in 0..l.sites {
        ineq.push(&site_load(i, 1.0), problem.capacity[i] / s);
        ineq.lower(cols.c + i, problem.c_lo[i]);
        ineq.upper(cols.c + i, problem.c_hi[i]);
        ineq.lower(cols.uc + i, 0.0);
        ineq.upper(cols.uc + i, problem.uc_max[i]);
        ineq.lower(cols.ud + i, 0.0);
        ineq.upper(cols.ud + i, problem.ud_max[i]);
        ineq.lower(cols.gp + i, 0.0);
        ineq.upper(cols.gp + i, problem.g_hi[i].max(0.0));
        ineq.lower(cols.gm + i, 0.0);
        ineq.upper(cols.gm + i, (-problem.g_lo[i]).max(0.0));
        ineq.push(&[(cols.gp + i, 1.0), (cols.gm + i, -1.0)], problem.g_hi[i]);
        ineq.push(&[(cols.gp + i, -1.0), (cols.gm + i, 1.0)], -problem.g_lo[i]);
    }

    let n_eq = eq.b.len();
    let n_ineq = ineq.b.len();
    let mut rows_i = eq.i;
    let mut rows_j = eq.j;
    let mut vals = eq.v;
    rows_i.extend(ineq.i.iter().map(|r| r + n_eq));
    rows_j.extend(ineq.j);
    vals.extend(ineq.v);
    let mut rhs = eq.b;
    rhs.extend(ineq.b);
    let a_mat = CscMatrix::new_from_triplets(n_eq + n_ineq, cols.total, rows_i, rows_j, vals);
    let cones = [SupportedConeT::ZeroConeT(n_eq), SupportedConeT::NonnegativeConeT(n_ineq)];

    let settings = DefaultSettings {
        verbose: false,
        max_iter: 500,
        tol_gap_abs: 1e-11,
        tol_gap_rel: 1e-11,
        tol_feas: 1e-11,
        tol_ktratio: 1e-9,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &rhs, &cones, settings)
        .map_err(|e| Error::Oracle(format!("setup failed: {e}")))?;
    solver.solve();
    let sol = &solver.solution;
    if !matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return Err(Error::Oracle(format!("interior-point status {:?}", sol.status)));
    }

    let xv = &sol.x;
    let mut dec = ControlDecision::zeros(l);
    for idx in 0..l.pair_len() {
        dec.d[idx] = (xv[cols.d + idx] * s).max(0.0);
    }
    for idx in 0..l.batch_len() {
        dec.x[idx] = (xv[cols.x + idx] * s).clamp(problem.x_lo[idx], problem.x_hi[idx]);
        dec.e[idx] = (xv[cols.e + idx] * s).clamp(0.0, dec.x[idx]);
    }
    for i in 0..l.sites {
        dec.c[i] = xv[cols.c + i].clamp(problem.c_lo[i], problem.c_hi[i]);
        dec.u_c[i] = xv[cols.uc + i].clamp(0.0, problem.uc_max[i]);
        dec.u_d[i] = xv[cols.ud + i].clamp(0.0, problem.ud_max[i]);
        dec.g[i] = xv[cols.gp + i] - xv[cols.gm + i];
    }
    let auxiliary = Auxiliaries {
        a: dec.d.clone(),
        b: dec.x.clone(),
        h: (0..l.sites).map(|i| problem.capacity[i] - problem.load(&dec, i)).collect(),
        z: (0..l.batch_len()).map(|idx| dec.x[idx] - dec.e[idx]).collect(),
    };
    Ok(OracleSolution {
        objective: problem.objective(&dec),
        kkt_residual: sol.r_prim.max(sol.r_dual),
        balance_multiplier: (0..l.sites).map(|i| sol.z[l.frontends + i] * k).collect(),
        decision: dec,
        auxiliary,
    })
}

/// Best decision on a uniform grid with `intervals` cells per free axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub decision: ControlDecision,
    pub objective: f64,
    pub free_dimensions: usize,
}

pub const GRID_MAX_DIMENSIONS: usize = 6;

/// Exhaustive search over the decision space with the grid exchange
/// eliminated through the power balance.
pub fn brute_force_grid(problem: &SlotProblem, intervals: usize) -> Result<GridSolution> {
    let l = &problem.layout;
    let intervals = intervals.max(1);

    // Each axis writes one scalar of the decision; allocation axes fill the
    // last destination of a front-end with the remainder.
    #[derive(Clone, Copy)]
    enum Axis {
        D(usize, usize),
        X(usize),
        E(usize),
        C(usize),
        Uc(usize),
        Ud(usize),
    }
    let mut axes: Vec<(Axis, f64, f64)> = Vec::new();
    for f in 0..l.frontends {
        if l.sites > 1 && problem.lambda[f] > 0.0 {
            for i in 0..l.sites - 1 {
                axes.push((Axis::D(f, i), 0.0, problem.lambda[f]));
            }
        }
    }
    for k in 0..l.batch_len() {
        if problem.x_hi[k] > problem.x_lo[k] {
            axes.push((Axis::X(k), problem.x_lo[k], problem.x_hi[k]));
        }
        if problem.x_hi[k] > 0.0 {
            axes.push((Axis::E(k), 0.0, problem.x_hi[k]));
        }
    }
    for i in 0..l.sites {
        if problem.c_hi[i] > problem.c_lo[i] {
            axes.push((Axis::C(i), problem.c_lo[i], problem.c_hi[i]));
        }
        if problem.uc_max[i] > 0.0 {
            axes.push((Axis::Uc(i), 0.0, problem.uc_max[i]));
        }
        if problem.ud_max[i] > 0.0 {
            axes.push((Axis::Ud(i), 0.0, problem.ud_max[i]));
        }
    }
    if axes.len() > GRID_MAX_DIMENSIONS {
        return Err(Error::Oracle(format!(
            "grid search refuses {} free dimensions (limit {GRID_MAX_DIMENSIONS})",
            axes.len()
        )));
    }

    let mut base = ControlDecision::zeros(l);
    for k in 0..l.batch_len() {
        base.x[k] = problem.x_lo[k];
    }
    for i in 0..l.sites {
        base.c[i] = problem.c_lo[i];
    }
    if l.sites == 1 {
        for f in 0..l.frontends {
            base.d[l.fi(f, 0)] = problem.lambda[f];
        }
    }

    let mut best: Option<(f64, ControlDecision)> = None;
    let mut idx = vec![0usize; axes.len()];
    let mut dec = base.clone();
    'outer: loop {
        dec.clone_from(&base);
        for (a, &(axis, lo, hi)) in axes.iter().enumerate() {
            let v = lo + (hi - lo) * idx[a] as f64 / intervals as f64;
            match axis {
                Axis::D(f, i) => dec.d[l.fi(f, i)] = v,
                Axis::X(k) => dec.x[k] = v,
                Axis::E(k) => dec.e[k] = v,
                Axis::C(i) => dec.c[i] = v,
                Axis::Uc(i) => dec.u_c[i] = v,
                Axis::Ud(i) => dec.u_d[i] = v,
            }
        }
        if grid_point_feasible(problem, &mut dec) {
            let obj = problem.objective(&dec);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, dec.clone()));
            }
        }
        for k in idx.iter_mut() {
            *k += 1;
            if *k <= intervals {
                continue 'outer;
            }
            *k = 0;
        }
        break;
    }
    let (objective, decision) = best.ok_or_else(|| Error::Oracle("no feasible grid point".into()))?;
    Ok(GridSolution { decision, objective, free_dimensions: axes.len() })
}

/// Completes the remainder allocation and the grid exchange; false when the
/// point violates a constraint.
fn grid_point_feasible(problem: &SlotProblem, dec: &mut ControlDecision) -> bool {
    let l = &problem.layout;
    if l.sites > 1 {
        for f in 0..l.frontends {
            let used: f64 = (0..l.sites - 1).map(|i| dec.d[l.fi(f, i)]).sum();
            let rest = problem.lambda[f] - used;
            if rest < -1e-9 * (1.0 + problem.lambda[f]) {
                return false;
            }
            dec.d[l.fi(f, l.sites - 1)] = rest.max(0.0);
        }
    }
    for k in 0..l.batch_len() {
        if dec.e[k] > dec.x[k] {
            return false;
        }
    }
    for i in 0..l.sites {
        let load = problem.load(dec, i);
        if load > problem.capacity[i] * (1.0 + 1e-12) {
            return false;
        }
        let p = problem.alpha[i] + problem.beta[i] * load;
        let g = p + dec.u_c[i] - problem.renewable[i] - dec.c[i] - dec.u_d[i];
        if g < problem.g_lo[i] || g > problem.g_hi[i] {
            return false;
        }
        dec.g[i] = g;
    }
    true
}

/// Size limits for [`random_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLimits {
    pub max_sites: usize,
    pub max_frontends: usize,
    pub max_batch_types: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        InstanceLimits { max_sites: 3, max_frontends: 2, max_batch_types: 2 }
    }
}

/// A self-consistent random scenario, state and slot, with its problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInstance {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub constants: LyapunovConstants,
    pub state: SystemState,
    pub inputs: SlotInputs,
    pub problem: SlotProblem,
}

/// Draws a configuration, state and slot uniformly within plausible ranges.
pub fn random_instance(seed: u64, limits: InstanceLimits) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=limits.max_sites.max(1));
    let nf = rng.gen_range(1..=limits.max_frontends.max(1));

    let mut sites = Vec::with_capacity(n);
    for i in 0..n {
        let servers = rng.gen_range(500.0..5000.0);
        let idle = rng.gen_range(100.0..150.0);
        let charge_max = rng.gen_range(0.0..0.3);
        let discharge_max = rng.gen_range(0.0..0.3);
        let eta_c = rng.gen_range(0.8..=1.0);
        let eta_d = rng.gen_range(0.8..=1.0);
        let swing = eta_c * charge_max + discharge_max / eta_d;
        let x_min = rng.gen_range(20.0..60.0);
        let m_i = rng.gen_range(0..=limits.max_batch_types);
        let batch = (0..m_i)
            .map(|_| {
                let arrival = rng.gen_range(0.0..0.3) * servers;
                BatchTypeConfig {
                    max_service: arrival * rng.gen_range(1.0..1.5),
                    max_arrival: arrival,
                    tolerant_delay: rng.gen_range(2..=24),
                    epsilon: None,
                }
            })
            .collect();
        let mut site = SiteConfig {
            name: format!("r{i}"),
            servers,
            pue: rng.gen_range(1.05..1.5),
            idle_power_w: idle,
            peak_power_w: idle + rng.gen_range(30.0..100.0),
            generator_max_mw: rng.gen_range(0.1..1.0),
            ramp_coefficient: rng.gen_range(0.3..=1.0),
            generator_cost: GeneratorCost {
                quadratic: rng.gen_range(0.0..50.0),
                linear: rng.gen_range(50.0..300.0),
                constant: 0.0,
            },
            charge_max_mw: charge_max,
            discharge_max_mw: discharge_max,
            charge_efficiency: eta_c,
            discharge_efficiency: eta_d,
            energy_min_mwh: 0.0,
            energy_max_mwh: swing + rng.gen_range(0.5..3.0),
            initial_energy_mwh: None,
            battery_cost: rng.gen_range(0.0..200.0),
            sell_limit_mw: 0.0,
            buy_limit_mw: 0.0,
            buy_price_min: x_min,
            buy_price_max: x_min * rng.gen_range(1.0..1.1),
            sell_price_min: x_min * 0.3,
            sell_price_max: x_min * 0.95,
            drop_penalty: rng.gen_range(0.0..0.2),
            batch,
        };
        let full_load = site.alpha() + site.beta() * site.servers;
        site.buy_limit_mw = full_load + rng.gen_range(0.1..2.0);
        site.sell_limit_mw = -(1.5 * full_load + rng.gen_range(0.1..2.0));
        sites.push(site);
    }
    let latency_ms = (0..nf).map(|_| (0..n).map(|_| rng.gen_range(5.0..80.0)).collect()).collect();
    let mut cfg = ScenarioConfig {
        sites,
        frontends: nf,
        latency_ms,
        latency_cost: rng.gen_range(0.0..2e-4),
        control: ControlKnobs { v: None, w: 10f64.powf(rng.gen_range(-12.0..-4.0)), enforce_ramp: true },
        synthetic: SyntheticProfile::default(),
    };
    let vmax = crate::queues::v_max(&cfg)?;
    cfg.control.v = Some(vmax * rng.gen_range(0.0..=1.0));
    let constants = compute_constants(&cfg)?;
    let layout = cfg.layout();

    let mut state = SystemState::initial(&cfg, &constants)?;
    for (i, q, b) in cfg.batch_types() {
        let k = layout.iq(i, q);
        let s = &cfg.sites[i];
        state.q[k] = rng.gen_range(0.0..2.0) * b.max_service;
        let pressure = constants.v * s.beta() * s.buy_price_max / constants.w;
        state.h[k] = rng.gen_range(0.0..2.0) * pressure;
    }
    for (i, s) in cfg.sites.iter().enumerate() {
        let d = rng.gen_range(s.energy_min_mwh..=s.energy_max_mwh);
        state.energy[i] = d;
        state.z[i] = d + z_offset(s, constants.v, constants.sites[i].gamma_max);
        state.c_prev[i] = rng.gen_range(0.0..=s.generator_max_mw);
    }

    let total: f64 = cfg.sites.iter().map(|s| s.servers).sum();
    let mut inputs = SlotInputs::zeros(&layout);
    for f in 0..nf {
        inputs.lambda[f] = rng.gen_range(0.0..0.5) * total / nf as f64;
    }
    for (i, q, b) in cfg.batch_types() {
        inputs.arrivals[layout.iq(i, q)] = rng.gen_range(0.0..=b.max_arrival);
    }
    for (i, s) in cfg.sites.iter().enumerate() {
        let full_load = s.alpha() + s.beta() * s.servers;
        inputs.renewable[i] = rng.gen_range(0.0..1.5) * full_load;
        inputs.buy_price[i] = rng.gen_range(s.buy_price_min..=s.buy_price_max);
        inputs.sell_price[i] = rng.gen_range(s.sell_price_min..=s.sell_price_max);
    }
    let problem = build_slot_problem(&cfg, &constants, &inputs, &state)?;
    Ok(RandomInstance { seed, config: cfg, constants, state, inputs, problem })
}

/// One (instance, solution, objective) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub seed: u64,
    pub problem: SlotProblem,
    pub decision: ControlDecision,
    pub objective: f64,
}

/// Solves one random instance per seed and writes `fixture_<seed>.json` files.
pub fn emit_fixtures(dir: &Path, seeds: &[u64], limits: InstanceLimits) -> Result<Vec<Fixture>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let inst = random_instance(seed, limits)?;
        let sol = solve_centralized(&inst.problem)?;
        let fx = Fixture { seed, problem: inst.problem, decision: sol.decision, objective: sol.objective };
        let path = dir.join(format!("fixture_{seed}.json"));
        let text = serde_json::to_string_pretty(&fx)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        out.push(fx);
    }
    Ok(out)
}

pub fn load_fixture(path: &Path) -> Result<Fixture> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_feasibility, FeasibilityChecks, FeasibilityContext};

    fn zero_problem(inst: &RandomInstance) -> SlotProblem {
        let mut p = inst.problem.clone();
        let zero = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = 0.0);
        for v in [
            &mut p.lambda,
            &mut p.alpha,
            &mut p.beta,
            &mut p.renewable,
            &mut p.m,
            &mut p.b_cost,
            &mut p.charge_lin,
            &mut p.discharge_lin,
            &mut p.x_hi,
            &mut p.c_lo,
            &mut p.gen_const,
            &mut p.sell,
        ] {
            zero(v);
        }
        p
    }

    #[test]
    fn zero_instance_has_zero_solution() {
        let inst = random_instance(5, InstanceLimits::default()).unwrap();
        let p = zero_problem(&inst);
        let sol = solve_centralized(&p).unwrap();
        assert!(sol.objective.abs() < 1e-8, "{}", sol.objective);
        if let Ok(g) = brute_force_grid(&p, 4) {
            assert!(g.objective.abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_solutions_are_feasible() {
        for seed in 0..20 {
            let inst = random_instance(seed, InstanceLimits::default()).unwrap();
            let sol = solve_centralized(&inst.problem).unwrap();
            let report = check_feasibility(
                &inst.config,
                &inst.inputs,
                FeasibilityContext { backlog: &inst.state.q, c_prev: &inst.state.c_prev },
                &sol.decision,
                FeasibilityChecks { ramp: true, complementarity: false },
            );
            let serious: Vec<_> = report
                .iter()
                .filter(|v| !matches!(v, crate::model::Violation::Balance { residual, .. } if residual.abs() < 1e-5))
                .collect();
            assert!(serious.is_empty(), "seed {seed}: {report:?}");
            assert!(sol.kkt_residual < 1e-7, "seed {seed}: {}", sol.kkt_residual);
        }
    }

    #[test]
    fn oracle_is_deterministic() {
        let inst = random_instance(11, InstanceLimits::default()).unwrap();
        let a = solve_centralized(&inst.problem).unwrap();
        let b = solve_centralized(&inst.problem).unwrap();
        assert_eq!(a.objective, b.objective);
    }

    /// One microgrid, no servers in use: only generator, battery and grid.
    fn energy_only(renewable: f64, sell: f64) -> SlotProblem {
        let inst = random_instance(3, InstanceLimits { max_sites: 1, max_frontends: 1, max_batch_types: 0 }).unwrap();
        let mut p = inst.problem;
        p.lambda[0] = 0.0;
        p.renewable[0] = renewable;
        p.m[0] = p.alpha[0] + p.beta[0] * p.capacity[0] - renewable;
        p.buy[0] = 1.0;
        p.sell[0] = sell;
        p.gen_quad[0] = 0.5;
        p.gen_lin[0] = 2.0;
        p.c_lo[0] = 0.0;
        p.c_hi[0] = 1.0;
        p.charge_lin[0] = 0.1;
        p.discharge_lin[0] = 0.3;
        p.batt_quad[0] = 0.2;
        p.uc_max[0] = 0.3;
        p.ud_max[0] = 0.3;
        p.g_lo[0] = -renewable - 5.0;
        p.g_hi[0] = p.alpha[0] + 5.0;
        p
    }

    #[test]
    fn grid_matches_interior_point_on_energy_only_instance() {
        let p = energy_only(0.2, 0.5);
        let grid = brute_force_grid(&p, 300).unwrap();
        assert_eq!(grid.free_dimensions, 3);
        let sol = solve_centralized(&p).unwrap();
        // One grid cell moves the objective by at most |gradient| * cell.
        let cell = 1.0 / 300.0;
        assert!((grid.objective - sol.objective).abs() < 5.0 * cell, "{} vs {}", grid.objective, sol.objective);
        assert!(grid.objective >= sol.objective - 1e-9);
    }

    #[test]
    fn selling_is_chosen_when_profitable() {
        let mut p = energy_only(0.0, 0.9);
        let surplus = p.alpha[0] + 2.0;
        p.renewable[0] = surplus;
        p.m[0] = p.alpha[0] + p.beta[0] * p.capacity[0] - surplus;
        p.g_lo[0] = -surplus - 5.0;
        let grid = brute_force_grid(&p, 60).unwrap();
        assert!(grid.decision.g[0] < 0.0);
        assert!(solve_centralized(&p).unwrap().decision.g[0] < 0.0);
    }

    #[test]
    fn grid_refuses_large_instances() {
        let inst = random_instance(0, InstanceLimits { max_sites: 3, max_frontends: 2, max_batch_types: 2 }).unwrap();
        let mut p = inst.problem;
        // Make every axis free.
        p.lambda.iter_mut().for_each(|l| *l = 10.0);
        if p.layout.sites >= 2 && p.layout.pair_len() + 3 * p.layout.sites > GRID_MAX_DIMENSIONS {
            assert!(matches!(brute_force_grid(&p, 2), Err(Error::Oracle(_))));
        }
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_fixtures(dir.path(), &[1, 2], InstanceLimits::default()).unwrap();
        let back = load_fixture(&dir.path().join("fixture_2.json")).unwrap();
        assert_eq!(back, written[1]);
    }
}
