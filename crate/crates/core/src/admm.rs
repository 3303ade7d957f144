//! Per-slot drift-plus-penalty problem and its decomposed ADM-G solver.
//!
//! The solver works on a rescaled copy of the problem: server-valued
//! quantities are divided by the number of servers that draw one MW, and the
//! objective by a typical marginal power price. Both rescalings leave the
//! coupling structure (and hence the correction step) unchanged; they only put
//! server and power residuals on the same footing so that a single penalty
//! parameter fits both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationKind};
use crate::model::{grid_cost, ControlDecision, Layout, ScenarioConfig, SlotInputs};
use crate::queues::{LyapunovConstants, SystemState};

/// One ADMM iteration's diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub xi: f64,
    pub ell: f64,
    /// Distance between the predicted and current iterates.
    pub step: f64,
}

/// All coefficients and boxes of one slot's problem, in physical units.
///
/// Cost coefficients already include the value of V; the objective is
/// `V*Gamma - sum w(Q+H) x + sum Z (eta_c u_c - u_d / eta_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotProblem {
    pub layout: Layout,
    pub lambda: Vec<f64>,
    pub capacity: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub renewable: Vec<f64>,
    /// `alpha + beta*C - r`.
    pub m: Vec<f64>,

    pub d_cost: Vec<f64>,
    pub b_cost: Vec<f64>,
    pub e_cost: Vec<f64>,
    pub gen_quad: Vec<f64>,
    pub gen_lin: Vec<f64>,
    pub gen_const: Vec<f64>,
    pub batt_quad: Vec<f64>,
    pub charge_lin: Vec<f64>,
    pub discharge_lin: Vec<f64>,
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,

    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub c_lo: Vec<f64>,
    pub c_hi: Vec<f64>,
    pub uc_max: Vec<f64>,
    pub ud_max: Vec<f64>,
    pub g_lo: Vec<f64>,
    pub g_hi: Vec<f64>,
}

/// Parses a slot problem from JSON, either bare or under a `problem` key
/// (as in fixture files), and checks its dimensions.
pub fn parse_slot_problem(text: &str) -> Result<SlotProblem> {
    let schema =
        |e: serde_json::Error| Error::validation(ValidationKind::Schema, format!("line {}", e.line()), e.to_string());
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(schema)?;
    if let Some(inner) = value.get_mut("problem") {
        value = inner.take();
    }
    let problem: SlotProblem = serde_json::from_value(value).map_err(schema)?;
    problem.validate().map_err(|e| Error::validation(ValidationKind::Schema, "problem", e.to_string()))?;
    Ok(problem)
}

pub fn build_slot_problem(
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    inputs: &SlotInputs,
    state: &SystemState,
) -> Result<SlotProblem> {
    let layout = cfg.layout();
    let (v, w) = (consts.v, consts.w);
    let n = layout.sites;

    let mut p = SlotProblem {
        lambda: inputs.lambda.clone(),
        capacity: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        beta: Vec::with_capacity(n),
        renewable: inputs.renewable.clone(),
        m: Vec::with_capacity(n),
        d_cost: vec![0.0; layout.pair_len()],
        b_cost: vec![0.0; layout.batch_len()],
        e_cost: vec![0.0; layout.batch_len()],
        gen_quad: Vec::with_capacity(n),
        gen_lin: Vec::with_capacity(n),
        gen_const: Vec::with_capacity(n),
        batt_quad: Vec::with_capacity(n),
        charge_lin: Vec::with_capacity(n),
        discharge_lin: Vec::with_capacity(n),
        buy: inputs.buy_price.iter().map(|x| v * x).collect(),
        sell: inputs.sell_price.iter().map(|x| v * x).collect(),
        x_lo: vec![0.0; layout.batch_len()],
        x_hi: vec![0.0; layout.batch_len()],
        c_lo: Vec::with_capacity(n),
        c_hi: Vec::with_capacity(n),
        uc_max: Vec::with_capacity(n),
        ud_max: Vec::with_capacity(n),
        g_lo: Vec::with_capacity(n),
        g_hi: Vec::with_capacity(n),
        layout,
    };

    for (i, s) in cfg.sites.iter().enumerate() {
        let (alpha, beta) = (s.alpha(), s.beta());
        p.capacity.push(s.servers);
        p.alpha.push(alpha);
        p.beta.push(beta);
        p.m.push(alpha + beta * s.servers - inputs.renewable[i]);
        p.gen_quad.push(v * s.generator_cost.quadratic);
        p.gen_lin.push(v * s.generator_cost.linear);
        p.gen_const.push(v * s.generator_cost.constant);
        p.batt_quad.push(v * s.battery_cost);
        p.charge_lin.push(state.z[i] * s.charge_efficiency);
        p.discharge_lin.push(-state.z[i] / s.discharge_efficiency);

        let (lo, hi) = if cfg.control.enforce_ramp {
            let step = s.ramp_coefficient * s.generator_max_mw;
            ((state.c_prev[i] - step).max(0.0), (state.c_prev[i] + step).min(s.generator_max_mw))
        } else {
            (0.0, s.generator_max_mw)
        };
        p.c_lo.push(lo);
        p.c_hi.push(hi);
        p.uc_max.push(s.charge_max_mw);
        p.ud_max.push(s.discharge_max_mw);
        p.g_lo.push(s.sell_limit_mw);
        p.g_hi.push(s.buy_limit_mw);

        for f in 0..cfg.frontends {
            let k = p.layout.fi(f, i);
            p.d_cost[k] = v * cfg.latency_cost * cfg.latency_ms[f][i];
        }
        for (q, b) in s.batch.iter().enumerate() {
            let k = p.layout.iq(i, q);
            p.b_cost[k] = -w * (state.q[k] + state.h[k]);
            p.e_cost[k] = v * s.drop_penalty;
            p.x_hi[k] = b.max_service.min(state.q[k]);
        }
    }
    p.validate()?;
    Ok(p)
}

impl SlotProblem {
    /// Rejects empty boxes and malformed shapes.
    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        let n = l.sites;
        let sizes = [
            ("lambda", self.lambda.len(), l.frontends),
            ("d_cost", self.d_cost.len(), l.pair_len()),
            ("b_cost", self.b_cost.len(), l.batch_len()),
            ("e_cost", self.e_cost.len(), l.batch_len()),
            ("x_lo", self.x_lo.len(), l.batch_len()),
            ("x_hi", self.x_hi.len(), l.batch_len()),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::ProblemConstruction(format!("{name} has {got} entries, expected {want}")));
            }
        }
        for (name, v) in [
            ("capacity", &self.capacity),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("renewable", &self.renewable),
            ("m", &self.m),
            ("gen_quad", &self.gen_quad),
            ("gen_lin", &self.gen_lin),
            ("gen_const", &self.gen_const),
            ("batt_quad", &self.batt_quad),
            ("charge_lin", &self.charge_lin),
            ("discharge_lin", &self.discharge_lin),
            ("buy", &self.buy),
            ("sell", &self.sell),
            ("c_lo", &self.c_lo),
            ("c_hi", &self.c_hi),
            ("uc_max", &self.uc_max),
            ("ud_max", &self.ud_max),
            ("g_lo", &self.g_lo),
            ("g_hi", &self.g_hi),
        ] {
            if v.len() != n {
                return Err(Error::ProblemConstruction(format!("{name} has {} entries, expected {n}", v.len())));
            }
        }
        let all_values = [
            &self.lambda,
            &self.capacity,
            &self.alpha,
            &self.beta,
            &self.renewable,
            &self.m,
            &self.d_cost,
            &self.b_cost,
            &self.e_cost,
            &self.gen_quad,
            &self.gen_lin,
            &self.gen_const,
            &self.batt_quad,
            &self.charge_lin,
            &self.discharge_lin,
            &self.buy,
            &self.sell,
            &self.x_lo,
            &self.x_hi,
            &self.c_lo,
            &self.c_hi,
            &self.uc_max,
            &self.ud_max,
            &self.g_lo,
            &self.g_hi,
        ];
        if all_values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::ProblemConstruction("non-finite coefficient".into()));
        }
        if let Some(f) = self.lambda.iter().position(|&x| x < 0.0) {
            return Err(Error::ProblemConstruction(format!("negative demand at front-end {f}")));
        }
        for k in 0..l.batch_len() {
            if self.x_hi[k] < 0.0 || self.x_lo[k] < 0.0 || self.x_lo[k] > self.x_hi[k] {
                return Err(Error::ProblemConstruction(format!(
                    "service box [{}, {}] at batch index {k} is empty",
                    self.x_lo[k], self.x_hi[k]
                )));
            }
        }
        for i in 0..n {
            let bad = |name: &str, lo: f64, hi: f64| {
                Error::ProblemConstruction(format!("{name} box [{lo}, {hi}] at site {i} is empty"))
            };
            if self.c_lo[i] > self.c_hi[i] {
                return Err(bad("generator", self.c_lo[i], self.c_hi[i]));
            }
            if self.uc_max[i] < 0.0 {
                return Err(bad("charge", 0.0, self.uc_max[i]));
            }
            if self.ud_max[i] < 0.0 {
                return Err(bad("discharge", 0.0, self.ud_max[i]));
            }
            if self.g_lo[i] > self.g_hi[i] {
                return Err(bad("grid", self.g_lo[i], self.g_hi[i]));
            }
            if self.capacity[i] < 0.0 || self.gen_quad[i] < 0.0 || self.batt_quad[i] < 0.0 {
                return Err(Error::ProblemConstruction(format!("negative capacity or curvature at site {i}")));
            }
            if self.buy[i] < self.sell[i] {
                return Err(Error::ProblemConstruction(format!("sell price above buy price at site {i}")));
            }
        }
        Ok(())
    }

    /// The slot objective of a decision, treating `x` as the served amount.
    pub fn objective(&self, dec: &ControlDecision) -> f64 {
        let l = &self.layout;
        let mut total = 0.0;
        for k in 0..l.pair_len() {
            total += self.d_cost[k] * dec.d[k];
        }
        for k in 0..l.batch_len() {
            total += self.b_cost[k] * dec.x[k] + self.e_cost[k] * dec.e[k];
        }
        for i in 0..l.sites {
            let (c, uc, ud) = (dec.c[i], dec.u_c[i], dec.u_d[i]);
            total += self.gen_quad[i] * c * c + self.gen_lin[i] * c + self.gen_const[i];
            total += self.batt_quad[i] * (uc * uc + ud * ud);
            total += self.charge_lin[i] * uc + self.discharge_lin[i] * ud;
            total += grid_cost(dec.g[i], self.buy[i], self.sell[i]);
        }
        total
    }

    /// Busy servers implied by a decision at site `i`.
    pub fn load(&self, dec: &ControlDecision, i: usize) -> f64 {
        dec.site_load(&self.layout, i)
    }

    /// Power-balance residual `g + r + c + u_d - p - u_c` at site `i`, MW.
    pub fn balance_residual(&self, dec: &ControlDecision, i: usize) -> f64 {
        let p = self.alpha[i] + self.beta[i] * self.load(dec, i);
        dec.g[i] + self.renewable[i] + dec.c[i] + dec.u_d[i] - p - dec.u_c[i]
    }

    /// Default stopping tolerance, in solver units.
    pub fn default_tolerance(&self) -> f64 {
        ScaledProblem::new(self).default_tolerance()
    }
}

/// Exact minimizer of `sum_i c_i d_i + (rho/2) d_i^2` over `{d >= 0, sum d = total}`.
pub fn solve_simplex_block(costs: &[f64], rho: f64, total: f64) -> Vec<f64> {
    let mut out = vec![0.0; costs.len()];
    let mut order = Vec::with_capacity(costs.len());
    simplex_into(costs, rho, total, &mut out, &mut order);
    out
}

fn simplex_into(costs: &[f64], rho: f64, total: f64, out: &mut [f64], order: &mut Vec<usize>) {
    let n = costs.len();
    if n == 0 {
        return;
    }
    if total <= 0.0 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    order.clear();
    order.extend(0..n);
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    // With k cheapest destinations active, nu = (rho*total + sum of their costs)/k.
    let mut prefix = 0.0;
    let mut nu = 0.0;
    for (k, &j) in order.iter().enumerate() {
        prefix += costs[j];
        nu = (rho * total + prefix) / (k + 1) as f64;
        if k + 1 == n || nu <= costs[order[k + 1]] {
            break;
        }
    }
    for j in 0..n {
        out[j] = ((nu - costs[j]) / rho).max(0.0);
    }
}

/// Minimizer of `(curvature/2) y^2 + linear*y` over `[lo, hi]`.
#[inline]
pub fn scalar_box_minimizer(curvature: f64, linear: f64, lo: f64, hi: f64) -> f64 {
    (-linear / curvature).clamp(lo, hi)
}

/// Exact minimizer of `(rho/2)(sum kappa_j y_j^2 + (sum y)^2) + sum c_j y_j` over `y >= 0`.
pub fn solve_coupled_nonneg_block(costs: &[f64], rho: f64, kappa: f64) -> Vec<f64> {
    let mut out = vec![0.0; costs.len()];
    let mut order = Vec::with_capacity(costs.len());
    coupled_into(costs, rho, kappa, &mut out, &mut order);
    out
}

fn coupled_into(costs: &[f64], rho: f64, kappa: f64, out: &mut [f64], order: &mut Vec<usize>) {
    // Stationarity reads y_j = max(0, (t_j - s)/kappa) with t_j = -c_j/rho and
    // s the optimal sum. Activating the largest t first gives a closed form
    // for s on each candidate active set.
    let n = costs.len();
    order.clear();
    order.extend((0..n).filter(|&j| costs[j] < 0.0));
    if order.is_empty() {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    let mut sum_t = 0.0;
    let mut s = 0.0;
    for (k, &j) in order.iter().enumerate() {
        sum_t += -costs[j] / rho;
        let active = (k + 1) as f64;
        s = (sum_t / kappa) / (1.0 + active / kappa);
        let next_t = order.get(k + 1).map_or(0.0, |&nj| -costs[nj] / rho);
        if s >= next_t {
            break;
        }
    }
    for j in 0..n {
        out[j] = ((-costs[j] / rho - s) / kappa).max(0.0);
    }
}

/// Minimizer of `(rho/2) g^2 + linear*g + buy*max(g,0) - sell*max(-g,0)` over `[lo, hi]`.
pub fn solve_abs_value_block(rho: f64, linear: f64, buy: f64, sell: f64, lo: f64, hi: f64) -> f64 {
    let up = -(linear + buy) / rho;
    let down = -(linear + sell) / rho;
    let g = if up > 0.0 {
        up
    } else if down < 0.0 {
        down
    } else {
        0.0
    };
    g.clamp(lo, hi)
}

/// Primal and dual blocks of the decomposed problem, in solver units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmIterate {
    pub d: Vec<f64>,
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub u_c: Vec<f64>,
    pub u_d: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub g: Vec<f64>,
    /// Capacity coupling multipliers.
    pub phi: Vec<f64>,
    /// Power balance multipliers.
    pub varphi: Vec<f64>,
    pub kappa: Vec<f64>,
    pub chi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl AdmmIterate {
    pub fn zeros(layout: &Layout) -> Self {
        let (n, pairs, batch) = (layout.sites, layout.pair_len(), layout.batch_len());
        AdmmIterate {
            d: vec![0.0; pairs],
            x: vec![0.0; batch],
            c: vec![0.0; n],
            u_c: vec![0.0; n],
            u_d: vec![0.0; n],
            a: vec![0.0; pairs],
            b: vec![0.0; batch],
            e: vec![0.0; batch],
            h: vec![0.0; n],
            z: vec![0.0; batch],
            g: vec![0.0; n],
            phi: vec![0.0; n],
            varphi: vec![0.0; n],
            kappa: vec![0.0; batch],
            chi: vec![0.0; pairs],
            psi: vec![0.0; batch],
        }
    }
}

/// A slot problem after the change of units used by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledProblem {
    pub layout: Layout,
    /// Physical servers per solver unit.
    pub server_scale: f64,
    /// Physical objective per solver unit.
    pub cost_scale: f64,
    lam: Vec<f64>,
    cap: Vec<f64>,
    alpha: Vec<f64>,
    bhat: Vec<f64>,
    renewable: Vec<f64>,
    m: Vec<f64>,
    dc: Vec<f64>,
    bc: Vec<f64>,
    ec: Vec<f64>,
    cq: Vec<f64>,
    cl: Vec<f64>,
    cc: Vec<f64>,
    uq: Vec<f64>,
    ucl: Vec<f64>,
    udl: Vec<f64>,
    buy: Vec<f64>,
    sell: Vec<f64>,
    x_lo: Vec<f64>,
    x_hi: Vec<f64>,
    c_lo: Vec<f64>,
    c_hi: Vec<f64>,
    uc_max: Vec<f64>,
    ud_max: Vec<f64>,
    g_lo: Vec<f64>,
    g_hi: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

impl ScaledProblem {
    pub fn new(p: &SlotProblem) -> Self {
        let beta_ref = mean(&p.beta);
        let s = if beta_ref > 0.0 { 1.0 / beta_ref } else { 1.0 };

        let k = [
            mean(&p.buy.iter().map(|x| x.abs()).collect::<Vec<_>>()),
            max_abs(&p.charge_lin),
            max_abs(&p.discharge_lin),
            max_abs(&p.gen_lin),
            s * max_abs(&p.b_cost),
            s * max_abs(&p.e_cost),
            s * max_abs(&p.d_cost),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let k = if k > 1e-12 { k } else { 1.0 };

        let div = |v: &[f64], by: f64| v.iter().map(|x| x / by).collect::<Vec<_>>();
        let mul = |v: &[f64], by: f64| v.iter().map(|x| x * by).collect::<Vec<_>>();
        ScaledProblem {
            layout: p.layout.clone(),
            server_scale: s,
            cost_scale: k,
            lam: div(&p.lambda, s),
            cap: div(&p.capacity, s),
            alpha: p.alpha.clone(),
            bhat: mul(&p.beta, s),
            renewable: p.renewable.clone(),
            m: p.m.clone(),
            dc: mul(&p.d_cost, s / k),
            bc: mul(&p.b_cost, s / k),
            ec: mul(&p.e_cost, s / k),
            cq: div(&p.gen_quad, k),
            cl: div(&p.gen_lin, k),
            cc: div(&p.gen_const, k),
            uq: div(&p.batt_quad, k),
            ucl: div(&p.charge_lin, k),
            udl: div(&p.discharge_lin, k),
            buy: div(&p.buy, k),
            sell: div(&p.sell, k),
            x_lo: div(&p.x_lo, s),
            x_hi: div(&p.x_hi, s),
            c_lo: p.c_lo.clone(),
            c_hi: p.c_hi.clone(),
            uc_max: p.uc_max.clone(),
            ud_max: p.ud_max.clone(),
            g_lo: p.g_lo.clone(),
            g_hi: p.g_hi.clone(),
        }
    }

    /// `1e-4 * (1 + |lambda|_1 + sum C)` measured in solver units.
    pub fn default_tolerance(&self) -> f64 {
        1e-4 * (1.0 + self.lam.iter().sum::<f64>() + self.cap.iter().sum::<f64>())
    }

    /// Primal residual of the five coupling families.
    pub fn xi(&self, it: &AdmmIterate) -> f64 {
        let l = &self.layout;
        let mut sq = 0.0;
        for i in 0..l.sites {
            let cap = self.cap_residual(it, i);
            let bal = it.g[i] + it.c[i] + it.u_d[i] - it.u_c[i] + self.bhat[i] * it.h[i] - self.m[i];
            sq += cap * cap + bal * bal;
        }
        for k in 0..l.batch_len() {
            let ez = it.e[k] + it.z[k] - it.b[k];
            let xb = it.x[k] - it.b[k];
            sq += ez * ez + xb * xb;
        }
        for k in 0..l.pair_len() {
            let da = it.d[k] - it.a[k];
            sq += da * da;
        }
        sq.sqrt()
    }

    fn cap_residual(&self, it: &AdmmIterate, i: usize) -> f64 {
        let l = &self.layout;
        let a: f64 = (0..l.frontends).map(|f| it.a[l.fi(f, i)]).sum();
        let be: f64 = l.site_batch(i).map(|k| it.b[k] - it.e[k]).sum();
        a + be + it.h[i] - self.cap[i]
    }

    /// Euclidean distance between two iterates over the corrected primal blocks.
    pub fn step(&self, cur: &AdmmIterate, pr: &AdmmIterate) -> f64 {
        let mut sq = 0.0;
        for (u, v) in [
            (&cur.x, &pr.x),
            (&cur.c, &pr.c),
            (&cur.u_c, &pr.u_c),
            (&cur.u_d, &pr.u_d),
            (&cur.a, &pr.a),
            (&cur.b, &pr.b),
            (&cur.e, &pr.e),
            (&cur.h, &pr.h),
            (&cur.z, &pr.z),
            (&cur.g, &pr.g),
        ] {
            sq += u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        sq.sqrt()
    }

    /// Violation of the original capacity, balance and drop constraints.
    pub fn ell(&self, it: &AdmmIterate) -> f64 {
        let l = &self.layout;
        let mut total = 0.0;
        for i in 0..l.sites {
            let load = self.load(it, i);
            total += (load - self.cap[i]).max(0.0);
            let p = self.alpha[i] + self.bhat[i] * load;
            total += (it.g[i] + self.renewable[i] + it.c[i] + it.u_d[i] - p - it.u_c[i]).abs();
        }
        for k in 0..l.batch_len() {
            total += (it.e[k] - it.x[k]).max(0.0);
        }
        total
    }

    fn load(&self, it: &AdmmIterate, i: usize) -> f64 {
        let l = &self.layout;
        let d: f64 = (0..l.frontends).map(|f| it.d[l.fi(f, i)]).sum();
        let xe: f64 = l.site_batch(i).map(|k| it.x[k] - it.e[k]).sum();
        d + xe
    }

    /// Physical objective of the original-variable blocks of an iterate.
    pub fn objective(&self, it: &AdmmIterate) -> f64 {
        let l = &self.layout;
        let mut total = 0.0;
        for k in 0..l.pair_len() {
            total += self.dc[k] * it.d[k];
        }
        for k in 0..l.batch_len() {
            total += self.bc[k] * it.x[k] + self.ec[k] * it.e[k];
        }
        for i in 0..l.sites {
            let (c, uc, ud) = (it.c[i], it.u_c[i], it.u_d[i]);
            total += self.cq[i] * c * c + self.cl[i] * c + self.cc[i];
            total += self.uq[i] * (uc * uc + ud * ud) + self.ucl[i] * uc + self.udl[i] * ud;
            total += grid_cost(it.g[i], self.buy[i], self.sell[i]);
        }
        total * self.cost_scale
    }

    /// Physical decision held in the original-variable blocks.
    pub fn decision(&self, it: &AdmmIterate) -> ControlDecision {
        let s = self.server_scale;
        ControlDecision {
            d: it.d.iter().map(|v| v * s).collect(),
            x: it.x.iter().map(|v| v * s).collect(),
            e: it.e.iter().map(|v| v * s).collect(),
            c: it.c.clone(),
            g: it.g.clone(),
            u_c: it.u_c.clone(),
            u_d: it.u_d.clone(),
            curtailed: vec![0.0; self.layout.sites],
        }
    }

    /// Solver-unit view of a physical decision (auxiliaries at their implied values).
    pub fn scale_decision(&self, dec: &ControlDecision) -> AdmmIterate {
        let s = self.server_scale;
        let mut it = AdmmIterate::zeros(&self.layout);
        it.d = dec.d.iter().map(|v| v / s).collect();
        it.x = dec.x.iter().map(|v| v / s).collect();
        it.e = dec.e.iter().map(|v| v / s).collect();
        it.c = dec.c.clone();
        it.g = dec.g.clone();
        it.u_c = dec.u_c.clone();
        it.u_d = dec.u_d.clone();
        it.a = it.d.clone();
        it.b = it.x.clone();
        for k in 0..self.layout.batch_len() {
            it.z[k] = it.x[k] - it.e[k];
        }
        for i in 0..self.layout.sites {
            it.h[i] = self.cap[i] - self.load(&it, i);
        }
        it
    }
}

/// Reusable buffers for the per-entity block solves.
#[derive(Debug, Default)]
struct Scratch {
    costs: Vec<f64>,
    out: Vec<f64>,
    order: Vec<usize>,
}

/// Runs the eleven block minimizations in forward order.
pub fn prediction_step(sp: &ScaledProblem, cur: &AdmmIterate, pr: &mut AdmmIterate, rho: f64) {
    let mut scratch = Scratch::default();
    predict(sp, cur, pr, rho, &mut scratch);
}

fn predict(sp: &ScaledProblem, cur: &AdmmIterate, pr: &mut AdmmIterate, rho: f64, sc: &mut Scratch) {
    let l = &sp.layout;
    let (n, nf) = (l.sites, l.frontends);

    for f in 0..nf {
        sc.costs.clear();
        sc.costs.extend((0..n).map(|i| {
            let k = l.fi(f, i);
            sp.dc[k] + cur.chi[k] - rho * cur.a[k]
        }));
        sc.out.resize(n, 0.0);
        simplex_into(&sc.costs, rho, sp.lam[f], &mut sc.out, &mut sc.order);
        for i in 0..n {
            pr.d[l.fi(f, i)] = sc.out[i];
        }
    }

    for k in 0..l.batch_len() {
        pr.x[k] = (cur.b[k] - cur.psi[k] / rho).clamp(sp.x_lo[k], sp.x_hi[k]);
    }

    for i in 0..n {
        let bh = sp.bhat[i] * cur.h[i] - sp.m[i];
        let rest = cur.g[i] + cur.u_d[i] - cur.u_c[i] + bh;
        pr.c[i] =
            scalar_box_minimizer(2.0 * sp.cq[i] + rho, sp.cl[i] + cur.varphi[i] + rho * rest, sp.c_lo[i], sp.c_hi[i]);
        let rest = cur.g[i] + pr.c[i] + cur.u_d[i] + bh;
        pr.u_c[i] =
            scalar_box_minimizer(2.0 * sp.uq[i] + rho, sp.ucl[i] - cur.varphi[i] - rho * rest, 0.0, sp.uc_max[i]);
        let rest = cur.g[i] + pr.c[i] - pr.u_c[i] + bh;
        pr.u_d[i] =
            scalar_box_minimizer(2.0 * sp.uq[i] + rho, sp.udl[i] + cur.varphi[i] + rho * rest, 0.0, sp.ud_max[i]);
    }

    for i in 0..n {
        let batch = l.site_batch(i);
        let be: f64 = batch.clone().map(|k| cur.b[k] - cur.e[k]).sum();
        let shift = be + cur.h[i] - sp.cap[i];
        sc.costs.clear();
        sc.costs.extend((0..nf).map(|f| {
            let k = l.fi(f, i);
            cur.phi[i] - cur.chi[k] - rho * pr.d[k] + rho * shift
        }));
        sc.out.resize(nf, 0.0);
        coupled_into(&sc.costs, rho, 1.0, &mut sc.out, &mut sc.order);
        for f in 0..nf {
            pr.a[l.fi(f, i)] = sc.out[f];
        }
        let a_sum: f64 = sc.out.iter().sum();
        let mi = batch.len();

        let e_sum: f64 = batch.clone().map(|k| cur.e[k]).sum();
        let shift = a_sum - e_sum + cur.h[i] - sp.cap[i];
        sc.costs.clear();
        sc.costs.extend(batch.clone().map(|k| {
            sp.bc[k] + cur.phi[i] - cur.kappa[k] - cur.psi[k] - rho * (cur.e[k] + cur.z[k] + pr.x[k]) + rho * shift
        }));
        sc.out.resize(mi, 0.0);
        coupled_into(&sc.costs, rho, 2.0, &mut sc.out, &mut sc.order);
        for (j, k) in batch.clone().enumerate() {
            pr.b[k] = sc.out[j];
        }
        let b_sum: f64 = sc.out.iter().sum();

        let shift = a_sum + b_sum + cur.h[i] - sp.cap[i];
        sc.costs.clear();
        sc.costs.extend(
            batch.clone().map(|k| sp.ec[k] - cur.phi[i] + cur.kappa[k] + rho * (cur.z[k] - pr.b[k]) - rho * shift),
        );
        coupled_into(&sc.costs, rho, 1.0, &mut sc.out, &mut sc.order);
        for (j, k) in batch.clone().enumerate() {
            pr.e[k] = sc.out[j];
        }
        let e_sum: f64 = sc.out.iter().sum();

        let bh = sp.bhat[i];
        let lin = cur.phi[i]
            + bh * cur.varphi[i]
            + rho * (a_sum + b_sum - e_sum - sp.cap[i])
            + rho * bh * (cur.g[i] + pr.c[i] + pr.u_d[i] - pr.u_c[i] - sp.m[i]);
        pr.h[i] = (-lin / (rho * (1.0 + bh * bh))).max(0.0);

        for k in batch {
            pr.z[k] = (-(cur.kappa[k] + rho * (pr.e[k] - pr.b[k])) / rho).max(0.0);
        }

        let lin = cur.varphi[i] + rho * (pr.c[i] + pr.u_d[i] - pr.u_c[i] + bh * pr.h[i] - sp.m[i]);
        pr.g[i] = solve_abs_value_block(rho, lin, sp.buy[i], sp.sell[i], sp.g_lo[i], sp.g_hi[i]);
    }
}

/// Moves every multiplier by `rho` times its coupling residual at the
/// predicted primal blocks of `pr`, writing the result into `pr`.
pub fn dual_update(sp: &ScaledProblem, cur: &AdmmIterate, pr: &mut AdmmIterate, rho: f64) {
    let l = &sp.layout;
    for i in 0..l.sites {
        pr.phi[i] = cur.phi[i] + rho * sp.cap_residual(pr, i);
        pr.varphi[i] =
            cur.varphi[i] + rho * (pr.g[i] + pr.c[i] + pr.u_d[i] - pr.u_c[i] + sp.bhat[i] * pr.h[i] - sp.m[i]);
    }
    for k in 0..l.batch_len() {
        pr.kappa[k] = cur.kappa[k] + rho * (pr.e[k] + pr.z[k] - pr.b[k]);
        pr.psi[k] = cur.psi[k] + rho * (pr.x[k] - pr.b[k]);
    }
    for k in 0..l.pair_len() {
        pr.chi[k] = cur.chi[k] + rho * (pr.d[k] - pr.a[k]);
    }
}

/// Correction step with unit step length: back-substitutes from the last
/// block towards the first.
pub fn gaussian_back_substitution(sp: &ScaledProblem, cur: &AdmmIterate, pr: &AdmmIterate) -> AdmmIterate {
    let mut next = pr.clone();
    correct_into(sp, cur, pr, &mut next);
    next
}

fn correct_into(sp: &ScaledProblem, cur: &AdmmIterate, pr: &AdmmIterate, nx: &mut AdmmIterate) {
    let l = &sp.layout;
    nx.phi.copy_from_slice(&pr.phi);
    nx.varphi.copy_from_slice(&pr.varphi);
    nx.kappa.copy_from_slice(&pr.kappa);
    nx.chi.copy_from_slice(&pr.chi);
    nx.psi.copy_from_slice(&pr.psi);
    nx.g.copy_from_slice(&pr.g);
    nx.z.copy_from_slice(&pr.z);
    nx.d.copy_from_slice(&pr.d);

    for i in 0..l.sites {
        let bh = sp.bhat[i];
        let dg = pr.g[i] - cur.g[i];
        nx.h[i] = pr.h[i] - bh / (1.0 + bh * bh) * dg;
        let dh = nx.h[i] - cur.h[i];

        let batch = l.site_batch(i);
        let mi = batch.len() as f64;
        let dz_sum: f64 = batch.clone().map(|k| pr.z[k] - cur.z[k]).sum();
        for k in batch.clone() {
            nx.e[k] = pr.e[k] + (dh + dz_sum) / (mi + 1.0) - (pr.z[k] - cur.z[k]);
        }
        let ez_sum: f64 = batch.clone().map(|k| (nx.e[k] - cur.e[k]) - (nx.z[k] - cur.z[k])).sum();
        for k in batch.clone() {
            nx.b[k] = pr.b[k]
                + (ez_sum - 2.0 * dh) / (2.0 * (mi + 2.0))
                + 0.5 * ((nx.z[k] - cur.z[k]) + (nx.e[k] - cur.e[k]));
        }
        let eb_sum: f64 = batch.clone().map(|k| (nx.e[k] - cur.e[k]) - (nx.b[k] - cur.b[k])).sum();
        let shift = (eb_sum - dh) / (l.frontends as f64 + 1.0);
        for f in 0..l.frontends {
            let k = l.fi(f, i);
            nx.a[k] = pr.a[k] + shift;
        }

        nx.u_d[i] = pr.u_d[i] - bh * dh - dg;
        nx.u_c[i] = pr.u_c[i] + (pr.u_d[i] - cur.u_d[i]);
        nx.c[i] = pr.c[i] + (pr.u_c[i] - cur.u_c[i]);
        for k in batch {
            nx.x[k] = pr.x[k] + (nx.b[k] - cur.b[k]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmOptions {
    pub rho: f64,
    /// Stopping tolerance for both residuals, solver units; `None` uses the
    /// problem's default.
    pub tolerance: Option<f64>,
    pub max_iters: usize,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        AdmmOptions { rho: 1.0, tolerance: None, max_iters: 2000 }
    }
}

/// Multipliers converted back to physical units ($ per server or per MW).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub capacity: Vec<f64>,
    pub balance: Vec<f64>,
    pub drop_slack: Vec<f64>,
    pub allocation: Vec<f64>,
    pub service: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmSolution {
    /// The predicted blocks of the final iteration (box-feasible, coupling
    /// satisfied to within the tolerance).
    pub decision: ControlDecision,
    pub auxiliary: Auxiliaries,
    pub multipliers: Multipliers,
    pub objective: f64,
    pub iterations: usize,
    pub xi: f64,
    pub ell: f64,
    pub tolerance: f64,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Auxiliaries {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn solve_slot(problem: &SlotProblem, opts: &AdmmOptions) -> Result<AdmmSolution> {
    if !(opts.rho > 0.0 && opts.rho.is_finite()) {
        return Err(Error::ProblemConstruction(format!("penalty {} must be positive", opts.rho)));
    }
    let sp = ScaledProblem::new(problem);
    let tol = opts.tolerance.unwrap_or_else(|| sp.default_tolerance());
    let rho = opts.rho;

    let mut cur = AdmmIterate::zeros(&sp.layout);
    let mut pr = cur.clone();
    let mut nx = cur.clone();
    let mut scratch = Scratch::default();
    let mut trace = Vec::with_capacity(opts.max_iters.min(4096));

    for iter in 1..=opts.max_iters.max(1) {
        predict(&sp, &cur, &mut pr, rho, &mut scratch);
        dual_update(&sp, &cur, &mut pr, rho);
        let xi = sp.xi(&pr);
        let ell = sp.ell(&pr);
        let step = sp.step(&cur, &pr);
        trace.push(TraceRow { iter, objective: sp.objective(&pr), xi, ell, step });
        let done = xi <= tol && ell <= tol && step <= tol;
        if done || iter >= opts.max_iters {
            if !done && ell > tol {
                return Err(Error::SolverFailure { iterations: iter, ell, trace });
            }
            return Ok(finish(&sp, &pr, iter, xi, ell, tol, done, trace));
        }
        correct_into(&sp, &cur, &pr, &mut nx);
        std::mem::swap(&mut cur, &mut nx);
    }
    unreachable!("loop returns on its last iteration")
}

#[allow(clippy::too_many_arguments)]
fn finish(
    sp: &ScaledProblem,
    pr: &AdmmIterate,
    iterations: usize,
    xi: f64,
    ell: f64,
    tolerance: f64,
    converged: bool,
    trace: Vec<TraceRow>,
) -> AdmmSolution {
    let (s, k) = (sp.server_scale, sp.cost_scale);
    let per_server = |v: &[f64]| v.iter().map(|x| x * k / s).collect::<Vec<_>>();
    AdmmSolution {
        decision: sp.decision(pr),
        auxiliary: Auxiliaries {
            a: pr.a.iter().map(|v| v * s).collect(),
            b: pr.b.iter().map(|v| v * s).collect(),
            h: pr.h.iter().map(|v| v * s).collect(),
            z: pr.z.iter().map(|v| v * s).collect(),
        },
        multipliers: Multipliers {
            capacity: per_server(&pr.phi),
            balance: pr.varphi.iter().map(|x| x * k).collect(),
            drop_slack: per_server(&pr.kappa),
            allocation: per_server(&pr.chi),
            service: per_server(&pr.psi),
        },
        objective: sp.objective(pr),
        iterations,
        xi,
        ell,
        tolerance,
        converged,
        trace,
    }
}

/// Writes `iter,objective,xi,ell,step` rows.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Same rows, appended to an arbitrary writer with a leading `slot` column.
pub fn append_trace_rows(out: &mut impl std::io::Write, slot: usize, trace: &[TraceRow]) -> std::io::Result<()> {
    for r in trace {
        writeln!(out, "{slot},{},{},{},{},{}", r.iter, r.objective, r.xi, r.ell, r.step)?;
    }
    Ok(())
}

/// Turns an approximately feasible solution into one that satisfies every
/// slot constraint exactly.
///
/// Drops are clipped to the served amount, overloads are shed first by
/// dropping batch work and then by moving interactive load to sites with
/// spare servers, and the grid exchange is recomputed from the power balance.
/// When that exchange leaves its limits the generator, then the battery,
/// absorbs the excess.
pub fn restore_feasibility(problem: &SlotProblem, decision: &ControlDecision) -> Result<ControlDecision> {
    let l = &problem.layout;
    let mut dec = decision.clone();

    for k in 0..l.batch_len() {
        dec.x[k] = dec.x[k].clamp(problem.x_lo[k], problem.x_hi[k]);
        dec.e[k] = dec.e[k].clamp(0.0, dec.x[k]);
    }
    for i in 0..l.sites {
        dec.c[i] = dec.c[i].clamp(problem.c_lo[i], problem.c_hi[i]);
        dec.u_c[i] = dec.u_c[i].clamp(0.0, problem.uc_max[i]);
        dec.u_d[i] = dec.u_d[i].clamp(0.0, problem.ud_max[i]);
    }

    for i in 0..l.sites {
        let mut excess = problem.load(&dec, i) - problem.capacity[i];
        if excess <= 0.0 {
            continue;
        }
        for k in l.site_batch(i) {
            let room = dec.x[k] - dec.e[k];
            let take = room.min(excess);
            dec.e[k] += take;
            excess -= take;
        }
        if excess <= 0.0 {
            continue;
        }
        for f in 0..l.frontends {
            let src = l.fi(f, i);
            for j in (0..l.sites).filter(|&j| j != i) {
                if excess <= 0.0 || dec.d[src] <= 0.0 {
                    break;
                }
                let spare = problem.capacity[j] - problem.load(&dec, j);
                let mv = spare.max(0.0).min(excess).min(dec.d[src]);
                dec.d[src] -= mv;
                dec.d[l.fi(f, j)] += mv;
                excess -= mv;
            }
        }
        if excess > 1e-9 * (1.0 + problem.capacity[i]) {
            return Err(Error::ConstraintViolation {
                site: i,
                detail: format!("cannot shed {excess} servers of overload"),
            });
        }
    }

    for i in 0..l.sites {
        let p = problem.alpha[i] + problem.beta[i] * problem.load(&dec, i);
        let need = p + dec.u_c[i] - problem.renewable[i];
        let mut g = need - dec.c[i] - dec.u_d[i];
        if g > problem.g_hi[i] {
            let mut over = g - problem.g_hi[i];
            let dc = over.min(problem.c_hi[i] - dec.c[i]).max(0.0);
            dec.c[i] += dc;
            over -= dc;
            let du = over.min(dec.u_c[i]);
            dec.u_c[i] -= du;
            over -= du;
            let dd = over.min(problem.ud_max[i] - dec.u_d[i]).max(0.0);
            dec.u_d[i] += dd;
            over -= dd;
            if over > crate::model::BALANCE_TOLERANCE_MW {
                return Err(Error::ConstraintViolation {
                    site: i,
                    detail: format!("power short by {over} MW at the import limit"),
                });
            }
        } else if g < problem.g_lo[i] {
            let mut under = problem.g_lo[i] - g;
            let dc = under.min(dec.c[i] - problem.c_lo[i]).max(0.0);
            dec.c[i] -= dc;
            under -= dc;
            let dd = under.min(dec.u_d[i]);
            dec.u_d[i] -= dd;
            under -= dd;
            let du = under.min(problem.uc_max[i] - dec.u_c[i]).max(0.0);
            dec.u_c[i] += du;
            under -= du;
            if under > crate::model::BALANCE_TOLERANCE_MW {
                return Err(Error::ConstraintViolation {
                    site: i,
                    detail: format!("power surplus of {under} MW at the export limit"),
                });
            }
        }
        let p = problem.alpha[i] + problem.beta[i] * problem.load(&dec, i);
        g = p + dec.u_c[i] - problem.renewable[i] - dec.c[i] - dec.u_d[i];
        dec.g[i] = g.clamp(problem.g_lo[i], problem.g_hi[i]);
    }
    Ok(dec)
}

/// Feasibility metric of a physical decision, in solver units.
pub fn decision_ell(problem: &SlotProblem, dec: &ControlDecision) -> f64 {
    let sp = ScaledProblem::new(problem);
    sp.ell(&sp.scale_decision(dec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
        let mut best = (f64::INFINITY, lo);
        for j in 0..=steps {
            let y = lo + (hi - lo) * j as f64 / steps as f64;
            let v = f(y);
            if v < best.0 {
                best = (v, y);
            }
        }
        best.1
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(solve_simplex_block(&[1.0, 1.0], 1.0, 10.0), vec![5.0, 5.0]);
        assert_eq!(solve_simplex_block(&[0.0, 1.0], 1.0, 10.0), vec![5.5, 4.5]);
        assert_eq!(solve_simplex_block(&[0.3, -2.0], 1.0, 0.0), vec![0.0, 0.0]);
        // A destination so expensive it stays empty.
        let d = solve_simplex_block(&[0.0, 50.0, 1.0], 1.0, 3.0);
        assert_eq!(d, vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn simplex_two_destination_grid_check() {
        let costs = [0.0, 1.0];
        let obj = |d0: f64| {
            let d1 = 10.0 - d0;
            costs[0] * d0 + 0.5 * d0 * d0 + costs[1] * d1 + 0.5 * d1 * d1
        };
        let d0 = grid_argmin(obj, 0.0, 10.0, 100_000);
        assert!((d0 - 5.5).abs() < 1e-3);
    }

    #[test]
    fn scalar_box_examples() {
        // psi*x + (rho/2)(x - b)^2 with rho = 1 and b = 3: curvature 1, linear psi - 3.
        assert_eq!(scalar_box_minimizer(1.0, 1.0 - 3.0, 0.0, 5.0), 2.0);
        assert_eq!(scalar_box_minimizer(1.0, 100.0 - 3.0, 0.0, 5.0), 0.0);
        assert_eq!(scalar_box_minimizer(1.0, 1.0 - 3.0, 0.0, 1.0), 1.0);
        let x = grid_argmin(|x| x + 0.5 * (x - 3.0) * (x - 3.0), 0.0, 5.0, 50_000);
        assert!((x - 2.0).abs() < 1e-3);
    }

    #[test]
    fn coupled_examples() {
        assert_eq!(solve_coupled_nonneg_block(&[-4.0], 1.0, 1.0), vec![2.0]);
        assert_eq!(solve_coupled_nonneg_block(&[-3.0, -3.0], 1.0, 1.0), vec![1.0, 1.0]);
        assert_eq!(solve_coupled_nonneg_block(&[0.0, 2.0, 5.0], 1.0, 1.0), vec![0.0; 3]);
        assert!(solve_coupled_nonneg_block(&[], 1.0, 2.0).is_empty());
        let y = grid_argmin(|y| y * y - 4.0 * y, 0.0, 5.0, 50_000);
        assert!((y - 2.0).abs() < 1e-3);
    }

    #[test]
    fn coupled_partial_activation() {
        // t = (5, 1): with only the first active s = 5/2 >= 1, so the second stays at zero.
        let y = solve_coupled_nonneg_block(&[-5.0, -1.0], 1.0, 1.0);
        assert!((y[0] - 2.5).abs() < 1e-12 && y[1] == 0.0, "{y:?}");
    }

    #[test]
    fn abs_value_examples() {
        assert_eq!(solve_abs_value_block(1.0, 0.0, 1.0, 0.5, -10.0, 10.0), -0.5);
        assert_eq!(solve_abs_value_block(1.0, -0.7, 1.0, 0.5, -10.0, 10.0), 0.0);
        assert_eq!(solve_abs_value_block(1.0, -20.0, 1.0, 0.5, -10.0, 10.0), 10.0);
        let g = grid_argmin(|g| 0.5 * g * g + g.max(0.0) - 0.5 * (-g).max(0.0), -2.0, 2.0, 40_000);
        assert!((g + 0.5).abs() < 1e-3);
    }

    #[test]
    fn write_trace_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![TraceRow { iter: 1, objective: 2.5, xi: 0.1, ell: 0.2, step: 0.3 }];
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iter,objective,xi,ell,step\n1,2.5,0.1,0.2,0.3\n");
    }
}
