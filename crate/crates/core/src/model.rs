//! System model: configuration, per-slot exogenous inputs, decisions, power
//! and cost evaluation, and constraint checking.
//!
//! Units are fixed throughout the crate: power in MW, energy in MWh, prices in
//! $/MWh, one-hour slots. Server loads are fluid (nonnegative reals).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::SyntheticProfile;

/// Absolute tolerance on the per-site power balance, in MW.
pub const BALANCE_TOLERANCE_MW: f64 = 1e-6;

const WATTS_PER_MW: f64 = 1e6;

/// Relative slack used by every box/capacity predicate.
const BOX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTypeConfig {
    /// Maximum servers that can be devoted to this queue per slot.
    pub max_service: f64,
    /// Largest per-slot arrival, in servers.
    pub max_arrival: f64,
    /// Tolerant service delay in slots.
    pub tolerant_delay: u32,
    /// Virtual-queue arrival rate; derived from the delay target when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// Quadratic generation cost `q*c^2 + l*c + k` ($ per slot).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCost {
    pub quadratic: f64,
    pub linear: f64,
    #[serde(default)]
    pub constant: f64,
}

impl GeneratorCost {
    pub fn eval(&self, c: f64) -> f64 {
        self.quadratic * c * c + self.linear * c + self.constant
    }

    /// Range of the marginal cost over `[0, c_max]`.
    pub fn marginal_range(&self, c_max: f64) -> (f64, f64) {
        let at_zero = self.linear;
        let at_max = 2.0 * self.quadratic * c_max + self.linear;
        (at_zero.min(at_max), at_zero.max(at_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    #[serde(default)]
    pub name: String,
    pub servers: f64,
    pub pue: f64,
    pub idle_power_w: f64,
    pub peak_power_w: f64,

    pub generator_max_mw: f64,
    pub ramp_coefficient: f64,
    pub generator_cost: GeneratorCost,

    pub charge_max_mw: f64,
    pub discharge_max_mw: f64,
    pub charge_efficiency: f64,
    pub discharge_efficiency: f64,
    pub energy_min_mwh: f64,
    pub energy_max_mwh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_energy_mwh: Option<f64>,
    /// $ per MW^2 of charge or discharge.
    pub battery_cost: f64,

    /// Negative: largest export to the main grid.
    pub sell_limit_mw: f64,
    pub buy_limit_mw: f64,
    pub buy_price_min: f64,
    pub buy_price_max: f64,
    pub sell_price_min: f64,
    pub sell_price_max: f64,

    /// $ per dropped server-slot of batch work.
    pub drop_penalty: f64,
    #[serde(default)]
    pub batch: Vec<BatchTypeConfig>,
}

impl SiteConfig {
    /// Idle-plus-overhead power of the whole site, MW.
    pub fn alpha(&self) -> f64 {
        self.servers * (self.idle_power_w + (self.pue - 1.0) * self.peak_power_w) / WATTS_PER_MW
    }

    /// Incremental power per busy server, MW.
    pub fn beta(&self) -> f64 {
        (self.peak_power_w - self.idle_power_w) / WATTS_PER_MW
    }

    pub fn initial_energy(&self) -> f64 {
        self.initial_energy_mwh.unwrap_or(self.energy_min_mwh + 0.5 * (self.energy_max_mwh - self.energy_min_mwh))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlKnobs {
    /// Cost weight of the drift-plus-penalty objective; `None` selects the
    /// largest value that keeps the storage trajectories inside their bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    /// Relative weight of the workload queues.
    pub w: f64,
    #[serde(default = "default_true")]
    pub enforce_ramp: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub sites: Vec<SiteConfig>,
    pub frontends: usize,
    /// Propagation latency front-end × site, ms.
    pub latency_ms: Vec<Vec<f64>>,
    /// Revenue loss per server-ms of latency, $.
    pub latency_cost: f64,
    pub control: ControlKnobs,
    #[serde(default)]
    pub synthetic: SyntheticProfile,
}

/// Flat indexing of front-end × site and site × batch-type arrays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "LayoutShape", into = "LayoutShape")]
pub struct Layout {
    pub sites: usize,
    pub frontends: usize,
    pub batch_types: Vec<usize>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LayoutShape {
    frontends: usize,
    batch_types: Vec<usize>,
}

impl From<LayoutShape> for Layout {
    fn from(s: LayoutShape) -> Self {
        Layout::new(s.frontends, s.batch_types)
    }
}

impl From<Layout> for LayoutShape {
    fn from(l: Layout) -> Self {
        LayoutShape { frontends: l.frontends, batch_types: l.batch_types }
    }
}

impl Layout {
    pub fn new(frontends: usize, batch_types: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(batch_types.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for m in &batch_types {
            acc += m;
            offsets.push(acc);
        }
        Layout { sites: batch_types.len(), frontends, batch_types, offsets }
    }

    pub fn batch_len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn pair_len(&self) -> usize {
        self.frontends * self.sites
    }

    #[inline]
    pub fn fi(&self, f: usize, i: usize) -> usize {
        f * self.sites + i
    }

    #[inline]
    pub fn iq(&self, i: usize, q: usize) -> usize {
        self.offsets[i] + q
    }

    #[inline]
    pub fn site_batch(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Site owning a flat batch index.
    pub fn site_of(&self, iq: usize) -> usize {
        match self.offsets.binary_search(&iq) {
            Ok(pos) => {
                let mut s = pos;
                while self.offsets[s + 1] == iq {
                    s += 1;
                }
                s
            }
            Err(pos) => pos - 1,
        }
    }
}

impl ScenarioConfig {
    pub fn layout(&self) -> Layout {
        Layout::new(self.frontends, self.sites.iter().map(|s| s.batch.len()).collect())
    }

    pub fn batch_types(&self) -> impl Iterator<Item = (usize, usize, &BatchTypeConfig)> {
        self.sites.iter().enumerate().flat_map(|(i, s)| s.batch.iter().enumerate().map(move |(q, b)| (i, q, b)))
    }
}

/// The exogenous randomness observed at the start of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotInputs {
    /// Interactive demand per front-end, servers.
    pub lambda: Vec<f64>,
    /// Batch arrivals per (site, type), servers.
    pub arrivals: Vec<f64>,
    pub renewable: Vec<f64>,
    pub buy_price: Vec<f64>,
    pub sell_price: Vec<f64>,
}

impl SlotInputs {
    pub fn zeros(layout: &Layout) -> Self {
        SlotInputs {
            lambda: vec![0.0; layout.frontends],
            arrivals: vec![0.0; layout.batch_len()],
            renewable: vec![0.0; layout.sites],
            buy_price: vec![0.0; layout.sites],
            sell_price: vec![0.0; layout.sites],
        }
    }
}

/// One slot's control vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    /// Interactive allocation, front-end-major.
    pub d: Vec<f64>,
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub c: Vec<f64>,
    /// Grid exchange: buying positive, selling negative.
    pub g: Vec<f64>,
    pub u_c: Vec<f64>,
    pub u_d: Vec<f64>,
    /// Renewable output spilled instead of used (only policies without
    /// selling ever curtail).
    pub curtailed: Vec<f64>,
}

impl ControlDecision {
    pub fn zeros(layout: &Layout) -> Self {
        let n = layout.sites;
        ControlDecision {
            d: vec![0.0; layout.pair_len()],
            x: vec![0.0; layout.batch_len()],
            e: vec![0.0; layout.batch_len()],
            c: vec![0.0; n],
            g: vec![0.0; n],
            u_c: vec![0.0; n],
            u_d: vec![0.0; n],
            curtailed: vec![0.0; n],
        }
    }

    /// Busy servers at site `i`.
    pub fn site_load(&self, layout: &Layout, i: usize) -> f64 {
        let interactive: f64 = (0..layout.frontends).map(|f| self.d[layout.fi(f, i)]).sum();
        let batch: f64 = layout.site_batch(i).map(|k| self.x[k] - self.e[k]).sum();
        interactive + batch
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub grid: f64,
    pub latency: f64,
    pub drop: f64,
    pub battery: f64,
    pub generation: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.grid + self.latency + self.drop + self.battery + self.generation;
        self
    }

    pub fn accumulate(&mut self, other: &CostBreakdown) {
        self.grid += other.grid;
        self.latency += other.latency;
        self.drop += other.drop;
        self.battery += other.battery;
        self.generation += other.generation;
        self.total += other.total;
    }
}

/// Cost of exchanging `g` MW with the main grid for one slot.
#[inline]
pub fn grid_cost(g: f64, buy: f64, sell: f64) -> f64 {
    0.5 * (buy - sell) * g.abs() + 0.5 * (buy + sell) * g
}

#[inline]
pub fn battery_cost(sigma: f64, u_c: f64, u_d: f64) -> f64 {
    sigma * (u_c * u_c + u_d * u_d)
}

/// Linear-in-load power model evaluated without capacity checks.
pub fn site_power(site: &SiteConfig, load: f64) -> f64 {
    site.alpha() + site.beta() * load
}

/// Total power drawn by data center `site`, MW.
pub fn compute_power(cfg: &ScenarioConfig, site: usize, decision: &ControlDecision) -> Result<f64> {
    let layout = cfg.layout();
    let s = &cfg.sites[site];
    let load = decision.site_load(&layout, site);
    if load > s.servers + BOX_TOLERANCE * (1.0 + s.servers) {
        return Err(Error::ConstraintViolation { site, detail: format!("load {load} exceeds {} servers", s.servers) });
    }
    Ok(site_power(s, load))
}

pub fn compute_costs(cfg: &ScenarioConfig, inputs: &SlotInputs, decision: &ControlDecision) -> CostBreakdown {
    let layout = cfg.layout();
    let mut out = CostBreakdown::default();
    for (i, s) in cfg.sites.iter().enumerate() {
        out.grid += grid_cost(decision.g[i], inputs.buy_price[i], inputs.sell_price[i]);
        out.battery += battery_cost(s.battery_cost, decision.u_c[i], decision.u_d[i]);
        out.generation += s.generator_cost.eval(decision.c[i]);
        out.drop += layout.site_batch(i).map(|k| s.drop_penalty * decision.e[k]).sum::<f64>();
        for f in 0..layout.frontends {
            out.latency += cfg.latency_cost * decision.d[layout.fi(f, i)] * cfg.latency_ms[f][i];
        }
    }
    out.finish()
}

/// Which optional predicates `check_feasibility` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeasibilityChecks {
    pub ramp: bool,
    pub complementarity: bool,
}

impl FeasibilityChecks {
    pub const ALL: FeasibilityChecks = FeasibilityChecks { ramp: true, complementarity: true };
}

/// State the feasibility predicates depend on.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityContext<'a> {
    /// Work available to serve per (site, type) in this slot.
    pub backlog: &'a [f64],
    pub c_prev: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    Allocation { frontend: usize, allocated: f64, demand: f64 },
    NegativeAllocation { frontend: usize, site: usize, value: f64 },
    Service { site: usize, btype: usize, value: f64, upper: f64 },
    Capacity { site: usize, load: f64, servers: f64 },
    Drop { site: usize, btype: usize, dropped: f64, served: f64 },
    Generator { site: usize, value: f64, max: f64 },
    Ramp { site: usize, change: f64, limit: f64 },
    Charge { site: usize, value: f64, max: f64 },
    Discharge { site: usize, value: f64, max: f64 },
    Complementarity { site: usize, charge: f64, discharge: f64 },
    Balance { site: usize, residual: f64 },
    GridLimit { site: usize, value: f64 },
    Curtailment { site: usize, value: f64 },
}

impl Violation {
    pub fn site(&self) -> Option<usize> {
        match *self {
            Violation::Allocation { .. } => None,
            Violation::NegativeAllocation { site, .. }
            | Violation::Service { site, .. }
            | Violation::Capacity { site, .. }
            | Violation::Drop { site, .. }
            | Violation::Generator { site, .. }
            | Violation::Ramp { site, .. }
            | Violation::Charge { site, .. }
            | Violation::Discharge { site, .. }
            | Violation::Complementarity { site, .. }
            | Violation::Balance { site, .. }
            | Violation::GridLimit { site, .. }
            | Violation::Curtailment { site, .. } => Some(site),
        }
    }
}

fn slack(bound: f64) -> f64 {
    BOX_TOLERANCE * (1.0 + bound.abs())
}

/// Verifies every slot constraint; an empty report means feasible.
pub fn check_feasibility(
    cfg: &ScenarioConfig,
    inputs: &SlotInputs,
    ctx: FeasibilityContext<'_>,
    decision: &ControlDecision,
    checks: FeasibilityChecks,
) -> Vec<Violation> {
    let layout = cfg.layout();
    let mut out = Vec::new();

    for f in 0..layout.frontends {
        let mut total = 0.0;
        for i in 0..layout.sites {
            let v = decision.d[layout.fi(f, i)];
            if v < -slack(0.0) {
                out.push(Violation::NegativeAllocation { frontend: f, site: i, value: v });
            }
            total += v;
        }
        let demand = inputs.lambda[f];
        if (total - demand).abs() > slack(demand) {
            out.push(Violation::Allocation { frontend: f, allocated: total, demand });
        }
    }

    for (i, s) in cfg.sites.iter().enumerate() {
        for (q, b) in s.batch.iter().enumerate() {
            let k = layout.iq(i, q);
            let (x, e) = (decision.x[k], decision.e[k]);
            let upper = b.max_service.min(ctx.backlog[k]);
            if x < -slack(0.0) || x > upper + slack(upper) {
                out.push(Violation::Service { site: i, btype: q, value: x, upper });
            }
            if e < -slack(0.0) || e > x + slack(x) {
                out.push(Violation::Drop { site: i, btype: q, dropped: e, served: x });
            }
        }

        let load = decision.site_load(&layout, i);
        if load > s.servers + slack(s.servers) {
            out.push(Violation::Capacity { site: i, load, servers: s.servers });
        }

        let c = decision.c[i];
        if c < -slack(0.0) || c > s.generator_max_mw + slack(s.generator_max_mw) {
            out.push(Violation::Generator { site: i, value: c, max: s.generator_max_mw });
        }
        if checks.ramp {
            let limit = s.ramp_coefficient * s.generator_max_mw;
            let change = (c - ctx.c_prev[i]).abs();
            if change > limit + slack(limit) {
                out.push(Violation::Ramp { site: i, change, limit });
            }
        }

        let (uc, ud) = (decision.u_c[i], decision.u_d[i]);
        if uc < -slack(0.0) || uc > s.charge_max_mw + slack(s.charge_max_mw) {
            out.push(Violation::Charge { site: i, value: uc, max: s.charge_max_mw });
        }
        if ud < -slack(0.0) || ud > s.discharge_max_mw + slack(s.discharge_max_mw) {
            out.push(Violation::Discharge { site: i, value: ud, max: s.discharge_max_mw });
        }
        if checks.complementarity && uc * ud != 0.0 {
            out.push(Violation::Complementarity { site: i, charge: uc, discharge: ud });
        }

        let curtailed = decision.curtailed[i];
        if curtailed < -slack(0.0) || curtailed > inputs.renewable[i] + slack(inputs.renewable[i]) {
            out.push(Violation::Curtailment { site: i, value: curtailed });
        }

        let g = decision.g[i];
        let residual = g + (inputs.renewable[i] - curtailed) + c + ud - site_power(s, load) - uc;
        if residual.abs() > BALANCE_TOLERANCE_MW {
            out.push(Violation::Balance { site: i, residual });
        }
        if g < s.sell_limit_mw - slack(s.sell_limit_mw) || g > s.buy_limit_mw + slack(s.buy_limit_mw) {
            out.push(Violation::GridLimit { site: i, value: g });
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenario::reference_config;

    pub(crate) fn one_site(servers: f64) -> ScenarioConfig {
        let mut cfg = reference_config();
        cfg.sites.truncate(1);
        cfg.sites[0].servers = servers;
        cfg.latency_ms = vec![vec![10.0]];
        cfg
    }

    #[test]
    fn power_matches_hand_evaluation() {
        let cfg = one_site(40000.0);
        let layout = cfg.layout();
        let mut dec = ControlDecision::zeros(&layout);
        let p0 = compute_power(&cfg, 0, &dec).unwrap();
        assert!((p0 - 6.4).abs() < 1e-12, "{p0}");

        dec.d[0] = 40000.0;
        let p1 = compute_power(&cfg, 0, &dec).unwrap();
        assert!((p1 - 8.8).abs() < 1e-12, "{p1}");
    }

    #[test]
    fn power_of_empty_site_is_zero() {
        let cfg = one_site(0.0);
        let dec = ControlDecision::zeros(&cfg.layout());
        assert_eq!(compute_power(&cfg, 0, &dec).unwrap(), 0.0);
    }

    #[test]
    fn power_rejects_overload() {
        let cfg = one_site(100.0);
        let mut dec = ControlDecision::zeros(&cfg.layout());
        dec.d[0] = 101.0;
        match compute_power(&cfg, 0, &dec) {
            Err(Error::ConstraintViolation { site: 0, .. }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn grid_cost_branches() {
        assert!((grid_cost(2.0, 50.0, 45.0) - 100.0).abs() < 1e-12);
        assert!((grid_cost(-2.0, 50.0, 45.0) + 90.0).abs() < 1e-12);
        assert_eq!(grid_cost(0.0, 50.0, 45.0), 0.0);
    }

    #[test]
    fn linear_generation_cost() {
        let gen = GeneratorCost { quadratic: 0.0, linear: 273.0, constant: 0.0 };
        assert_eq!(gen.eval(1.0), 273.0);
    }

    #[test]
    fn capacity_violation_is_reported() {
        let cfg = one_site(1000.0);
        let layout = cfg.layout();
        let mut inputs = SlotInputs::zeros(&layout);
        inputs.lambda[0] = 1001.0;
        let mut dec = ControlDecision::zeros(&layout);
        dec.d[0] = 1001.0;
        let p = site_power(&cfg.sites[0], 1001.0);
        dec.g[0] = p;
        let backlog = vec![0.0; layout.batch_len()];
        let report = check_feasibility(
            &cfg,
            &inputs,
            FeasibilityContext { backlog: &backlog, c_prev: &[0.0] },
            &dec,
            FeasibilityChecks::ALL,
        );
        assert_eq!(report.len(), 1, "{report:?}");
        assert!(matches!(report[0], Violation::Capacity { site: 0, .. }));
    }

    #[test]
    fn balanced_decision_is_feasible() {
        let cfg = one_site(1000.0);
        let layout = cfg.layout();
        let mut inputs = SlotInputs::zeros(&layout);
        inputs.lambda[0] = 400.0;
        inputs.renewable[0] = 0.01;
        let mut dec = ControlDecision::zeros(&layout);
        dec.d[0] = 400.0;
        dec.u_c[0] = 0.2;
        dec.g[0] = site_power(&cfg.sites[0], 400.0) + 0.2 - 0.01;
        let backlog = vec![0.0; layout.batch_len()];
        let ctx = FeasibilityContext { backlog: &backlog, c_prev: &[0.0] };
        assert!(check_feasibility(&cfg, &inputs, ctx, &dec, FeasibilityChecks::ALL).is_empty());

        dec.u_d[0] = 0.1;
        dec.g[0] -= 0.1;
        let report = check_feasibility(&cfg, &inputs, ctx, &dec, FeasibilityChecks::ALL);
        assert!(matches!(report[..], [Violation::Complementarity { site: 0, .. }]));
        let relaxed = FeasibilityChecks { ramp: true, complementarity: false };
        assert!(check_feasibility(&cfg, &inputs, ctx, &dec, relaxed).is_empty());
    }

    #[test]
    fn layout_indexing() {
        let layout = Layout::new(2, vec![2, 0, 3]);
        assert_eq!(layout.batch_len(), 5);
        assert_eq!(layout.iq(2, 1), 3);
        assert_eq!(layout.site_of(0), 0);
        assert_eq!(layout.site_of(1), 0);
        assert_eq!(layout.site_of(2), 2);
        assert_eq!(layout.site_of(4), 2);
        assert_eq!(layout.fi(1, 2), 5);
        assert!(layout.site_batch(1).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn grid_cost_matches_branch_prices(g in -50.0f64..50.0, sell in 1.0f64..60.0, spread in 0.01f64..40.0) {
                let buy = sell + spread;
                let expected = if g >= 0.0 { buy * g } else { sell * g };
                prop_assert!((grid_cost(g, buy, sell) - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
            }

            #[test]
            fn power_is_affine_and_monotone(d in 0.0f64..10000.0, x in 0.0f64..5000.0, e_frac in 0.0f64..1.0, bump in 0.0f64..100.0) {
                let mut cfg = reference_config();
                cfg.sites.truncate(1);
                cfg.latency_ms = vec![vec![10.0]];
                let layout = cfg.layout();
                let mut dec = ControlDecision::zeros(&layout);
                dec.d[0] = d;
                dec.x[0] = x;
                dec.e[0] = e_frac * x;
                let base = compute_power(&cfg, 0, &dec).unwrap();
                let s = &cfg.sites[0];
                prop_assert!((base - (s.alpha() + s.beta() * (d + x - e_frac * x))).abs() < 1e-9);

                let mut more = dec.clone();
                more.d[0] += bump;
                prop_assert!(compute_power(&cfg, 0, &more).unwrap() >= base);
                let mut served = dec.clone();
                served.x[0] += bump;
                prop_assert!(compute_power(&cfg, 0, &served).unwrap() >= base);
                let mut dropped = dec.clone();
                dropped.e[0] = (dropped.e[0] + bump).min(dropped.x[0]);
                prop_assert!(compute_power(&cfg, 0, &dropped).unwrap() <= base);
            }
        }
    }
}
