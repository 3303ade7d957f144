//! Scenario configuration files, trace files and synthetic trace generation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationKind};
use crate::model::{ScenarioConfig, SlotInputs};
use crate::queues::{compute_constants, v_max, LyapunovConstants};

const REFERENCE_JSON: &str = include_str!("../scenarios/reference_scenario.json");
const REFERENCE_CASE2_JSON: &str = include_str!("../scenarios/reference_scenario_case2.json");

/// Relative slack when comparing trace values with configured bounds.
const TRACE_TOLERANCE: f64 = 1e-9;

/// Shape parameters of the synthetic trace generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    /// Nightly interactive demand as a fraction of total servers.
    pub interactive_trough: f64,
    /// Afternoon interactive demand as a fraction of total servers.
    pub interactive_peak: f64,
    /// Interactive demand is scaled by `U(1 - noise, 1)`.
    pub interactive_noise: f64,
    /// Noon renewable output as a multiple of the site's full-load power.
    pub renewable_peak: f64,
    /// Renewables are scaled by `U(floor, 1)`.
    pub renewable_floor: f64,
    /// Half-width of the additive uniform noise on the normalised price.
    pub price_noise: f64,
    pub sell_ratio: f64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        SyntheticProfile {
            interactive_trough: 0.1,
            interactive_peak: 0.3,
            interactive_noise: 0.1,
            renewable_peak: 1.1,
            renewable_floor: 0.6,
            price_noise: 0.1,
            sell_ratio: 0.9,
        }
    }
}

/// Exogenous inputs for every slot of a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub horizon: usize,
    /// `[slot][frontend]`.
    pub lambda: Vec<Vec<f64>>,
    /// `[slot][flat batch index]`.
    pub arrivals: Vec<Vec<f64>>,
    /// `[slot][site]`.
    pub renewable: Vec<Vec<f64>>,
    pub buy_price: Vec<Vec<f64>>,
    pub sell_price: Vec<Vec<f64>>,
}

impl TraceSet {
    pub fn slot(&self, t: usize) -> SlotInputs {
        SlotInputs {
            lambda: self.lambda[t].clone(),
            arrivals: self.arrivals[t].clone(),
            renewable: self.renewable[t].clone(),
            buy_price: self.buy_price[t].clone(),
            sell_price: self.sell_price[t].clone(),
        }
    }

    /// First `horizon` slots.
    pub fn truncated(&self, horizon: usize) -> TraceSet {
        let h = horizon.min(self.horizon);
        TraceSet {
            horizon: h,
            lambda: self.lambda[..h].to_vec(),
            arrivals: self.arrivals[..h].to_vec(),
            renewable: self.renewable[..h].to_vec(),
            buy_price: self.buy_price[..h].to_vec(),
            sell_price: self.sell_price[..h].to_vec(),
        }
    }

    /// Mean arrival per flat batch index.
    pub fn mean_arrivals(&self) -> Vec<f64> {
        let width = self.arrivals.first().map_or(0, Vec::len);
        let mut out = vec![0.0; width];
        for row in &self.arrivals {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        if self.horizon > 0 {
            out.iter_mut().for_each(|o| *o /= self.horizon as f64);
        }
        out
    }

    pub fn validate(&self, cfg: &ScenarioConfig) -> Result<()> {
        let layout = cfg.layout();
        let bad = |field: String, detail: String| Error::validation(ValidationKind::Trace, field, detail);
        for (name, rows, width) in [
            ("lambda", &self.lambda, layout.frontends),
            ("arrivals", &self.arrivals, layout.batch_len()),
            ("renewable", &self.renewable, layout.sites),
            ("buy_price", &self.buy_price, layout.sites),
            ("sell_price", &self.sell_price, layout.sites),
        ] {
            if rows.len() != self.horizon {
                return Err(bad(name.into(), format!("{} slots, expected {}", rows.len(), self.horizon)));
            }
            for (t, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(bad(format!("{name}[{t}]"), format!("{} entries, expected {width}", row.len())));
                }
                if let Some(j) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
                    return Err(bad(
                        format!("{name}[{t}][{j}]"),
                        format!("value {} is negative or not finite", row[j]),
                    ));
                }
            }
        }
        let above = |v: f64, bound: f64| v > bound + TRACE_TOLERANCE * (1.0 + bound.abs());
        for t in 0..self.horizon {
            for (i, q, b) in cfg.batch_types() {
                let v = self.arrivals[t][layout.iq(i, q)];
                if above(v, b.max_arrival) {
                    return Err(bad(
                        format!("arrivals[{t}] site {i} type {q}"),
                        format!("{v} exceeds max_arrival {}", b.max_arrival),
                    ));
                }
            }
            for (i, s) in cfg.sites.iter().enumerate() {
                let (x, w) = (self.buy_price[t][i], self.sell_price[t][i]);
                if above(x, s.buy_price_max) || above(s.buy_price_min, x) {
                    return Err(bad(
                        format!("buy_price[{t}][{i}]"),
                        format!("{x} outside [{}, {}]", s.buy_price_min, s.buy_price_max),
                    ));
                }
                if above(w, s.sell_price_max) || above(s.sell_price_min, w) {
                    return Err(bad(
                        format!("sell_price[{t}][{i}]"),
                        format!("{w} outside [{}, {}]", s.sell_price_min, s.sell_price_max),
                    ));
                }
                if w >= x {
                    return Err(bad(
                        format!("sell_price[{t}][{i}]"),
                        format!("sell price {w} not below buy price {x}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Writes the four CSV trace files into `dir`.
    pub fn write_dir(&self, cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let layout = cfg.layout();
        let mut prices = String::from("slot,site,buy_price,sell_price\n");
        let mut interactive = String::from("slot,frontend,lambda\n");
        let mut batch = String::from("slot,site,type,pi\n");
        let mut renew = String::from("slot,site,r_mw\n");
        for t in 0..self.horizon {
            for i in 0..layout.sites {
                let _ = writeln!(prices, "{t},{i},{},{}", self.buy_price[t][i], self.sell_price[t][i]);
                let _ = writeln!(renew, "{t},{i},{}", self.renewable[t][i]);
                for q in 0..layout.batch_types[i] {
                    let _ = writeln!(batch, "{t},{i},{q},{}", self.arrivals[t][layout.iq(i, q)]);
                }
            }
            for f in 0..layout.frontends {
                let _ = writeln!(interactive, "{t},{f},{}", self.lambda[t][f]);
            }
        }
        for (name, body) in
            [("prices.csv", prices), ("interactive.csv", interactive), ("batch.csv", batch), ("renewables.csv", renew)]
        {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads and validates the four CSV trace files.
    pub fn read_dir(cfg: &ScenarioConfig, dir: &Path) -> Result<TraceSet> {
        #[derive(Deserialize)]
        struct PriceRow {
            slot: usize,
            site: usize,
            buy_price: f64,
            sell_price: f64,
        }
        #[derive(Deserialize)]
        struct InteractiveRow {
            slot: usize,
            frontend: usize,
            lambda: f64,
        }
        #[derive(Deserialize)]
        struct BatchRow {
            slot: usize,
            site: usize,
            #[serde(rename = "type")]
            btype: usize,
            pi: f64,
        }
        #[derive(Deserialize)]
        struct RenewRow {
            slot: usize,
            site: usize,
            r_mw: f64,
        }

        fn rows<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>> {
            let path = dir.join(name);
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
            rdr.deserialize()
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|e| Error::validation(ValidationKind::Schema, name, e.to_string()))
        }

        let prices: Vec<PriceRow> = rows(dir, "prices.csv")?;
        let interactive: Vec<InteractiveRow> = rows(dir, "interactive.csv")?;
        let batch: Vec<BatchRow> = rows(dir, "batch.csv")?;
        let renew: Vec<RenewRow> = rows(dir, "renewables.csv")?;

        let layout = cfg.layout();
        let horizon = prices.iter().map(|r| r.slot + 1).max().unwrap_or(0);
        let nan = f64::NAN;
        let mut ts = TraceSet {
            horizon,
            lambda: vec![vec![nan; layout.frontends]; horizon],
            arrivals: vec![vec![nan; layout.batch_len()]; horizon],
            renewable: vec![vec![nan; layout.sites]; horizon],
            buy_price: vec![vec![nan; layout.sites]; horizon],
            sell_price: vec![vec![nan; layout.sites]; horizon],
        };
        let oob = |file: &str, what: String| {
            Error::validation(ValidationKind::Schema, file, format!("row index out of range: {what}"))
        };
        for r in prices {
            if r.site >= layout.sites {
                return Err(oob("prices.csv", format!("site {}", r.site)));
            }
            ts.buy_price[r.slot][r.site] = r.buy_price;
            ts.sell_price[r.slot][r.site] = r.sell_price;
        }
        for r in interactive {
            if r.slot >= horizon || r.frontend >= layout.frontends {
                return Err(oob("interactive.csv", format!("slot {} frontend {}", r.slot, r.frontend)));
            }
            ts.lambda[r.slot][r.frontend] = r.lambda;
        }
        for r in batch {
            if r.slot >= horizon || r.site >= layout.sites || r.btype >= layout.batch_types[r.site] {
                return Err(oob("batch.csv", format!("slot {} site {} type {}", r.slot, r.site, r.btype)));
            }
            ts.arrivals[r.slot][layout.iq(r.site, r.btype)] = r.pi;
        }
        for r in renew {
            if r.slot >= horizon || r.site >= layout.sites {
                return Err(oob("renewables.csv", format!("slot {} site {}", r.slot, r.site)));
            }
            ts.renewable[r.slot][r.site] = r.r_mw;
        }
        // Missing rows stay NaN and are reported by validation.
        ts.validate(cfg)?;
        Ok(ts)
    }
}

/// The shipped reference scenario with delay targets {4, 8}.
pub fn reference_config() -> ScenarioConfig {
    serde_json::from_str(REFERENCE_JSON).expect("embedded reference scenario parses")
}

/// The shipped reference scenario with delay targets {12, 24}.
pub fn reference_config_case2() -> ScenarioConfig {
    serde_json::from_str(REFERENCE_CASE2_JSON).expect("embedded reference scenario parses")
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_json::from_str(text)
        .map_err(|e| Error::validation(ValidationKind::Schema, format!("line {}", e.line()), e.to_string()))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Loads a configuration and its traces and computes the derived constants.
pub fn load_scenario(config: &Path, traces: &Path) -> Result<(ScenarioConfig, TraceSet, LyapunovConstants)> {
    let cfg = load_config(config)?;
    let ts = TraceSet::read_dir(&cfg, traces)?;
    let consts = compute_constants(&cfg)?;
    Ok((cfg, ts, consts))
}

/// Checks every static rule a configuration must satisfy.
// Negated comparisons also reject NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    use ValidationKind::*;
    let err = |kind, field: String, detail: String| Err(Error::validation(kind, field, detail));

    if cfg.sites.is_empty() {
        return err(Schema, "sites".into(), "at least one site is required".into());
    }
    if cfg.frontends == 0 {
        return err(Schema, "frontends".into(), "at least one front-end is required".into());
    }
    if cfg.latency_ms.len() != cfg.frontends || cfg.latency_ms.iter().any(|r| r.len() != cfg.sites.len()) {
        return err(
            Schema,
            "latency_ms".into(),
            format!("must be {} rows of {} entries", cfg.frontends, cfg.sites.len()),
        );
    }
    if cfg.latency_ms.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return err(Bound, "latency_ms".into(), "latencies must be nonnegative".into());
    }
    if !(cfg.latency_cost >= 0.0) {
        return err(Bound, "latency_cost".into(), "must be nonnegative".into());
    }
    if !(cfg.control.w > 0.0 && cfg.control.w.is_finite()) {
        return err(Bound, "control.w".into(), "queue weight must be positive".into());
    }

    for (i, s) in cfg.sites.iter().enumerate() {
        let f = |name: &str| format!("sites[{i}].{name}");
        let nonneg = [
            ("servers", s.servers),
            ("idle_power_w", s.idle_power_w),
            ("generator_max_mw", s.generator_max_mw),
            ("charge_max_mw", s.charge_max_mw),
            ("discharge_max_mw", s.discharge_max_mw),
            ("battery_cost", s.battery_cost),
            ("drop_penalty", s.drop_penalty),
            ("generator_cost.quadratic", s.generator_cost.quadratic),
            ("generator_cost.linear", s.generator_cost.linear),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return err(Bound, f(name), format!("{v} must be nonnegative"));
            }
        }
        if !(s.pue >= 1.0) {
            return err(Bound, f("pue"), format!("{} must be at least 1", s.pue));
        }
        if !(s.peak_power_w >= s.idle_power_w) {
            return err(Bound, f("peak_power_w"), "peak power below idle power".into());
        }
        if !(0.0..=1.0).contains(&s.ramp_coefficient) {
            return err(Bound, f("ramp_coefficient"), "must lie in [0, 1]".into());
        }
        for (name, eta) in
            [("charge_efficiency", s.charge_efficiency), ("discharge_efficiency", s.discharge_efficiency)]
        {
            if !(eta > 0.0 && eta <= 1.0) {
                return err(Bound, f(name), format!("{eta} must lie in (0, 1]"));
            }
        }
        if !(s.energy_max_mwh >= s.energy_min_mwh) {
            return err(Bound, f("energy_max_mwh"), "below energy_min_mwh".into());
        }
        let swing = s.charge_efficiency * s.charge_max_mw + s.discharge_max_mw / s.discharge_efficiency;
        if s.energy_max_mwh - s.energy_min_mwh < swing {
            return err(StorageWindow, f("energy_max_mwh"), format!("window smaller than one slot's swing {swing}"));
        }
        let d0 = s.initial_energy();
        if !(s.energy_min_mwh..=s.energy_max_mwh).contains(&d0) {
            return err(StorageWindow, f("initial_energy_mwh"), format!("{d0} outside the storage window"));
        }
        if !(s.sell_limit_mw < 0.0) {
            return err(Bound, f("sell_limit_mw"), "must be negative".into());
        }
        if !(s.buy_limit_mw > 0.0) {
            return err(Bound, f("buy_limit_mw"), "must be positive".into());
        }
        if !(s.sell_price_min > 0.0) {
            return err(Bound, f("sell_price_min"), "must be positive".into());
        }
        if s.sell_price_max < s.sell_price_min {
            return err(Bound, f("sell_price_max"), "below sell_price_min".into());
        }
        if s.buy_price_max < s.buy_price_min {
            return err(Bound, f("buy_price_max"), "below buy_price_min".into());
        }
        if !(s.buy_price_min > s.sell_price_max) {
            return err(
                NoArbitrage,
                f("sell_price_max"),
                format!(
                    "sell price {} must stay strictly below the lowest buy price {}",
                    s.sell_price_max, s.buy_price_min
                ),
            );
        }
        for (q, b) in s.batch.iter().enumerate() {
            let g = |name: &str| format!("sites[{i}].batch[{q}].{name}");
            if !(b.max_arrival >= 0.0) {
                return err(Bound, g("max_arrival"), "must be nonnegative".into());
            }
            if b.max_service < b.max_arrival {
                return err(
                    ServiceBelowPeak,
                    g("max_service"),
                    format!("{} below max_arrival {}", b.max_service, b.max_arrival),
                );
            }
            if b.tolerant_delay < 2 {
                return err(
                    DelayTooShort,
                    g("tolerant_delay"),
                    format!("{} slots; at least 2 are required", b.tolerant_delay),
                );
            }
            if let Some(eps) = b.epsilon {
                if !(eps >= 0.0) {
                    return err(Bound, g("epsilon"), "must be nonnegative".into());
                }
            }
        }
    }

    let vmax = v_max(cfg)?;
    if let Some(v) = cfg.control.v {
        if !(v >= 0.0) {
            return err(Bound, "control.v".into(), "must be nonnegative".into());
        }
        if v > vmax {
            return err(
                ControlExceedsMax,
                "control.v".into(),
                format!("{v} exceeds the largest admissible value {vmax}"),
            );
        }
    }
    let p = &cfg.synthetic;
    if !(p.sell_ratio > 0.0 && p.sell_ratio < 1.0) {
        return err(Bound, "synthetic.sell_ratio".into(), "must lie in (0, 1)".into());
    }
    Ok(())
}

/// Deterministic synthetic traces: diurnal interactive demand, uniform batch
/// arrivals, daytime renewables and a diurnal price with a fixed sell ratio.
pub fn synth_traces(cfg: &ScenarioConfig, seed: u64, horizon: usize) -> TraceSet {
    let layout = cfg.layout();
    let p = &cfg.synthetic;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_servers: f64 = cfg.sites.iter().map(|s| s.servers).sum();
    let per_frontend = total_servers / cfg.frontends as f64;

    let mut ts = TraceSet {
        horizon,
        lambda: Vec::with_capacity(horizon),
        arrivals: Vec::with_capacity(horizon),
        renewable: Vec::with_capacity(horizon),
        buy_price: Vec::with_capacity(horizon),
        sell_price: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let hour = (t % 24) as f64;
        let demand_shape = 0.5 - 0.5 * (2.0 * PI * (hour - 4.0) / 24.0).cos();
        let lambda = (0..layout.frontends)
            .map(|_| {
                let level = p.interactive_trough + (p.interactive_peak - p.interactive_trough) * demand_shape;
                per_frontend * level * rng.gen_range(1.0 - p.interactive_noise..=1.0)
            })
            .collect();

        let mut arrivals = Vec::with_capacity(layout.batch_len());
        for (_, _, b) in cfg.batch_types() {
            arrivals.push(if b.max_arrival > 0.0 { rng.gen_range(0.0..b.max_arrival) } else { 0.0 });
        }

        let sun = (PI * (hour - 6.0) / 12.0).sin().max(0.0);
        let price_shape = 0.5 - 0.4 * (2.0 * PI * (hour - 3.0) / 24.0).cos();
        let mut renewable = Vec::with_capacity(layout.sites);
        let mut buy = Vec::with_capacity(layout.sites);
        let mut sell = Vec::with_capacity(layout.sites);
        for s in &cfg.sites {
            let full_load = s.alpha() + s.beta() * s.servers;
            renewable.push(p.renewable_peak * full_load * sun * rng.gen_range(p.renewable_floor..=1.0));
            let level = (price_shape + rng.gen_range(-p.price_noise..=p.price_noise)).clamp(0.0, 1.0);
            let x = s.buy_price_min + (s.buy_price_max - s.buy_price_min) * level;
            buy.push(x);
            sell.push(p.sell_ratio * x);
        }
        ts.lambda.push(lambda);
        ts.arrivals.push(arrivals);
        ts.renewable.push(renewable);
        ts.buy_price.push(buy);
        ts.sell_price.push(sell);
    }
    ts
}
