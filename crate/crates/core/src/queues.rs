//! Workload, delay-aware and energy queues, plus the bound constants that the
//! control guarantees are stated in.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationKind};
use crate::model::{ControlDecision, Layout, ScenarioConfig, SiteConfig, SlotInputs};

/// Backlog below this many servers is treated as fully served by the ledger.
pub const LEDGER_EPSILON: f64 = 1e-6;

/// One unserved batch of arrivals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub arrival_slot: usize,
    pub remaining: f64,
}

/// A fully drained arrival batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub site: usize,
    pub btype: usize,
    pub arrival_slot: usize,
    pub amount: f64,
    pub delay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    /// Index of the slot about to be decided.
    pub slot: usize,
    pub q: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub energy: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub ledger: Vec<VecDeque<LedgerEntry>>,
}

impl SystemState {
    /// Empty queues, batteries at their configured starting level.
    pub fn initial(cfg: &ScenarioConfig, consts: &LyapunovConstants) -> Result<Self> {
        let layout = cfg.layout();
        let energy: Vec<f64> = cfg.sites.iter().map(SiteConfig::initial_energy).collect();
        let z = init_z(cfg, consts, &energy)?;
        Ok(SystemState {
            slot: 0,
            q: vec![0.0; layout.batch_len()],
            h: vec![0.0; layout.batch_len()],
            z,
            energy,
            c_prev: vec![0.0; layout.sites],
            ledger: vec![VecDeque::new(); layout.batch_len()],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConstants {
    pub gamma_max: f64,
    pub gamma_min: f64,
    /// `Z` below this forbids discharging.
    pub discharge_threshold: f64,
    /// `Z` above this forbids charging.
    pub charge_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConstants {
    pub site: usize,
    pub btype: usize,
    pub epsilon: f64,
    pub q_max: f64,
    pub h_max: f64,
    /// `None` when the virtual queue never grows (zero epsilon).
    pub r_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConstants {
    /// The V actually in force (explicit knob or `v_max`).
    pub v: f64,
    pub w: f64,
    pub v_max: f64,
    pub omega0: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub sites: Vec<SiteConstants>,
    /// Flat (site, type) order.
    pub batch: Vec<BatchConstants>,
}

impl LyapunovConstants {
    pub fn epsilon(&self) -> Vec<f64> {
        self.batch.iter().map(|b| b.epsilon).collect()
    }
}

/// Price range seen by site `i`'s power balance.
pub fn gamma_bounds(site: &SiteConfig) -> (f64, f64) {
    let (a_lo, a_hi) = site.generator_cost.marginal_range(site.generator_max_mw);
    let hi = site.buy_price_max.max(site.sell_price_max).max(a_hi);
    let lo = site.buy_price_min.min(site.sell_price_min).min(a_lo);
    (hi, lo)
}

/// Largest V for which the energy trajectory provably stays inside its window.
pub fn v_max(cfg: &ScenarioConfig) -> Result<f64> {
    let mut best = f64::INFINITY;
    for (i, s) in cfg.sites.iter().enumerate() {
        let (g_hi, g_lo) = gamma_bounds(s);
        let num = s.energy_max_mwh
            - s.energy_min_mwh
            - (s.charge_efficiency * s.charge_max_mw + s.discharge_max_mw / s.discharge_efficiency);
        let den = s.discharge_efficiency * g_hi - g_lo / s.charge_efficiency;
        if num <= 0.0 {
            return Err(Error::validation(
                ValidationKind::StorageWindow,
                format!("sites[{i}].energy_max_mwh"),
                format!("storage window leaves no room for V (numerator {num})"),
            ));
        }
        if den <= 0.0 {
            return Err(Error::validation(
                ValidationKind::Bound,
                format!("sites[{i}]"),
                format!("price spread gives nonpositive V denominator ({den})"),
            ));
        }
        best = best.min(num / den);
    }
    Ok(best)
}

/// Virtual-queue arrival rate that makes the worst-case delay equal `T`.
pub fn epsilon_rule(v: f64, w: f64, site: &SiteConfig, batch: &crate::model::BatchTypeConfig) -> f64 {
    let t = f64::from(batch.tolerant_delay);
    (2.0 * v * site.beta() * site.buy_price_max / w + batch.max_arrival) / (t - 1.0)
}

pub fn compute_constants(cfg: &ScenarioConfig) -> Result<LyapunovConstants> {
    let vmax = v_max(cfg)?;
    let v = cfg.control.v.unwrap_or(vmax);
    let w = cfg.control.w;

    let mut sites = Vec::with_capacity(cfg.sites.len());
    let mut batch = Vec::new();
    let (mut omega0, mut omega1, mut omega2) = (0.0, 0.0, 0.0);

    for (i, s) in cfg.sites.iter().enumerate() {
        let (g_hi, g_lo) = gamma_bounds(s);
        sites.push(SiteConstants {
            gamma_max: g_hi,
            gamma_min: g_lo,
            discharge_threshold: -v * s.discharge_efficiency * g_hi,
            charge_threshold: -(v / s.charge_efficiency) * g_lo,
        });

        let pressure = v * s.beta() * s.buy_price_max / w;
        for (q, b) in s.batch.iter().enumerate() {
            if b.tolerant_delay < 2 && b.epsilon.is_none() {
                return Err(Error::validation(
                    ValidationKind::DelayTooShort,
                    format!("sites[{i}].batch[{q}].tolerant_delay"),
                    "tolerant delay must be at least 2 slots",
                ));
            }
            let epsilon = b.epsilon.unwrap_or_else(|| epsilon_rule(v, w, s, b));
            let q_max = pressure + b.max_arrival;
            let h_max = pressure + epsilon;
            let r_max = (epsilon > 0.0).then(|| ((q_max + h_max) / epsilon - 1e-9).ceil() as u64);
            omega0 +=
                w * (b.max_arrival.powi(2) + b.max_service.powi(2) + epsilon.powi(2).max(b.max_service.powi(2))) / 2.0;
            batch.push(BatchConstants { site: i, btype: q, epsilon, q_max, h_max, r_max });
        }

        omega0 +=
            (s.charge_efficiency * s.charge_max_mw).powi(2).max((s.discharge_max_mw / s.discharge_efficiency).powi(2))
                / 2.0;
        omega1 += v * (1.0 - s.ramp_coefficient) * s.generator_max_mw * g_hi;
        omega2 += s.battery_cost * (s.charge_max_mw.powi(2) + s.discharge_max_mw.powi(2))
            + s.generator_cost.quadratic * s.generator_max_mw.powi(2)
            + s.generator_cost.linear * s.generator_max_mw;
    }

    Ok(LyapunovConstants { v, w, v_max: vmax, omega0, omega1, omega2, sites, batch })
}

/// Shifted energy level for each site.
pub fn init_z(cfg: &ScenarioConfig, consts: &LyapunovConstants, energy: &[f64]) -> Result<Vec<f64>> {
    cfg.sites
        .iter()
        .zip(energy)
        .enumerate()
        .map(|(i, (s, &d0))| {
            if !(s.energy_min_mwh..=s.energy_max_mwh).contains(&d0) {
                return Err(Error::validation(
                    ValidationKind::StorageWindow,
                    format!("sites[{i}].initial_energy_mwh"),
                    format!("{d0} outside [{}, {}]", s.energy_min_mwh, s.energy_max_mwh),
                ));
            }
            Ok(z_offset(s, consts.v, consts.sites[i].gamma_max) + d0)
        })
        .collect()
}

/// `Z - D` for a site: the constant shift between the two energy views.
pub fn z_offset(site: &SiteConfig, v: f64, gamma_max: f64) -> f64 {
    -site.energy_min_mwh - v * site.discharge_efficiency * gamma_max - site.discharge_max_mw / site.discharge_efficiency
}

/// `(discharge-forbidden, charge-forbidden)` Z thresholds per site.
pub fn storage_thresholds(consts: &LyapunovConstants) -> Vec<(f64, f64)> {
    consts.sites.iter().map(|s| (s.discharge_threshold, s.charge_threshold)).collect()
}

/// Advances every queue by one slot and drains the arrival ledger.
///
/// Returns the new state and the delay samples of arrival batches that were
/// finished during this slot.
pub fn update_queues(
    cfg: &ScenarioConfig,
    consts: &LyapunovConstants,
    state: &SystemState,
    inputs: &SlotInputs,
    decision: &ControlDecision,
) -> (SystemState, Vec<DelaySample>) {
    let layout = cfg.layout();
    let mut next = state.clone();
    let t = state.slot;

    for k in 0..layout.batch_len() {
        let (q, x, pi) = (state.q[k], decision.x[k], inputs.arrivals[k]);
        next.q[k] = (q - x).max(0.0) + pi;
        next.h[k] = if q > x { (state.h[k] - x + consts.batch[k].epsilon).max(0.0) } else { 0.0 };
    }

    for (i, s) in cfg.sites.iter().enumerate() {
        let delta = s.charge_efficiency * decision.u_c[i] - decision.u_d[i] / s.discharge_efficiency;
        next.z[i] = state.z[i] + delta;
        next.energy[i] = state.energy[i] + delta;
        next.c_prev[i] = decision.c[i];
    }

    let samples = record_delays(&layout, &mut next.ledger, t, &decision.x, &inputs.arrivals);
    next.slot = t + 1;
    (next, samples)
}

/// Serves `x` from each ledger in arrival order, then appends this slot's
/// arrivals. An arrival made in slot `a` and finished in slot `t` has delay
/// `t - a`.
pub fn record_delays(
    layout: &Layout,
    ledger: &mut [VecDeque<LedgerEntry>],
    slot: usize,
    served: &[f64],
    arrivals: &[f64],
) -> Vec<DelaySample> {
    let mut out = Vec::new();
    for (k, fifo) in ledger.iter_mut().enumerate() {
        let site = layout.site_of(k);
        let btype = k - layout.iq(site, 0);
        let mut budget = served[k];
        while let Some(front) = fifo.front_mut() {
            if front.remaining <= budget + LEDGER_EPSILON {
                budget -= front.remaining;
                let done = fifo.pop_front().expect("front exists");
                out.push(DelaySample {
                    site,
                    btype,
                    arrival_slot: done.arrival_slot,
                    amount: done.remaining,
                    delay: slot - done.arrival_slot,
                });
            } else {
                front.remaining -= budget.max(0.0);
                break;
            }
        }
        if arrivals[k] > 0.0 {
            fifo.push_back(LedgerEntry { arrival_slot: slot, remaining: arrivals[k] });
        }
    }
    out
}

/// Reports virtual-queue rates larger than the observed mean arrival rate.
pub fn arrival_rate_warnings(consts: &LyapunovConstants, mean_arrivals: &[f64]) -> Vec<String> {
    let mut out = Vec::new();
    for (b, &mean) in consts.batch.iter().zip(mean_arrivals) {
        if b.epsilon > mean {
            let msg = format!(
                "site {} type {}: epsilon {:.6e} exceeds mean arrival {:.6e}; the time-average cost bound does not apply",
                b.site, b.btype, b.epsilon, mean
            );
            warn!("{msg}");
            out.push(msg);
        }
    }
    out
}
