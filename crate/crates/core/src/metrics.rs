//! Run results, latency statistics and the rate-loss ledger.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scheduler::{Kind, Policy, SlotCounters, UserId};
use crate::traffic::LatencyParts;

#[derive(Clone, Debug, PartialEq)]
pub struct PacketRecord {
    pub packet_id: u64,
    pub cell: u32,
    pub user: UserId,
    /// Short-TTI in which the packet became schedulable.
    pub arrival_tti: u64,
    /// `None` for dropped packets.
    pub latency: Option<LatencyParts>,
    pub harq_attempts: u32,
    pub alpha_used: bool,
    pub punctured: bool,
}

impl PacketRecord {
    pub fn delivered(&self) -> bool {
        self.latency.is_some()
    }

    /// Total latency, +∞ when dropped.
    pub fn total_latency(&self) -> f64 {
        self.latency.map_or(f64::INFINITY, |l| l.total())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: UserId,
    pub cell: u32,
    pub kind: Kind,
    pub mean_throughput_mbps: f64,
    /// PRB-slots carrying this user's data.
    pub prbs_granted: u64,
    /// eMBB PRB-slots hit by URLLC (punctured, shared or projected).
    pub prbs_impacted: u64,
}

/// Impact of URLLC on one eMBB user within one eMBB TTI.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub user: UserId,
    pub tti: u64,
    /// PRB-slots allocated to the user in the TTI.
    pub allocated: u64,
    pub punctured: u64,
    pub shared: u64,
    pub projected: u64,
    /// Sum over projected PRB-slots of the lost energy fraction.
    pub projection_loss: f64,
    /// Bits the user would have received without any URLLC.
    pub baseline_bits: f64,
    pub actual_bits: f64,
}

impl LedgerEvent {
    pub fn impacted(&self) -> u64 {
        self.punctured + self.shared + self.projected
    }
}

/// Loss fraction when the impacted PRBs are dropped.
pub fn puncture_loss(impacted: f64, allocated: f64) -> Option<f64> {
    (allocated > 0.0).then(|| impacted / allocated)
}

/// Loss fraction when the impacted PRBs keep a `1 - sin²` share of their energy.
pub fn projection_loss(impacted: f64, allocated: f64, sin2: f64) -> Option<f64> {
    puncture_loss(impacted, allocated).map(|f| f * sin2)
}

/// Loss fraction when only a `fallback` share of impacted PRBs is punctured.
pub fn fallback_loss(fallback: f64, impacted: f64, allocated: f64) -> Option<f64> {
    puncture_loss(impacted, allocated).map(|f| f * fallback)
}

/// Expected rate after losing a fraction `mean_loss` of the nominal rate.
pub fn rate_after_loss(nominal: f64, mean_loss: f64) -> f64 {
    nominal * (1.0 - mean_loss)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub events: u64,
    pub skipped_events: u64,
    /// E{Γ/Ξ}: mean impacted fraction as if every impact were a puncture.
    pub mean_impacted_fraction: f64,
    /// E{Π} using the loss model of the run's policy.
    pub mean_loss: f64,
    /// Impacted over allocated PRB-slots, pooled over all events.
    pub run_impacted_fraction: f64,
    /// Modelled lost over allocated PRB-slots, pooled over all events.
    pub run_loss: f64,
    /// Events whose modelled loss exceeds the puncture loss.
    pub loss_order_violations: u64,
    pub mean_projection_sin2: f64,
    /// Contention requests that punctured anything.
    pub fallback_fraction_requests: f64,
    /// Contention PRB-slots that were punctured rather than shared.
    pub fallback_fraction_prbs: f64,
    /// Φ times the run-level impacted fraction.
    pub fallback_prediction: f64,
    /// Σ baseline·(1 − Π) over events, bits.
    pub predicted_bits: f64,
    pub measured_bits: f64,
    pub predicted_rel_error: f64,
}

/// Modelled loss fraction of one event.
pub fn event_loss(e: &LedgerEvent) -> Option<f64> {
    let xi = e.allocated as f64;
    let p = puncture_loss(e.punctured as f64, xi)?;
    // Shared PRBs cost nothing in the model; projected ones cost their lost share.
    Some(p + e.projection_loss / xi)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

pub fn rate_loss_ledger(events: &[LedgerEvent], counters: &SlotCounters) -> LedgerSummary {
    let mut s = LedgerSummary::default();
    let mut sum_frac = 0.0;
    let mut sum_loss = 0.0;
    let mut sin2 = 0.0;
    let mut projected = 0u64;
    let (mut allocated, mut impacted, mut lost) = (0.0, 0.0, 0.0);
    for e in events {
        let (Some(frac), Some(loss)) = (puncture_loss(e.impacted() as f64, e.allocated as f64), event_loss(e)) else {
            s.skipped_events += 1;
            continue;
        };
        s.events += 1;
        sum_frac += frac;
        sum_loss += loss;
        if loss > frac * (1.0 + 1e-12) {
            s.loss_order_violations += 1;
        }
        sin2 += e.projection_loss;
        projected += e.projected;
        allocated += e.allocated as f64;
        impacted += e.impacted() as f64;
        lost += loss * e.allocated as f64;
        s.predicted_bits += rate_after_loss(e.baseline_bits, loss);
        s.measured_bits += e.actual_bits;
    }
    let n = s.events as f64;
    s.mean_impacted_fraction = ratio(sum_frac, n);
    s.mean_loss = ratio(sum_loss, n);
    s.mean_projection_sin2 = ratio(sin2, projected as f64);
    s.fallback_fraction_requests = ratio(counters.fallback as f64, counters.contention as f64);
    let contended_prbs = counters.punctured_prbs + counters.mu_prbs + counters.alpha_prbs;
    s.fallback_fraction_prbs = ratio(counters.punctured_prbs as f64, contended_prbs as f64);
    s.run_impacted_fraction = ratio(impacted, allocated);
    s.run_loss = ratio(lost, allocated);
    s.fallback_prediction = s.fallback_fraction_prbs * s.run_impacted_fraction;
    s.predicted_rel_error = if s.measured_bits > 0.0 {
        (s.predicted_bits - s.measured_bits).abs() / s.measured_bits
    } else {
        0.0
    };
    s
}

/// Nearest-rank quantile; dropped packets enter as +∞.
pub fn latency_percentile(samples: &[f64], quantile: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoData);
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(invalid("quantile must lie in [0, 1]"));
    }
    if samples.iter().any(|s| s.is_nan()) {
        return Err(invalid("latency samples must not be NaN"));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((quantile * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Points (x, P[L > x]) at every distinct finite sample.
pub fn latency_ccdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = samples.iter().copied().filter(|s| !s.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() && v[i].is_finite() {
        let x = v[i];
        while i < v.len() && v[i] == x {
            i += 1;
        }
        out.push((x, (v.len() - i) as f64 / n));
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub scheduling: SlotCounters,
    pub packets_generated: u64,
    pub packets_delivered: u64,
    pub dropped_queue: u64,
    pub dropped_harq: u64,
    pub dropped_horizon: u64,
    pub harq_retransmissions: u64,
    /// Projected PRB-slots whose URLLC receiver was checked for residual leakage.
    pub null_checks: u64,
    pub null_violations: u64,
    pub max_null_residual: f64,
    /// Nulling receivers that fell back to plain IRC.
    pub receiver_fallbacks: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub policy: Policy,
    pub seed: u64,
    pub ttis: u64,
    pub n_cells: usize,
    pub omega: [usize; 2],
    pub packets: Vec<PacketRecord>,
    pub users: Vec<UserRecord>,
    pub cell_throughput_mbps: Vec<f64>,
    pub counters: RunCounters,
    pub ledger_events: Vec<LedgerEvent>,
    pub ledger: LedgerSummary,
}

impl RunMetrics {
    /// One sample per packet; dropped packets are +∞.
    pub fn latency_samples(&self) -> Vec<f64> {
        self.packets.iter().map(PacketRecord::total_latency).collect()
    }

    pub fn delivered_latencies(&self) -> Vec<f64> {
        self.packets.iter().filter_map(|p| p.latency.map(|l| l.total())).collect()
    }

    pub fn mean_cell_throughput(&self) -> f64 {
        if self.cell_throughput_mbps.is_empty() {
            return 0.0;
        }
        self.cell_throughput_mbps.iter().sum::<f64>() / self.cell_throughput_mbps.len() as f64
    }

    pub fn mean_user_throughput(&self, kind: Kind) -> f64 {
        let v: Vec<f64> = self.users.iter().filter(|u| u.kind == kind).map(|u| u.mean_throughput_mbps).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn loss_arithmetic() {
        assert!(close(projection_loss(2.0, 10.0, 0.1).unwrap(), 0.02));
        assert!(close(puncture_loss(2.0, 10.0).unwrap(), 0.2));
        assert_eq!(fallback_loss(0.0, 2.0, 10.0), Some(0.0));
        assert!(close(rate_after_loss(100.0, 0.2), 80.0));
        assert_eq!(puncture_loss(1.0, 0.0), None);
    }

    #[test]
    fn ledger_skips_empty_allocations() {
        let good = LedgerEvent { allocated: 10, punctured: 1, projected: 1, projection_loss: 0.1, baseline_bits: 100.0, actual_bits: 89.0, ..Default::default() };
        let bad = LedgerEvent { allocated: 0, punctured: 1, ..Default::default() };
        let s = rate_loss_ledger(&[good, bad], &SlotCounters::default());
        assert_eq!(s.events, 1);
        assert_eq!(s.skipped_events, 1);
        assert!(close(s.mean_impacted_fraction, 0.2));
        assert!(close(s.mean_loss, 0.11));
        assert!(close(s.predicted_bits, 89.0));
        assert!(close(s.predicted_rel_error, 0.0));
        assert_eq!(s.loss_order_violations, 0);
    }

    #[test]
    fn fallback_fractions() {
        let c = SlotCounters { contention: 4, fallback: 1, punctured_prbs: 3, mu_prbs: 9, ..Default::default() };
        let shared = LedgerEvent { allocated: 7, shared: 7, ..Default::default() };
        let s = rate_loss_ledger(&[shared], &c);
        assert!(close(s.fallback_fraction_requests, 0.25));
        assert!(close(s.fallback_fraction_prbs, 0.25));
        assert!(close(s.fallback_prediction, 0.25));
        assert_eq!(s.run_loss, 0.0);

        // Scheduler saw 3 punctured and 9 shared PRB-slots; the events agree.
        let hit = LedgerEvent { allocated: 9, punctured: 3, shared: 2, ..Default::default() };
        let s = rate_loss_ledger(&[shared, hit], &c);
        assert!(close(s.run_impacted_fraction, 12.0 / 16.0));
        assert!(close(s.run_loss, 3.0 / 16.0));
        assert!(close(s.fallback_prediction, s.run_loss));
        assert!(close(s.mean_loss, (0.0 + 3.0 / 9.0) / 2.0));
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(latency_percentile(&[0.5; 7], 0.999).unwrap(), 0.5);
        assert!(matches!(latency_percentile(&[], 0.5), Err(Error::NoData)));
        let mut v: Vec<f64> = (0..900).map(|i| i as f64 / 900.0).collect();
        v.extend(std::iter::repeat_n(f64::INFINITY, 100));
        assert!(latency_percentile(&v, 0.85).unwrap().is_finite());
        assert!(latency_percentile(&v, 0.9).unwrap().is_finite());
        assert_eq!(latency_percentile(&v, 0.95).unwrap(), f64::INFINITY);
        assert_eq!(latency_percentile(&v, 0.999).unwrap(), f64::INFINITY);
    }

    #[test]
    fn percentile_of_uniform_grid_matches_closed_form() {
        let n = 2000;
        let v: Vec<f64> = (1..=n).rev().map(|i| i as f64 / n as f64).collect();
        for q in [0.01, 0.25, 0.5, 0.9, 0.999] {
            let got = latency_percentile(&v, q).unwrap();
            assert!((got - q).abs() <= 1.0 / n as f64, "q={q} got={got}");
        }
    }

    #[test]
    fn ccdf_steps() {
        let c = latency_ccdf(&[1.0, 2.0, 2.0, f64::INFINITY]);
        assert_eq!(c, vec![(1.0, 0.75), (2.0, 0.25)]);
    }
}
