//! URLLC arrivals, HARQ, latency bookkeeping and loss-queue analytics.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::rng::SimRng;

/// Resource elements in one (PRB, short-TTI) cell: 12 subcarriers × 2 symbols.
pub const RE_PER_PRB_SLOT: f64 = 24.0;

/// Frame timing of the short-TTI grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotTiming {
    pub symbols_per_ms: u32,
    pub symbols_per_slot: u32,
    pub slots_per_tti: u32,
    pub bsp_symbols: u32,
    pub uep_symbols: u32,
    pub harq_rtt_slots: u32,
}

impl Default for SlotTiming {
    fn default() -> Self {
        Self {
            symbols_per_ms: 14,
            symbols_per_slot: 2,
            slots_per_tti: 7,
            bsp_symbols: 3,
            uep_symbols: 3,
            harq_rtt_slots: 4,
        }
    }
}

impl SlotTiming {
    pub fn symbol_ms(&self) -> f64 {
        1.0 / self.symbols_per_ms as f64
    }

    pub fn slot_ms(&self) -> f64 {
        self.symbols_per_slot as f64 * self.symbol_ms()
    }

    pub fn bsp_ms(&self) -> f64 {
        self.bsp_symbols as f64 * self.symbol_ms()
    }

    pub fn uep_ms(&self) -> f64 {
        self.uep_symbols as f64 * self.symbol_ms()
    }

    /// First slot whose start is at or after `t_ms`.
    pub fn eligible_slot(&self, t_ms: f64) -> u64 {
        let s = t_ms / self.slot_ms();
        let r = s.round();
        // Arrivals within rounding noise of a boundary count as on it.
        if (s - r).abs() < 1e-9 {
            r as u64
        } else {
            s.ceil() as u64
        }
    }

    pub fn slot_start_ms(&self, slot: u64) -> f64 {
        slot as f64 * self.slot_ms()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PacketState {
    Queued,
    InFlight,
    Delivered,
    Dropped,
}

/// Latency components in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyParts {
    pub queue: f64,
    pub frame_alignment: f64,
    pub tx: f64,
    pub bsp: f64,
    pub uep: f64,
}

impl LatencyParts {
    pub fn total(&self) -> f64 {
        self.queue + self.bsp + self.frame_alignment + self.tx + self.uep
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrllcPacket {
    pub id: u64,
    pub user: u32,
    pub cell: u32,
    pub payload_bits: f64,
    pub arrival_ms: f64,
    /// Short-TTI index at which the packet can first be scheduled.
    pub arrival_slot: u64,
    pub deadline_ms: f64,
    pub state: PacketState,
    pub latency: Option<LatencyParts>,
}

/// Poisson arrivals over `[0, horizon_ms)` with rate `rate_per_s`.
pub fn generate_urllc_arrivals(
    rate_per_s: f64,
    payload_bits: f64,
    horizon_ms: f64,
    timing: &SlotTiming,
    rng: &mut SimRng,
) -> Result<Vec<UrllcPacket>> {
    if !(rate_per_s > 0.0) || !rate_per_s.is_finite() {
        return Err(invalid("arrival rate must be positive"));
    }
    if !(payload_bits > 0.0) {
        return Err(invalid("payload must be positive"));
    }
    let gap = Exp::new(rate_per_s / 1000.0).map_err(|e| invalid(e.to_string()))?;
    let mut out = Vec::new();
    let mut t = gap.sample(rng);
    while t < horizon_ms {
        out.push(UrllcPacket {
            id: out.len() as u64,
            user: 0,
            cell: 0,
            payload_bits,
            arrival_ms: t,
            arrival_slot: timing.eligible_slot(t),
            deadline_ms: 1.0,
            state: PacketState::Queued,
            latency: None,
        });
        t += gap.sample(rng);
    }
    Ok(out)
}

/// One transmission attempt of a packet on the slot grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttemptSpan {
    /// Slot from which the attempt could have been scheduled.
    pub eligible: u64,
    pub first_tx: u64,
    pub last_tx: u64,
}

/// Splits a delivered packet's delay into its components.
///
/// Waiting before each attempt counts as queuing; transmission time covers
/// every attempt's span plus the HARQ round trips between attempts.
pub fn finalize_latency(arrival_ms: f64, attempts: &[AttemptSpan], timing: &SlotTiming) -> Result<LatencyParts> {
    let first = attempts.first().ok_or_else(|| invalid("packet was never transmitted"))?;
    let slot = timing.slot_ms();
    let fa = (timing.slot_start_ms(first.eligible) - arrival_ms).clamp(0.0, slot);
    let mut queue_slots = 0u64;
    let mut tx_slots = 0u64;
    for a in attempts {
        if a.first_tx < a.eligible || a.last_tx < a.first_tx {
            return Err(invalid("attempt span is out of order"));
        }
        queue_slots += a.first_tx - a.eligible;
        tx_slots += a.last_tx - a.first_tx + 1;
    }
    tx_slots += (attempts.len() as u64 - 1) * timing.harq_rtt_slots as u64;
    Ok(LatencyParts {
        queue: queue_slots as f64 * slot,
        frame_alignment: fa,
        tx: tx_slots as f64 * slot,
        bsp: timing.bsp_ms(),
        uep: timing.uep_ms(),
    })
}

/// Short-TTIs needed to carry `payload_bits` over `prbs` PRBs at the
/// gap-backed-off rate.
pub fn transmission_delay(payload_bits: f64, prbs: usize, sinr: f64, outage_gap: f64) -> Result<u64> {
    if prbs == 0 || !(outage_gap >= 1.0) {
        return Err(invalid("need at least one PRB and a gap >= 1"));
    }
    let rate = (sinr.max(0.0) / outage_gap).ln_1p() / std::f64::consts::LN_2;
    let per_slot = prbs as f64 * RE_PER_PRB_SLOT * rate;
    if !(per_slot > 0.0) {
        return Err(Error::ZeroCapacity);
    }
    Ok((payload_bits / per_slot).ceil().max(1.0) as u64)
}

/// Chase-combining HARQ state. SINRs are expressed relative to the decoding
/// threshold, so a packet decodes once the accumulated value reaches one.
#[derive(Clone, Debug, PartialEq)]
pub struct HarqProcess {
    pub packet_id: u64,
    pub attempts: u32,
    pub max_attempts: u32,
    pub accumulated: f64,
    pub next_attempt: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarqOutcome {
    Decoded,
    Retransmit { at_slot: u64 },
    Dropped,
}

impl HarqProcess {
    pub fn new(packet_id: u64, max_attempts: u32) -> Self {
        Self { packet_id, attempts: 0, max_attempts: max_attempts.max(1), accumulated: 0.0, next_attempt: 0 }
    }
}

/// Folds one attempt ending in slot `last_slot` into the process.
pub fn harq_step(
    process: &mut HarqProcess,
    normalized_sinr: f64,
    last_slot: u64,
    timing: &SlotTiming,
) -> Result<HarqOutcome> {
    if process.attempts >= process.max_attempts {
        return Err(invalid("HARQ process already exhausted"));
    }
    process.attempts += 1;
    process.accumulated += normalized_sinr.max(0.0);
    if process.accumulated >= 1.0 {
        return Ok(HarqOutcome::Decoded);
    }
    if process.attempts >= process.max_attempts {
        return Ok(HarqOutcome::Dropped);
    }
    process.next_attempt = last_slot + 1 + timing.harq_rtt_slots as u64;
    Ok(HarqOutcome::Retransmit { at_slot: process.next_attempt })
}

/// Parameters of the multi-server loss queue: Poisson arrivals, exponential
/// service, `servers` servers and room for `capacity` packets in total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueModelParams {
    pub arrival_rate: f64,
    pub servers: u32,
    pub capacity: u32,
    pub service_rate: f64,
}

impl QueueModelParams {
    pub fn load(&self) -> f64 {
        self.arrival_rate / (self.servers as f64 * self.service_rate)
    }

    fn validate(&self) -> Result<()> {
        if !(self.arrival_rate >= 0.0) || !(self.service_rate > 0.0) || self.servers == 0 {
            return Err(invalid("need arrival rate >= 0, service rate > 0, servers >= 1"));
        }
        if self.capacity < self.servers {
            return Err(invalid("capacity must be at least the number of servers"));
        }
        Ok(())
    }
}

/// Probability that an arrival finds the system full:
/// (π₀·aᵃ/a!)·ρ^φ with π₀ the empty-system probability.
pub fn reliability_loss_probability(params: &QueueModelParams) -> Result<f64> {
    params.validate()?;
    let rho = params.load();
    if rho >= 1.0 {
        return Err(Error::UnstableQueue(rho));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let a = params.servers as usize;
    let k = params.capacity as usize;
    // Work in logs: unnormalized state weights relative to the empty state.
    let offered = rho * a as f64;
    let mut log_w = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    log_w.push(0.0);
    for n in 1..=k {
        acc += if n <= a { offered.ln() - (n as f64).ln() } else { rho.ln() };
        log_w.push(acc);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + log_w.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
    let log_p0 = -log_norm;
    let log_fact_a: f64 = (1..=a).map(|i| (i as f64).ln()).sum();
    let log_p = log_p0 + a as f64 * (a as f64).ln() - log_fact_a + k as f64 * rho.ln();
    Ok(log_p.exp())
}

/// Capacity that stands in for the 1 ms waiting-age rule: the servers plus
/// the packets they can clear within the deadline.
pub fn equivalent_capacity(servers: u32, service_rate: f64, deadline_ms: f64) -> u32 {
    servers + (servers as f64 * service_rate * deadline_ms / 1000.0).ceil() as u32
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossQueueEstimate {
    pub arrivals: u64,
    pub blocked: u64,
    pub blocking: f64,
    /// Half-width of the 99% confidence interval from batch means.
    pub ci99_half_width: f64,
}

/// Discrete-event simulation of the loss queue via its jump chain.
pub fn simulate_loss_queue(params: &QueueModelParams, arrivals: u64, rng: &mut SimRng) -> Result<LossQueueEstimate> {
    params.validate()?;
    const BATCHES: u64 = 100;
    if arrivals < BATCHES {
        return Err(invalid("need at least 100 arrivals"));
    }
    let per_batch = arrivals / BATCHES;
    let total = per_batch * BATCHES;
    let a = params.servers as u64;
    let k = params.capacity as u64;
    let mut n: u64 = 0;
    let mut seen = 0u64;
    let mut blocked = 0u64;
    let mut batch_blocked = 0u64;
    let mut batch_means = Vec::with_capacity(BATCHES as usize);
    // Warm up toward stationarity before counting.
    let warmup = (total / 100).max(1000);
    let mut warm = 0u64;
    while seen < total {
        let departures = n.min(a) as f64 * params.service_rate;
        let total_rate = params.arrival_rate + departures;
        if rng.random::<f64>() * total_rate < params.arrival_rate {
            let full = n >= k;
            if !full {
                n += 1;
            }
            if warm < warmup {
                warm += 1;
                continue;
            }
            seen += 1;
            if full {
                blocked += 1;
                batch_blocked += 1;
            }
            if seen % per_batch == 0 {
                batch_means.push(batch_blocked as f64 / per_batch as f64);
                batch_blocked = 0;
            }
        } else {
            n -= 1;
        }
    }
    let m = batch_means.len() as f64;
    let mean = batch_means.iter().sum::<f64>() / m;
    let var = batch_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let t = StudentsT::new(0.0, 1.0, m - 1.0).map_err(|e| invalid(e.to_string()))?;
    let q = t.inverse_cdf(0.995);
    Ok(LossQueueEstimate {
        arrivals: seen,
        blocked,
        blocking: blocked as f64 / seen as f64,
        ci99_half_width: q * (var / m).sqrt(),
    })
}
